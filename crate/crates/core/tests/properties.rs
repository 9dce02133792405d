use std::sync::Arc;

use degen_lab::assembly::{
    assemble_load, assemble_stiffness, assemble_weighted_mass_for, data_norms_sq, reference_stiffness, Sources,
};
use degen_lab::coefficients::{generate_family, ScalarFn, VectorFn};
use degen_lab::harness::{
    corpus_coefficients, energy_ratio, random_nonsymmetric_coefficients, random_sources, solution_norms, Problem,
};
use degen_lab::mms::{synthesize_sources, AnalyticSolution, ManufacturedCase, SourceMode};
use degen_lab::solver::march;
use degen_lab::{build_mesh, CoefficientField, CoefficientKind, FamilySpec, MeshParams, Point, StiffnessSchedule, TensorMesh, TimeStepperConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mesh(dim: usize, m: usize, n: usize) -> TensorMesh {
    build_mesh(&MeshParams {
        dim,
        xd_cells: m,
        time_count: n,
        xprime_count: if dim == 2 { 6 } else { 1 },
        xprime_length: std::f64::consts::TAU,
        ..MeshParams::default()
    })
    .unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn family(seed: u64, kind: CoefficientKind, dim: usize) -> CoefficientField {
    generate_family(&FamilySpec::new(seed, kind, dim, 0.5, 0.2)).unwrap()
}

fn kind_of(i: usize) -> CoefficientKind {
    [CoefficientKind::Constant, CoefficientKind::XdOnly, CoefficientKind::Oscillatory][i % 3]
}

fn scaled(s: &Sources, c: f64) -> Sources {
    Sources {
        big_f: s.big_f.clone().map(|g| {
            Arc::new(move |p: Point| {
                let v = g(p);
                [c * v[0], c * v[1]]
            }) as VectorFn
        }),
        f: s.f.clone().map(|g| Arc::new(move |p: Point| c * g(p)) as ScalarFn),
    }
}

fn combined(a: &Sources, ca: f64, b: &Sources, cb: f64) -> Sources {
    let (fa, fb) = (a.big_f.clone().unwrap(), b.big_f.clone().unwrap());
    let (ga, gb) = (a.f.clone().unwrap(), b.f.clone().unwrap());
    Sources {
        big_f: Some(Arc::new(move |p: Point| {
            let (x, y) = (fa(p), fb(p));
            [ca * x[0] + cb * y[0], ca * x[1] + cb * y[1]]
        })),
        f: Some(Arc::new(move |p: Point| ca * ga(p) + cb * gb(p))),
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn stiffness_dominates_nu_times_reference(seed in 0u64..1000, kind in 0usize..3, dim in 1usize..=2, lambda in 0.0f64..1000.0) {
        let m = mesh(dim, 12, 4);
        let k = assemble_stiffness(&m, &family(seed, kind_of(kind), dim), lambda).unwrap();
        let k0 = reference_stiffness(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let v = random_vec(&mut rng, k.rows());
            prop_assert!(k.quadratic_form(&v) >= 0.5 * k0.quadratic_form(&v) * (1.0 - 1e-10));
        }
    }

    #[test]
    fn weighted_mass_is_positive_definite(seed in 0u64..1000, kind in 0usize..3, dim in 1usize..=2) {
        let m = mesh(dim, 10, 4);
        let mass = assemble_weighted_mass_for(&m, &family(seed, kind_of(kind), dim)).unwrap();
        let dense = mass.to_dense();
        for (i, row) in dense.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                prop_assert!((v - dense[j][i]).abs() <= 1e-14 * v.abs().max(1.0));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        for _ in 0..50 {
            let v = random_vec(&mut rng, mass.rows());
            let q = mass.quadratic_form(&v) / v.iter().map(|x| x * x).sum::<f64>();
            prop_assert!(q > 0.0);
        }
    }

    #[test]
    fn adjoint_coefficients_assemble_the_transpose(seed in 0u64..1000, dim in 1usize..=2, lambda in 0.0f64..100.0) {
        let m = mesh(dim, 10, 4);
        let coeffs = random_nonsymmetric_coefficients(seed, dim, 0.5);
        let k = assemble_stiffness(&m, &coeffs, lambda).unwrap();
        let kt = assemble_stiffness(&m, &coeffs.transposed(), lambda).unwrap();
        let expected = k.transpose().to_dense();
        for (a, b) in kt.to_dense().iter().flatten().zip(expected.iter().flatten()) {
            prop_assert!((a - b).abs() <= 1e-14 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn load_is_linear_in_sources(s1 in 0u64..500, s2 in 500u64..1000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0, dim in 1usize..=2, lambda in 0.1f64..100.0) {
        let m = mesh(dim, 12, 4);
        let (a, b) = (random_sources(s1, dim), random_sources(s2, dim));
        let t = m.time_level(2);
        let la = assemble_load(&m, &a, lambda, t).unwrap().values;
        let lb = assemble_load(&m, &b, lambda, t).unwrap().values;
        let lc = assemble_load(&m, &combined(&a, alpha, &b, beta), lambda, t).unwrap().values;
        let expect: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| alpha * x + beta * y).collect();
        let scale = max_abs(&la).max(max_abs(&lb)) * (alpha.abs() + beta.abs()).max(1.0);
        let diff: Vec<f64> = lc.iter().zip(&expect).map(|(x, y)| x - y).collect();
        prop_assert!(max_abs(&diff) <= 1e-13 * scale.max(1e-300));
    }

    #[test]
    fn squared_energy_inequality(seed in 0u64..1000, dim in 1usize..=2, lambda in 0.0f64..1000.0) {
        let m = mesh(dim, 16, 10);
        let coeffs = corpus_coefficients(seed, dim, 0.5).unwrap();
        let nu = coeffs.nu;
        let problem = Problem::new(m, coeffs, random_sources(seed, dim), lambda);
        let sol = problem.solve_default().unwrap();
        let (du, u) = solution_norms(&sol, 2.0, 0.0).unwrap();
        let mesh = &*problem.mesh;
        let mut data = 0.0;
        for n in 1..=mesh.time_count {
            let (big, small) = problem.sources.nodal(mesh, mesh.time_level(n)).unwrap();
            let (a, b) = data_norms_sq(mesh, &big, &small);
            data += mesh.time_step * (a + b);
        }
        let lhs = du * du + lambda * u * u;
        prop_assert!(lhs <= 4.0 / (nu * nu) * data, "{lhs} > {}", 4.0 / (nu * nu) * data);
    }

    #[test]
    fn homogeneous_march_decays_in_mass_norm(seed in 0u64..1000, kind in 0usize..3, dim in 1usize..=2, lambda in 0.0f64..100.0) {
        let m = Arc::new(mesh(dim, 12, 8));
        let coeffs = family(seed, kind_of(kind), dim);
        let mass = assemble_weighted_mass_for(&m, &coeffs).unwrap();
        let sched = StiffnessSchedule::Frozen(assemble_stiffness(&m, &coeffs, lambda).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u0 = random_vec(&mut rng, m.interior_dof_count());
        let zeros = vec![0.0; u0.len()];
        let config = TimeStepperConfig::for_mesh(&m).with_theta(1.0).with_tol(1e-12);
        let sol = march(&m, &mass, &sched, |_| Ok(zeros.clone()), &config, Some(&u0), lambda).unwrap();
        let norms: Vec<f64> = sol.levels.iter().map(|l| mass.quadratic_form(&l.interior(&m)).sqrt()).collect();
        for w in norms.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9), "{norms:?}");
        }
    }

    #[test]
    fn zero_data_gives_zero_solution(seed in 0u64..1000, kind in 0usize..3, dim in 1usize..=2, lambda in 0.0f64..100.0) {
        let problem = Problem::new(mesh(dim, 8, 5), family(seed, kind_of(kind), dim), Sources::zero(), lambda);
        let sol = problem.solve_default().unwrap();
        prop_assert!(sol.levels.iter().all(|l| l.values.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn synthesized_sources_are_linear_in_the_solution(lambda in 0.1f64..100.0, dim in 1usize..=2, t in 0.0f64..1.0, xp in 0.0f64..6.0, xd in 0.01f64..4.0) {
        let coeffs = CoefficientField::identity(dim, 0.5);
        let (a, b) = (AnalyticSolution::default_case(dim), AnalyticSolution::linear(dim));
        let src = |s: AnalyticSolution| {
            synthesize_sources(&ManufacturedCase::new(s, coeffs.clone(), lambda, SourceMode::FOnly)).unwrap().f.unwrap()
        };
        let p = Point::new(t, xp, xd);
        let (fa, fb, fs) = (src(a.clone())(p), src(b.clone())(p), src(a.sum(&b))(p));
        prop_assert!((fs - fa - fb).abs() <= 1e-12 * (fa.abs() + fb.abs()).max(1.0));
    }

    #[test]
    fn energy_report_scales_with_data(seed in 0u64..1000, c in 0.01f64..100.0, dim in 1usize..=2, lambda in 0.0f64..100.0) {
        let m = mesh(dim, 12, 6);
        let coeffs = corpus_coefficients(seed, dim, 0.5).unwrap();
        let base = Problem::new(m, coeffs, random_sources(seed, dim), lambda);
        let scaled_problem = base.with_sources(scaled(&base.sources, c));
        let (r1, r2) = (energy_ratio(&base).unwrap(), energy_ratio(&scaled_problem).unwrap());
        prop_assert!((r2.lhs - c * r1.lhs).abs() <= 1e-9 * c * r1.lhs);
        prop_assert!((r2.rhs - c * r1.rhs).abs() <= 1e-12 * c * r1.rhs);
        prop_assert!((r2.ratio - r1.ratio).abs() <= 1e-9 * r1.ratio);
    }

    #[test]
    fn reruns_are_bitwise_identical(seed in 0u64..1000, dim in 1usize..=2, lambda in 0.0f64..100.0) {
        let problem = Problem::new(mesh(dim, 10, 5), corpus_coefficients(seed, dim, 0.5).unwrap(), random_sources(seed, dim), lambda);
        let (a, b) = (energy_ratio(&problem).unwrap(), energy_ratio(&problem).unwrap());
        prop_assert_eq!(a.lhs.to_bits(), b.lhs.to_bits());
        prop_assert_eq!(a.rhs.to_bits(), b.rhs.to_bits());
    }
}
