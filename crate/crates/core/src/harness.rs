//! Estimate experiments: energy and `W^1_p` ratios, local estimates on
//! homogeneous solutions, duality pairings and second-order bounds.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{assemble_load, assemble_stiffness_at, assemble_weighted_mass_for, data_norms_sq, Sources};
use crate::coefficients::{generate_family, max_oscillation, CoefficientField, CoefficientKind, FamilySpec, Point, Vec2};
use crate::error::{LabError, Result};
use crate::mesh::{build_mesh, Cylinder, MeshParams, TensorMesh};
use crate::mms::{solve_case, synthesize_sources, ManufacturedCase, SourceMode};
use crate::norms::{
    first_level, hardy_check, solution_integral, trace_decay_check, weighted_norm, DerivativeOrder, NormSpec,
    GAUSS8_NODES, GAUSS8_WEIGHTS,
};
use crate::solver::{adjoint_march, march, DiscreteField, SpaceTimeSolution, StiffnessSchedule, TimeStepperConfig};
use crate::sparse::dot;

/// Absolute floor below which a left-hand side counts as zero.
pub const LHS_FLOOR: f64 = 1e-12;

pub const REPORT_CSV_HEADER: &str = "check_id,lambda,p,mesh_M,dt,seed,rho0,gamma_measured,lhs,rhs,ratio,pass";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CheckId {
    #[serde(rename = "energy_L2")]
    EnergyL2,
    #[serde(rename = "main_Wp")]
    MainWp,
    #[serde(rename = "caccioppoli")]
    Caccioppoli,
    #[serde(rename = "w_estimate")]
    WEstimate,
    #[serde(rename = "lipschitz")]
    Lipschitz,
    #[serde(rename = "interior")]
    Interior,
    #[serde(rename = "duality")]
    Duality,
    #[serde(rename = "corollary2")]
    Corollary2,
    #[serde(rename = "trace")]
    Trace,
    #[serde(rename = "hardy")]
    Hardy,
}

impl CheckId {
    pub fn label(self) -> &'static str {
        match self {
            Self::EnergyL2 => "energy_L2",
            Self::MainWp => "main_Wp",
            Self::Caccioppoli => "caccioppoli",
            Self::WEstimate => "w_estimate",
            Self::Lipschitz => "lipschitz",
            Self::Interior => "interior",
            Self::Duality => "duality",
            Self::Corollary2 => "corollary2",
            Self::Trace => "trace",
            Self::Hardy => "hardy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub check_id: CheckId,
    pub lambda: f64,
    pub p: f64,
    pub mesh_m: usize,
    pub dt: f64,
    pub seed: Option<u64>,
    pub rho0: Option<f64>,
    pub gamma_measured: Option<f64>,
    pub cylinder: Option<Cylinder>,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    pub pass: bool,
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EstimateReport {
    /// `ratio = lhs / rhs`; `rhs = 0` is accepted only with `lhs <= LHS_FLOOR`
    /// (ratio 0). `bound` sets `pass = ratio <= bound`, otherwise `pass` means
    /// a finite ratio.
    pub fn new(check_id: CheckId, mesh: &TensorMesh, lambda: f64, p: f64, lhs: f64, rhs: f64, bound: Option<f64>) -> Result<Self> {
        let ratio = if rhs > 0.0 {
            lhs / rhs
        } else if lhs.abs() <= LHS_FLOOR {
            0.0
        } else {
            return Err(LabError::Degenerate(format!(
                "{}: right-hand side vanishes with lhs = {lhs:e}",
                check_id.label()
            )));
        };
        let pass = ratio.is_finite() && bound.map_or(true, |b| ratio <= b);
        Ok(Self::raw(check_id, mesh, lambda, p, lhs, rhs, ratio, pass))
    }

    /// Report with caller-supplied ratio and verdict.
    #[allow(clippy::too_many_arguments)]
    pub fn raw(check_id: CheckId, mesh: &TensorMesh, lambda: f64, p: f64, lhs: f64, rhs: f64, ratio: f64, pass: bool) -> Self {
        Self {
            check_id,
            lambda,
            p,
            mesh_m: mesh.xd_cells(),
            dt: mesh.time_step,
            seed: None,
            rho0: None,
            gamma_measured: None,
            cylinder: None,
            lhs,
            rhs,
            ratio,
            pass,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_cylinder(mut self, cyl: Cylinder) -> Self {
        self.cylinder = Some(cyl);
        self
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:e},{},{},{},{:e},{:e},{:e},{}",
            self.check_id.label(),
            self.lambda,
            self.p,
            self.mesh_m,
            self.dt,
            opt(self.seed),
            opt(self.rho0),
            self.gamma_measured.map(|g| format!("{g:e}")).unwrap_or_default(),
            self.lhs,
            self.rhs,
            self.ratio,
            self.pass
        )
    }
}

pub fn reports_to_csv(reports: &[EstimateReport]) -> String {
    let mut s = String::from(REPORT_CSV_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Relative change `|b - a| / |a|`.
pub fn relative_change(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (b - a).abs() / a.abs()
    }
}

/// Equation data on one mesh, zero initial data, Dirichlet on both `x_d` ends.
#[derive(Clone)]
pub struct Problem {
    pub mesh: Arc<TensorMesh>,
    pub coeffs: CoefficientField,
    pub sources: Sources,
    pub lambda: f64,
}

impl Problem {
    pub fn new(mesh: TensorMesh, coeffs: CoefficientField, sources: Sources, lambda: f64) -> Self {
        Self {
            mesh: Arc::new(mesh),
            coeffs,
            sources,
            lambda,
        }
    }

    pub fn on_mesh(&self, mesh: TensorMesh) -> Self {
        Self {
            mesh: Arc::new(mesh),
            ..self.clone()
        }
    }

    pub fn with_sources(&self, sources: Sources) -> Self {
        Self {
            sources,
            ..self.clone()
        }
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self { lambda, ..self.clone() }
    }

    pub fn schedule(&self) -> Result<StiffnessSchedule> {
        if self.coeffs.is_time_dependent() {
            let (mesh, coeffs, lambda) = (self.mesh.clone(), self.coeffs.clone(), self.lambda);
            // Validate the first slab eagerly so bound violations surface here.
            assemble_stiffness_at(&mesh, &coeffs, lambda, 1)?;
            Ok(StiffnessSchedule::PerSlab(Arc::new(move |n| {
                assemble_stiffness_at(&mesh, &coeffs, lambda, n)
            })))
        } else {
            Ok(StiffnessSchedule::Frozen(assemble_stiffness_at(&self.mesh, &self.coeffs, self.lambda, 1)?))
        }
    }

    pub fn load(&self, n: usize) -> Result<Vec<f64>> {
        Ok(assemble_load(&self.mesh, &self.sources, self.lambda, self.mesh.time_level(n))?.values)
    }

    pub fn solve(&self, config: &TimeStepperConfig) -> Result<SpaceTimeSolution> {
        let mass = assemble_weighted_mass_for(&self.mesh, &self.coeffs)?;
        let sched = self.schedule()?;
        march(&self.mesh, &mass, &sched, |n| self.load(n), config, None, self.lambda)
    }

    pub fn solve_default(&self) -> Result<SpaceTimeSolution> {
        self.solve(&TimeStepperConfig::for_mesh(&self.mesh))
    }
}

/// Gauss-8 integral over spatial cell `(k, j)` of `g(x_d, [(value, grad)])`
/// for the Q1 interpolants of the given full nodal arrays.
fn cell_quadrature<G>(mesh: &TensorMesh, fields: &[&[f64]], k: usize, j: usize, g: G) -> f64
where
    G: Fn(f64, &[(f64, Vec2)]) -> f64,
{
    let two_d = mesh.dim == 2;
    let k1 = if two_d { mesh.xprime_next(k) } else { k };
    let h = mesh.xd_width(j);
    let hp = mesh.xprime_width();
    let x0 = mesh.xd_nodes[j];
    let corners: Vec<[f64; 4]> = fields
        .iter()
        .map(|v| {
            [
                v[mesh.node(k, j)],
                v[mesh.node(k, j + 1)],
                v[mesh.node(k1, j)],
                v[mesh.node(k1, j + 1)],
            ]
        })
        .collect();
    let xi_pts: Vec<(f64, f64)> = if two_d {
        GAUSS8_NODES.iter().cloned().zip(GAUSS8_WEIGHTS.iter().cloned()).collect()
    } else {
        vec![(0.0, 1.0)]
    };
    let mut vals = vec![(0.0, [0.0; 2]); fields.len()];
    let mut total = 0.0;
    for &(xi, wx) in &xi_pts {
        for (s, ws) in GAUSS8_NODES.iter().zip(GAUSS8_WEIGHTS.iter()) {
            for (c, out) in corners.iter().zip(vals.iter_mut()) {
                let lo = (1.0 - xi) * c[0] + xi * c[2];
                let hi = (1.0 - xi) * c[1] + xi * c[3];
                let v = (1.0 - s) * lo + s * hi;
                let gd = (hi - lo) / h;
                let gp = if two_d {
                    ((1.0 - s) * (c[2] - c[0]) + s * (c[3] - c[1])) / hp
                } else {
                    0.0
                };
                *out = (v, [gp, gd]);
            }
            total += wx * ws * h * hp * g(x0 + s * h, &vals);
        }
    }
    total
}

fn all_cells(mesh: &TensorMesh) -> impl Iterator<Item = (usize, usize)> + '_ {
    (0..mesh.xprime_cells()).flat_map(move |k| (0..mesh.xd_cells()).map(move |j| (k, j)))
}

/// `(int |F_I|^p, int |f_I|^p x_d^{-p/2})` at time `t` for the nodal
/// interpolants of the data.
pub fn data_integrals(mesh: &TensorMesh, sources: &Sources, t: f64, p: f64) -> Result<(f64, f64)> {
    let (big, small) = sources.nodal(mesh, t)?;
    if (0..mesh.xprime_cells()).any(|k| small[mesh.node(k, 0)] != 0.0) {
        return Ok((f64::NAN, f64::INFINITY));
    }
    let f0: Vec<f64> = big.iter().map(|v| v[0]).collect();
    let f1: Vec<f64> = big.iter().map(|v| v[1]).collect();
    let (mut a, mut b) = (0.0, 0.0);
    for (k, j) in all_cells(mesh) {
        a += cell_quadrature(mesh, &[&f0, &f1], k, j, |_, v| v[0].0.hypot(v[1].0).powf(p));
        b += cell_quadrature(mesh, &[&small], k, j, |x, v| v[0].0.abs().powf(p) * x.powf(-p / 2.0));
    }
    if mesh.dim == 1 {
        // Only the first component is F_d in one dimension.
        a = 0.0;
        for (k, j) in all_cells(mesh) {
            a += cell_quadrature(mesh, &[&f0], k, j, |_, v| v[0].0.abs().powf(p));
        }
    }
    Ok((a, b))
}

/// `(||F_I||_{L_p}, ||f_I||_{L_p, x_d^{-p/2}})` over the levels used by
/// whole-domain norms with the given exclusion.
pub fn data_norms(problem: &Problem, p: f64, exclude_fraction: f64) -> Result<(f64, f64)> {
    let mesh = &*problem.mesh;
    let dt = mesh.time_step;
    let (mut a, mut b) = (0.0, 0.0);
    for n in first_level(mesh.time_count, exclude_fraction)..=mesh.time_count {
        let (x, y) = data_integrals(mesh, &problem.sources, mesh.time_level(n), p)?;
        a += dt * x;
        b += dt * y;
    }
    Ok((a.powf(1.0 / p), b.powf(1.0 / p)))
}

/// `(||Du||_{L_p}, ||u||_{L_p, x_d^{-p/2}})`.
pub fn solution_norms(sol: &SpaceTimeSolution, p: f64, exclude_fraction: f64) -> Result<(f64, f64)> {
    let mut g = NormSpec::new(p, 0.0, DerivativeOrder::Full);
    let mut z = NormSpec::new(p, -p / 2.0, DerivativeOrder::Zero);
    g.exclude_fraction = exclude_fraction;
    z.exclude_fraction = exclude_fraction;
    Ok((weighted_norm(sol, &g)?, weighted_norm(sol, &z)?))
}

/// `L_2` energy ratio over the full time window. The bound `4 / nu` holds
/// exactly for implicit Euler.
pub fn energy_ratio(problem: &Problem) -> Result<EstimateReport> {
    let sol = problem.solve_default()?;
    energy_ratio_of(problem, &sol)
}

pub fn energy_ratio_of(problem: &Problem, sol: &SpaceTimeSolution) -> Result<EstimateReport> {
    let mesh = &*problem.mesh;
    let (du, u) = solution_norms(sol, 2.0, 0.0)?;
    let lhs = du + problem.lambda.sqrt() * u;
    let (mut fsq, mut wsq) = (0.0, 0.0);
    for n in 1..=mesh.time_count {
        let (big, small) = problem.sources.nodal(mesh, mesh.time_level(n))?;
        let (a, b) = data_norms_sq(mesh, &big, &small);
        fsq += mesh.time_step * a;
        wsq += mesh.time_step * b;
    }
    let rhs = fsq.sqrt() + wsq.sqrt();
    EstimateReport::new(CheckId::EnergyL2, mesh, problem.lambda, 2.0, lhs, rhs, Some(4.0 / problem.coeffs.nu))
}

/// Smooth seeded data with `f` vanishing linearly at `x_d = 0`.
pub fn random_sources(seed: u64, dim: usize) -> Sources {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let (a1, w1, p1) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..3.0), rng.gen_range(0.0..6.3));
    let (a2, p2) = (rng.gen_range(-1.0..1.0), rng.gen_range(0.0..6.3));
    let (w2, w3, p3) = (rng.gen_range(1.0..6.0), rng.gen_range(1.0..6.0), rng.gen_range(0.0..6.3));
    let b = rng.gen_range(0.5..2.0);
    let two_d = dim == 2;
    let big_f = Arc::new(move |p: Point| {
        let fd = a1 * (w1 * p.xd + p1).sin() * (-0.5 * p.xd).exp() * (1.0 + 0.5 * (w2 * p.t).sin());
        if two_d {
            [a2 * (p.xp + p2).cos() * (-p.xd).exp(), fd]
        } else {
            [fd, 0.0]
        }
    });
    let f = Arc::new(move |p: Point| {
        let tang = if two_d { 1.0 + 0.3 * p.xp.cos() } else { 1.0 };
        b * p.xd * (-p.xd).exp() * (w3 * p.t + p3).cos() * tang
    });
    Sources {
        big_f: Some(big_f),
        f: Some(f),
    }
}

/// Seeded coefficient for corpus member `seed`: alternating `x_d`-only and
/// oscillatory families.
pub fn corpus_coefficients(seed: u64, dim: usize, nu: f64) -> Result<CoefficientField> {
    let kind = if seed % 2 == 0 {
        CoefficientKind::XdOnly
    } else {
        CoefficientKind::Oscillatory
    };
    let eps = (1.0 - nu) / dim as f64 * 0.9;
    generate_family(&FamilySpec::new(seed, kind, dim, nu, eps.min(1.0 / nu - 1.0)))
}

/// Energy ratios for every `(seed, lambda)`; sorted by `(seed, lambda)`.
pub fn energy_corpus(mesh: &TensorMesh, seeds: &[u64], lambdas: &[f64], nu: f64) -> Result<Vec<EstimateReport>> {
    let jobs: Vec<(u64, f64)> = seeds.iter().flat_map(|&s| lambdas.iter().map(move |&l| (s, l))).collect();
    jobs.par_iter()
        .map(|&(seed, lambda)| {
            let coeffs = corpus_coefficients(seed, mesh.dim, nu)?;
            let problem = Problem::new(mesh.clone(), coeffs, random_sources(seed, mesh.dim), lambda);
            Ok(energy_ratio(&problem)?.with_seed(seed))
        })
        .collect()
}

/// Data for the lambda sweep: `f` only, vanishing linearly at `x_d = 0`.
pub fn sweep_sources(dim: usize) -> Sources {
    let two_d = dim == 2;
    Sources {
        big_f: None,
        f: Some(Arc::new(move |p: Point| {
            let tang = if two_d { 1.0 + 0.5 * p.xp.cos() } else { 1.0 };
            p.xd * (-2.0 * p.xd).exp() * tang * (1.0 + 0.5 * (std::f64::consts::TAU * p.t).sin())
        })),
    }
}

/// `(||Du|| + sqrt(lambda) ||u||) / (||F|| + ||f||)` in `L_p` with weights
/// `x_d^{-p/2}` on the zero-order terms.
pub fn main_ratio(problem: &Problem, p: f64) -> Result<EstimateReport> {
    let sol = problem.solve_default()?;
    main_ratio_of(problem, &sol, p, NormSpec::new(p, 0.0, DerivativeOrder::Full).exclude_fraction)
}

pub fn main_ratio_of(problem: &Problem, sol: &SpaceTimeSolution, p: f64, exclude_fraction: f64) -> Result<EstimateReport> {
    let (du, u) = solution_norms(sol, p, exclude_fraction)?;
    let (bf, f) = data_norms(problem, p, exclude_fraction)?;
    let lhs = du + problem.lambda.sqrt() * u;
    EstimateReport::new(CheckId::MainWp, &problem.mesh, problem.lambda, p, lhs, bf + f, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub mesh: MeshParams,
    pub p_grid: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// `(kind, eps)` pairs; seeds are shared.
    pub families: Vec<(CoefficientKind, f64)>,
    pub seed: u64,
    pub nu: f64,
    pub rho0: f64,
    /// Also solve on the mesh refined once (2x space, 4x time).
    pub refine: bool,
}

/// Summary of one `(p, family)` cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub p: f64,
    pub kind: CoefficientKind,
    pub eps: f64,
    pub gamma_measured: f64,
    pub spread: f64,
    pub max_refinement_change: Option<f64>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub reports: Vec<EstimateReport>,
    pub refined: Vec<EstimateReport>,
    pub cells: Vec<SweepCell>,
}

pub const SWEEP_SPREAD_BOUND: f64 = 3.0;
pub const SWEEP_REFINEMENT_BOUND: f64 = 0.15;

/// Ratios over the `p x family x lambda` grid with `f`-only data. A cell
/// passes when, over `lambda rho0 >= 1`, max/min ratio is at most 3 and one
/// refinement changes no ratio by more than 15%.
pub fn main_estimate_sweep(spec: &SweepSpec) -> Result<SweepResult> {
    if spec.p_grid.iter().any(|&p| !(p > 1.0)) {
        return Err(LabError::InvalidParameter("p must exceed 1".into()));
    }
    let mesh = build_mesh(&spec.mesh)?;
    let fine = if spec.refine { Some(mesh.refined(2, 4)?) } else { None };
    let fields: Vec<(CoefficientField, f64)> = spec
        .families
        .iter()
        .map(|&(kind, eps)| {
            let c = generate_family(&FamilySpec::new(spec.seed, kind, mesh.dim, spec.nu, eps))?;
            let gamma = max_oscillation(&c, &mesh, &[0.5 * spec.rho0, spec.rho0], 4)?;
            Ok((c, gamma))
        })
        .collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for (pi, &p) in spec.p_grid.iter().enumerate() {
        for fi in 0..fields.len() {
            for &lambda in &spec.lambdas {
                jobs.push((pi, p, fi, lambda));
            }
        }
    }
    let run = |m: &TensorMesh, fi: usize, p: f64, lambda: f64| -> Result<EstimateReport> {
        let (c, gamma) = &fields[fi];
        let problem = Problem::new(m.clone(), c.clone(), sweep_sources(m.dim), lambda);
        let mut r = main_ratio(&problem, p)?.with_seed(spec.seed);
        r.rho0 = Some(spec.rho0);
        r.gamma_measured = Some(*gamma);
        Ok(r)
    };
    let reports: Vec<EstimateReport> = jobs
        .par_iter()
        .map(|&(_, p, fi, l)| run(&mesh, fi, p, l))
        .collect::<Result<_>>()?;
    let refined: Vec<EstimateReport> = match &fine {
        Some(fm) => jobs.par_iter().map(|&(_, p, fi, l)| run(fm, fi, p, l)).collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let mut cells = Vec::new();
    let per_cell = spec.lambdas.len();
    for (pi, &p) in spec.p_grid.iter().enumerate() {
        for (fi, &(kind, eps)) in spec.families.iter().enumerate() {
            let start = (pi * fields.len() + fi) * per_cell;
            let window: Vec<usize> = (start..start + per_cell)
                .filter(|&i| reports[i].lambda * spec.rho0 >= 1.0)
                .collect();
            let ratios: Vec<f64> = window.iter().map(|&i| reports[i].ratio).collect();
            let max = ratios.iter().cloned().fold(f64::MIN, f64::max);
            let min = ratios.iter().cloned().fold(f64::MAX, f64::min);
            let spread = if ratios.is_empty() { 1.0 } else { max / min };
            let change = (!refined.is_empty()).then(|| {
                window
                    .iter()
                    .map(|&i| relative_change(reports[i].ratio, refined[i].ratio))
                    .fold(0.0, f64::max)
            });
            let pass = spread <= SWEEP_SPREAD_BOUND
                && change.map_or(true, |c| c <= SWEEP_REFINEMENT_BOUND)
                && ratios.iter().all(|r| r.is_finite());
            cells.push(SweepCell {
                p,
                kind,
                eps,
                gamma_measured: fields[fi].1,
                spread,
                max_refinement_change: change,
                pass,
            });
        }
    }
    let mut reports = reports;
    let mut refined = refined;
    for r in reports.iter_mut().chain(refined.iter_mut()) {
        if let Some(c) = cells.iter().find(|c| c.p == r.p && Some(c.gamma_measured) == r.gamma_measured) {
            r.pass = r.pass && c.pass;
        }
    }
    Ok(SweepResult { reports, refined, cells })
}

/// Smooth bump supported in `(a, b)`, equal to 1 at the midpoint.
fn bump(x: f64, a: f64, b: f64) -> f64 {
    if x <= a || x >= b {
        return 0.0;
    }
    let m = 0.5 * (a + b);
    let s = |y: f64| -1.0 / ((y - a) * (b - y));
    (s(x) - s(m)).exp()
}

pub const SOURCE_SUPPORT: (f64, f64) = (1.0, 2.5);

/// Seeded data supported in `SOURCE_SUPPORT` in `x_d`.
pub fn local_sources(seed: u64, dim: usize) -> Sources {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x10ca_15eed);
    let (a, w, ph) = (rng.gen_range(0.5..2.0), rng.gen_range(1.0..8.0), rng.gen_range(0.0..6.3));
    let (b, wb) = (rng.gen_range(-1.0..1.0), rng.gen_range(1.0..8.0));
    let (c, pc) = (rng.gen_range(0.0..0.8), rng.gen_range(0.0..6.3));
    let two_d = dim == 2;
    let (lo, hi) = SOURCE_SUPPORT;
    let tang = move |xp: f64| if two_d { 1.0 + c * (xp + pc).cos() } else { 1.0 };
    Sources {
        big_f: Some(Arc::new(move |p: Point| {
            let v = a * bump(p.xd, lo, hi) * (1.0 + 0.5 * (w * p.t + ph).sin()) * tang(p.xp);
            if two_d {
                [0.0, v]
            } else {
                [v, 0.0]
            }
        })),
        f: Some(Arc::new(move |p: Point| b * bump(p.xd, lo, hi) * (wb * p.t).cos() * tang(p.xp))),
    }
}

/// A solution of the homogeneous equation on `Q_R^+(z_0)`.
#[derive(Clone)]
pub struct LocalSolution {
    pub problem: Problem,
    pub solution: SpaceTimeSolution,
    pub outer: Cylinder,
    pub seed: u64,
}

/// Boundary cylinder `Q_{1/2}^+` at the final time, centred at `x' = 0`.
pub fn default_outer_cylinder(mesh: &TensorMesh) -> Cylinder {
    Cylinder::boundary(mesh.final_time(), 0.0, 0.5)
}

/// Seeded `x_d`-only coefficients for local experiments.
pub fn local_coefficients(seed: u64, dim: usize, nu: f64) -> Result<CoefficientField> {
    generate_family(&FamilySpec::new(seed, CoefficientKind::XdOnly, dim, nu, 0.2))
}

/// Solves with the given data and checks that it vanishes on `outer`
/// while the solution does not.
pub fn locally_homogeneous_solution(problem: &Problem, outer: Cylinder, seed: u64) -> Result<LocalSolution> {
    let mesh = &*problem.mesh;
    if outer.center_xd + outer.radius > mesh.xd_length() {
        return Err(LabError::CylinderOutsideDomain(format!("{outer:?}")));
    }
    let cells = mesh.cells_in_cylinder(&outer);
    if cells.is_empty() {
        return Err(LabError::EmptyCylinder(format!("{outer:?}")));
    }
    let ball = mesh.cells_in_ball(&outer);
    for n in cells.levels() {
        let (big, small) = problem.sources.nodal(mesh, mesh.time_level(n))?;
        for &(k, j) in &ball {
            let k1 = if mesh.dim == 2 { mesh.xprime_next(k) } else { k };
            for node in [mesh.node(k, j), mesh.node(k, j + 1), mesh.node(k1, j), mesh.node(k1, j + 1)] {
                if big[node] != [0.0, 0.0] || small[node] != 0.0 {
                    return Err(LabError::InvalidCase(format!("sources do not vanish on {outer:?}")));
                }
            }
        }
    }
    let solution = problem.solve_default()?;
    let inner = solution_integral(&solution, &NormSpec::new(2.0, -1.0, DerivativeOrder::Zero).on(outer))?;
    let total = solution_integral(&solution, &NormSpec::new(2.0, -1.0, DerivativeOrder::Zero).full_window())?;
    if !(inner > 1e-12 * total.max(1e-300)) || inner <= 1e-30 {
        return Err(LabError::Degenerate(format!("solution numerically zero on {outer:?}")));
    }
    Ok(LocalSolution {
        problem: problem.clone(),
        solution,
        outer,
        seed,
    })
}

/// Standard local experiment for `seed`: `x_d`-only coefficients,
/// `local_sources`, outer cylinder `Q_{1/2}^+` at `t = T`.
pub fn local_experiment(mesh: &TensorMesh, seed: u64, lambda: f64, nu: f64) -> Result<LocalSolution> {
    let coeffs = local_coefficients(seed, mesh.dim, nu)?;
    let problem = Problem::new(mesh.clone(), coeffs, local_sources(seed, mesh.dim), lambda);
    locally_homogeneous_solution(&problem, default_outer_cylinder(mesh), seed)
}

/// Largest interior-row residual of the discrete equations on the cells of
/// `cyl`, relative to the largest term.
pub fn local_residual(local: &LocalSolution, cyl: &Cylinder) -> Result<f64> {
    let problem = &local.problem;
    let mesh = &*problem.mesh;
    let mass = assemble_weighted_mass_for(mesh, &problem.coeffs)?;
    let sched = problem.schedule()?;
    let sol = &local.solution;
    let ball = mesh.cells_in_ball(cyl);
    let mut rows: Vec<usize> = Vec::new();
    for &(k, j) in &ball {
        let k1 = if mesh.dim == 2 { mesh.xprime_next(k) } else { k };
        for (kk, jj) in [(k, j), (k, j + 1), (k1, j), (k1, j + 1)] {
            if let Some(r) = mesh.dof(kk, jj) {
                rows.push(r);
            }
        }
    }
    rows.sort_unstable();
    rows.dedup();
    let dt = mesh.time_step;
    let (mut worst, mut scale): (f64, f64) = (0.0, 0.0);
    for n in mesh.cells_in_cylinder(cyl).levels() {
        let un = sol.levels[n].interior(mesh);
        let up = sol.levels[n - 1].interior(mesh);
        let du: Vec<f64> = un.iter().zip(&up).map(|(a, b)| (a - b) / dt).collect();
        let (mu, ku) = (mass.matvec(&du), sched.at(n)?.matvec(&un));
        let b = problem.load(n)?;
        for &r in &rows {
            worst = worst.max((mu[r] + ku[r] - b[r]).abs());
            scale = scale.max(mu[r].abs()).max(ku[r].abs());
        }
    }
    Ok(if scale > 0.0 { worst / scale } else { worst })
}

/// Levels `(u^n - u^{n-1}) / dt` with level 0 zero.
pub fn time_difference(sol: &SpaceTimeSolution) -> SpaceTimeSolution {
    let dt = sol.mesh.time_step;
    let mut levels = vec![DiscreteField::zeros(&sol.mesh)];
    for n in 1..sol.levels.len() {
        levels.push(DiscreteField {
            values: sol.levels[n]
                .values
                .iter()
                .zip(&sol.levels[n - 1].values)
                .map(|(a, b)| (a - b) / dt)
                .collect(),
        });
    }
    SpaceTimeSolution {
        levels,
        ..sol.clone()
    }
}

/// Caccioppoli ratios on `Q_r^+ \subset Q_R^+`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaccioppoliReport {
    /// `int_{Q_r} |Du|^2 + lambda u^2 / x_d` over `int_{Q_R} u^2 / x_d`.
    pub gradient: EstimateReport,
    /// `int_{Q_r} u_t^2 / x_d` over `int_{Q_R} |Du|^2 + lambda u^2 / x_d`.
    pub time: EstimateReport,
}

fn check_nested(mesh: &TensorMesh, r: f64, big_r: f64, cyl: &Cylinder) -> Result<(Cylinder, Cylinder)> {
    if !(0.0 < r && r < big_r) {
        return Err(LabError::InvalidParameter(format!("need 0 < r < R, got r = {r}, R = {big_r}")));
    }
    let inner = cyl.with_radius(r);
    if mesh.cells_in_cylinder(&inner).is_empty() {
        return Err(LabError::EmptyCylinder(format!("{inner:?}")));
    }
    Ok((inner, cyl.with_radius(big_r)))
}

pub fn caccioppoli_ratio(sol: &SpaceTimeSolution, cyl: &Cylinder, r: f64, big_r: f64) -> Result<CaccioppoliReport> {
    let mesh = &*sol.mesh;
    let (inner, outer) = check_nested(mesh, r, big_r, cyl)?;
    let lambda = sol.lambda;
    let grad = |c: Cylinder, s: &SpaceTimeSolution| solution_integral(s, &NormSpec::new(2.0, 0.0, DerivativeOrder::Full).on(c));
    let zero = |c: Cylinder, s: &SpaceTimeSolution| solution_integral(s, &NormSpec::new(2.0, -1.0, DerivativeOrder::Zero).on(c));
    let ut = time_difference(sol);
    let lhs1 = grad(inner, sol)? + lambda * zero(inner, sol)?;
    let rhs1 = zero(outer, sol)?;
    let lhs2 = zero(inner, &ut)?;
    let rhs2 = grad(outer, sol)? + lambda * zero(outer, sol)?;
    Ok(CaccioppoliReport {
        gradient: EstimateReport::new(CheckId::Caccioppoli, mesh, lambda, 2.0, lhs1, rhs1, None)?.with_cylinder(inner),
        time: EstimateReport::new(CheckId::Caccioppoli, mesh, lambda, 2.0, lhs2, rhs2, None)?.with_cylinder(inner),
    })
}

/// `w = u / x_d` at every node with `x_d > 0`; the `x_d = 0` row copies
/// its neighbour but is never integrated.
pub fn w_field(mesh: &TensorMesh, u: &DiscreteField) -> DiscreteField {
    let mut values = u.values.clone();
    for k in 0..mesh.xprime_cells() {
        for j in 1..mesh.xd_nodes.len() {
            values[mesh.node(k, j)] = u.at(mesh, k, j) / mesh.xd_nodes[j];
        }
        values[mesh.node(k, 0)] = values[mesh.node(k, 1)];
    }
    DiscreteField { values }
}

fn cylinder_sum<G>(sol: &SpaceTimeSolution, cyl: &Cylinder, skip_first: bool, g: G) -> f64
where
    G: Fn(f64, &[(f64, Vec2)]) -> f64 + Copy,
{
    let mesh = &*sol.mesh;
    let mut total = 0.0;
    let mut cache: Option<(usize, DiscreteField)> = None;
    for c in mesh.cells_in_cylinder(cyl).cells() {
        if skip_first && c.xd == 0 {
            continue;
        }
        if cache.as_ref().map(|(n, _)| *n) != Some(c.level) {
            cache = Some((c.level, w_field(mesh, &sol.levels[c.level])));
        }
        let w = &cache.as_ref().unwrap().1;
        total += mesh.time_step * cell_quadrature(mesh, &[&w.values], c.xprime, c.xd, g);
    }
    total
}

/// `int_{Q_r} x_d |Dw|^2 + lambda w^2` over `int_{Q_R} w^2`, `w = u / x_d`,
/// cells touching `x_d = 0` left out.
pub fn w_estimate_ratio(sol: &SpaceTimeSolution, cyl: &Cylinder, r: f64, big_r: f64) -> Result<EstimateReport> {
    let mesh = &*sol.mesh;
    let (inner, outer) = check_nested(mesh, r, big_r, cyl)?;
    let lambda = sol.lambda;
    let lhs = cylinder_sum(sol, &inner, true, |x, v| {
        let (w, g) = v[0];
        x * (g[0] * g[0] + g[1] * g[1]) + lambda * w * w
    });
    let rhs = cylinder_sum(sol, &outer, true, |_, v| v[0].0 * v[0].0);
    Ok(EstimateReport::new(CheckId::WEstimate, mesh, lambda, 2.0, lhs, rhs, None)?.with_cylinder(inner))
}

/// Pointwise quantities on a boundary cylinder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    /// `max |Du_h|` on `Q_r^+` over `||Du||_{L_2(Q_2r)} + sqrt(lambda) ||u||_{L_2(Q_2r, 1/x_d)}`.
    pub report: EstimateReport,
    /// `max |u_h| / x_d` over nodes of `Q_r^+` with `x_d > 0`.
    pub boundary_quotient: f64,
    /// `max x_d^{-1/2} |D_{x'} u_h|` over nodes of `Q_r^+` with `x_d > 0`.
    pub tangential_quotient: f64,
}

/// Q1 gradient of cell `(k, j)` evaluated at its vertices.
fn vertex_gradients(mesh: &TensorMesh, u: &DiscreteField, k: usize, j: usize) -> [(usize, usize, Vec2); 4] {
    let two_d = mesh.dim == 2;
    let k1 = if two_d { mesh.xprime_next(k) } else { k };
    let (u00, u01, u10, u11) = (u.at(mesh, k, j), u.at(mesh, k, j + 1), u.at(mesh, k1, j), u.at(mesh, k1, j + 1));
    let h = mesh.xd_width(j);
    let hp = mesh.xprime_width();
    let gd0 = (u01 - u00) / h;
    let gd1 = (u11 - u10) / h;
    let (gp0, gp1) = if two_d { ((u10 - u00) / hp, (u11 - u01) / hp) } else { (0.0, 0.0) };
    [
        (k, j, [gp0, gd0]),
        (k, j + 1, [gp1, gd0]),
        (k1, j, [gp0, gd1]),
        (k1, j + 1, [gp1, gd1]),
    ]
}

pub fn boundary_lipschitz(sol: &SpaceTimeSolution, cyl: &Cylinder) -> Result<LipschitzReport> {
    let mesh = &*sol.mesh;
    if cyl.center_xd != 0.0 {
        return Err(LabError::InvalidParameter("boundary cylinder must be centred on x_d = 0".into()));
    }
    let cells = mesh.cells_in_cylinder(cyl);
    if cells.is_empty() {
        return Err(LabError::EmptyCylinder(format!("{cyl:?}")));
    }
    let (mut dmax, mut quot, mut tang): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for c in cells.cells() {
        let u = &sol.levels[c.level];
        for (k, j, g) in vertex_gradients(mesh, u, c.xprime, c.xd) {
            dmax = dmax.max(g[0].hypot(g[1]));
            if j > 0 {
                let x = mesh.xd_nodes[j];
                quot = quot.max(u.at(mesh, k, j).abs() / x);
                tang = tang.max(g[0].abs() / x.sqrt());
            }
        }
    }
    let outer = cyl.with_radius(2.0 * cyl.radius);
    let lambda = sol.lambda;
    let gsq = solution_integral(sol, &NormSpec::new(2.0, 0.0, DerivativeOrder::Full).on(outer))?;
    let zsq = solution_integral(sol, &NormSpec::new(2.0, -1.0, DerivativeOrder::Zero).on(outer))?;
    let rhs = gsq.sqrt() + lambda.sqrt() * zsq.sqrt();
    Ok(LipschitzReport {
        report: EstimateReport::new(CheckId::Lipschitz, mesh, lambda, f64::INFINITY, dmax, rhs, None)?.with_cylinder(*cyl),
        boundary_quotient: quot,
        tangential_quotient: tang,
    })
}

/// `sup_{Q_r} |u| x_d^{-1/2}` over `(avg_{Q_2r} u^2 / x_d)^{1/2}` for a
/// cylinder with `B_{2r}` inside `x_d > 0`.
pub fn interior_bound(sol: &SpaceTimeSolution, cyl: &Cylinder) -> Result<EstimateReport> {
    let mesh = &*sol.mesh;
    let outer = cyl.with_radius(2.0 * cyl.radius);
    if outer.center_xd - outer.radius <= 0.0 {
        return Err(LabError::InvalidParameter("B_2r must lie in x_d > 0".into()));
    }
    let cells = mesh.cells_in_cylinder(cyl);
    if cells.is_empty() {
        return Err(LabError::EmptyCylinder(format!("{cyl:?}")));
    }
    let mut sup: f64 = 0.0;
    for c in cells.cells() {
        let u = &sol.levels[c.level];
        for (k, j, _) in vertex_gradients(mesh, u, c.xprime, c.xd) {
            sup = sup.max(u.at(mesh, k, j).abs() / mesh.xd_nodes[j].sqrt());
        }
    }
    let outer_cells = mesh.cells_in_cylinder(&outer);
    let measure: f64 = outer_cells.cells().iter().map(|c| mesh.time_step * mesh.cell_measure(c.xd)).sum();
    let zsq = solution_integral(sol, &NormSpec::new(2.0, -1.0, DerivativeOrder::Zero).on(outer))?;
    let rhs = (zsq / measure).sqrt();
    Ok(EstimateReport::new(CheckId::Interior, mesh, sol.lambda, f64::INFINITY, sup, rhs, None)?.with_cylinder(*cyl))
}

/// Time-dependent coefficients with `a_01 != a_10` in two dimensions.
pub fn random_nonsymmetric_coefficients(seed: u64, dim: usize, nu: f64) -> CoefficientField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd0a1_17e5);
    let skew = rng.gen_range(0.1..0.3);
    let (s0, s1) = (rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
    let (w, ph) = (rng.gen_range(1.0..5.0), rng.gen_range(0.0..6.3));
    let amp = rng.gen_range(0.05..0.2);
    let a = Arc::new(move |p: Point| {
        let v = amp * (w * p.t + p.xd + ph).sin();
        if dim == 2 {
            [[1.0 + v, s0 + skew], [s0 - skew, 1.0 + s1 * p.xp.cos()]]
        } else {
            [[1.0 + v, 0.0], [0.0, 1.0]]
        }
    });
    let c0 = Arc::new(move |p: Point| 1.0 + 0.2 * (p.xd + w * p.t).cos());
    CoefficientField::user(dim, nu, a, c0, Arc::new(|_| 1.0), true)
}

/// `(sum dt <g^n, u^n>, sum dt <b^n, v^n>)`: the primal solution with data
/// `problem.sources` tested against the adjoint data, and the adjoint
/// solution tested against the primal data (implicit Euler).
pub fn duality_pairings(problem: &Problem, adjoint_sources: &Sources, tol: f64) -> Result<(f64, f64)> {
    let mesh = &problem.mesh;
    let cfg = TimeStepperConfig::for_mesh(mesh).with_tol(tol);
    let mass = assemble_weighted_mass_for(mesh, &problem.coeffs)?;
    let sched = problem.schedule()?;
    let adj = problem.with_sources(adjoint_sources.clone());
    let u = march(mesh, &mass, &sched, |n| problem.load(n), &cfg, None, problem.lambda)?;
    let v = adjoint_march(mesh, &mass, &sched, |n| adj.load(n), &cfg, problem.lambda)?;
    let dt = mesh.time_step;
    let (mut lhs, mut rhs) = (0.0, 0.0);
    for n in 1..=mesh.time_count {
        lhs += dt * dot(&adj.load(n)?, &u.levels[n].interior(mesh));
        rhs += dt * dot(&problem.load(n)?, &v.levels[n].interior(mesh));
    }
    Ok((lhs, rhs))
}

pub const DUALITY_TOL: f64 = 1e-8;

/// Duality identity on a seeded nonsymmetric instance.
pub fn duality_check(mesh: &TensorMesh, seed: u64, lambda: f64) -> Result<EstimateReport> {
    let coeffs = random_nonsymmetric_coefficients(seed, mesh.dim, 0.5);
    let problem = Problem::new(mesh.clone(), coeffs, random_sources(seed, mesh.dim), lambda);
    let (lhs, rhs) = duality_pairings(&problem, &random_sources(seed.wrapping_add(7919), mesh.dim), 1e-13)?;
    let scale = lhs.abs().max(rhs.abs());
    let pass = (lhs - rhs).abs() <= DUALITY_TOL * scale && scale > 0.0;
    Ok(EstimateReport::raw(CheckId::Duality, mesh, lambda, 2.0, lhs, rhs, lhs / rhs, pass).with_seed(seed))
}

/// Terms of the second-order estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corollary2Terms {
    pub u: f64,
    pub du: f64,
    pub u_t: f64,
    pub d2u: f64,
    pub du_t: f64,
    pub f: f64,
    pub f_t: f64,
}

fn sampled(mesh: &Arc<TensorMesh>, g: &crate::coefficients::ScalarFn, lambda: f64) -> SpaceTimeSolution {
    let levels = (0..=mesh.time_count)
        .map(|n| DiscreteField::from_fn_open(mesh, |xp, xd| g(Point::new(mesh.time_level(n), xp, xd))))
        .collect();
    SpaceTimeSolution {
        mesh: mesh.clone(),
        levels,
        lambda,
        config: TimeStepperConfig::for_mesh(mesh),
    }
}

/// Second-order estimate for the model equation `u_t + u - x_d Lap u = f`
/// (`a = I`, `c_0 = 1`, `lambda = 1`, `f`-only data, `p >= 2`).
pub fn corollary2_terms(mesh: &TensorMesh, case: &ManufacturedCase, p: f64) -> Result<Corollary2Terms> {
    if !(p >= 2.0) {
        return Err(LabError::InvalidParameter(format!("second-order estimate needs p >= 2, got {p}")));
    }
    if case.lambda != 1.0 || case.mode != SourceMode::FOnly {
        return Err(LabError::InvalidCase("model equation needs lambda = 1 and f-only data".into()));
    }
    let probe = Point::new(0.3, 0.7, 1.1);
    let a = case.coeffs.a(probe);
    let identity = a[0][0] == 1.0 && a[0][1] == 0.0 && a[1][0] == 0.0 && (mesh.dim == 1 || a[1][1] == 1.0);
    if !(identity && case.coeffs.c0(probe) == 1.0 && case.coeffs.a0(probe) == 1.0 && !case.coeffs.is_time_dependent()) {
        return Err(LabError::InvalidCase("model equation needs a = I, c_0 = 1".into()));
    }
    let Some(dt_sol) = &case.solution.time_derivative else {
        return Err(LabError::InvalidCase("case lacks the time-derivative solution".into()));
    };
    let mesh = Arc::new(mesh.clone());
    let sol = solve_case(&mesh, case)?;
    let ut = time_difference(&sol);
    let norm = |s: &SpaceTimeSolution, alpha: f64, order: DerivativeOrder| weighted_norm(s, &NormSpec::new(p, alpha, order));
    let f = synthesize_sources(case)?.f.expect("f-only mode");
    let mut case_t = case.clone();
    case_t.solution = (**dt_sol).clone();
    let f_t = synthesize_sources(&case_t)?.f.expect("f-only mode");
    Ok(Corollary2Terms {
        u: norm(&sol, -p / 2.0, DerivativeOrder::Zero)?,
        du: norm(&sol, 0.0, DerivativeOrder::Full)?,
        u_t: norm(&ut, -p / 2.0, DerivativeOrder::Zero)?,
        d2u: norm(&sol, p / 2.0, DerivativeOrder::Second)?,
        du_t: norm(&ut, 0.0, DerivativeOrder::Full)?,
        f: norm(&sampled(&mesh, &f, 1.0), -p / 2.0, DerivativeOrder::Zero)?,
        f_t: norm(&sampled(&mesh, &f_t, 1.0), -p / 2.0, DerivativeOrder::Zero)?,
    })
}

pub fn corollary2_check(mesh: &TensorMesh, case: &ManufacturedCase, p: f64) -> Result<EstimateReport> {
    let t = corollary2_terms(mesh, case, p)?;
    let lhs = t.u + t.du + t.u_t + t.d2u + t.du_t;
    EstimateReport::new(CheckId::Corollary2, mesh, case.lambda, p, lhs, t.f + t.f_t, None)
}

/// Trace decay of one field as a report: `lhs` is the threshold
/// `1/2 - 1/p - 0.05`, `rhs` the fitted slope.
pub fn trace_report(mesh: &TensorMesh, field: &DiscreteField, p: f64, lambda: f64) -> Result<EstimateReport> {
    let t = trace_decay_check(mesh, field, p)?;
    Ok(EstimateReport::raw(CheckId::Trace, mesh, lambda, p, t.threshold, t.slope, t.threshold / t.slope, t.pass))
}

pub fn hardy_report(mesh: &TensorMesh, field: &DiscreteField, p: f64) -> Result<EstimateReport> {
    let h = hardy_check(mesh, field, p)?;
    let mut r = EstimateReport::new(CheckId::Hardy, mesh, 0.0, p, h.numerator, h.denominator, Some(h.bound))?;
    r.pass = h.pass;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mms::AnalyticSolution;

    fn small_mesh(dim: usize, m: usize, n: usize) -> TensorMesh {
        build_mesh(&MeshParams {
            dim,
            xd_cells: m,
            xprime_count: if dim == 2 { 8 } else { 1 },
            xprime_length: std::f64::consts::TAU,
            time_count: n,
            ..MeshParams::default()
        })
        .unwrap()
    }

    #[test]
    fn report_row_format() {
        let mesh = small_mesh(1, 8, 4);
        let r = EstimateReport::new(CheckId::EnergyL2, &mesh, 10.0, 2.0, 1.0, 2.0, Some(8.0))
            .unwrap()
            .with_seed(3);
        assert_eq!(r.csv_row(), "energy_L2,10,2,8,2.5e-1,3,,,1e0,2e0,5e-1,true");
        assert!(reports_to_csv(&[r]).starts_with(REPORT_CSV_HEADER));
        assert!(EstimateReport::new(CheckId::Hardy, &mesh, 0.0, 2.0, 1.0, 0.0, None).is_err());
        let z = EstimateReport::new(CheckId::Hardy, &mesh, 0.0, 2.0, 0.0, 0.0, None).unwrap();
        assert_eq!(z.ratio, 0.0);
        assert!(z.pass);
    }

    #[test]
    fn check_ids_serialize_to_labels() {
        for id in [CheckId::EnergyL2, CheckId::MainWp, CheckId::WEstimate, CheckId::Corollary2] {
            assert_eq!(serde_json::to_string(&id).unwrap(), format!("\"{}\"", id.label()));
        }
    }

    #[test]
    fn zero_data_energy() {
        let mesh = small_mesh(1, 16, 8);
        let p = Problem::new(mesh, CoefficientField::identity(1, 0.5), Sources::zero(), 1.0);
        let r = energy_ratio(&p).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn energy_scales_linearly_with_data() {
        let mesh = small_mesh(1, 16, 10);
        let s = random_sources(1, 1);
        let (bf, f) = (s.big_f.clone().unwrap(), s.f.clone().unwrap());
        let doubled = Sources {
            big_f: Some(Arc::new(move |p| {
                let v = bf(p);
                [2.0 * v[0], 2.0 * v[1]]
            })),
            f: Some(Arc::new(move |p| 2.0 * f(p))),
        };
        let c = corpus_coefficients(1, 1, 0.5).unwrap();
        let a = energy_ratio(&Problem::new(mesh.clone(), c.clone(), s, 10.0)).unwrap();
        let b = energy_ratio(&Problem::new(mesh, c, doubled, 10.0)).unwrap();
        assert!((b.lhs - 2.0 * a.lhs).abs() <= 1e-12 * b.lhs);
        assert!((b.ratio - a.ratio).abs() <= 1e-12 * a.ratio);
    }

    #[test]
    fn energy_corpus_respects_bound() {
        for dim in [1, 2] {
            let mesh = small_mesh(dim, 16, 8);
            let reports = energy_corpus(&mesh, &[0, 1, 2, 3], &[1.0, 1000.0], 0.5).unwrap();
            assert_eq!(reports.len(), 8);
            assert!(reports.iter().all(|r| r.pass && r.ratio <= 2f64.sqrt() / 0.5 + 1e-12), "{reports:?}");
        }
    }

    #[test]
    fn p2_data_norms_match_exact_l2() {
        let mesh = small_mesh(2, 8, 4);
        let s = random_sources(5, 2);
        let (a, b) = data_integrals(&mesh, &s, 0.4, 2.0).unwrap();
        let (big, small) = s.nodal(&mesh, 0.4).unwrap();
        let (x, y) = data_norms_sq(&mesh, &big, &small);
        assert!((a - x).abs() <= 1e-10 * x && (b - y).abs() <= 1e-10 * y, "{a} {x} {b} {y}");
    }

    #[test]
    fn sweep_p2_full_window_matches_energy_lhs() {
        let mesh = small_mesh(1, 16, 10);
        let p = Problem::new(mesh, CoefficientField::identity(1, 0.5), sweep_sources(1), 10.0);
        let sol = p.solve_default().unwrap();
        let e = energy_ratio_of(&p, &sol).unwrap();
        let m = main_ratio_of(&p, &sol, 2.0, 0.0).unwrap();
        assert!((e.lhs - m.lhs).abs() <= 1e-12 * e.lhs);
        assert!((e.rhs - m.rhs).abs() <= 1e-10 * e.rhs);
    }

    #[test]
    fn scaling_covariance() {
        let mesh = small_mesh(1, 16, 10);
        let c = local_coefficients(2, 1, 0.5).unwrap();
        let s = sweep_sources(1);
        let f = s.f.clone().unwrap();
        let scaled = Sources {
            big_f: None,
            f: Some(Arc::new(move |p| 3.0 * f(p))),
        };
        let a = main_ratio(&Problem::new(mesh.clone(), c.clone(), s, 5.0), 3.0).unwrap();
        let b = main_ratio(&Problem::new(mesh, c, scaled, 5.0), 3.0).unwrap();
        assert!((b.lhs - 3.0 * a.lhs).abs() <= 1e-12 * b.lhs);
        assert!((b.ratio - a.ratio).abs() <= 1e-12 * a.ratio);
    }

    #[test]
    fn sweep_is_deterministic() {
        let spec = SweepSpec {
            mesh: MeshParams {
                xd_cells: 16,
                time_count: 10,
                ..MeshParams::default()
            },
            p_grid: vec![2.0, 4.0],
            lambdas: vec![1.0, 10.0, 100.0],
            families: vec![(CoefficientKind::Constant, 0.1), (CoefficientKind::XdOnly, 0.1)],
            seed: 1,
            nu: 0.5,
            rho0: 1.0,
            refine: false,
        };
        let a = main_estimate_sweep(&spec).unwrap();
        let b = main_estimate_sweep(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.reports.len(), 12);
        assert_eq!(a.cells.len(), 4);
        assert!(a.cells.iter().all(|c| c.gamma_measured <= 1e-12));
    }

    #[test]
    fn local_sources_vanish_near_boundary() {
        let mesh = small_mesh(1, 32, 16);
        let local = local_experiment(&mesh, 3, 1.0, 0.5).unwrap();
        let res = local_residual(&local, &local.outer).unwrap();
        assert!(res < 1e-8, "{res}");
        let zero = Problem::new(mesh.clone(), local_coefficients(3, 1, 0.5).unwrap(), Sources::zero(), 1.0);
        assert!(matches!(
            locally_homogeneous_solution(&zero, default_outer_cylinder(&mesh), 0),
            Err(LabError::Degenerate(_))
        ));
        let near = Problem::new(mesh.clone(), local_coefficients(3, 1, 0.5).unwrap(), sweep_sources(1), 1.0);
        assert!(locally_homogeneous_solution(&near, default_outer_cylinder(&mesh), 0).is_err());
    }

    #[test]
    fn distinct_seeds_give_independent_solutions() {
        let mesh = small_mesh(1, 32, 16);
        let a = local_experiment(&mesh, 1, 1.0, 0.5).unwrap().solution;
        let b = local_experiment(&mesh, 2, 1.0, 0.5).unwrap().solution;
        let (x, y) = (&a.last().values, &b.last().values);
        let cos = dot(x, y) / (dot(x, x).sqrt() * dot(y, y).sqrt());
        assert!(1.0 - cos.abs() > 1e-3, "{cos}");
    }

    #[test]
    fn local_ratios_are_finite() {
        let mesh = small_mesh(1, 32, 32);
        let local = local_experiment(&mesh, 4, 1.0, 0.5).unwrap();
        let c = caccioppoli_ratio(&local.solution, &local.outer, 0.25, 0.5).unwrap();
        assert!(c.gradient.ratio.is_finite() && c.gradient.ratio > 0.0);
        assert!(c.time.ratio.is_finite() && c.time.ratio > 0.0);
        let w = w_estimate_ratio(&local.solution, &local.outer, 0.25, 0.5).unwrap();
        assert!(w.ratio.is_finite() && w.ratio > 0.0);
        let l = boundary_lipschitz(&local.solution, &local.outer.with_radius(0.25)).unwrap();
        assert!(l.report.ratio.is_finite() && l.boundary_quotient.is_finite());
        let i = interior_bound(&local.solution, &Cylinder::new(1.0, 0.0, 0.6, 0.2)).unwrap();
        assert!(i.ratio.is_finite() && i.ratio > 0.0);
        assert!(caccioppoli_ratio(&local.solution, &local.outer, 0.5, 0.25).is_err());
        assert!(interior_bound(&local.solution, &Cylinder::new(1.0, 0.0, 0.3, 0.2)).is_err());
    }

    #[test]
    fn zero_solution_has_zero_local_lhs() {
        let mesh = small_mesh(1, 16, 16);
        let sol = SpaceTimeSolution {
            mesh: Arc::new(mesh.clone()),
            levels: vec![DiscreteField::zeros(&mesh); 17],
            lambda: 1.0,
            config: TimeStepperConfig::for_mesh(&mesh),
        };
        let c = caccioppoli_ratio(&sol, &default_outer_cylinder(&mesh), 0.25, 0.5).unwrap();
        assert_eq!(c.gradient.lhs, 0.0);
        assert!(c.gradient.pass);
    }

    #[test]
    fn manufactured_boundary_quotient_is_bounded_by_analytic_sup() {
        let mesh = Arc::new(small_mesh(1, 64, 64));
        let case = ManufacturedCase::default_case(1, 1.0, SourceMode::FOnly);
        let sol = solve_case(&mesh, &case).unwrap();
        let l = boundary_lipschitz(&sol, &Cylinder::boundary(1.0, 0.0, 0.25)).unwrap();
        // sup e^{-x_d} sin t over the cylinder is sin 1.
        assert!(l.boundary_quotient <= 1f64.sin() * 1.02, "{}", l.boundary_quotient);
    }

    #[test]
    fn duality_trivial_cases() {
        let mesh = small_mesh(1, 8, 5);
        let p = Problem::new(mesh.clone(), CoefficientField::identity(1, 0.5), random_sources(0, 1), 1.0);
        let (a, b) = duality_pairings(&p, &Sources::zero(), 1e-13).unwrap();
        assert_eq!((a, b), (0.0, 0.0));
        let sym = Problem::new(mesh, CoefficientField::identity(1, 0.5), random_sources(0, 1), 1.0);
        let (a, b) = duality_pairings(&sym, &random_sources(0, 1), 1e-13).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }

    #[test]
    fn duality_holds_on_nonsymmetric_instances() {
        for dim in [1, 2] {
            let mesh = small_mesh(dim, 8, 6);
            for seed in 0..3 {
                let r = duality_check(&mesh, seed, 2.0).unwrap();
                assert!(r.pass, "{r:?}");
            }
        }
    }

    #[test]
    fn dense_brute_force_pairing() {
        // Oracle: assemble the full space-time block system densely and
        // compare g^T A^{-1} b with b^T A^{-T} g by Gaussian elimination.
        let mesh = small_mesh(1, 5, 3);
        let coeffs = random_nonsymmetric_coefficients(9, 1, 0.5);
        let p = Problem::new(mesh.clone(), coeffs, random_sources(9, 1), 1.5);
        let adj = random_sources(11, 1);
        let (lhs, rhs) = duality_pairings(&p, &adj, 1e-14).unwrap();
        let nd = mesh.interior_dof_count();
        let nt = mesh.time_count;
        let dt = mesh.time_step;
        let mass = assemble_weighted_mass_for(&mesh, &p.coeffs).unwrap().to_dense();
        let n = nd * nt;
        let mut a = vec![vec![0.0; n]; n];
        let mut b = vec![0.0; n];
        let mut g = vec![0.0; n];
        let q = p.with_sources(adj);
        for s in 0..nt {
            let k = assemble_stiffness_at(&mesh, &p.coeffs, 1.5, s + 1).unwrap().to_dense();
            let (bs, gs) = (p.load(s + 1).unwrap(), q.load(s + 1).unwrap());
            for i in 0..nd {
                b[s * nd + i] = dt * bs[i];
                g[s * nd + i] = dt * gs[i];
                for j in 0..nd {
                    a[s * nd + i][s * nd + j] = mass[i][j] + dt * k[i][j];
                    if s > 0 {
                        a[s * nd + i][(s - 1) * nd + j] = -mass[i][j];
                    }
                }
            }
        }
        let solve = |m: &Vec<Vec<f64>>, r: &Vec<f64>| {
            let mut m = m.clone();
            let mut r = r.clone();
            for c in 0..n {
                let piv = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
                m.swap(c, piv);
                r.swap(c, piv);
                for row in c + 1..n {
                    let f = m[row][c] / m[c][c];
                    for col in c..n {
                        m[row][col] -= f * m[c][col];
                    }
                    r[row] -= f * r[c];
                }
            }
            let mut x = vec![0.0; n];
            for c in (0..n).rev() {
                let s: f64 = (c + 1..n).map(|j| m[c][j] * x[j]).sum();
                x[c] = (r[c] - s) / m[c][c];
            }
            x
        };
        let u = solve(&a, &b);
        let at: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| a[j][i]).collect()).collect();
        let v = solve(&at, &g);
        let l2: f64 = g.iter().zip(&u).map(|(x, y)| x * y).sum();
        let r2: f64 = b.iter().zip(&v).map(|(x, y)| x * y).sum();
        assert!((lhs - l2).abs() <= 1e-10 * l2.abs(), "{lhs} {l2}");
        assert!((rhs - r2).abs() <= 1e-10 * r2.abs(), "{rhs} {r2}");
    }

    #[test]
    fn corollary_rejections_and_zero_case() {
        let mesh = small_mesh(1, 16, 16);
        let case = ManufacturedCase::default_case(1, 1.0, SourceMode::FOnly);
        assert!(corollary2_check(&mesh, &case, 1.5).is_err());
        assert!(corollary2_check(&mesh, &ManufacturedCase::default_case(1, 2.0, SourceMode::FOnly), 2.0).is_err());
        let mut zero = AnalyticSolution::zero(1);
        zero.time_derivative = Some(Arc::new(AnalyticSolution::zero(1)));
        let zcase = ManufacturedCase::new(zero, CoefficientField::identity(1, 0.5), 1.0, SourceMode::FOnly);
        let r = corollary2_check(&mesh, &zcase, 2.0).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn corollary_ratio_is_finite_for_p2_and_p4() {
        let mesh = build_mesh(&MeshParams {
            xd_cells: 32,
            time_count: 64,
            ..MeshParams::default()
        })
        .unwrap();
        let case = ManufacturedCase::default_case(1, 1.0, SourceMode::FOnly);
        for p in [2.0, 4.0] {
            let r = corollary2_check(&mesh, &case, p).unwrap();
            assert!(r.ratio.is_finite() && r.ratio > 0.0, "{r:?}");
        }
    }
}
