//! Manufactured solutions: analytic `u` with `u = 0` on `x_d = 0`, source
//! synthesis, discretization error studies and residual checks.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{
    assemble_load, assemble_weighted_mass, far_boundary_mass, stiffness_columns, Columns, Sources,
};
use crate::coefficients::{sample_level, CoefficientField, MatrixFn, Point, ScalarFn, VectorFn};
use crate::error::{LabError, Result};
use crate::mesh::{build_mesh, MeshParams, TensorMesh};
use crate::norms::{GAUSS8_NODES, GAUSS8_WEIGHTS};
use crate::solver::{march_with, DiscreteField, SpaceTimeSolution, StiffnessSchedule, TimeStepperConfig};
use crate::sparse::SparseOperator;

/// Analytic solution with author-supplied derivative closures. Gradient and
/// Hessian use index `dim - 1` for `x_d`.
#[derive(Clone)]
pub struct AnalyticSolution {
    pub dim: usize,
    pub u: ScalarFn,
    pub u_t: ScalarFn,
    pub grad: VectorFn,
    pub hessian: MatrixFn,
    /// `u_t` as an analytic solution in its own right.
    pub time_derivative: Option<Arc<AnalyticSolution>>,
}

#[derive(Clone, Copy, Debug)]
enum TimeFactor {
    Sin,
    Cos,
    NegSin,
    NegCos,
}

impl TimeFactor {
    fn eval(self, t: f64) -> f64 {
        match self {
            Self::Sin => t.sin(),
            Self::Cos => t.cos(),
            Self::NegSin => -t.sin(),
            Self::NegCos => -t.cos(),
        }
    }

    fn derivative(self) -> Self {
        match self {
            Self::Sin => Self::Cos,
            Self::Cos => Self::NegSin,
            Self::NegSin => Self::NegCos,
            Self::NegCos => Self::Sin,
        }
    }
}

fn xd_exp_solution(dim: usize, s: TimeFactor, with_derivative: bool) -> AnalyticSolution {
    let ds = s.derivative();
    let two_d = dim == 2;
    let tang = move |xp: f64| if two_d { xp.cos() } else { 1.0 };
    let tang_p = move |xp: f64| if two_d { -xp.sin() } else { 0.0 };
    AnalyticSolution {
        dim,
        u: Arc::new(move |p: Point| p.xd * (-p.xd).exp() * tang(p.xp) * s.eval(p.t)),
        u_t: Arc::new(move |p: Point| p.xd * (-p.xd).exp() * tang(p.xp) * ds.eval(p.t)),
        grad: Arc::new(move |p: Point| {
            let e = (-p.xd).exp();
            let st = s.eval(p.t);
            let gd = (1.0 - p.xd) * e * tang(p.xp) * st;
            if two_d {
                [p.xd * e * tang_p(p.xp) * st, gd]
            } else {
                [gd, 0.0]
            }
        }),
        hessian: Arc::new(move |p: Point| {
            let e = (-p.xd).exp();
            let st = s.eval(p.t);
            let dd = (p.xd - 2.0) * e * tang(p.xp) * st;
            if two_d {
                let pp = -p.xd * e * p.xp.cos() * st;
                let pd = (1.0 - p.xd) * e * tang_p(p.xp) * st;
                [[pp, pd], [pd, dd]]
            } else {
                [[dd, 0.0], [0.0, 0.0]]
            }
        }),
        time_derivative: with_derivative.then(|| Arc::new(xd_exp_solution(dim, ds, false))),
    }
}

impl AnalyticSolution {
    /// `x_d e^{-x_d} sin t`, times `cos x_1` for `dim = 2`.
    pub fn default_case(dim: usize) -> Self {
        xd_exp_solution(dim, TimeFactor::Sin, true)
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            u: Arc::new(|_| 0.0),
            u_t: Arc::new(|_| 0.0),
            grad: Arc::new(|_| [0.0, 0.0]),
            hessian: Arc::new(|_| [[0.0; 2]; 2]),
            time_derivative: None,
        }
    }

    /// `u = x_d`, steady.
    pub fn linear(dim: usize) -> Self {
        let d = dim - 1;
        Self {
            dim,
            u: Arc::new(|p: Point| p.xd),
            u_t: Arc::new(|_| 0.0),
            grad: Arc::new(move |_| {
                let mut g = [0.0; 2];
                g[d] = 1.0;
                g
            }),
            hessian: Arc::new(|_| [[0.0; 2]; 2]),
            time_derivative: None,
        }
    }

    pub fn sum(&self, other: &Self) -> Self {
        let (a, b) = (self.clone(), other.clone());
        let (a1, b1, a2, b2, a3, b3) = (a.clone(), b.clone(), a.clone(), b.clone(), a.clone(), b.clone());
        Self {
            dim: self.dim,
            u: Arc::new(move |p| (a.u)(p) + (b.u)(p)),
            u_t: Arc::new(move |p| (a1.u_t)(p) + (b1.u_t)(p)),
            grad: Arc::new(move |p| {
                let (x, y) = ((a2.grad)(p), (b2.grad)(p));
                [x[0] + y[0], x[1] + y[1]]
            }),
            hessian: Arc::new(move |p| {
                let (x, y) = ((a3.hessian)(p), (b3.hessian)(p));
                [[x[0][0] + y[0][0], x[0][1] + y[0][1]], [x[1][0] + y[1][0], x[1][1] + y[1][1]]]
            }),
            time_derivative: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMode {
    FOnly,
    BigFOnly,
    /// Fraction of the residual carried by `f`; the rest by the author's `F`.
    Mixed(f64),
}

#[derive(Clone)]
pub struct ManufacturedCase {
    pub solution: AnalyticSolution,
    pub coeffs: CoefficientField,
    pub lambda: f64,
    pub mode: SourceMode,
    /// Author-supplied `F` solving `x_d D_i F_i = -(residual)` with `f = 0`.
    pub big_f: Option<VectorFn>,
    /// Time-stepping weight, 1 for implicit Euler.
    pub theta: f64,
}

impl ManufacturedCase {
    pub fn new(solution: AnalyticSolution, coeffs: CoefficientField, lambda: f64, mode: SourceMode) -> Self {
        Self {
            solution,
            coeffs,
            lambda,
            mode,
            big_f: None,
            theta: 1.0,
        }
    }

    /// Default family with `a = I`, `c_0 = 1`, including the closed-form `F`.
    pub fn default_case(dim: usize, lambda: f64, mode: SourceMode) -> Self {
        let mut case = Self::new(
            AnalyticSolution::default_case(dim),
            CoefficientField::identity(dim, 0.5),
            lambda,
            mode,
        );
        case.big_f = Some(default_big_f(dim, lambda));
        case
    }

    pub fn with_big_f(mut self, big_f: VectorFn) -> Self {
        self.big_f = Some(big_f);
        self
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }
}

/// `F` with `f = 0` for the default family and `a = I`, `c_0 = a_0 = 1`.
fn default_big_f(dim: usize, lambda: f64) -> VectorFn {
    if dim == 2 {
        Arc::new(move |p: Point| [0.0, p.xp.cos() * (-p.xd).exp() * (p.t.cos() + (lambda + 2.0) * p.t.sin())])
    } else {
        Arc::new(move |p: Point| [(-p.xd).exp() * (p.t.cos() + (lambda + 1.0 - p.xd) * p.t.sin()), 0.0])
    }
}

/// `a_0 u_t + lambda c_0 u - x_d D_i(a_ij D_j u)` as a closure.
pub fn residual_fn(solution: &AnalyticSolution, coeffs: &CoefficientField, lambda: f64) -> Result<ScalarFn> {
    if coeffs.dim != solution.dim {
        return Err(LabError::DimensionMismatch {
            expected: coeffs.dim,
            got: solution.dim,
        });
    }
    if !coeffs.has_divergence() {
        return Err(LabError::InvalidCase(format!(
            "coefficients of kind {} lack a divergence closure",
            coeffs.kind
        )));
    }
    let sol = solution.clone();
    let co = coeffs.clone();
    let dim = coeffs.dim;
    Ok(Arc::new(move |p: Point| {
        let a = co.a(p);
        let div = co.divergence(p).unwrap();
        let g = (sol.grad)(p);
        let h = (sol.hessian)(p);
        let mut flux_div = 0.0;
        for j in 0..dim {
            flux_div += div[j] * g[j];
            for i in 0..dim {
                flux_div += a[i][j] * h[i][j];
            }
        }
        co.a0(p) * (sol.u_t)(p) + lambda * co.c0(p) * (sol.u)(p) - p.xd * flux_div
    }))
}

/// Source data making the case's `u` an exact solution.
pub fn synthesize_sources(case: &ManufacturedCase) -> Result<Sources> {
    let lambda = case.lambda;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(LabError::InvalidCase(format!("lambda = {lambda}")));
    }
    let f_weight = match case.mode {
        SourceMode::FOnly => 1.0,
        SourceMode::BigFOnly => 0.0,
        SourceMode::Mixed(w) if (0.0..=1.0).contains(&w) => w,
        SourceMode::Mixed(w) => return Err(LabError::InvalidCase(format!("mixing weight {w}"))),
    };
    if f_weight > 0.0 && lambda == 0.0 {
        return Err(LabError::InvalidCase("f-carrying modes need lambda > 0".into()));
    }
    let f = if f_weight > 0.0 {
        let r = residual_fn(&case.solution, &case.coeffs, lambda)?;
        let scale = f_weight / lambda.sqrt();
        Some(Arc::new(move |p: Point| scale * r(p)) as ScalarFn)
    } else {
        None
    };
    let big_f = if f_weight < 1.0 {
        let Some(bf) = case.big_f.clone() else {
            return Err(LabError::InvalidCase("F-carrying mode without an author-supplied F".into()));
        };
        let w = 1.0 - f_weight;
        Some(Arc::new(move |p: Point| {
            let v = bf(p);
            [w * v[0], w * v[1]]
        }) as VectorFn)
    } else {
        None
    };
    Ok(Sources { big_f, f })
}

/// Largest relative mismatch found by [`check_closures`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClosureCheck {
    pub max_rel_error: f64,
    pub boundary_max: f64,
    /// `max |u(., L_d)| / max |u|`.
    pub truncation_defect: f64,
    pub pass: bool,
}

fn sample_points(dim: usize, xd_length: f64, xprime_length: f64, final_time: f64) -> Vec<Point> {
    let mut pts = Vec::with_capacity(100);
    for i in 0..100 {
        let a = (i as f64 * 0.618_033_988_749_894_9).fract();
        let b = (i as f64 * 0.414_213_562_373_095_1).fract();
        let c = (i as f64 * 0.732_050_807_568_877_3).fract();
        let xp = if dim == 2 { xprime_length * b } else { 0.0 };
        pts.push(Point::new(final_time * a, xp, 0.02 + (xd_length - 0.04) * c));
    }
    pts
}

/// Finite-difference cross-check (step 1e-6, tolerance 1e-7 relative) of
/// the derivative closures, plus the boundary and truncation checks.
pub fn check_closures(case: &ManufacturedCase, xd_length: f64, xprime_length: f64, final_time: f64) -> Result<ClosureCheck> {
    let sol = &case.solution;
    let dim = sol.dim;
    let h = 1e-6;
    let pts = sample_points(dim, xd_length, xprime_length, final_time);
    let scale = pts.iter().map(|p| (sol.u)(*p).abs()).fold(0.0, f64::max).max(1e-300);
    let mut worst: f64 = 0.0;
    let mut note = |exact: f64, fd: f64, mag: f64| {
        worst = worst.max((exact - fd).abs() / mag.max(exact.abs()));
    };
    let shift = |p: Point, dir: usize, s: f64| -> Point {
        match (dim, dir) {
            (2, 0) => Point::new(p.t, p.xp + s, p.xd),
            _ => Point::new(p.t, p.xp, p.xd + s),
        }
    };
    for &p in &pts {
        let ut = ((sol.u)(Point::new(p.t + h, p.xp, p.xd)) - (sol.u)(Point::new(p.t - h, p.xp, p.xd))) / (2.0 * h);
        note((sol.u_t)(p), ut, scale);
        let g = (sol.grad)(p);
        let hs = (sol.hessian)(p);
        let gscale = (0..dim).map(|i| g[i].abs()).fold(scale, f64::max);
        for i in 0..dim {
            let fd = ((sol.u)(shift(p, i, h)) - (sol.u)(shift(p, i, -h))) / (2.0 * h);
            note(g[i], fd, gscale);
            for j in 0..dim {
                let fd = ((sol.grad)(shift(p, j, h))[i] - (sol.grad)(shift(p, j, -h))[i]) / (2.0 * h);
                note(hs[i][j], fd, gscale);
            }
        }
        if let Some(dt) = &sol.time_derivative {
            let utt = ((sol.u_t)(Point::new(p.t + h, p.xp, p.xd)) - (sol.u_t)(Point::new(p.t - h, p.xp, p.xd))) / (2.0 * h);
            note((dt.u_t)(p), utt, scale);
            note((dt.u)(p), (sol.u_t)(p), scale);
        }
        if let Some(bf) = &case.big_f {
            if case.mode != SourceMode::FOnly {
                let r = residual_fn(sol, &case.coeffs, case.lambda)?;
                let mut div = 0.0;
                for i in 0..dim {
                    let comp = if dim == 2 { i } else { 0 };
                    div += (bf(shift(p, i, h))[comp] - bf(shift(p, i, -h))[comp]) / (2.0 * h);
                }
                note(p.xd * div, -r(p), gscale);
            }
        }
    }
    let mut boundary_max: f64 = 0.0;
    let mut far: f64 = 0.0;
    for &p in &pts {
        boundary_max = boundary_max.max((sol.u)(Point::new(p.t, p.xp, 0.0)).abs());
        far = far.max((sol.u)(Point::new(p.t, p.xp, xd_length)).abs());
    }
    let pass = worst <= 1e-7 && boundary_max == 0.0;
    Ok(ClosureCheck {
        max_rel_error: worst,
        boundary_max,
        truncation_defect: far / scale,
        pass,
    })
}

/// One rung of a convergence study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub m: usize,
    pub dt: f64,
    pub e0: f64,
    pub e1: f64,
    pub rate0: f64,
    pub rate1: f64,
}

pub const ERROR_CSV_HEADER: &str = "M,dt,e0,e1,rate0,rate1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStudy {
    pub p: f64,
    pub rows: Vec<ErrorRow>,
    pub fitted_rate0: f64,
    pub fitted_rate1: f64,
}

impl ConvergenceStudy {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(ERROR_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{:e},{:e},{:e},{},{}", r.m, r.dt, r.e0, r.e1, r.rate0, r.rate1);
        }
        s
    }
}

/// Meshes with `M` cells, grading 2, and `dt = factor (L_d / M)^2`.
pub fn mms_ladder(dim: usize, ms: &[usize], xd_length: f64, final_time: f64, dt_factor: f64) -> Result<Vec<TensorMesh>> {
    ms.iter()
        .map(|&m| {
            let h = xd_length / m as f64;
            let steps = (final_time / (dt_factor * h * h)).ceil().max(1.0) as usize;
            build_mesh(&MeshParams {
                dim,
                xd_length,
                xd_cells: m,
                grading_exponent: 2.0,
                xprime_count: if dim == 2 { (m / 4).max(3) } else { 1 },
                xprime_length: std::f64::consts::TAU,
                final_time,
                time_count: steps,
            })
        })
        .collect()
}

/// Operators of a case on one mesh. The exact trace on `x_d = L_d` is
/// imposed through the far-boundary couplings.
struct CaseOperators {
    mass: SparseOperator,
    mass_far: SparseOperator,
    frozen: Option<(SparseOperator, SparseOperator)>,
}

fn stiffness_pair(mesh: &TensorMesh, coeffs: &CoefficientField, lambda: f64, level: usize) -> Result<(SparseOperator, SparseOperator)> {
    let samples = sample_level(coeffs, mesh, level)?;
    Ok((
        stiffness_columns(mesh, &samples, lambda, Columns::Interior),
        stiffness_columns(mesh, &samples, lambda, Columns::FarBoundary),
    ))
}

fn case_operators(mesh: &TensorMesh, case: &ManufacturedCase) -> Result<CaseOperators> {
    let co = &case.coeffs;
    let a0 = |xd: f64| co.a0(Point::new(0.0, 0.0, xd));
    Ok(CaseOperators {
        mass: assemble_weighted_mass(mesh, &a0)?,
        mass_far: far_boundary_mass(mesh, &a0),
        frozen: if co.is_time_dependent() {
            None
        } else {
            Some(stiffness_pair(mesh, co, case.lambda, 1)?)
        },
    })
}

fn far_trace(mesh: &TensorMesh, u: &ScalarFn, t: f64) -> Vec<f64> {
    (0..mesh.xprime_cells())
        .map(|k| u(Point::new(t, mesh.xprime_node(k), mesh.xd_length())))
        .collect()
}

/// Theta-scheme solve of a manufactured case with the exact trace on
/// `x_d = L_d`; `observe(n, u_n)` receives full nodal fields.
pub fn solve_case_with<O>(mesh: &Arc<TensorMesh>, case: &ManufacturedCase, mut observe: O) -> Result<()>
where
    O: FnMut(usize, &DiscreteField),
{
    let sources = synthesize_sources(case)?;
    let ops = case_operators(mesh, case)?;
    let dt = mesh.time_step;
    let lambda = case.lambda;
    let schedule = match &ops.frozen {
        Some((k, _)) => StiffnessSchedule::Frozen(k.clone()),
        None => {
            let (m2, co) = (mesh.clone(), case.coeffs.clone());
            StiffnessSchedule::PerSlab(Arc::new(move |n| Ok(stiffness_pair(&m2, &co, lambda, n)?.0)))
        }
    };
    let u = case.solution.u.clone();
    let u_t = case.solution.u_t.clone();
    let implicit = case.theta == 1.0;
    let loads = |n: usize| -> Result<Vec<f64>> {
        let t = mesh.time_level(n);
        let mut b = assemble_load(mesh, &sources, lambda, t)?.values;
        let g = far_trace(mesh, &u, t);
        let kb = match &ops.frozen {
            Some((_, kb)) => kb.clone(),
            None => stiffness_pair(mesh, &case.coeffs, lambda, n)?.1,
        };
        let kg = kb.matvec(&g);
        let dg: Vec<f64> = if implicit {
            let gp = far_trace(mesh, &u, mesh.time_level(n.saturating_sub(1)));
            g.iter().zip(&gp).map(|(a, b)| (a - b) / dt).collect()
        } else {
            far_trace(mesh, &u_t, t)
        };
        let mg = ops.mass_far.matvec(&dg);
        for i in 0..b.len() {
            b[i] -= kg[i] + mg[i];
        }
        Ok(b)
    };
    let cfg = TimeStepperConfig::for_mesh(mesh).with_tol(1e-12).with_theta(case.theta);
    let u0 = DiscreteField::from_fn(mesh, |xp, xd| u(Point::new(0.0, xp, xd))).interior(mesh);
    march_with(&ops.mass, &schedule, loads, &cfg, &u0, mesh.time_count, |n, ui| {
        let mut field = DiscreteField::from_interior(mesh, ui);
        let g = far_trace(mesh, &u, mesh.time_level(n));
        for (k, gk) in g.iter().enumerate() {
            field.values[mesh.node(k, mesh.xd_cells())] = *gk;
        }
        observe(n, &field);
    })
}

/// Stored solution of a manufactured case.
pub fn solve_case(mesh: &Arc<TensorMesh>, case: &ManufacturedCase) -> Result<SpaceTimeSolution> {
    let mut levels = vec![DiscreteField::from_fn_open(mesh, |xp, xd| (case.solution.u)(Point::new(0.0, xp, xd)))];
    solve_case_with(mesh, case, |_, f| levels.push(f.clone()))?;
    Ok(SpaceTimeSolution {
        mesh: mesh.clone(),
        levels,
        lambda: case.lambda,
        config: TimeStepperConfig::for_mesh(mesh),
    })
}

/// `(int |u_h - u|^p x_d^{-p/2}, int |D u_h - D u|^p)` at time `t`.
pub fn level_errors(mesh: &TensorMesh, field: &DiscreteField, sol: &AnalyticSolution, t: f64, p: f64) -> (f64, f64) {
    let two_d = mesh.dim == 2;
    let hp = mesh.xprime_width();
    let xi_pts: Vec<(f64, f64)> = if two_d {
        GAUSS8_NODES.iter().cloned().zip(GAUSS8_WEIGHTS.iter().cloned()).collect()
    } else {
        vec![(0.0, 1.0)]
    };
    let meas = if two_d { hp } else { 1.0 };
    let (mut e0, mut e1) = (0.0, 0.0);
    for k in 0..mesh.xprime_cells() {
        let k1 = if two_d { mesh.xprime_next(k) } else { k };
        for j in 0..mesh.xd_cells() {
            let h = mesh.xd_width(j);
            let x0 = mesh.xd_nodes[j];
            let (u00, u01, u10, u11) = (field.at(mesh, k, j), field.at(mesh, k, j + 1), field.at(mesh, k1, j), field.at(mesh, k1, j + 1));
            for &(xi, wx) in &xi_pts {
                let lo = (1.0 - xi) * u00 + xi * u10;
                let hi = (1.0 - xi) * u01 + xi * u11;
                let xp = mesh.xprime_node(k) + xi * hp;
                for (s, ws) in GAUSS8_NODES.iter().zip(GAUSS8_WEIGHTS.iter()) {
                    let x = x0 + h * s;
                    let pt = Point::new(t, if two_d { xp } else { 0.0 }, x);
                    let uh = (1.0 - s) * lo + s * hi;
                    let w = wx * ws * h * meas;
                    e0 += w * (uh - (sol.u)(pt)).abs().powf(p) * x.powf(-p / 2.0);
                    let g = (sol.grad)(pt);
                    let gd = (hi - lo) / h;
                    let err = if two_d {
                        let gp = ((1.0 - s) * (u10 - u00) + s * (u11 - u01)) / hp;
                        (gp - g[0]).hypot(gd - g[1])
                    } else {
                        gd - g[0]
                    };
                    e1 += w * err.abs().powf(p);
                }
            }
        }
    }
    (e0, e1)
}

/// Space-time errors `(e0, e1)` of one rung over all levels.
pub fn case_errors(mesh: &Arc<TensorMesh>, case: &ManufacturedCase, p: f64) -> Result<(f64, f64)> {
    let (mut e0, mut e1) = (0.0, 0.0);
    let dt = mesh.time_step;
    solve_case_with(mesh, case, |n, f| {
        let (a, b) = level_errors(mesh, f, &case.solution, mesh.time_level(n), p);
        e0 += dt * a;
        e1 += dt * b;
    })?;
    Ok((e0.powf(1.0 / p), e1.powf(1.0 / p)))
}

fn fitted_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Errors on a ladder of at least three meshes, rungs solved concurrently.
pub fn convergence_study(case: &ManufacturedCase, ladder: &[TensorMesh], p: f64) -> Result<ConvergenceStudy> {
    if ladder.len() < 3 {
        return Err(LabError::InvalidParameter(format!("ladder has {} rungs, need 3", ladder.len())));
    }
    let errors: Vec<(f64, f64)> = ladder
        .par_iter()
        .map(|m| case_errors(&Arc::new(m.clone()), case, p))
        .collect::<Result<_>>()?;
    let hs: Vec<f64> = ladder.iter().map(|m| m.xd_length() / m.xd_cells() as f64).collect();
    let mut rows = Vec::with_capacity(ladder.len());
    for (i, m) in ladder.iter().enumerate() {
        let (e0, e1) = errors[i];
        let (rate0, rate1) = if i == 0 {
            (f64::NAN, f64::NAN)
        } else {
            let r = (hs[i - 1] / hs[i]).ln();
            ((errors[i - 1].0 / e0).ln() / r, (errors[i - 1].1 / e1).ln() / r)
        };
        rows.push(ErrorRow {
            m: m.xd_cells(),
            dt: m.time_step,
            e0,
            e1,
            rate0,
            rate1,
        });
    }
    let lh: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let l0: Vec<f64> = errors.iter().map(|e| e.0.ln()).collect();
    let l1: Vec<f64> = errors.iter().map(|e| e.1.ln()).collect();
    Ok(ConvergenceStudy {
        p,
        rows,
        fitted_rate0: fitted_slope(&lh, &l0),
        fitted_rate1: fitted_slope(&lh, &l1),
    })
}

/// Steady solve `K u = b(t)` of a case with the time derivative supplied as
/// data; returns the spatial errors `(e0, e1)`.
pub fn steady_case_errors(mesh: &TensorMesh, case: &ManufacturedCase, t: f64, p: f64) -> Result<(f64, f64)> {
    if case.coeffs.is_time_dependent() {
        return Err(LabError::InvalidCase("steady solves need time-independent coefficients".into()));
    }
    let sources = synthesize_sources(case)?;
    let (k, kb) = stiffness_pair(mesh, &case.coeffs, case.lambda, 1)?;
    let ops = case_operators(mesh, case)?;
    let mut b = assemble_load(mesh, &sources, case.lambda, t)?.values;
    let g = far_trace(mesh, &case.solution.u, t);
    let gt = far_trace(mesh, &case.solution.u_t, t);
    let ut = DiscreteField::from_fn(mesh, |xp, xd| (case.solution.u_t)(Point::new(t, xp, xd))).interior(mesh);
    let (kg, mg, mu) = (kb.matvec(&g), ops.mass_far.matvec(&gt), ops.mass.matvec(&ut));
    for i in 0..b.len() {
        b[i] -= kg[i] + mg[i] + mu[i];
    }
    let u = crate::solver::linear_solve(&k, &b, 1e-13)?;
    let mut field = DiscreteField::from_interior(mesh, &u);
    for (kk, gk) in g.iter().enumerate() {
        field.values[mesh.node(kk, mesh.xd_cells())] = *gk;
    }
    let (e0, e1) = level_errors(mesh, &field, &case.solution, t, p);
    Ok((e0.powf(1.0 / p), e1.powf(1.0 / p)))
}

/// Scaled residual `max_i |r_i| / int phi_i` of the nodal samples of `u`
/// in the semi-discrete system at time `t`.
pub fn residual_consistency(mesh: &TensorMesh, case: &ManufacturedCase, t: f64) -> Result<f64> {
    let sources = synthesize_sources(case)?;
    let ops = case_operators(mesh, case)?;
    let (k, kb) = match ops.frozen.clone() {
        Some(pair) => pair,
        None => stiffness_pair(mesh, &case.coeffs, case.lambda, 1)?,
    };
    let sol = &case.solution;
    let u = DiscreteField::from_fn(mesh, |xp, xd| (sol.u)(Point::new(t, xp, xd))).interior(mesh);
    let ut = DiscreteField::from_fn(mesh, |xp, xd| (sol.u_t)(Point::new(t, xp, xd))).interior(mesh);
    let g = far_trace(mesh, &sol.u, t);
    let gt = far_trace(mesh, &sol.u_t, t);
    let b = assemble_load(mesh, &sources, case.lambda, t)?.values;
    let (mu, mg, ku, kg) = (ops.mass.matvec(&ut), ops.mass_far.matvec(&gt), k.matvec(&u), kb.matvec(&g));
    let tang = if mesh.dim == 2 { mesh.xprime_width() } else { 1.0 };
    let mut worst: f64 = 0.0;
    for kk in 0..mesh.xprime_cells() {
        for j in 1..mesh.xd_cells() {
            let i = mesh.dof(kk, j).unwrap();
            let r = mu[i] + mg[i] + ku[i] + kg[i] - b[i];
            let measure = 0.5 * (mesh.xd_width(j - 1) + mesh.xd_width(j)) * tang;
            worst = worst.max(r.abs() / measure);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{generate_family, CoefficientKind, FamilySpec};
    use approx::assert_relative_eq;

    #[test]
    fn default_source_matches_hand_formula() {
        let case = ManufacturedCase::default_case(1, 1.0, SourceMode::FOnly);
        let s = synthesize_sources(&case).unwrap();
        assert!(s.big_f.is_none());
        let f = s.f.unwrap();
        for &(t, x) in &[(0.3f64, 0.1f64), (1.1, 1.7), (2.0, 3.5)] {
            let e = x * (-x as f64).exp();
            let expect = e * t.cos() + e * t.sin() - x * (x - 2.0) * (-x as f64).exp() * t.sin();
            assert_relative_eq!(f(Point::new(t, 0.0, x)), expect, max_relative = 1e-14);
        }
    }

    #[test]
    fn default_source_agrees_with_finite_differences() {
        // Independent oracle: f from central differences of u alone.
        let case = ManufacturedCase::default_case(2, 1.0, SourceMode::FOnly);
        let f = synthesize_sources(&case).unwrap().f.unwrap();
        let u = case.solution.u.clone();
        let h = 1e-4;
        for &(t, xp, x) in &[(0.3f64, 0.4f64, 0.2f64), (1.0, 2.0, 1.5), (0.7, 5.0, 2.5)] {
            let at = |dt: f64, dp: f64, dx: f64| u(Point::new(t + dt, xp + dp, x + dx));
            let ut = (at(h, 0.0, 0.0) - at(-h, 0.0, 0.0)) / (2.0 * h);
            let uxx = (at(0.0, 0.0, h) - 2.0 * at(0.0, 0.0, 0.0) + at(0.0, 0.0, -h)) / (h * h);
            let upp = (at(0.0, h, 0.0) - 2.0 * at(0.0, 0.0, 0.0) + at(0.0, -h, 0.0)) / (h * h);
            let fd = ut + at(0.0, 0.0, 0.0) - x * (uxx + upp);
            let exact = f(Point::new(t, xp, x));
            assert!((exact - fd).abs() < 1e-6, "{exact} vs {fd}");
            // The D_11 term contributes + x_d * x_d e^{-x_d} cos(x_1) sin t.
            let without = ut + at(0.0, 0.0, 0.0) - x * uxx;
            let extra = x * x * (-x as f64).exp() * xp.cos() * t.sin();
            assert_relative_eq!(exact - without, extra, max_relative = 1e-5, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_solution_gives_zero_sources() {
        let case = ManufacturedCase::new(AnalyticSolution::zero(1), CoefficientField::identity(1, 0.5), 1.0, SourceMode::FOnly)
            .with_big_f(Arc::new(|_| [0.0, 0.0]));
        let s = synthesize_sources(&case).unwrap();
        assert_eq!((s.f.unwrap())(Point::new(0.5, 0.0, 1.0)), 0.0);
        let case = ManufacturedCase { mode: SourceMode::BigFOnly, ..case };
        let s = synthesize_sources(&case).unwrap();
        assert_eq!((s.big_f.unwrap())(Point::new(0.5, 0.0, 1.0)), [0.0, 0.0]);
    }

    #[test]
    fn synthesis_errors() {
        let case = ManufacturedCase::default_case(1, 0.0, SourceMode::FOnly);
        assert!(synthesize_sources(&case).is_err());
        let mut case = ManufacturedCase::default_case(1, 1.0, SourceMode::BigFOnly);
        case.big_f = None;
        assert!(synthesize_sources(&case).is_err());
        let user = CoefficientField::user(
            1,
            0.5,
            Arc::new(|p: Point| [[1.0 + 0.1 * p.xd.sin(), 0.0], [0.0, 1.0]]),
            Arc::new(|_| 1.0),
            Arc::new(|_| 1.0),
            false,
        );
        let case = ManufacturedCase::new(AnalyticSolution::default_case(1), user, 1.0, SourceMode::FOnly);
        assert!(matches!(synthesize_sources(&case), Err(LabError::InvalidCase(_))));
    }

    #[test]
    fn closures_pass_finite_difference_check() {
        for dim in [1, 2] {
            for mode in [SourceMode::FOnly, SourceMode::BigFOnly, SourceMode::Mixed(0.3)] {
                let case = ManufacturedCase::default_case(dim, 2.0, mode);
                let c = check_closures(&case, 4.0, std::f64::consts::TAU, 1.0).unwrap();
                assert!(c.pass, "{dim} {mode:?} {c:?}");
            }
        }
        let mut broken = ManufacturedCase::default_case(1, 1.0, SourceMode::FOnly);
        broken.solution.u_t = Arc::new(|p: Point| p.xd * (-p.xd).exp() * p.t.sin());
        assert!(!check_closures(&broken, 4.0, 1.0, 1.0).unwrap().pass);
    }

    #[test]
    fn default_case_truncation_defect_is_reported() {
        let case = ManufacturedCase::default_case(1, 1.0, SourceMode::FOnly);
        let c = check_closures(&case, 4.0, 1.0, 1.0).unwrap();
        assert!(c.truncation_defect > 1e-6);
        let c = check_closures(&case, 24.0, 1.0, 1.0).unwrap();
        assert!(c.truncation_defect < 1e-6);
    }

    #[test]
    fn sources_are_linear_in_u() {
        let coeffs = generate_family(&FamilySpec::new(4, CoefficientKind::XdOnly, 2, 0.5, 0.2)).unwrap();
        let u1 = AnalyticSolution::default_case(2);
        let u2 = AnalyticSolution::linear(2);
        let f = |u: AnalyticSolution| {
            synthesize_sources(&ManufacturedCase::new(u, coeffs.clone(), 3.0, SourceMode::FOnly))
                .unwrap()
                .f
                .unwrap()
        };
        let (a, b, c) = (f(u1.clone()), f(u2.clone()), f(u1.sum(&u2)));
        for &(t, xp, x) in &[(0.2, 0.3, 0.5), (0.9, 4.0, 2.0)] {
            let p = Point::new(t, xp, x);
            let expect = a(p) + b(p);
            assert!((c(p) - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn linear_steady_case_is_reproduced() {
        let mesh = build_mesh(&MeshParams::default()).unwrap();
        let case = ManufacturedCase::new(AnalyticSolution::linear(1), CoefficientField::identity(1, 0.5), 0.0, SourceMode::BigFOnly)
            .with_big_f(Arc::new(|_| [1.0, 0.0]));
        let (e0, e1) = steady_case_errors(&mesh, &case, 0.0, 2.0).unwrap();
        assert!(e0 <= 1e-8 && e1 <= 1e-8, "{e0} {e1}");
    }

    #[test]
    fn big_f_and_f_give_the_same_solution() {
        let mesh = Arc::new(mms_ladder(1, &[32], 4.0, 0.5, 4.0).unwrap().remove(0));
        let a = case_errors(&mesh, &ManufacturedCase::default_case(1, 1.0, SourceMode::FOnly), 2.0).unwrap();
        let b = case_errors(&mesh, &ManufacturedCase::default_case(1, 1.0, SourceMode::BigFOnly), 2.0).unwrap();
        assert!(a.0 < 1e-2 && b.0 < 1e-2, "{a:?} {b:?}");
        assert!((a.1 - b.1).abs() < 0.5 * a.1.max(b.1));
    }

    fn halving_change(case: &ManufacturedCase, dt_factor: f64) -> f64 {
        let base = mms_ladder(1, &[64], 4.0, 1.0, dt_factor).unwrap().remove(0);
        let half = base.refined(1, 2).unwrap();
        let (a, _) = case_errors(&Arc::new(base), case, 2.0).unwrap();
        let (b, _) = case_errors(&Arc::new(half), case, 2.0).unwrap();
        (a - b).abs() / a
    }

    #[test]
    fn time_step_halving_changes_error_little() {
        let euler = ManufacturedCase::default_case(1, 1.0, SourceMode::FOnly);
        assert!(halving_change(&euler, 1.0 / 16.0) < 0.05);
        let cn = euler.clone().with_theta(0.5);
        assert!(halving_change(&cn, 1.0) < 0.05);
    }

    #[test]
    fn crank_nicolson_rates() {
        let case = ManufacturedCase::default_case(1, 1.0, SourceMode::FOnly).with_theta(0.5);
        let ladder = mms_ladder(1, &[32, 64, 128], 4.0, 0.5, 1.0).unwrap();
        let study = convergence_study(&case, &ladder, 2.0).unwrap();
        assert!(study.fitted_rate0 >= 1.8 && study.fitted_rate1 >= 0.9, "{study:?}");
    }

    #[test]
    fn residual_of_exact_samples_vanishes_with_h() {
        let case = ManufacturedCase::default_case(1, 1.0, SourceMode::FOnly);
        let rs: Vec<f64> = [32, 64, 128, 256]
            .iter()
            .map(|&m| {
                let mesh = mms_ladder(1, &[m], 4.0, 1.0, 1.0).unwrap().remove(0);
                residual_consistency(&mesh, &case, 0.5).unwrap()
            })
            .collect();
        for w in rs.windows(2) {
            assert!((w[0] / w[1]).log2() >= 1.0, "{rs:?}");
        }
    }

    #[test]
    fn two_dimensional_errors_decrease() {
        let case = ManufacturedCase::default_case(2, 1.0, SourceMode::FOnly);
        let ladder = mms_ladder(2, &[16, 32, 64], 4.0, 0.25, 4.0).unwrap();
        let study = convergence_study(&case, &ladder, 2.0).unwrap();
        assert!(study.rows.windows(2).all(|w| w[1].e0 < w[0].e0 && w[1].e1 < w[0].e1), "{study:?}");
        let csv = study.to_csv();
        assert!(csv.starts_with("M,dt,e0,e1,rate0,rate1\n16,"));
    }
}
