//! Linear solves and theta-scheme time marching for `M u' + K u = b`.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::mesh::TensorMesh;
use crate::sparse::{dot, norm2, SparseOperator};

/// Factored tridiagonal system (Thomas algorithm).
#[derive(Clone, Debug)]
pub struct Tridiagonal {
    lower: Vec<f64>,
    upper_mod: Vec<f64>,
    denom: Vec<f64>,
}

impl Tridiagonal {
    pub fn factor(a: &SparseOperator) -> Result<Self> {
        let (lower, diag, upper) = a.tridiagonal_bands();
        let n = diag.len();
        let mut upper_mod = vec![0.0; n.saturating_sub(1)];
        let mut denom = vec![0.0; n];
        for i in 0..n {
            let l = if i > 0 { lower[i - 1] } else { 0.0 };
            let prev = if i > 0 { upper_mod[i - 1] } else { 0.0 };
            let d = diag[i] - l * prev;
            let scale = diag[i].abs() + l.abs() + if i + 1 < n { upper[i].abs() } else { 0.0 };
            if !d.is_finite() || d.abs() <= 1e-14 * scale {
                return Err(LabError::SingularPivot(i));
            }
            denom[i] = d;
            if i + 1 < n {
                upper_mod[i] = upper[i] / d;
            }
        }
        Ok(Self {
            lower,
            upper_mod,
            denom,
        })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.denom.len();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let carry = if i > 0 { self.lower[i - 1] * y[i - 1] } else { 0.0 };
            y[i] = (b[i] - carry) / self.denom[i];
        }
        for i in (0..n.saturating_sub(1)).rev() {
            y[i] -= self.upper_mod[i] * y[i + 1];
        }
        y
    }
}

const RESTART: usize = 30;

/// Restarted GMRES with right Jacobi preconditioning. Returns the iterate,
/// the iteration count and the final relative residual.
pub fn gmres(
    a: &SparseOperator,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, usize, f64)> {
    let n = a.rows();
    if b.len() != n {
        return Err(LabError::DimensionMismatch {
            expected: n,
            got: b.len(),
        });
    }
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok((vec![0.0; n], 0, 0.0));
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .into_iter()
        .map(|d| if d != 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut x = match x0 {
        Some(x0) if x0.len() == n => x0.to_vec(),
        _ => vec![0.0; n],
    };
    let mut total = 0;
    let mut ax = vec![0.0; n];
    loop {
        a.matvec_into(&x, &mut ax);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let beta = norm2(&r);
        let rel = beta / bnorm;
        if rel <= tol {
            return Ok((x, total, rel));
        }
        if total >= max_iters {
            return Err(LabError::NoConvergence {
                iterations: total,
                residual: rel,
            });
        }
        let m = RESTART.min(max_iters - total).max(1);
        let mut v: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
        v.push(r.iter().map(|ri| ri / beta).collect());
        let mut h = vec![vec![0.0; m]; m + 1];
        let mut cs = vec![0.0; m];
        let mut sn = vec![0.0; m];
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut used = 0;
        let mut z = vec![0.0; n];
        let mut w = vec![0.0; n];
        for jj in 0..m {
            for i in 0..n {
                z[i] = inv_diag[i] * v[jj][i];
            }
            a.matvec_into(&z, &mut w);
            for i in 0..=jj {
                let hij = dot(&w, &v[i]);
                h[i][jj] = hij;
                for (wk, vk) in w.iter_mut().zip(&v[i]) {
                    *wk -= hij * vk;
                }
            }
            let hn = norm2(&w);
            h[jj + 1][jj] = hn;
            for i in 0..jj {
                let t = cs[i] * h[i][jj] + sn[i] * h[i + 1][jj];
                h[i + 1][jj] = -sn[i] * h[i][jj] + cs[i] * h[i + 1][jj];
                h[i][jj] = t;
            }
            let denom = h[jj][jj].hypot(h[jj + 1][jj]);
            if denom == 0.0 {
                used = jj;
                break;
            }
            cs[jj] = h[jj][jj] / denom;
            sn[jj] = h[jj + 1][jj] / denom;
            h[jj][jj] = denom;
            h[jj + 1][jj] = 0.0;
            g[jj + 1] = -sn[jj] * g[jj];
            g[jj] *= cs[jj];
            used = jj + 1;
            total += 1;
            if g[jj + 1].abs() / bnorm <= tol * 0.5 || hn == 0.0 {
                break;
            }
            v.push(w.iter().map(|wk| wk / hn).collect());
        }
        if used == 0 {
            return Err(LabError::NoConvergence {
                iterations: total,
                residual: rel,
            });
        }
        let mut y = vec![0.0; used];
        for i in (0..used).rev() {
            let mut s = g[i];
            for k in i + 1..used {
                s -= h[i][k] * y[k];
            }
            y[i] = s / h[i][i];
        }
        for i in 0..n {
            let mut acc = 0.0;
            for (k, yk) in y.iter().enumerate() {
                acc += yk * v[k][i];
            }
            x[i] += inv_diag[i] * acc;
        }
    }
}

/// A system matrix prepared for repeated solves.
#[derive(Clone, Debug)]
pub enum PreparedSystem {
    Banded(Tridiagonal, SparseOperator),
    Krylov(SparseOperator),
}

impl PreparedSystem {
    pub fn new(a: &SparseOperator) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(LabError::DimensionMismatch {
                expected: a.rows(),
                got: a.cols(),
            });
        }
        if a.is_tridiagonal() {
            Ok(Self::Banded(Tridiagonal::factor(a)?, a.clone()))
        } else {
            Ok(Self::Krylov(a.clone()))
        }
    }

    pub fn operator(&self) -> &SparseOperator {
        match self {
            Self::Banded(_, a) | Self::Krylov(a) => a,
        }
    }

    pub fn solve(&self, b: &[f64], guess: Option<&[f64]>, tol: f64, max_iters: usize) -> Result<Vec<f64>> {
        match self {
            Self::Banded(t, _) => {
                let x = t.solve(b);
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(LabError::NonFinite("banded solve".into()));
                }
                Ok(x)
            }
            Self::Krylov(a) => gmres(a, b, guess, tol, max_iters).map(|(x, _, _)| x),
        }
    }
}

/// Solves `A v = b`: banded elimination for tridiagonal `A`, GMRES otherwise.
pub fn linear_solve(a: &SparseOperator, b: &[f64], tol: f64) -> Result<Vec<f64>> {
    PreparedSystem::new(a)?.solve(b, None, tol, 10_000)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeStepperConfig {
    pub theta: f64,
    pub time_step: f64,
    pub linear_tol: f64,
    pub max_krylov_iters: usize,
}

impl TimeStepperConfig {
    pub fn for_mesh(mesh: &TensorMesh) -> Self {
        Self {
            theta: 1.0,
            time_step: mesh.time_step,
            linear_tol: 1e-10,
            max_krylov_iters: 5000,
        }
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.linear_tol = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.theta) {
            return Err(LabError::InvalidParameter(format!("theta = {} outside [1/2, 1]", self.theta)));
        }
        if !(self.time_step > 0.0 && self.time_step.is_finite()) {
            return Err(LabError::InvalidParameter(format!("time step {}", self.time_step)));
        }
        if !(self.linear_tol > 0.0) {
            return Err(LabError::InvalidParameter(format!("linear tolerance {}", self.linear_tol)));
        }
        Ok(())
    }
}

pub type SlabStiffness = Arc<dyn Fn(usize) -> Result<SparseOperator> + Send + Sync>;

/// Stiffness per slab: one operator for time-independent coefficients,
/// otherwise a builder indexed by slab (1-based).
#[derive(Clone)]
pub enum StiffnessSchedule {
    Frozen(SparseOperator),
    PerSlab(SlabStiffness),
}

impl StiffnessSchedule {
    pub fn at(&self, level: usize) -> Result<SparseOperator> {
        match self {
            Self::Frozen(k) => Ok(k.clone()),
            Self::PerSlab(f) => f(level),
        }
    }

    fn is_frozen(&self) -> bool {
        matches!(self, Self::Frozen(_))
    }
}

/// Nodal values on every spatial node; the `x_d = 0` and `x_d = L_d` rows are zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteField {
    pub values: Vec<f64>,
}

impl DiscreteField {
    pub fn zeros(mesh: &TensorMesh) -> Self {
        Self {
            values: vec![0.0; mesh.spatial_node_count()],
        }
    }

    pub fn from_interior(mesh: &TensorMesh, interior: &[f64]) -> Self {
        let mut out = Self::zeros(mesh);
        for k in 0..mesh.xprime_cells() {
            for j in 1..mesh.xd_cells() {
                out.values[mesh.node(k, j)] = interior[mesh.dof(k, j).unwrap()];
            }
        }
        out
    }

    /// Samples `g(x', x_d)` at nodes, pinning both x_d ends to zero.
    pub fn from_fn(mesh: &TensorMesh, g: impl Fn(f64, f64) -> f64) -> Self {
        let mut out = Self::zeros(mesh);
        for k in 0..mesh.xprime_cells() {
            for j in 1..mesh.xd_cells() {
                out.values[mesh.node(k, j)] = g(mesh.xprime_node(k), mesh.xd_nodes[j]);
            }
        }
        out
    }

    /// Samples at all nodes except `x_d = 0`, keeping the value at `x_d = L_d`.
    pub fn from_fn_open(mesh: &TensorMesh, g: impl Fn(f64, f64) -> f64) -> Self {
        let mut out = Self::zeros(mesh);
        for k in 0..mesh.xprime_cells() {
            for j in 1..mesh.xd_nodes.len() {
                out.values[mesh.node(k, j)] = g(mesh.xprime_node(k), mesh.xd_nodes[j]);
            }
        }
        out
    }

    pub fn interior(&self, mesh: &TensorMesh) -> Vec<f64> {
        let mut out = vec![0.0; mesh.interior_dof_count()];
        for k in 0..mesh.xprime_cells() {
            for j in 1..mesh.xd_cells() {
                out[mesh.dof(k, j).unwrap()] = self.values[mesh.node(k, j)];
            }
        }
        out
    }

    pub fn at(&self, mesh: &TensorMesh, k: usize, j: usize) -> f64 {
        self.values[mesh.node(k, j)]
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| c * v).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Levels `0..=N` of a discrete solution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpaceTimeSolution {
    pub mesh: Arc<TensorMesh>,
    pub levels: Vec<DiscreteField>,
    pub lambda: f64,
    pub config: TimeStepperConfig,
}

impl SpaceTimeSolution {
    pub fn time(&self, n: usize) -> f64 {
        self.mesh.time_level(n)
    }

    pub fn last(&self) -> &DiscreteField {
        self.levels.last().unwrap()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            levels: self.levels.iter().map(|l| l.scaled(c)).collect(),
            ..self.clone()
        }
    }

    /// Rows `t,xprime,xd,u` for every stored level.
    pub fn to_csv(&self) -> String {
        let mesh = &self.mesh;
        let mut s = String::from(SOLUTION_CSV_HEADER);
        s.push('\n');
        for (n, level) in self.levels.iter().enumerate() {
            let t = self.time(n);
            for k in 0..mesh.xprime_cells() {
                for (j, xd) in mesh.xd_nodes.iter().enumerate() {
                    let _ = writeln!(s, "{},{},{},{}", t, mesh.xprime_node(k), xd, level.at(mesh, k, j));
                }
            }
        }
        s
    }

    /// Little-endian f64 array in (level, x', x_d) order plus its shape sidecar.
    pub fn to_binary(&self) -> (Vec<u8>, serde_json::Value) {
        let mesh = &self.mesh;
        let mut bytes = Vec::with_capacity(self.levels.len() * mesh.spatial_node_count() * 8);
        for level in &self.levels {
            for v in &level.values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let shape = serde_json::json!({
            "dtype": "float64",
            "byte_order": "little",
            "order": ["level", "xprime", "xd"],
            "shape": [self.levels.len(), mesh.xprime_cells(), mesh.xd_nodes.len()],
            "time_step": mesh.time_step,
            "lambda": self.lambda,
        });
        (bytes, shape)
    }
}

pub const SOLUTION_CSV_HEADER: &str = "t,xprime,xd,u";

fn axpy_system(m: &SparseOperator, k: &SparseOperator, c: f64) -> Result<SparseOperator> {
    SparseOperator::linear_combination(1.0, m, c, k)
}

fn step_err(level: usize) -> impl FnOnce(LabError) -> LabError {
    move |e| LabError::TimeStep {
        level,
        source: Box::new(e),
    }
}

/// Theta-scheme march from `u0` over all mesh slabs, streaming each new
/// interior level to `observe(n, u_n)`.
pub fn march_with<L, O>(
    mass: &SparseOperator,
    stiffness: &StiffnessSchedule,
    loads: L,
    config: &TimeStepperConfig,
    u0: &[f64],
    levels: usize,
    mut observe: O,
) -> Result<()>
where
    L: Fn(usize) -> Result<Vec<f64>>,
    O: FnMut(usize, &[f64]),
{
    config.validate()?;
    let dt = config.time_step;
    let theta = config.theta;
    let explicit = 1.0 - theta;
    let mut u = u0.to_vec();
    let mut prev_load = if explicit > 0.0 { Some(loads(0)?) } else { None };
    let mut cached: Option<(PreparedSystem, SparseOperator)> = None;
    for n in 1..=levels {
        if cached.is_none() || !stiffness.is_frozen() {
            let kn = stiffness.at(n).map_err(step_err(n))?;
            let lhs = axpy_system(mass, &kn, theta * dt)?;
            let rhs_op = if explicit > 0.0 {
                axpy_system(mass, &kn, -explicit * dt)?
            } else {
                mass.clone()
            };
            cached = Some((PreparedSystem::new(&lhs).map_err(step_err(n))?, rhs_op));
        }
        let (system, rhs_op) = cached.as_ref().unwrap();
        let bn = loads(n).map_err(step_err(n))?;
        let mut rhs = rhs_op.matvec(&u);
        for i in 0..rhs.len() {
            let mut src = theta * bn[i];
            if let Some(bp) = &prev_load {
                src += explicit * bp[i];
            }
            rhs[i] += dt * src;
        }
        u = system
            .solve(&rhs, Some(&u), config.linear_tol, config.max_krylov_iters)
            .map_err(step_err(n))?;
        observe(n, &u);
        if explicit > 0.0 {
            prev_load = Some(bn);
        }
    }
    Ok(())
}

/// Theta-scheme march storing every level.
pub fn march<L>(
    mesh: &Arc<TensorMesh>,
    mass: &SparseOperator,
    stiffness: &StiffnessSchedule,
    loads: L,
    config: &TimeStepperConfig,
    u0: Option<&[f64]>,
    lambda: f64,
) -> Result<SpaceTimeSolution>
where
    L: Fn(usize) -> Result<Vec<f64>>,
{
    let n = mesh.interior_dof_count();
    let zero = vec![0.0; n];
    let u0 = u0.unwrap_or(&zero);
    if u0.len() != n {
        return Err(LabError::DimensionMismatch {
            expected: n,
            got: u0.len(),
        });
    }
    let mut levels = vec![DiscreteField::from_interior(mesh, u0)];
    march_with(mass, stiffness, loads, config, u0, mesh.time_count, |_, u| {
        levels.push(DiscreteField::from_interior(mesh, u))
    })?;
    Ok(SpaceTimeSolution {
        mesh: mesh.clone(),
        levels,
        lambda,
        config: config.clone(),
    })
}

/// Exact transpose of the theta-scheme block system, marched backward from
/// `v^{N+1} = 0`:
/// `(M + theta dt K_n)^T v^n = (M - (1 - theta) dt K_{n+1})^T v^{n+1} + dt g^n`.
///
/// With `u^0 = 0` the primal and adjoint satisfy
/// `sum_n dt <g^n, u^n> = sum_n <v^n, R_n>`, `R_n` being the primal right-hand
/// source `dt (theta b^n + (1 - theta) b^{n-1})`. Level 0 of the result is zero.
pub fn adjoint_march<L>(
    mesh: &Arc<TensorMesh>,
    mass: &SparseOperator,
    stiffness: &StiffnessSchedule,
    loads: L,
    config: &TimeStepperConfig,
    lambda: f64,
) -> Result<SpaceTimeSolution>
where
    L: Fn(usize) -> Result<Vec<f64>>,
{
    config.validate()?;
    let dt = config.time_step;
    let theta = config.theta;
    let explicit = 1.0 - theta;
    let nlev = mesh.time_count;
    let ndof = mesh.interior_dof_count();
    let mt = mass.transpose();
    let frozen_t = match stiffness {
        StiffnessSchedule::Frozen(k) => Some(k.transpose()),
        StiffnessSchedule::PerSlab(_) => None,
    };
    let kt = |n: usize| -> Result<SparseOperator> {
        match &frozen_t {
            Some(k) => Ok(k.clone()),
            None => Ok(stiffness.at(n)?.transpose()),
        }
    };
    let mut out = vec![DiscreteField::zeros(mesh); nlev + 1];
    let mut v_next = vec![0.0; ndof];
    let mut cached: Option<PreparedSystem> = None;
    for n in (1..=nlev).rev() {
        let mut rhs = if n < nlev {
            if explicit > 0.0 {
                let kn1 = kt(n + 1).map_err(step_err(n))?;
                axpy_system(&mt, &kn1, -explicit * dt)?.matvec(&v_next)
            } else {
                mt.matvec(&v_next)
            }
        } else {
            vec![0.0; ndof]
        };
        let g = loads(n).map_err(step_err(n))?;
        for i in 0..ndof {
            rhs[i] += dt * g[i];
        }
        if cached.is_none() || frozen_t.is_none() {
            let knt = kt(n).map_err(step_err(n))?;
            cached = Some(PreparedSystem::new(&axpy_system(&mt, &knt, theta * dt)?).map_err(step_err(n))?);
        }
        let v = cached
            .as_ref()
            .unwrap()
            .solve(&rhs, Some(&v_next), config.linear_tol, config.max_krylov_iters)
            .map_err(step_err(n))?;
        out[n] = DiscreteField::from_interior(mesh, &v);
        v_next = v;
    }
    Ok(SpaceTimeSolution {
        mesh: mesh.clone(),
        levels: out,
        lambda,
        config: config.clone(),
    })
}

/// Steady problem `K u = b`.
pub fn steady_solve(mesh: &TensorMesh, k: &SparseOperator, b: &[f64], tol: f64) -> Result<DiscreteField> {
    let u = linear_solve(k, b, tol)?;
    Ok(DiscreteField::from_interior(mesh, &u))
}
