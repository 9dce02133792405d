//! Coefficient data `a_ij`, `c_0`, `a_0`, seeded test families and the partial
//! mean oscillation functional.
//!
//! Direction indices run over `0..dim` with the last index the normal direction
//! `x_d`; for `dim = 1` index 0 *is* `x_d`.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::mesh::{Cylinder, TensorMesh};

pub type Mat2 = [[f64; 2]; 2];
pub type Vec2 = [f64; 2];

/// A space-time point `(t, x', x_d)`. `xp` is ignored for `dim = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub t: f64,
    pub xp: f64,
    pub xd: f64,
}

impl Point {
    pub fn new(t: f64, xp: f64, xd: f64) -> Self {
        Self { t, xp, xd }
    }
}

pub type ScalarFn = Arc<dyn Fn(Point) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(Point) -> Vec2 + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(Point) -> Mat2 + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientKind {
    Constant,
    XdOnly,
    Oscillatory,
    User,
}

impl fmt::Display for CoefficientKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CoefficientKind::Constant => "constant",
            CoefficientKind::XdOnly => "xd_only",
            CoefficientKind::Oscillatory => "oscillatory",
            CoefficientKind::User => "user",
        };
        f.write_str(s)
    }
}

#[derive(Clone)]
pub struct CoefficientField {
    pub dim: usize,
    pub nu: f64,
    pub kind: CoefficientKind,
    a: MatrixFn,
    c0: ScalarFn,
    a0: ScalarFn,
    /// `(sum_i D_i a_ij)_j`, needed to synthesise manufactured sources.
    a_divergence: Option<VectorFn>,
    time_dependent: bool,
}

impl fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientField")
            .field("dim", &self.dim)
            .field("nu", &self.nu)
            .field("kind", &self.kind)
            .field("time_dependent", &self.time_dependent)
            .finish()
    }
}

impl CoefficientField {
    /// Constant coefficients.
    pub fn constant(dim: usize, nu: f64, a: Mat2, c0: f64, a0: f64) -> Self {
        Self {
            dim,
            nu,
            kind: CoefficientKind::Constant,
            a: Arc::new(move |_| a),
            c0: Arc::new(move |_| c0),
            a0: Arc::new(move |_| a0),
            a_divergence: Some(Arc::new(|_| [0.0, 0.0])),
            time_dependent: false,
        }
    }

    /// `a = I`, `c_0 = 1`, `a_0 = 1`.
    pub fn identity(dim: usize, nu: f64) -> Self {
        Self::constant(dim, nu, [[1.0, 0.0], [0.0, 1.0]], 1.0, 1.0)
    }

    /// Coefficients depending on `x_d` only. The structure condition (the
    /// `x_d` column of `a` constant) is checked when the field is sampled.
    pub fn xd_only<A, C, Z>(dim: usize, nu: f64, a: A, c0: C, a0: Z) -> Self
    where
        A: Fn(f64) -> Mat2 + Send + Sync + 'static,
        C: Fn(f64) -> f64 + Send + Sync + 'static,
        Z: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            dim,
            nu,
            kind: CoefficientKind::XdOnly,
            a: Arc::new(move |p: Point| a(p.xd)),
            c0: Arc::new(move |p: Point| c0(p.xd)),
            a0: Arc::new(move |p: Point| a0(p.xd)),
            a_divergence: None,
            time_dependent: false,
        }
    }

    /// Arbitrary closures. `time_dependent = false` lets assembly freeze the operator.
    pub fn user(dim: usize, nu: f64, a: MatrixFn, c0: ScalarFn, a0: ScalarFn, time_dependent: bool) -> Self {
        Self {
            dim,
            nu,
            kind: CoefficientKind::User,
            a,
            c0,
            a0,
            a_divergence: None,
            time_dependent,
        }
    }

    pub fn with_divergence(mut self, div: VectorFn) -> Self {
        self.a_divergence = Some(div);
        self
    }

    pub fn with_kind(mut self, kind: CoefficientKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn a(&self, p: Point) -> Mat2 {
        (self.a)(p)
    }

    pub fn c0(&self, p: Point) -> f64 {
        (self.c0)(p)
    }

    pub fn a0(&self, p: Point) -> f64 {
        (self.a0)(p)
    }

    pub fn divergence(&self, p: Point) -> Option<Vec2> {
        self.a_divergence.as_ref().map(|f| f(p))
    }

    pub fn has_divergence(&self) -> bool {
        self.a_divergence.is_some()
    }

    pub fn is_time_dependent(&self) -> bool {
        self.time_dependent
    }

    pub fn matrix_fn(&self) -> MatrixFn {
        self.a.clone()
    }

    pub fn c0_fn(&self) -> ScalarFn {
        self.c0.clone()
    }

    pub fn a0_fn(&self) -> ScalarFn {
        self.a0.clone()
    }

    /// The field with `a_ij` replaced by `a_ji`.
    pub fn transposed(&self) -> Self {
        let a = self.a.clone();
        Self {
            a: Arc::new(move |p| {
                let m = a(p);
                [[m[0][0], m[1][0]], [m[0][1], m[1][1]]]
            }),
            a_divergence: None,
            ..self.clone()
        }
    }

    /// Field shifted in `(t, x')`: `new(t, x', x_d) = old(t - dt, x' - dx, x_d)`.
    pub fn shifted(&self, dt: f64, dx: f64) -> Self {
        let a = self.a.clone();
        let c0 = self.c0.clone();
        let a0 = self.a0.clone();
        let shift = move |p: Point| Point::new(p.t - dt, p.xp - dx, p.xd);
        Self {
            a: Arc::new(move |p| a(shift(p))),
            c0: Arc::new(move |p| c0(shift(p))),
            a0: Arc::new(move |p| a0(shift(p))),
            a_divergence: None,
            ..self.clone()
        }
    }

    /// Entrywise sum (ellipticity of the result is the caller's concern).
    pub fn sum(&self, other: &Self) -> Self {
        let (a1, a2) = (self.a.clone(), other.a.clone());
        let (c1, c2) = (self.c0.clone(), other.c0.clone());
        let (z1, z2) = (self.a0.clone(), other.a0.clone());
        Self {
            dim: self.dim,
            nu: self.nu.min(other.nu),
            kind: CoefficientKind::User,
            a: Arc::new(move |p| {
                let (x, y) = (a1(p), a2(p));
                [[x[0][0] + y[0][0], x[0][1] + y[0][1]], [x[1][0] + y[1][0], x[1][1] + y[1][1]]]
            }),
            c0: Arc::new(move |p| c1(p) + c2(p)),
            a0: Arc::new(move |p| z1(p) + z2(p)),
            a_divergence: None,
            time_dependent: self.time_dependent || other.time_dependent,
        }
    }

    /// Checks the ellipticity and boundedness conditions at one point.
    pub fn bound_violation(&self, p: Point) -> Option<String> {
        check_bounds(self.dim, self.nu, &self.a(p), self.c0(p), self.a0(p))
    }
}

const BOUND_SLACK: f64 = 1e-12;

fn check_bounds(dim: usize, nu: f64, a: &Mat2, c0: f64, a0: f64) -> Option<String> {
    let upper = 1.0 / nu;
    for i in 0..dim {
        for j in 0..dim {
            let v = a[i][j];
            if !v.is_finite() {
                return Some(format!("a[{i}][{j}] is not finite"));
            }
            if v.abs() > upper * (1.0 + BOUND_SLACK) {
                return Some(format!("|a[{i}][{j}]| = {} exceeds 1/nu = {upper}", v.abs()));
            }
        }
    }
    let min_eig = if dim == 1 {
        a[0][0]
    } else {
        let s = 0.5 * (a[0][1] + a[1][0]);
        let tr = a[0][0] + a[1][1];
        let disc = ((a[0][0] - a[1][1]).powi(2) + 4.0 * s * s).sqrt();
        0.5 * (tr - disc)
    };
    if min_eig < nu * (1.0 - BOUND_SLACK) {
        return Some(format!("ellipticity lower bound {min_eig} < nu = {nu}"));
    }
    for (name, v) in [("c0", c0), ("a0", a0)] {
        if !v.is_finite() || v < nu * (1.0 - BOUND_SLACK) || v > upper * (1.0 + BOUND_SLACK) {
            return Some(format!("{name} = {v} outside [{nu}, {upper}]"));
        }
    }
    None
}

/// Midpoint samples of one time slab, indexed by `k * M + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSamples {
    pub level: usize,
    pub a: Vec<Mat2>,
    pub c0: Vec<f64>,
    pub a0: Vec<f64>,
}

impl CellSamples {
    pub fn index(mesh: &TensorMesh, k: usize, j: usize) -> usize {
        k * mesh.xd_cells() + j
    }
}

/// Samples one slab at cell midpoints and validates the bounds.
pub fn sample_level(coeffs: &CoefficientField, mesh: &TensorMesh, level: usize) -> Result<CellSamples> {
    let t = mesh.slab_center(level.max(1));
    let m = mesh.xd_cells();
    let n = m * mesh.xprime_cells();
    let mut out = CellSamples {
        level,
        a: Vec::with_capacity(n),
        c0: Vec::with_capacity(n),
        a0: Vec::with_capacity(n),
    };
    for k in 0..mesh.xprime_cells() {
        for j in 0..m {
            let p = Point::new(t, mesh.xprime_center(k), mesh.xd_center(j));
            let (a, c0, a0) = (coeffs.a(p), coeffs.c0(p), coeffs.a0(p));
            if let Some(reason) = check_bounds(coeffs.dim, coeffs.nu, &a, c0, a0) {
                return Err(LabError::CoefficientBounds {
                    level,
                    xprime: k,
                    xd: j,
                    reason,
                });
            }
            out.a.push(a);
            out.c0.push(c0);
            out.a0.push(a0);
        }
    }
    Ok(out)
}

/// Per-cell samples over the whole mesh. Time-independent fields are sampled
/// once (plus a consistency probe on the last slab); time-dependent ones per slab.
pub fn sample_on_mesh(coeffs: &CoefficientField, mesh: &TensorMesh) -> Result<Vec<CellSamples>> {
    if coeffs.dim != mesh.dim {
        return Err(LabError::DimensionMismatch {
            expected: mesh.dim,
            got: coeffs.dim,
        });
    }
    let levels: Vec<usize> = if coeffs.is_time_dependent() {
        (1..=mesh.time_count).collect()
    } else {
        vec![1]
    };
    let samples = levels
        .iter()
        .map(|&n| sample_level(coeffs, mesh, n))
        .collect::<Result<Vec<_>>>()?;
    if coeffs.kind == CoefficientKind::XdOnly {
        let last = sample_level(coeffs, mesh, mesh.time_count)?;
        check_xd_only(mesh, &samples[0], &last, coeffs.dim)?;
    }
    Ok(samples)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-14 * (1.0 + a.abs().max(b.abs()))
}

fn check_xd_only(mesh: &TensorMesh, first: &CellSamples, last: &CellSamples, dim: usize) -> Result<()> {
    let d = dim - 1;
    let m = mesh.xd_cells();
    let reference = first.a[0];
    for k in 0..mesh.xprime_cells() {
        for j in 0..m {
            let idx = CellSamples::index(mesh, k, j);
            let base = CellSamples::index(mesh, 0, j);
            let fail = |reason: String| LabError::CoefficientBounds {
                level: first.level,
                xprime: k,
                xd: j,
                reason,
            };
            for i in 0..dim {
                if !close(first.a[idx][i][d], reference[i][d]) {
                    return Err(fail(format!("a[{i}][{d}] is not constant (structure condition)")));
                }
                for jj in 0..dim {
                    if !close(first.a[idx][i][jj], first.a[base][i][jj])
                        || !close(first.a[idx][i][jj], last.a[idx][i][jj])
                    {
                        return Err(fail("coefficient depends on (t, x')".into()));
                    }
                }
            }
            if !close(first.c0[idx], first.c0[base]) || !close(first.c0[idx], last.c0[idx]) {
                return Err(fail("c0 depends on (t, x')".into()));
            }
        }
    }
    Ok(())
}

/// Averages entering the partial mean oscillation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PartialAverages {
    /// Normal cells at which the averages were evaluated (those met by the cylinder).
    pub xd_cells: Vec<usize>,
    /// `[a_ij](x_d)` per entry of `xd_cells`; the `x_d` column holds the constant full average.
    pub a: Vec<Mat2>,
    /// `[c_0](x_d)` per entry of `xd_cells`.
    pub c0: Vec<f64>,
}

impl PartialAverages {
    pub fn at(&self, j: usize) -> Option<(Mat2, f64)> {
        self.xd_cells
            .binary_search(&j)
            .ok()
            .map(|i| (self.a[i], self.c0[i]))
    }
}

fn cell_point(mesh: &TensorMesh, n: usize, k: usize, j: usize) -> Point {
    Point::new(mesh.slab_center(n), mesh.xprime_center(k), mesh.xd_center(j))
}

fn check_cylinder(mesh: &TensorMesh, cyl: &Cylinder) -> Result<()> {
    if cyl.center_xd + cyl.radius > mesh.xd_length() {
        return Err(LabError::CylinderOutsideDomain(format!(
            "x_d extent {} exceeds L_d = {}",
            cyl.center_xd + cyl.radius,
            mesh.xd_length()
        )));
    }
    Ok(())
}

pub fn partial_averages(coeffs: &CoefficientField, mesh: &TensorMesh, cyl: &Cylinder) -> Result<PartialAverages> {
    check_cylinder(mesh, cyl)?;
    let cells = mesh.cells_in_cylinder(cyl);
    if cells.is_empty() {
        return Err(LabError::EmptyCylinder(format!("{cyl:?}")));
    }
    let tangential = mesh.tangential_cells(cyl);
    if tangential.is_empty() {
        return Err(LabError::EmptyCylinder("tangential cylinder has no cells".into()));
    }
    let dim = coeffs.dim;
    let d = dim - 1;
    let xd_cells = cells.xd_cells();

    // Averages accumulate deviations from a reference sample so that constant
    // data reproduce the constant bit-for-bit.
    let first = cells.cells()[0];
    let reference = coeffs.a(cell_point(mesh, first.level, first.xprime, first.xd));

    // Full average of the x_d column over Q_rho^+, cell-measure weighted.
    let mut col = [0.0; 2];
    let mut weight = 0.0;
    for c in cells.cells() {
        let w = mesh.cell_measure(c.xd);
        let a = coeffs.a(cell_point(mesh, c.level, c.xprime, c.xd));
        for (i, v) in col.iter_mut().enumerate().take(dim) {
            *v += w * (a[i][d] - reference[i][d]);
        }
        weight += w;
    }
    for (i, v) in col.iter_mut().enumerate() {
        *v = reference[i][d] + *v / weight;
    }

    let mut a_out = Vec::with_capacity(xd_cells.len());
    let mut c_out = Vec::with_capacity(xd_cells.len());
    let count = tangential.len() as f64;
    for &j in &xd_cells {
        let (n0, k0) = tangential[0];
        let p0 = cell_point(mesh, n0, k0, j);
        let (a_ref, c_ref) = (coeffs.a(p0), coeffs.c0(p0));
        let mut acc = [[0.0; 2]; 2];
        let mut cacc = 0.0;
        for &(n, k) in &tangential {
            let p = cell_point(mesh, n, k, j);
            let a = coeffs.a(p);
            for i in 0..dim {
                for jj in 0..dim {
                    acc[i][jj] += a[i][jj] - a_ref[i][jj];
                }
            }
            cacc += coeffs.c0(p) - c_ref;
        }
        for i in 0..dim {
            for jj in 0..dim {
                acc[i][jj] = if jj == d { col[i] } else { a_ref[i][jj] + acc[i][jj] / count };
            }
        }
        a_out.push(acc);
        c_out.push(c_ref + cacc / count);
    }
    Ok(PartialAverages {
        xd_cells,
        a: a_out,
        c0: c_out,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OscillationReport {
    pub center: Point,
    pub rho: f64,
    pub value: f64,
    /// Mean deviations of `a_ij` (row-major, `dim * dim` entries) followed by `c_0`.
    pub per_entry: Vec<f64>,
}

impl OscillationReport {
    pub const CSV_HEADER: &'static str = "center_t,center_xprime,center_xd,rho,value";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.center.t, self.center.xp, self.center.xd, self.rho, self.value
        )
    }
}

pub fn oscillation(coeffs: &CoefficientField, mesh: &TensorMesh, cyl: &Cylinder) -> Result<OscillationReport> {
    let avg = partial_averages(coeffs, mesh, cyl)?;
    let cells = mesh.cells_in_cylinder(cyl);
    let dim = coeffs.dim;
    let mut dev = vec![0.0; dim * dim + 1];
    let mut weight = 0.0;
    for c in cells.cells() {
        let w = mesh.cell_measure(c.xd);
        let p = cell_point(mesh, c.level, c.xprime, c.xd);
        let (abar, cbar) = avg.at(c.xd).expect("average computed for every met x_d cell");
        let a = coeffs.a(p);
        for i in 0..dim {
            for j in 0..dim {
                dev[i * dim + j] += w * (a[i][j] - abar[i][j]).abs();
            }
        }
        dev[dim * dim] += w * (coeffs.c0(p) - cbar).abs();
        weight += w;
    }
    for v in dev.iter_mut() {
        *v /= weight;
    }
    let a_max = dev[..dim * dim].iter().cloned().fold(0.0, f64::max);
    Ok(OscillationReport {
        center: Point::new(cyl.center_time, cyl.center_xprime, cyl.center_xd),
        rho: cyl.radius,
        value: a_max + dev[dim * dim],
        per_entry: dev,
    })
}

/// Supremum of the oscillation over a lattice of cylinders: centres on the
/// slab/node grid (stride `stride` in each direction), radii in `radii`.
/// Cylinders leaving the truncated domain or meeting no cell are skipped.
pub fn max_oscillation(
    coeffs: &CoefficientField,
    mesh: &TensorMesh,
    radii: &[f64],
    stride: usize,
) -> Result<f64> {
    use rayon::prelude::*;
    let stride = stride.max(1);
    let mut cylinders = Vec::new();
    for &rho in radii {
        for n in (1..=mesh.time_count).step_by(stride) {
            for k in (0..mesh.xprime_cells()).step_by(stride) {
                for j in (0..mesh.xd_nodes.len()).step_by(stride) {
                    let cyl = Cylinder::new(mesh.time_level(n), mesh.xprime_node(k), mesh.xd_nodes[j], rho);
                    if cyl.center_xd + rho <= mesh.xd_length() {
                        cylinders.push(cyl);
                    }
                }
            }
        }
    }
    let values: Vec<f64> = cylinders
        .par_iter()
        .filter_map(|cyl| match oscillation(coeffs, mesh, cyl) {
            Ok(r) => Some(Ok(r.value)),
            Err(LabError::EmptyCylinder(_)) => None,
            Err(e) => Some(Err(e)),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(values.into_iter().fold(0.0, f64::max))
}

/// Parameters of a seeded coefficient family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub seed: u64,
    pub kind: CoefficientKind,
    pub dim: usize,
    pub nu: f64,
    pub eps: f64,
    /// Period of the x' dependence (should match the mesh's `L'`).
    pub xprime_period: f64,
}

impl FamilySpec {
    pub fn new(seed: u64, kind: CoefficientKind, dim: usize, nu: f64, eps: f64) -> Self {
        Self {
            seed,
            kind,
            dim,
            nu,
            eps,
            xprime_period: std::f64::consts::TAU,
        }
    }

    /// Documented bound `C_kind` with `oscillation <= C_kind * eps` on every cylinder.
    pub fn oscillation_constant(kind: CoefficientKind) -> f64 {
        match kind {
            CoefficientKind::Constant | CoefficientKind::XdOnly => 0.0,
            // Each perturbation S has |S| <= 1, so |S - [S]| <= 2 for every
            // entry and for c0.
            CoefficientKind::Oscillatory => 4.0,
            CoefficientKind::User => f64::INFINITY,
        }
    }
}

/// Deterministic smooth coefficient field of the requested kind.
///
/// Every family has the form `a = I + eps * S` and `c_0 = 1 + eps * s` with
/// `|S_ij|, |s| <= 1`, so the bounds hold whenever `1 - dim * eps >= nu` and
/// `1 + eps <= 1 / nu`.
pub fn generate_family(spec: &FamilySpec) -> Result<CoefficientField> {
    let FamilySpec {
        seed,
        kind,
        dim,
        nu,
        eps,
        xprime_period,
    } = *spec;
    if dim != 1 && dim != 2 {
        return Err(LabError::InvalidFamily(format!("dim must be 1 or 2, got {dim}")));
    }
    if !(nu > 0.0 && nu < 1.0) {
        return Err(LabError::InvalidFamily(format!("nu must lie in (0, 1), got {nu}")));
    }
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(LabError::InvalidFamily(format!("eps must be >= 0, got {eps}")));
    }
    if 1.0 - dim as f64 * eps < nu || 1.0 + eps > 1.0 / nu {
        return Err(LabError::InvalidFamily(format!(
            "eps = {eps} violates the ellipticity margin for nu = {nu}, dim = {dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dim - 1;
    let delta = |i: usize, j: usize| if i == j { 1.0 } else { 0.0 };
    let field = match kind {
        CoefficientKind::Constant => {
            let mut a = [[0.0; 2]; 2];
            for (i, row) in a.iter_mut().enumerate().take(dim) {
                for (j, v) in row.iter_mut().enumerate().take(dim) {
                    *v = delta(i, j) + eps * rng.gen_range(-1.0..=1.0);
                }
            }
            let c0 = 1.0 + eps * rng.gen_range(-1.0..=1.0);
            CoefficientField::constant(dim, nu, a, c0, 1.0)
        }
        CoefficientKind::XdOnly => {
            let mut amp = [[0.0; 2]; 2];
            let mut freq = [[0.0; 2]; 2];
            let mut phase = [[0.0; 2]; 2];
            for i in 0..dim {
                for j in 0..dim {
                    amp[i][j] = rng.gen_range(-1.0..=1.0);
                    freq[i][j] = rng.gen_range(1.0..4.0);
                    phase[i][j] = rng.gen_range(0.0..std::f64::consts::TAU);
                }
            }
            let (wc, pc) = (rng.gen_range(1.0..4.0), rng.gen_range(0.0..std::f64::consts::TAU));
            let (wz, pz) = (rng.gen_range(1.0..4.0), rng.gen_range(0.0..std::f64::consts::TAU));
            // The x_d column is constant; the other columns vary with x_d.
            let a = move |xd: f64| {
                let mut m = [[0.0; 2]; 2];
                for i in 0..dim {
                    for j in 0..dim {
                        let shape = if j == d {
                            1.0
                        } else {
                            (freq[i][j] * xd + phase[i][j]).sin()
                        };
                        m[i][j] = delta(i, j) + eps * amp[i][j] * shape;
                    }
                }
                m
            };
            let div = move |p: Point| {
                // sum_i D_i a_ij = D_d a_dj (no x' dependence).
                let mut v = [0.0; 2];
                for (j, out) in v.iter_mut().enumerate().take(dim) {
                    if j != d {
                        *out = eps * amp[d][j] * freq[d][j] * (freq[d][j] * p.xd + phase[d][j]).cos();
                    }
                }
                v
            };
            CoefficientField::xd_only(
                dim,
                nu,
                a,
                move |xd| 1.0 + eps * (wc * xd + pc).sin(),
                move |xd| 1.0 + eps * (wz * xd + pz).cos(),
            )
            .with_divergence(Arc::new(div))
        }
        CoefficientKind::Oscillatory => {
            let mut omega = [[0.0; 2]; 2];
            let mut phi = [[0.0; 2]; 2];
            let mut kappa = [[0.0; 2]; 2];
            let mut psi = [[0.0; 2]; 2];
            for i in 0..dim {
                for j in 0..dim {
                    omega[i][j] = rng.gen_range(2.0..6.0) * std::f64::consts::PI;
                    phi[i][j] = rng.gen_range(0.0..std::f64::consts::TAU);
                    kappa[i][j] = rng.gen_range(1..=3) as f64 * std::f64::consts::TAU / xprime_period;
                    psi[i][j] = rng.gen_range(0.0..std::f64::consts::TAU);
                }
            }
            let (oc, fc) = (
                rng.gen_range(2.0..6.0) * std::f64::consts::PI,
                rng.gen_range(0.0..std::f64::consts::TAU),
            );
            let (kc, sc) = (
                rng.gen_range(1..=3) as f64 * std::f64::consts::TAU / xprime_period,
                rng.gen_range(0.0..std::f64::consts::TAU),
            );
            let shape = move |w: f64, f: f64, k: f64, s: f64, p: Point| {
                if dim == 1 {
                    (w * p.t + f).sin()
                } else {
                    0.5 * (w * p.t + f).sin() + 0.5 * (k * p.xp + s).cos()
                }
            };
            let a = move |p: Point| {
                let mut m = [[0.0; 2]; 2];
                for i in 0..dim {
                    for j in 0..dim {
                        m[i][j] = delta(i, j) + eps * shape(omega[i][j], phi[i][j], kappa[i][j], psi[i][j], p);
                    }
                }
                m
            };
            let div = move |p: Point| {
                let mut v = [0.0; 2];
                if dim == 2 {
                    for (j, out) in v.iter_mut().enumerate() {
                        *out = -0.5 * eps * kappa[0][j] * (kappa[0][j] * p.xp + psi[0][j]).sin();
                    }
                }
                v
            };
            CoefficientField {
                dim,
                nu,
                kind: CoefficientKind::Oscillatory,
                a: Arc::new(a),
                c0: Arc::new(move |p| 1.0 + eps * shape(oc, fc, kc, sc, p)),
                a0: Arc::new(|_| 1.0),
                a_divergence: Some(Arc::new(div)),
                time_dependent: eps != 0.0,
            }
        }
        CoefficientKind::User => {
            return Err(LabError::InvalidFamily("user fields are not generated".into()));
        }
    };
    Ok(field)
}
