//! Conforming Q1 assembly of the x_d^{-1}-weighted mass, the diffusion
//! stiffness and the load vectors.
//!
//! Unknowns live on interior x_d nodes (`x_d = 0` and `x_d = L_d` are
//! eliminated) tensored with periodic x' nodes. The x_d factor of every
//! weighted integral is evaluated in closed form.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coefficients::{sample_level, CellSamples, CoefficientField, Point, ScalarFn, Vec2, VectorFn};
use crate::error::{LabError, Result};
use crate::mesh::TensorMesh;
use crate::sparse::{LoadProvenance, LoadVector, SparseOperator};

type Local = [[f64; 2]; 2];

/// `I_k(r) = int_0^1 s^k / (1 + r s) ds` for k = 0, 1, 2.
fn weight_moments(r: f64) -> [f64; 3] {
    if r <= 0.5 {
        let mut out = [0.0; 3];
        for (k, slot) in out.iter_mut().enumerate() {
            let mut term = 1.0;
            let mut acc = 0.0;
            for n in 0..80 {
                acc += term / (n + k + 1) as f64;
                term *= -r;
                if term.abs() < 1e-20 {
                    break;
                }
            }
            *slot = acc;
        }
        out
    } else {
        let i0 = r.ln_1p() / r;
        let i1 = (1.0 - i0) / r;
        let i2 = (0.5 - i1) / r;
        [i0, i1, i2]
    }
}

/// `int_a^b psi_alpha psi_beta / x dx` for the two hats of `[a, b]`.
/// On the first cell the (0, 0) entry diverges and is returned as infinity.
pub fn weighted_element(a: f64, b: f64) -> Local {
    if a == 0.0 {
        return [[f64::INFINITY, 0.5], [0.5, 0.5]];
    }
    let r = (b - a) / a;
    let [i0, i1, i2] = weight_moments(r);
    let ll = r * (i0 - 2.0 * i1 + i2);
    let lr = r * (i1 - i2);
    let rr = r * i2;
    [[ll, lr], [lr, rr]]
}

fn mass_element(h: f64) -> Local {
    let d = h / 3.0;
    let o = h / 6.0;
    [[d, o], [o, d]]
}

fn stiffness_element(h: f64) -> Local {
    let s = 1.0 / h;
    [[s, -s], [-s, s]]
}

/// `C[a][b] = int psi_a psi_b'`.
const MIXED: Local = [[-0.5, 0.5], [-0.5, 0.5]];

struct Factors {
    mass: Local,
    stiff: Local,
    mixed: Local,
}

/// Tangential factors and local node count. For `dim = 1` the tangential
/// direction collapses to a single node with unit mass.
fn tangential(mesh: &TensorMesh) -> (usize, Factors) {
    if mesh.dim == 1 {
        (
            1,
            Factors {
                mass: [[1.0, 0.0], [0.0, 0.0]],
                stiff: [[0.0; 2]; 2],
                mixed: [[0.0; 2]; 2],
            },
        )
    } else {
        let h = mesh.xprime_width();
        (
            2,
            Factors {
                mass: mass_element(h),
                stiff: stiffness_element(h),
                mixed: MIXED,
            },
        )
    }
}

fn normal(mesh: &TensorMesh, j: usize) -> (Factors, Local) {
    let h = mesh.xd_width(j);
    (
        Factors {
            mass: mass_element(h),
            stiff: stiffness_element(h),
            mixed: MIXED,
        },
        weighted_element(mesh.xd_nodes[j], mesh.xd_nodes[j + 1]),
    )
}

fn xprime_nodes(mesh: &TensorMesh, k: usize) -> [usize; 2] {
    [k, mesh.xprime_next(k)]
}

/// Which trial nodes become columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Columns {
    /// Interior degrees of freedom (square operator).
    Interior,
    /// Nodes on `x_d = L_d`, one column per x' node.
    FarBoundary,
}

fn column(mesh: &TensorMesh, cols: Columns, k: usize, j: usize) -> Option<usize> {
    match cols {
        Columns::Interior => mesh.dof(k, j),
        Columns::FarBoundary => (j == mesh.xd_cells()).then_some(k),
    }
}

/// Generic element loop. `local(k, j, tp, nd, w, test, trial)` returns the
/// contribution for local test node `test = (alpha', beta')` and trial node
/// `trial = (alpha, beta)`.
fn assemble_columns<F>(mesh: &TensorMesh, cols: Columns, mut local: F) -> SparseOperator
where
    F: FnMut(usize, usize, &Factors, &Factors, &Local, (usize, usize), (usize, usize)) -> f64,
{
    let n = mesh.interior_dof_count();
    let ncols = match cols {
        Columns::Interior => n,
        Columns::FarBoundary => mesh.xprime_cells(),
    };
    let (np, tp) = tangential(mesh);
    let mut triplets = Vec::with_capacity(mesh.xd_cells() * mesh.xprime_cells() * 16);
    for k in 0..mesh.xprime_cells() {
        let kn = xprime_nodes(mesh, k);
        for j in 0..mesh.xd_cells() {
            let (nd, w) = normal(mesh, j);
            for ta in 0..np {
                for tb in 0..2 {
                    let Some(row) = mesh.dof(kn[ta], j + tb) else { continue };
                    for sa in 0..np {
                        for sb in 0..2 {
                            let Some(col) = column(mesh, cols, kn[sa], j + sb) else { continue };
                            let v = local(k, j, &tp, &nd, &w, (ta, tb), (sa, sb));
                            triplets.push((row, col, v));
                        }
                    }
                }
            }
        }
    }
    SparseOperator::from_triplets(n, ncols, triplets)
}

fn check_diagonal(op: &SparseOperator, what: &str) -> Result<()> {
    for (i, d) in op.diagonal().into_iter().enumerate() {
        if !(d > 0.0 && d.is_finite()) {
            return Err(LabError::Assembly(format!("{what}: diagonal entry {i} is {d}")));
        }
    }
    Ok(())
}

/// `M_kl = int a0(x_d) phi_k phi_l / x_d`, with `a0` frozen at cell midpoints.
pub fn assemble_weighted_mass(mesh: &TensorMesh, a0: &dyn Fn(f64) -> f64) -> Result<SparseOperator> {
    let cell_a0: Vec<f64> = (0..mesh.xd_cells()).map(|j| a0(mesh.xd_center(j))).collect();
    if let Some((j, v)) = cell_a0.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
        return Err(LabError::Assembly(format!("a0 = {v} on x_d cell {j}")));
    }
    let op = weighted_mass_columns(mesh, &cell_a0, Columns::Interior);
    check_diagonal(&op, "weighted mass")?;
    Ok(op)
}

fn weighted_mass_columns(mesh: &TensorMesh, cell_a0: &[f64], cols: Columns) -> SparseOperator {
    assemble_columns(mesh, cols, |_, j, tp, _, w, (ta, tb), (sa, sb)| {
        cell_a0[j] * (tp.mass[ta][sa] * w[tb][sb])
    })
}

/// Coupling of interior test functions to the `x_d = L_d` trial nodes in the
/// weighted mass.
pub fn far_boundary_mass(mesh: &TensorMesh, a0: &dyn Fn(f64) -> f64) -> SparseOperator {
    let cell_a0: Vec<f64> = (0..mesh.xd_cells()).map(|j| a0(mesh.xd_center(j))).collect();
    weighted_mass_columns(mesh, &cell_a0, Columns::FarBoundary)
}

/// Weighted mass with `a0` taken from a coefficient field.
pub fn assemble_weighted_mass_for(mesh: &TensorMesh, coeffs: &CoefficientField) -> Result<SparseOperator> {
    assemble_weighted_mass(mesh, &|xd| coeffs.a0(Point::new(0.0, 0.0, xd)))
}

/// Diffusion plus `lambda c0 / x_d` mass from midpoint samples, without the
/// coercivity check.
pub fn stiffness_from_samples(mesh: &TensorMesh, samples: &CellSamples, lambda: f64) -> SparseOperator {
    stiffness_columns(mesh, samples, lambda, Columns::Interior)
}

/// Stiffness restricted to interior rows and the chosen trial columns.
pub fn stiffness_columns(mesh: &TensorMesh, samples: &CellSamples, lambda: f64, cols: Columns) -> SparseOperator {
    let m = mesh.xd_cells();
    let two_d = mesh.dim == 2;
    assemble_columns(mesh, cols, |k, j, tp, nd, w, (ta, tb), (sa, sb)| {
        let idx = k * m + j;
        let a = samples.a[idx];
        let diffusion = if two_d {
            let diag = a[0][0] * (tp.stiff[ta][sa] * nd.mass[tb][sb]) + a[1][1] * (tp.mass[ta][sa] * nd.stiff[tb][sb]);
            let off = a[0][1] * (tp.mixed[sa][ta] * nd.mixed[tb][sb]) + a[1][0] * (tp.mixed[ta][sa] * nd.mixed[sb][tb]);
            diag + off
        } else {
            a[0][0] * nd.stiff[tb][sb]
        };
        let reaction = if lambda != 0.0 {
            lambda * samples.c0[idx] * (tp.mass[ta][sa] * w[tb][sb])
        } else {
            0.0
        };
        diffusion + reaction
    })
}

/// Reference stiffness `K_0` (a = I, lambda = 0).
pub fn reference_stiffness(mesh: &TensorMesh) -> SparseOperator {
    let n = mesh.xd_cells() * mesh.xprime_cells();
    let samples = CellSamples {
        level: 0,
        a: vec![[[1.0, 0.0], [0.0, 1.0]]; n],
        c0: vec![1.0; n],
        a0: vec![1.0; n],
    };
    stiffness_from_samples(mesh, &samples, 0.0)
}

/// Checks `v^T K v >= nu v^T K_0 v` on 20 pseudo-random vectors.
pub fn check_coercivity(mesh: &TensorMesh, k: &SparseOperator, nu: f64) -> Result<()> {
    let k0 = reference_stiffness(mesh);
    let mut rng = ChaCha8Rng::seed_from_u64(0x00c0_e4c1);
    for trial in 0..20 {
        let v: Vec<f64> = (0..k.rows()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs = k.quadratic_form(&v);
        let rhs = nu * k0.quadratic_form(&v);
        if lhs < rhs - 1e-10 * rhs.abs().max(1e-300) {
            return Err(LabError::Assembly(format!(
                "coercivity check failed on probe {trial}: {lhs} < {rhs}"
            )));
        }
    }
    Ok(())
}

/// Stiffness on the first slab.
pub fn assemble_stiffness(mesh: &TensorMesh, coeffs: &CoefficientField, lambda: f64) -> Result<SparseOperator> {
    assemble_stiffness_at(mesh, coeffs, lambda, 1)
}

/// Stiffness with coefficients frozen at the centre of slab `level`.
pub fn assemble_stiffness_at(
    mesh: &TensorMesh,
    coeffs: &CoefficientField,
    lambda: f64,
    level: usize,
) -> Result<SparseOperator> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(LabError::InvalidParameter(format!("lambda = {lambda}")));
    }
    if coeffs.dim != mesh.dim {
        return Err(LabError::DimensionMismatch {
            expected: mesh.dim,
            got: coeffs.dim,
        });
    }
    let samples = sample_level(coeffs, mesh, level)?;
    let k = stiffness_from_samples(mesh, &samples, lambda);
    check_coercivity(mesh, &k, coeffs.nu)?;
    Ok(k)
}

/// Source data `F` (divergence part) and `f` (weighted part).
#[derive(Clone, Default)]
pub struct Sources {
    pub big_f: Option<VectorFn>,
    pub f: Option<ScalarFn>,
}

impl Sources {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn provenance(&self) -> LoadProvenance {
        match (&self.big_f, &self.f) {
            (Some(_), None) => LoadProvenance::DivergenceF,
            (None, Some(_)) => LoadProvenance::WeightedF,
            _ => LoadProvenance::Combined,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.big_f.is_none() && self.f.is_none()
    }

    /// Nodal values of `(F, f)` at time `t` over all spatial nodes.
    pub fn nodal(&self, mesh: &TensorMesh, t: f64) -> Result<(Vec<Vec2>, Vec<f64>)> {
        let n = mesh.spatial_node_count();
        let mut big = vec![[0.0; 2]; n];
        let mut small = vec![0.0; n];
        for k in 0..mesh.xprime_cells() {
            for j in 0..mesh.xd_nodes.len() {
                let p = Point::new(t, mesh.xprime_node(k), mesh.xd_nodes[j]);
                let idx = mesh.node(k, j);
                if let Some(bf) = &self.big_f {
                    let v = bf(p);
                    if !(v[0].is_finite() && v[1].is_finite()) {
                        return Err(LabError::NonFinite(format!("F at t = {t}, x' = {}, x_d = {}", p.xp, p.xd)));
                    }
                    big[idx] = v;
                }
                if let Some(sf) = &self.f {
                    let v = sf(p);
                    if !v.is_finite() {
                        return Err(LabError::NonFinite(format!("f at t = {t}, x' = {}, x_d = {}", p.xp, p.xd)));
                    }
                    small[idx] = v;
                }
            }
        }
        Ok((big, small))
    }
}

/// Load from nodal data: `b = int F_I . D phi + sqrt(lambda) int f_I phi / x_d`.
pub fn assemble_load_nodal(mesh: &TensorMesh, big_f: &[Vec2], f: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let nn = mesh.spatial_node_count();
    if big_f.len() != nn || f.len() != nn {
        return Err(LabError::DimensionMismatch {
            expected: nn,
            got: big_f.len().min(f.len()),
        });
    }
    let sl = lambda.max(0.0).sqrt();
    let (np, tp) = tangential(mesh);
    let dd = if mesh.dim == 2 { 1 } else { 0 };
    let mut b = vec![0.0; mesh.interior_dof_count()];
    for k in 0..mesh.xprime_cells() {
        let kn = xprime_nodes(mesh, k);
        for j in 0..mesh.xd_cells() {
            let (nd, w) = normal(mesh, j);
            for ta in 0..np {
                for tb in 0..2 {
                    let Some(row) = mesh.dof(kn[ta], j + tb) else { continue };
                    let mut acc = 0.0;
                    for sa in 0..np {
                        for sb in 0..2 {
                            let node = mesh.node(kn[sa], j + sb);
                            let fv = big_f[node];
                            acc += fv[dd] * (tp.mass[ta][sa] * nd.mixed[sb][tb]);
                            if mesh.dim == 2 {
                                acc += fv[0] * (tp.mixed[sa][ta] * nd.mass[tb][sb]);
                            }
                            if f[node] != 0.0 {
                                acc += sl * f[node] * (tp.mass[ta][sa] * w[tb][sb]);
                            }
                        }
                    }
                    b[row] += acc;
                }
            }
        }
    }
    if let Some(i) = b.iter().position(|v| !v.is_finite()) {
        return Err(LabError::NonFinite(format!("load entry {i}")));
    }
    Ok(b)
}

/// Load vector at time `t`.
pub fn assemble_load(mesh: &TensorMesh, sources: &Sources, lambda: f64, t: f64) -> Result<LoadVector> {
    if sources.is_zero() {
        return Ok(LoadVector {
            values: vec![0.0; mesh.interior_dof_count()],
            provenance: sources.provenance(),
        });
    }
    let (big, small) = sources.nodal(mesh, t)?;
    Ok(LoadVector {
        values: assemble_load_nodal(mesh, &big, &small, lambda)?,
        provenance: sources.provenance(),
    })
}

/// `(||F_I||^2_{L_2}, ||f_I||^2_{L_2, x_d^{-1}})` of the nodal interpolants.
/// The weighted norm is infinite when `f` does not vanish at `x_d = 0`.
pub fn data_norms_sq(mesh: &TensorMesh, big_f: &[Vec2], f: &[f64]) -> (f64, f64) {
    let (np, tp) = tangential(mesh);
    let comps = mesh.dim;
    let mut fsq = 0.0;
    let mut wsq = 0.0;
    for k in 0..mesh.xprime_cells() {
        let kn = xprime_nodes(mesh, k);
        if f[mesh.node(k, 0)] != 0.0 {
            wsq = f64::INFINITY;
        }
        for j in 0..mesh.xd_cells() {
            let (nd, w) = normal(mesh, j);
            for ta in 0..np {
                for tb in 0..2 {
                    let ti = mesh.node(kn[ta], j + tb);
                    for sa in 0..np {
                        for sb in 0..2 {
                            let si = mesh.node(kn[sa], j + sb);
                            let m = tp.mass[ta][sa] * nd.mass[tb][sb];
                            for c in 0..comps {
                                fsq += big_f[ti][c] * big_f[si][c] * m;
                            }
                            if f[ti] != 0.0 && f[si] != 0.0 {
                                wsq += f[ti] * f[si] * (tp.mass[ta][sa] * w[tb][sb]);
                            }
                        }
                    }
                }
            }
        }
    }
    (fsq, wsq)
}
