//! Graded tensor-product space-time meshes on the truncated half-space strip.
//!
//! The normal direction `x_d` lives on `(0, L_d)` with nodes clustered at the
//! degenerate boundary by a power law. For `dim = 2` the tangential direction
//! `x'` is a periodic interval of length `L'` with uniform nodes. Time runs over
//! `(0, T)` in `time_count` uniform slabs.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Parameters of the built-in graded generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshParams {
    pub dim: usize,
    pub xd_length: f64,
    pub xd_cells: usize,
    pub grading_exponent: f64,
    pub xprime_count: usize,
    pub xprime_length: f64,
    pub final_time: f64,
    pub time_count: usize,
}

impl Default for MeshParams {
    fn default() -> Self {
        Self {
            dim: 1,
            xd_length: 4.0,
            xd_cells: 64,
            grading_exponent: 2.0,
            xprime_count: 1,
            xprime_length: 1.0,
            final_time: 1.0,
            time_count: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMesh {
    pub dim: usize,
    pub xd_nodes: Vec<f64>,
    pub xprime_count: usize,
    pub xprime_length: f64,
    pub time_step: f64,
    pub time_count: usize,
    pub grading_exponent: f64,
}

/// `Q_r^+(z_0) = (t_0 - r, t_0] x B_r^+(x_0)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    pub center_time: f64,
    pub center_xprime: f64,
    pub center_xd: f64,
    pub radius: f64,
}

impl Cylinder {
    pub fn new(center_time: f64, center_xprime: f64, center_xd: f64, radius: f64) -> Self {
        Self {
            center_time,
            center_xprime,
            center_xd,
            radius,
        }
    }

    /// Boundary cylinder centered on `{x_d = 0}`.
    pub fn boundary(center_time: f64, center_xprime: f64, radius: f64) -> Self {
        Self::new(center_time, center_xprime, 0.0, radius)
    }

    pub fn with_radius(&self, radius: f64) -> Self {
        Self { radius, ..*self }
    }
}

/// One space-time cell: time slab `level` (1-based, covering `(t_{n-1}, t_n]`),
/// tangential cell `xprime` and normal cell `xd`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpaceTimeCell {
    pub level: usize,
    pub xprime: usize,
    pub xd: usize,
}

/// Sorted, duplicate-free set of space-time cells.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CellSet {
    cells: Vec<SpaceTimeCell>,
}

impl CellSet {
    pub fn from_cells(mut cells: Vec<SpaceTimeCell>) -> Self {
        cells.sort_unstable();
        cells.dedup();
        Self { cells }
    }

    pub fn cells(&self) -> &[SpaceTimeCell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn contains(&self, cell: &SpaceTimeCell) -> bool {
        self.cells.binary_search(cell).is_ok()
    }

    pub fn is_subset_of(&self, other: &CellSet) -> bool {
        self.cells.iter().all(|c| other.contains(c))
    }

    /// Distinct time slabs touched by the set, ascending.
    pub fn levels(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.cells.iter().map(|c| c.level).collect();
        out.dedup();
        out
    }

    /// Distinct normal cells touched by the set, ascending.
    pub fn xd_cells(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.cells.iter().map(|c| c.xd).collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(LabError::InvalidMesh(format!("{name} is not finite")))
    }
}

pub fn build_mesh(params: &MeshParams) -> Result<TensorMesh> {
    check_finite("xd_length", params.xd_length)?;
    check_finite("grading_exponent", params.grading_exponent)?;
    check_finite("xprime_length", params.xprime_length)?;
    check_finite("final_time", params.final_time)?;
    if params.xd_cells < 2 {
        return Err(LabError::InvalidMesh(format!(
            "need at least 2 cells in x_d, got {}",
            params.xd_cells
        )));
    }
    if params.grading_exponent < 1.0 {
        return Err(LabError::InvalidMesh(format!(
            "grading exponent must be >= 1, got {}",
            params.grading_exponent
        )));
    }
    let m = params.xd_cells as f64;
    let nodes = (0..=params.xd_cells)
        .map(|j| params.xd_length * (j as f64 / m).powf(params.grading_exponent))
        .collect();
    let mut mesh = TensorMesh::from_xd_nodes(
        params.dim,
        nodes,
        params.xprime_count,
        params.xprime_length,
        params.final_time,
        params.time_count,
    )?;
    mesh.grading_exponent = params.grading_exponent;
    Ok(mesh)
}

impl TensorMesh {
    /// Mesh with caller-supplied normal nodes (e.g. geometric grading).
    pub fn from_xd_nodes(
        dim: usize,
        xd_nodes: Vec<f64>,
        xprime_count: usize,
        xprime_length: f64,
        final_time: f64,
        time_count: usize,
    ) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(LabError::InvalidMesh(format!("dim must be 1 or 2, got {dim}")));
        }
        if xd_nodes.len() < 3 {
            return Err(LabError::InvalidMesh("need at least 2 cells in x_d".into()));
        }
        if xd_nodes[0] != 0.0 {
            return Err(LabError::InvalidMesh("first x_d node must be 0".into()));
        }
        for w in xd_nodes.windows(2) {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(LabError::InvalidMesh(
                    "x_d nodes must be finite and strictly increasing".into(),
                ));
            }
        }
        if time_count < 1 {
            return Err(LabError::InvalidMesh("time_count must be >= 1".into()));
        }
        if !(final_time > 0.0) || !final_time.is_finite() {
            return Err(LabError::InvalidMesh("final time must be positive".into()));
        }
        let (xprime_count, xprime_length) = if dim == 1 {
            (1, if xprime_length > 0.0 { xprime_length } else { 1.0 })
        } else {
            if xprime_count < 3 {
                return Err(LabError::InvalidMesh(
                    "periodic x' direction needs at least 3 nodes".into(),
                ));
            }
            if !(xprime_length > 0.0) || !xprime_length.is_finite() {
                return Err(LabError::InvalidMesh("x' length must be positive".into()));
            }
            (xprime_count, xprime_length)
        };
        Ok(Self {
            dim,
            xd_nodes,
            xprime_count,
            xprime_length,
            time_step: final_time / time_count as f64,
            time_count,
            grading_exponent: 1.0,
        })
    }

    /// Number of cells in x_d.
    pub fn xd_cells(&self) -> usize {
        self.xd_nodes.len() - 1
    }

    pub fn xd_length(&self) -> f64 {
        *self.xd_nodes.last().unwrap()
    }

    pub fn xd_width(&self, j: usize) -> f64 {
        self.xd_nodes[j + 1] - self.xd_nodes[j]
    }

    pub fn xd_center(&self, j: usize) -> f64 {
        0.5 * (self.xd_nodes[j] + self.xd_nodes[j + 1])
    }

    /// Number of tangential cells (equal to node count, periodic). One for `dim = 1`.
    pub fn xprime_cells(&self) -> usize {
        self.xprime_count
    }

    /// Tangential cell width; 1 for `dim = 1` so products of measures stay uniform.
    pub fn xprime_width(&self) -> f64 {
        if self.dim == 1 {
            1.0
        } else {
            self.xprime_length / self.xprime_count as f64
        }
    }

    pub fn xprime_node(&self, k: usize) -> f64 {
        if self.dim == 1 {
            0.0
        } else {
            k as f64 * self.xprime_width()
        }
    }

    pub fn xprime_center(&self, k: usize) -> f64 {
        if self.dim == 1 {
            0.0
        } else {
            (k as f64 + 0.5) * self.xprime_width()
        }
    }

    /// Right neighbour of tangential node `k` (periodic).
    pub fn xprime_next(&self, k: usize) -> usize {
        (k + 1) % self.xprime_count
    }

    pub fn final_time(&self) -> f64 {
        self.time_step * self.time_count as f64
    }

    pub fn time_level(&self, n: usize) -> f64 {
        n as f64 * self.time_step
    }

    /// Midpoint of slab `n` (1-based).
    pub fn slab_center(&self, n: usize) -> f64 {
        (n as f64 - 0.5) * self.time_step
    }

    /// Spatial node count including both x_d boundaries.
    pub fn spatial_node_count(&self) -> usize {
        self.xd_nodes.len() * self.xprime_count
    }

    /// Degrees of freedom after eliminating x_d = 0 and x_d = L_d.
    pub fn interior_dof_count(&self) -> usize {
        (self.xd_nodes.len() - 2) * self.xprime_count
    }

    /// Interior dof index of node (k, j), `None` on the eliminated rows.
    pub fn dof(&self, k: usize, j: usize) -> Option<usize> {
        let m = self.xd_cells();
        if j == 0 || j >= m {
            None
        } else {
            Some(k * (m - 1) + (j - 1))
        }
    }

    /// Index into a full nodal array (all x_d nodes).
    pub fn node(&self, k: usize, j: usize) -> usize {
        k * self.xd_nodes.len() + j
    }

    pub fn cell_measure(&self, j: usize) -> f64 {
        self.time_step * self.xprime_width() * self.xd_width(j)
    }

    pub fn min_xd_width(&self) -> f64 {
        (0..self.xd_cells())
            .map(|j| self.xd_width(j))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_xd_width(&self) -> f64 {
        (0..self.xd_cells()).map(|j| self.xd_width(j)).fold(0.0, f64::max)
    }

    fn xprime_distance(&self, a: f64, b: f64) -> f64 {
        if self.dim == 1 {
            return 0.0;
        }
        let l = self.xprime_length;
        let d = (a - b).rem_euclid(l);
        d.min(l - d)
    }

    /// Spatial cells `(x' cell, x_d cell)` whose centres lie in `B_r^+(x_0)`.
    pub fn cells_in_ball(&self, cyl: &Cylinder) -> Vec<(usize, usize)> {
        let r = cyl.radius;
        let mut spatial = Vec::new();
        for k in 0..self.xprime_cells() {
            let dx = self.xprime_distance(self.xprime_center(k), cyl.center_xprime);
            for j in 0..self.xd_cells() {
                let dd = self.xd_center(j) - cyl.center_xd;
                if dx * dx + dd * dd < r * r {
                    spatial.push((k, j));
                }
            }
        }
        spatial
    }

    /// Cells whose centres lie in the cylinder.
    pub fn cells_in_cylinder(&self, cyl: &Cylinder) -> CellSet {
        let r = cyl.radius;
        let mut cells = Vec::new();
        let levels: Vec<usize> = (1..=self.time_count)
            .filter(|&n| {
                let tc = self.slab_center(n);
                tc > cyl.center_time - r && tc <= cyl.center_time
            })
            .collect();
        if levels.is_empty() {
            return CellSet::default();
        }
        let spatial = self.cells_in_ball(cyl);
        for &n in &levels {
            for &(k, j) in &spatial {
                cells.push(SpaceTimeCell {
                    level: n,
                    xprime: k,
                    xd: j,
                });
            }
        }
        CellSet::from_cells(cells)
    }

    /// Cells of the tangential cylinder `Q'_r(z_0') = (t_0 - r, t_0] x B'_r(x_0')`
    /// as (level, x' cell) pairs.
    pub fn tangential_cells(&self, cyl: &Cylinder) -> Vec<(usize, usize)> {
        let r = cyl.radius;
        let mut out = Vec::new();
        for n in 1..=self.time_count {
            let tc = self.slab_center(n);
            if !(tc > cyl.center_time - r && tc <= cyl.center_time) {
                continue;
            }
            for k in 0..self.xprime_cells() {
                let dx = self.xprime_distance(self.xprime_center(k), cyl.center_xprime);
                if dx < r || self.dim == 1 {
                    out.push((n, k));
                }
            }
        }
        out
    }

    /// Same geometry with `space` times more x_d cells (and x' cells for `dim = 2`)
    /// and `time` times more slabs. Only valid for meshes from the built-in generator.
    pub fn refined(&self, space: usize, time: usize) -> Result<Self> {
        let params = MeshParams {
            dim: self.dim,
            xd_length: self.xd_length(),
            xd_cells: self.xd_cells() * space,
            grading_exponent: self.grading_exponent,
            xprime_count: if self.dim == 2 {
                self.xprime_count * space
            } else {
                1
            },
            xprime_length: self.xprime_length,
            final_time: self.final_time(),
            time_count: self.time_count * time,
        };
        build_mesh(&params)
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
