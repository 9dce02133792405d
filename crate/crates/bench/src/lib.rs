//! Fixtures shared by the benchmarks.

use degen_lab::{build_mesh, MeshParams, TensorMesh};

/// Graded mesh on `(0, 4)` with `m` normal cells and `n` time steps.
pub fn bench_mesh(dim: usize, m: usize, n: usize) -> TensorMesh {
    build_mesh(&MeshParams {
        dim,
        xd_cells: m,
        xprime_count: if dim == 2 { m / 4 } else { 1 },
        xprime_length: std::f64::consts::TAU,
        time_count: n,
        ..MeshParams::default()
    })
    .expect("valid bench mesh")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_sizes() {
        let m = bench_mesh(2, 32, 4);
        assert_eq!(m.xd_cells(), 32);
        assert_eq!(m.xprime_cells(), 8);
    }
}
