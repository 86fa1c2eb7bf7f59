//! Dense-matrix oracles for validation.
//!
//! Everything here is written independently of the production solver: the
//! Laplacian matrix is filled directly from neighbor coordinates, the linear
//! system is solved by Gaussian elimination, and the curl is re-derived
//! inline. Quadratic cost limits use to small lattices (n <= 8 or so), which
//! is the point: these functions cross-check the spectral path, they never
//! feed it.

use crate::error::{Result, VortexError};
use crate::lattice::{FieldRole, LatticeSpec, NodeField3};
use crate::state::VortexState;

/// Dense -Laplacian matrix (row-major, size nodes x nodes), filled from
/// first principles: row x has 6/h^2 on the diagonal and -1/h^2 at each of
/// the six periodic neighbors (accumulated, so n = 2 double-bonds work out).
pub fn dense_neg_laplacian(spec: &LatticeSpec) -> Vec<f64> {
    let n = spec.n();
    let nodes = n * n * n;
    let inv_h2 = (n * n) as f64; // 1/h^2 with h = 1/n
    let mut a = vec![0.0; nodes * nodes];
    let idx = |i: usize, j: usize, k: usize| (i * n + j) * n + k;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let row = idx(i, j, k);
                a[row * nodes + row] += 6.0 * inv_h2;
                let neighbors = [
                    idx((i + 1) % n, j, k),
                    idx((i + n - 1) % n, j, k),
                    idx(i, (j + 1) % n, k),
                    idx(i, (j + n - 1) % n, k),
                    idx(i, j, (k + 1) % n),
                    idx(i, j, (k + n - 1) % n),
                ];
                for nb in neighbors {
                    a[row * nodes + nb] -= inv_h2;
                }
            }
        }
    }
    a
}

/// Solve A x = b by Gaussian elimination with partial pivoting. A is
/// consumed. Panics on a numerically singular pivot; callers regularize the
/// Poisson operator first.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    assert_eq!(a.len(), n * n);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r, &s| {
                a[r * n + col]
                    .abs()
                    .partial_cmp(&a[s * n + col].abs())
                    .unwrap()
            })
            .unwrap();
        let pivot = a[pivot_row * n + col];
        assert!(pivot.abs() > 1e-12, "singular dense system at column {col}");
        if pivot_row != col {
            for c in 0..n {
                a.swap(col * n + c, pivot_row * n + c);
            }
            b.swap(col, pivot_row);
        }
        for row in (col + 1)..n {
            let f = a[row * n + col] / a[col * n + col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[row * n + c] -= f * a[col * n + c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for c in (row + 1)..n {
            acc -= a[row * n + c] * x[c];
        }
        x[row] = acc / a[row * n + row];
    }
    x
}

/// Solve -lap psi = rhs with the zero-mean convention. The operator is
/// singular on constants, so we solve (A + ones/nodes) psi = rhs instead:
/// for mean-free rhs this pins the mean of psi to zero without perturbing
/// the solution.
pub fn solve_poisson_dense(rhs: &[f64], spec: &LatticeSpec) -> Result<Vec<f64>> {
    let nodes = spec.nodes();
    assert_eq!(rhs.len(), nodes);
    let mean: f64 = rhs.iter().sum::<f64>() / nodes as f64;
    if mean.abs() > 1e-9 * rhs.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0) {
        return Err(VortexError::InvalidConfig {
            what: format!("dense Poisson rhs has nonzero mean {mean:.3e}"),
        });
    }
    let mut a = dense_neg_laplacian(spec);
    let w = 1.0 / nodes as f64;
    for v in a.iter_mut() {
        *v += w;
    }
    Ok(solve_dense(a, rhs.to_vec()))
}

/// Green table by brute force: column x of the regularized inverse with
/// rhs = delta_x - 1/nodes. Only the first column is needed thanks to
/// translation invariance, which the caller exploits.
pub fn dense_green_column(spec: &LatticeSpec) -> Result<Vec<f64>> {
    let nodes = spec.nodes();
    let mut rhs = vec![-1.0 / nodes as f64; nodes];
    rhs[0] += 1.0;
    solve_poisson_dense(&rhs, spec)
}

/// Full field solve and energy through the dense path: per-component dense
/// Poisson solve, an independently coded forward curl, and the plain
/// velocity-square energy sum.
pub fn dense_solution(state: &VortexState, spec: &LatticeSpec) -> Result<(NodeField3, f64)> {
    let n = spec.n();
    let nodes = spec.nodes();
    let h = spec.h();
    let scale = state.gamma().value() / (h * h);
    let mut psi = NodeField3::zeros(n, FieldRole::VectorPotential);
    for c in 0..3 {
        let rhs: Vec<f64> = state.multiplicities()[c * nodes..(c + 1) * nodes]
            .iter()
            .map(|&v| v as f64 * scale)
            .collect();
        let sol = solve_poisson_dense(&rhs, spec)?;
        psi.comp_mut(c).copy_from_slice(&sol);
    }

    // Forward curl, written out from scratch.
    let mut u = NodeField3::zeros(n, FieldRole::Velocity);
    let idx = |i: usize, j: usize, k: usize| (i * n + j) * n + k;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let x = idx(i, j, k);
                let up = [idx((i + 1) % n, j, k), idx(i, (j + 1) % n, k), idx(i, j, (k + 1) % n)];
                for c in 0..3 {
                    let a = (c + 1) % 3;
                    let b = (c + 2) % 3;
                    let d = (psi.comp(b)[up[a]] - psi.comp(b)[x]) - (psi.comp(a)[up[b]] - psi.comp(a)[x]);
                    u.comp_mut(c)[x] = d / h;
                }
            }
        }
    }

    let energy = 0.5 * h * h * h * u.norm2();
    Ok((u, energy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::laplacian6;
    use crate::state::{Circulation, Plane, Plaquette};

    #[test]
    fn dense_matrix_matches_stencil_operator() {
        let spec = LatticeSpec::new(3).unwrap();
        let nodes = spec.nodes();
        let a = dense_neg_laplacian(&spec);
        // Apply the dense matrix to a delta and compare with -laplacian6.
        let mut f = NodeField3::zeros(3, FieldRole::VectorPotential);
        f.set(0, 1, 2, 0, 1.0);
        let lap = laplacian6(&f, &spec);
        let col = spec.node(1, 2, 0);
        for x in 0..nodes {
            let want = -lap.comp(0)[x];
            let got = a[x * nodes + col];
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn dense_poisson_inverts_the_stencil() {
        let spec = LatticeSpec::new(3).unwrap();
        let nodes = spec.nodes();
        let mut rhs = vec![-1.0 / nodes as f64; nodes];
        rhs[13] += 1.0;
        let psi = solve_poisson_dense(&rhs, &spec).unwrap();
        let mean: f64 = psi.iter().sum::<f64>() / nodes as f64;
        assert!(mean.abs() <= 1e-12);
        let mut f = NodeField3::zeros(3, FieldRole::VectorPotential);
        f.comp_mut(0).copy_from_slice(&psi);
        let lap = laplacian6(&f, &spec);
        for (l, r) in lap.comp(0).iter().zip(&rhs) {
            assert!((-l - r).abs() <= 1e-10);
        }
    }

    #[test]
    fn dense_energy_of_empty_state_is_zero() {
        let spec = LatticeSpec::new(2).unwrap();
        let st = VortexState::empty(&spec, Circulation::new(1.0).unwrap());
        let (_, e) = dense_solution(&st, &spec).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn dense_energy_is_orientation_symmetric() {
        let spec = LatticeSpec::new(4).unwrap();
        let gamma = Circulation::new(1.0).unwrap();
        let mut a = VortexState::empty(&spec, gamma);
        a.apply_plaquette(&Plaquette { base: [0, 1, 2], plane: Plane::Yz, orientation: 1 }, &spec);
        let mut b = VortexState::empty(&spec, gamma);
        b.apply_plaquette(&Plaquette { base: [0, 1, 2], plane: Plane::Yz, orientation: -1 }, &spec);
        let (_, ea) = dense_solution(&a, &spec).unwrap();
        let (_, eb) = dense_solution(&b, &spec).unwrap();
        assert!((ea - eb).abs() <= 1e-12 * ea.abs());
        assert!(ea > 0.0);
    }
}
