//! Periodic cubic lattice, node-indexed fields, and forward/backward
//! difference operators.
//!
//! All fields live on the N^3 nodes of a unit periodic box with spacing
//! h = 1/N. Vector fields are stored component-major with the k index
//! fastest, so `data[((c*n + i)*n + j)*n + k]` is component `c` at node
//! (i, j, k). Edge quantities (vorticity component c on the edge from x to
//! x + h e_c) are stored at the tail node x.

use crate::error::{Result, VortexError};

/// Lattice geometry. The box period is fixed at 1, so `h * n == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeSpec {
    n: usize,
    h: f64,
}

impl LatticeSpec {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(VortexError::InvalidLattice { n });
        }
        Ok(Self { n, h: 1.0 / n as f64 })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Number of nodes, N^3.
    #[inline]
    pub fn nodes(&self) -> usize {
        self.n * self.n * self.n
    }

    /// Flat index of node (i, j, k), k fastest.
    #[inline]
    pub fn node(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n + j) * self.n + k
    }

    /// Flat index of the node one step forward along `axis` from (i, j, k).
    #[inline]
    pub fn step_up(&self, i: usize, j: usize, k: usize, axis: usize) -> usize {
        let n = self.n;
        match axis {
            0 => self.node(wrap_up(i, n), j, k),
            1 => self.node(i, wrap_up(j, n), k),
            _ => self.node(i, j, wrap_up(k, n)),
        }
    }

    /// Flat index of the node one step backward along `axis` from (i, j, k).
    #[inline]
    pub fn step_down(&self, i: usize, j: usize, k: usize, axis: usize) -> usize {
        let n = self.n;
        match axis {
            0 => self.node(wrap_down(i, n), j, k),
            1 => self.node(i, wrap_down(j, n), k),
            _ => self.node(i, j, wrap_down(k, n)),
        }
    }
}

#[inline]
pub(crate) fn wrap_up(i: usize, n: usize) -> usize {
    if i + 1 == n {
        0
    } else {
        i + 1
    }
}

#[inline]
pub(crate) fn wrap_down(i: usize, n: usize) -> usize {
    if i == 0 {
        n - 1
    } else {
        i - 1
    }
}

/// What a vector field means physically. Purely descriptive; operators tag
/// their outputs but do not reject inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldRole {
    Vorticity,
    VectorPotential,
    Velocity,
}

/// Three-component field on lattice nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeField3 {
    n: usize,
    role: FieldRole,
    data: Vec<f64>,
}

impl NodeField3 {
    pub fn zeros(n: usize, role: FieldRole) -> Self {
        Self { n, role, data: vec![0.0; 3 * n * n * n] }
    }

    pub fn from_data(n: usize, role: FieldRole, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), 3 * n * n * n);
        Self { n, role, data }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn role(&self) -> FieldRole {
        self.role
    }

    #[inline]
    pub fn idx(&self, c: usize, i: usize, j: usize, k: usize) -> usize {
        ((c * self.n + i) * self.n + j) * self.n + k
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.idx(c, i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, k: usize, v: f64) {
        let p = self.idx(c, i, j, k);
        self.data[p] = v;
    }

    /// One component as a node-indexed slice.
    #[inline]
    pub fn comp(&self, c: usize) -> &[f64] {
        let m = self.n * self.n * self.n;
        &self.data[c * m..(c + 1) * m]
    }

    #[inline]
    pub fn comp_mut(&mut self, c: usize) -> &mut [f64] {
        let m = self.n * self.n * self.n;
        &mut self.data[c * m..(c + 1) * m]
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Sum of squares over all components and nodes.
    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Scalar field on lattice nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    n: usize,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n * n] }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.n + j) * self.n + k]
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

/// Six-point Laplacian applied componentwise: (sum of the six axis
/// neighbors - 6 f) / h^2.
pub fn laplacian6(f: &NodeField3, spec: &LatticeSpec) -> NodeField3 {
    let n = spec.n();
    let inv_h2 = 1.0 / (spec.h() * spec.h());
    let mut out = NodeField3::zeros(n, f.role());
    for c in 0..3 {
        let src = f.comp(c);
        let dst = out.comp_mut(c);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let x = spec.node(i, j, k);
                    let mut acc = -6.0 * src[x];
                    for axis in 0..3 {
                        acc += src[spec.step_up(i, j, k, axis)];
                        acc += src[spec.step_down(i, j, k, axis)];
                    }
                    dst[x] = acc * inv_h2;
                }
            }
        }
    }
    out
}

/// Forward-difference curl. Component c of the output is
/// D+_a f_b - D+_b f_a for (a, b) the cyclic successors of c.
pub fn curl_forward(f: &NodeField3, spec: &LatticeSpec) -> NodeField3 {
    let n = spec.n();
    let inv_h = 1.0 / spec.h();
    let mut out = NodeField3::zeros(n, FieldRole::Velocity);
    for c in 0..3 {
        let a = (c + 1) % 3;
        let b = (c + 2) % 3;
        let fa = f.comp(a);
        let fb = f.comp(b);
        let dst = out.comp_mut(c);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let x = spec.node(i, j, k);
                    let da_fb = fb[spec.step_up(i, j, k, a)] - fb[x];
                    let db_fa = fa[spec.step_up(i, j, k, b)] - fa[x];
                    dst[x] = (da_fb - db_fa) * inv_h;
                }
            }
        }
    }
    out
}

/// Backward-difference divergence: sum over axes of (f_c(x) - f_c(x - h e_c)) / h.
/// Adjoint (up to sign) of the forward gradient, and the natural divergence
/// for edge fields stored at their tail node: on loop-built vorticity every
/// edge enters one node's sum with + and a neighbor's with -, so the result
/// is exactly zero. For `curl_forward` output use `div_forward`; mixing the
/// difference types does not telescope.
pub fn div_backward(f: &NodeField3, spec: &LatticeSpec) -> ScalarField {
    let n = spec.n();
    let inv_h = 1.0 / spec.h();
    let mut out = ScalarField::zeros(n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let x = spec.node(i, j, k);
                let mut acc = 0.0;
                for c in 0..3 {
                    acc += f.comp(c)[x] - f.comp(c)[spec.step_down(i, j, k, c)];
                }
                out.data[x] = acc * inv_h;
            }
        }
    }
    out
}

/// Forward-difference divergence: sum over axes of (f_c(x + h e_c) - f_c(x)) / h.
/// Companion to `curl_forward`: the mixed second differences D+_a D+_b commute,
/// so div_forward(curl_forward(f)) cancels identically for any field.
pub fn div_forward(f: &NodeField3, spec: &LatticeSpec) -> ScalarField {
    let n = spec.n();
    let inv_h = 1.0 / spec.h();
    let mut out = ScalarField::zeros(n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let x = spec.node(i, j, k);
                let mut acc = 0.0;
                for c in 0..3 {
                    acc += f.comp(c)[spec.step_up(i, j, k, c)] - f.comp(c)[x];
                }
                out.data[x] = acc * inv_h;
            }
        }
    }
    out
}
