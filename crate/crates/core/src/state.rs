//! Integer vortex-loop configurations.
//!
//! The vorticity lives on lattice edges: component c on the edge from x to
//! x + h e_c carries xi_c(x) = m Gamma / h^2 with integer multiplicity m.
//! States are built exclusively by stamping elementary square loops
//! (plaquette boundaries), which keeps the backward divergence of xi exactly
//! zero and the net flux of every component exactly zero.

use std::io::{Read, Write};

use crate::error::{Result, VortexError};
use crate::lattice::{FieldRole, LatticeSpec, NodeField3};

/// Loop circulation Gamma. Validated finite and strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circulation(f64);

impl Circulation {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || value <= 0.0 {
            return Err(VortexError::InvalidCirculation { value });
        }
        Ok(Self(value))
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Coordinate plane of an elementary loop, identified by its two in-plane
/// axes in cyclic order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plane {
    /// axes (0, 1)
    Xy,
    /// axes (1, 2)
    Yz,
    /// axes (2, 0)
    Zx,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Xy, Plane::Yz, Plane::Zx];

    #[inline]
    pub fn from_index(idx: usize) -> Plane {
        Plane::ALL[idx]
    }

    #[inline]
    pub fn index(&self) -> usize {
        match self {
            Plane::Xy => 0,
            Plane::Yz => 1,
            Plane::Zx => 2,
        }
    }

    /// The two in-plane axes (a, b); the loop spans h e_a and h e_b.
    #[inline]
    pub fn axes(&self) -> (usize, usize) {
        match self {
            Plane::Xy => (0, 1),
            Plane::Yz => (1, 2),
            Plane::Zx => (2, 0),
        }
    }
}

/// An elementary vortex loop: the boundary of one lattice square, traversed
/// with `orientation` +1 or -1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Plaquette {
    pub base: [usize; 3],
    pub plane: Plane,
    pub orientation: i8,
}

/// One edge touched by a plaquette: vorticity component, flat node index of
/// the edge tail, and the sign of the multiplicity increment.
#[derive(Debug, Clone, Copy)]
pub struct EdgeTouch {
    pub comp: usize,
    pub node: usize,
    pub sign: i32,
}

impl Plaquette {
    /// The four directed edges of the loop boundary. Walking the square
    /// x -> x+he_a -> x+he_a+he_b -> x+he_b -> x adds +1 to the two edges
    /// traversed forward and -1 to the two traversed backward.
    pub fn edges(&self, spec: &LatticeSpec) -> [EdgeTouch; 4] {
        let (a, b) = self.plane.axes();
        let s = self.orientation as i32;
        let [i, j, k] = self.base;
        let x = spec.node(i, j, k);
        let xa = spec.step_up(i, j, k, a);
        let xb = spec.step_up(i, j, k, b);
        [
            EdgeTouch { comp: a, node: x, sign: s },
            EdgeTouch { comp: b, node: xa, sign: s },
            EdgeTouch { comp: a, node: xb, sign: -s },
            EdgeTouch { comp: b, node: x, sign: -s },
        ]
    }

    /// Same loop traversed the opposite way; applying both is a no-op.
    pub fn reversed(&self) -> Plaquette {
        Plaquette { base: self.base, plane: self.plane, orientation: -self.orientation }
    }
}

/// Integer multiplicity lattice plus running sums that make the quadratic
/// invariants O(1) to read.
#[derive(Debug, Clone, PartialEq)]
pub struct VortexState {
    n: usize,
    gamma: Circulation,
    /// Multiplicities, component-major, k fastest (same layout as NodeField3).
    m: Vec<i32>,
    /// Net flux per component; stays 0 under plaquette moves.
    sum_m: [i64; 3],
    /// Sum of m^2 over all edges.
    sum_m2: i64,
    /// Sum of |m| over all edges.
    sum_abs: i64,
}

impl VortexState {
    pub fn empty(spec: &LatticeSpec, gamma: Circulation) -> Self {
        let n = spec.n();
        Self {
            n,
            gamma,
            m: vec![0; 3 * n * n * n],
            sum_m: [0; 3],
            sum_m2: 0,
            sum_abs: 0,
        }
    }

    /// Rebuild a state from raw multiplicities, validating that they describe
    /// closed loops (zero net flux per component and integer divergence zero
    /// at every node). Rejects corrupted checkpoints.
    pub fn from_multiplicities(spec: &LatticeSpec, gamma: Circulation, m: Vec<i32>) -> Result<Self> {
        let n = spec.n();
        if m.len() != 3 * n * n * n {
            return Err(VortexError::InvalidConfig {
                what: format!("multiplicity array has {} entries, expected {}", m.len(), 3 * n * n * n),
            });
        }
        let nodes = n * n * n;
        let mut sum_m = [0i64; 3];
        let mut sum_m2 = 0i64;
        let mut sum_abs = 0i64;
        for c in 0..3 {
            for x in 0..nodes {
                let v = m[c * nodes + x] as i64;
                sum_m[c] += v;
                sum_m2 += v * v;
                sum_abs += v.abs();
            }
        }
        for (c, &flux) in sum_m.iter().enumerate() {
            if flux != 0 {
                return Err(VortexError::IncompatibleState { component: c, net_flux: flux });
            }
        }
        let state = Self { n, gamma, m, sum_m, sum_m2, sum_abs };
        if let Some((node, residual)) = state.first_divergence_defect(spec) {
            return Err(VortexError::NotDivergenceFree { node, residual });
        }
        Ok(state)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn gamma(&self) -> Circulation {
        self.gamma
    }

    #[inline]
    pub fn multiplicities(&self) -> &[i32] {
        &self.m
    }

    #[inline]
    pub fn net_flux(&self) -> [i64; 3] {
        self.sum_m
    }

    #[inline]
    pub fn sum_m2(&self) -> i64 {
        self.sum_m2
    }

    #[inline]
    pub fn multiplicity_at(&self, edge: &EdgeTouch) -> i32 {
        let nodes = self.n * self.n * self.n;
        self.m[edge.comp * nodes + edge.node]
    }

    /// Stamp one loop onto the lattice, updating the running sums.
    pub fn apply_plaquette(&mut self, p: &Plaquette, spec: &LatticeSpec) {
        let nodes = self.n * self.n * self.n;
        for e in p.edges(spec) {
            let slot = &mut self.m[e.comp * nodes + e.node];
            let old = *slot as i64;
            let new = old + e.sign as i64;
            *slot = new as i32;
            self.sum_m[e.comp] += e.sign as i64;
            self.sum_m2 += new * new - old * old;
            self.sum_abs += new.abs() - old.abs();
        }
    }

    /// Exact change of sum_m2 if `p` were applied; used for the enstrophy
    /// budget check without touching the state.
    #[inline]
    pub fn delta_sum_m2(&self, p: &Plaquette, spec: &LatticeSpec) -> i64 {
        let nodes = self.n * self.n * self.n;
        let mut d = 0i64;
        for e in p.edges(spec) {
            let m = self.m[e.comp * nodes + e.node] as i64;
            // (m + s)^2 - m^2 with s = +-1
            d += 2 * m * e.sign as i64 + 1;
        }
        d
    }

    /// Enstrophy Z2 = h^3 sum |xi|^2 = (Gamma^2 / h) sum m^2, exact up to one
    /// float multiply.
    pub fn enstrophy_z2(&self, spec: &LatticeSpec) -> f64 {
        self.enstrophy_unit(spec) * self.sum_m2 as f64
    }

    /// Z2 carried by one unit of sum m^2, i.e. Gamma^2 / h.
    #[inline]
    pub fn enstrophy_unit(&self, spec: &LatticeSpec) -> f64 {
        let g = self.gamma.value();
        g * g / spec.h()
    }

    /// Total filament length L = h sum |m|.
    pub fn filament_length(&self, spec: &LatticeSpec) -> f64 {
        spec.h() * self.sum_abs as f64
    }

    /// Dimensionless loop parameter L sqrt(E) / Gamma.
    pub fn lambda_parameter(&self, energy: f64, spec: &LatticeSpec) -> f64 {
        debug_assert!(energy >= -1e-12);
        self.filament_length(spec) * energy.max(0.0).sqrt() / self.gamma.value()
    }

    /// Vorticity as a float field, xi = m Gamma / h^2.
    pub fn xi_field(&self, spec: &LatticeSpec) -> NodeField3 {
        let scale = self.gamma.value() / (spec.h() * spec.h());
        let data = self.m.iter().map(|&v| v as f64 * scale).collect();
        NodeField3::from_data(self.n, FieldRole::Vorticity, data)
    }

    /// First node where the integer backward divergence of m is nonzero,
    /// if any. None means the state is exactly divergence free.
    pub fn first_divergence_defect(&self, spec: &LatticeSpec) -> Option<(usize, i64)> {
        let n = self.n;
        let nodes = n * n * n;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let x = spec.node(i, j, k);
                    let mut acc = 0i64;
                    for c in 0..3 {
                        acc += self.m[c * nodes + x] as i64;
                        acc -= self.m[c * nodes + spec.step_down(i, j, k, c)] as i64;
                    }
                    if acc != 0 {
                        return Some((x, acc));
                    }
                }
            }
        }
        None
    }

    /// Recompute the running sums from scratch (test/validation hook).
    pub fn recompute_sums(&self) -> ([i64; 3], i64, i64) {
        let nodes = self.n * self.n * self.n;
        let mut sum_m = [0i64; 3];
        let mut sum_m2 = 0;
        let mut sum_abs = 0;
        for (c, sm) in sum_m.iter_mut().enumerate() {
            for x in 0..nodes {
                let v = self.m[c * nodes + x] as i64;
                *sm += v;
                sum_m2 += v * v;
                sum_abs += v.abs();
            }
        }
        (sum_m, sum_m2, sum_abs)
    }
}

const STATE_MAGIC: &[u8; 4] = b"VXST";
const STATE_VERSION: u16 = 1;

impl VortexState {
    /// Serialize to the versioned little-endian state format:
    /// magic "VXST", version u16, n u32, gamma f64, then the i32
    /// multiplicities component-major with k fastest.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(STATE_MAGIC)?;
        w.write_all(&STATE_VERSION.to_le_bytes())?;
        w.write_all(&(self.n as u32).to_le_bytes())?;
        w.write_all(&self.gamma.value().to_le_bytes())?;
        for &v in &self.m {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Inverse of [`write_checkpoint`]. Validates magic, version, and loop
    /// closure, so a corrupted file cannot produce a usable state.
    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != STATE_MAGIC {
            return Err(VortexError::CheckpointFormat { what: "bad state magic".into() });
        }
        let version = read_u16(r)?;
        if version != STATE_VERSION {
            return Err(VortexError::CheckpointFormat {
                what: format!("unsupported state version {version}"),
            });
        }
        let n = read_u32(r)? as usize;
        let spec = LatticeSpec::new(n).map_err(|_| VortexError::CheckpointFormat {
            what: format!("bad lattice size {n}"),
        })?;
        let gamma = Circulation::new(read_f64(r)?).map_err(|_| VortexError::CheckpointFormat {
            what: "bad circulation".into(),
        })?;
        let mut m = vec![0i32; 3 * n * n * n];
        for v in &mut m {
            *v = read_i32(r)?;
        }
        Self::from_multiplicities(&spec, gamma, m)
    }
}

pub(crate) fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_u128<R: Read>(r: &mut R) -> Result<u128> {
    let mut b = [0u8; 16];
    r.read_exact(&mut b)?;
    Ok(u128::from_le_bytes(b))
}

pub(crate) fn read_i32<R: Read>(r: &mut R) -> Result<i32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(i32::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
