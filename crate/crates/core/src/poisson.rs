//! Periodic lattice Green function, field solves, and the O(1) energy delta
//! used by the sampler.
//!
//! G is defined by  -lap G = delta_0 - 1/N^3  with zero mean, so for any
//! mean-free vorticity xi the convolution psi = G * xi solves -lap psi = xi
//! with zero-mean psi. Energies then come in two exactly-equal flavors:
//! the velocity form (h^3/2) sum |u|^2 and the interaction form
//! (h^3/2) sum xi . psi. The second one makes the move cost linear in psi,
//! which is what the incremental update exploits.

use crate::error::{Result, VortexError};
use crate::lattice::{curl_forward, FieldRole, LatticeSpec, NodeField3};
use crate::state::{Plaquette, VortexState};

/// Residual tolerance enforced when a Green table is built.
pub const GREEN_RESIDUAL_TOL: f64 = 1e-10;

/// Tabulated periodic Green function, node-indexed with k fastest.
#[derive(Debug, Clone)]
pub struct GreenTable {
    n: usize,
    g: Vec<f64>,
    /// G at the origin.
    g0: f64,
    /// G at a nearest neighbor (all six are equal by cubic symmetry).
    g1: f64,
}

impl GreenTable {
    /// Build by a separable spectral sum: Ghat(n) = 1/lambda(n) with the
    /// zero mode dropped, then three one-dimensional cosine passes. Each
    /// pass stays real because the spectrum is even in every index. The
    /// construction is verified against the defining equation before the
    /// table is returned.
    pub fn build(spec: &LatticeSpec) -> Result<GreenTable> {
        let n = spec.n();
        let nodes = spec.nodes();
        let inv_h2 = 1.0 / (spec.h() * spec.h());

        // 1-D symbol of the second difference, scaled to the lattice.
        let lam1: Vec<f64> = (0..n)
            .map(|s| (2.0 - 2.0 * (2.0 * std::f64::consts::PI * s as f64 / n as f64).cos()) * inv_h2)
            .collect();

        let mut work = vec![0.0f64; nodes];
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let lam = lam1[a] + lam1[b] + lam1[c];
                    work[(a * n + b) * n + c] = if lam > 0.0 { 1.0 / lam } else { 0.0 };
                }
            }
        }

        // cos(2 pi s x / N) lookup, indexed s*n + x.
        let cos_tab: Vec<f64> = (0..n * n)
            .map(|sx| {
                let s = sx / n;
                let x = sx % n;
                (2.0 * std::f64::consts::PI * (s * x % n) as f64 / n as f64).cos()
            })
            .collect();

        // Three passes transform one index each; strides cover the other two.
        let mut next = vec![0.0f64; nodes];
        for pass in 0..3 {
            let stride = match pass {
                0 => n * n, // transform index a
                1 => n,     // index b
                _ => 1,     // index c
            };
            for block in 0..nodes / (n * stride) {
                for lane in 0..stride {
                    let base = block * n * stride + lane;
                    for x in 0..n {
                        let mut acc = 0.0;
                        for s in 0..n {
                            acc += work[base + s * stride] * cos_tab[s * n + x];
                        }
                        next[base + x * stride] = acc;
                    }
                }
            }
            std::mem::swap(&mut work, &mut next);
        }
        let inv_nodes = 1.0 / nodes as f64;
        for v in work.iter_mut() {
            *v *= inv_nodes;
        }

        let table = GreenTable { n, g: work, g0: 0.0, g1: 0.0 };
        let residual = table.poisson_residual(spec);
        if residual.is_nan() || residual > GREEN_RESIDUAL_TOL {
            return Err(VortexError::GreenResidual { residual, tolerance: GREEN_RESIDUAL_TOL });
        }
        let g0 = table.g[0];
        let g1 = table.g[spec.node(1 % n, 0, 0)];
        Ok(GreenTable { g0, g1, ..table })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    /// G at displacement (di, dj, dk), indices already reduced mod N.
    #[inline]
    pub fn at(&self, di: usize, dj: usize, dk: usize) -> f64 {
        self.g[(di * self.n + dj) * self.n + dk]
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.g
    }

    /// Self-energy of stamping one unit loop: the four fresh edges interact
    /// only pairwise within a component, giving 2 gamma_t^2 h^3 (G0 - G1)
    /// with gamma_t = Gamma / h^2.
    pub fn loop_self_energy(&self, gamma: f64, spec: &LatticeSpec) -> f64 {
        let h = spec.h();
        let gt = gamma / (h * h);
        2.0 * gt * gt * h * h * h * (self.g0 - self.g1)
    }

    /// Max-norm residual of  -lap G - (delta_0 - 1/N^3).
    pub fn poisson_residual(&self, spec: &LatticeSpec) -> f64 {
        let n = self.n;
        let nodes = spec.nodes();
        let inv_h2 = 1.0 / (spec.h() * spec.h());
        let inv_nodes = 1.0 / nodes as f64;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let x = spec.node(i, j, k);
                    let mut acc = 6.0 * self.g[x];
                    for axis in 0..3 {
                        acc -= self.g[spec.step_up(i, j, k, axis)];
                        acc -= self.g[spec.step_down(i, j, k, axis)];
                    }
                    let want = if x == 0 { 1.0 - inv_nodes } else { -inv_nodes };
                    worst = worst.max((acc * inv_h2 - want).abs());
                }
            }
        }
        worst
    }

    /// Corrupt one entry (validation hook for the fault-injection check).
    pub fn with_fault(mut self, node: usize, bump: f64) -> GreenTable {
        self.g[node] += bump;
        self
    }
}

/// psi += scale * G(. - base) on one component slice. The inner loop is
/// split at the wrap point so both halves stay contiguous.
#[inline]
fn add_green_shifted(psi: &mut [f64], green: &GreenTable, base: usize, scale: f64) {
    let n = green.n;
    let n2 = n * n;
    let (bi, rem) = (base / n2, base % n2);
    let (bj, bk) = (rem / n, rem % n);
    let g = &green.g[..];
    let split = n - bk;
    for di in 0..n {
        let ti = if bi + di >= n { bi + di - n } else { bi + di };
        for dj in 0..n {
            let tj = if bj + dj >= n { bj + dj - n } else { bj + dj };
            let grow = (di * n + dj) * n;
            let prow = (ti * n + tj) * n;
            let (ga, gb) = g[grow..grow + n].split_at(split);
            let dst = &mut psi[prow..prow + n];
            for (d, s) in dst[bk..].iter_mut().zip(ga) {
                *d += scale * s;
            }
            for (d, s) in dst[..bk].iter_mut().zip(gb) {
                *d += scale * s;
            }
        }
    }
}

/// Vector potential, velocity, and energy of a state.
#[derive(Debug, Clone)]
pub struct FieldSolution {
    pub psi: NodeField3,
    pub u: NodeField3,
    /// Velocity-form energy (h^3/2) sum |u|^2.
    pub energy: f64,
}

/// Solve for psi, u, and the energy of `state`. Fails if the vorticity has
/// net flux in some component, which cannot happen for loop-built states and
/// therefore signals corruption.
pub fn solve_fields(state: &VortexState, green: &GreenTable, spec: &LatticeSpec) -> Result<FieldSolution> {
    for (component, &flux) in state.net_flux().iter().enumerate() {
        if flux != 0 {
            return Err(VortexError::IncompatibleState { component, net_flux: flux });
        }
    }
    let psi = convolve_green(state, green, spec);
    let u = curl_forward(&psi, spec);
    let h = spec.h();
    let energy = 0.5 * h * h * h * u.norm2();
    Ok(FieldSolution { psi, u, energy })
}

fn convolve_green(state: &VortexState, green: &GreenTable, spec: &LatticeSpec) -> NodeField3 {
    let n = spec.n();
    let nodes = spec.nodes();
    let gt = state.gamma().value() / (spec.h() * spec.h());
    let mut psi = NodeField3::zeros(n, FieldRole::VectorPotential);
    let m = state.multiplicities();
    for c in 0..3 {
        let dst = psi.comp_mut(c);
        for (node, &mult) in m[c * nodes..(c + 1) * nodes].iter().enumerate() {
            if mult != 0 {
                add_green_shifted(dst, green, node, mult as f64 * gt);
            }
        }
    }
    psi
}

/// The sampler's live view of the fields: psi kept current by increments,
/// plus the interaction-form energy it implies.
#[derive(Debug, Clone)]
pub struct RunningSolution {
    psi: NodeField3,
    energy: f64,
}

impl RunningSolution {
    /// Fresh solve; energy is the interaction form (h^3/2) sum xi . psi,
    /// which equals the velocity form up to round-off for loop states.
    pub fn solve(state: &VortexState, green: &GreenTable, spec: &LatticeSpec) -> Result<RunningSolution> {
        for (component, &flux) in state.net_flux().iter().enumerate() {
            if flux != 0 {
                return Err(VortexError::IncompatibleState { component, net_flux: flux });
            }
        }
        let psi = convolve_green(state, green, spec);
        let energy = interaction_energy(state, &psi, spec);
        Ok(RunningSolution { psi, energy })
    }

    pub fn empty(spec: &LatticeSpec) -> RunningSolution {
        RunningSolution { psi: NodeField3::zeros(spec.n(), FieldRole::VectorPotential), energy: 0.0 }
    }

    #[inline]
    pub fn psi(&self) -> &NodeField3 {
        &self.psi
    }

    #[inline]
    pub fn energy(&self) -> f64 {
        self.energy
    }

    /// Materialize velocity and the velocity-form energy from the live psi.
    pub fn to_solution(&self, spec: &LatticeSpec) -> FieldSolution {
        let u = curl_forward(&self.psi, spec);
        let h = spec.h();
        let energy = 0.5 * h * h * h * u.norm2();
        FieldSolution { psi: self.psi.clone(), u, energy }
    }
}

/// (h^3/2) sum over edges of xi . psi.
pub fn interaction_energy(state: &VortexState, psi: &NodeField3, spec: &LatticeSpec) -> f64 {
    let nodes = spec.nodes();
    let h = spec.h();
    let gt = state.gamma().value() / (h * h);
    let m = state.multiplicities();
    let mut acc = 0.0;
    for c in 0..3 {
        let p = psi.comp(c);
        let mc = &m[c * nodes..(c + 1) * nodes];
        let mut comp_acc = 0.0;
        for (&mult, &pv) in mc.iter().zip(p) {
            if mult != 0 {
                comp_acc += mult as f64 * pv;
            }
        }
        acc += comp_acc;
    }
    0.5 * h * h * h * gt * acc
}

/// Exact energy change of stamping `p` onto the state behind `run`:
/// the cross term h^3 gamma_t sum_e sign_e psi(edge_e) plus the constant
/// self-energy of the four fresh edge increments. Costs four psi reads.
#[inline]
pub fn energy_delta(
    state: &VortexState,
    run: &RunningSolution,
    p: &Plaquette,
    green: &GreenTable,
    spec: &LatticeSpec,
) -> f64 {
    let h = spec.h();
    let gt = state.gamma().value() / (h * h);
    let mut cross = 0.0;
    for e in p.edges(spec) {
        cross += e.sign as f64 * run.psi.comp(e.comp)[e.node];
    }
    h * h * h * gt * cross + green.loop_self_energy(state.gamma().value(), spec)
}

/// Fold an accepted move into the live psi and energy. `delta_e` must be the
/// value `energy_delta` returned for `p` against this same solution, so the
/// stored energy lands exactly on the post-move value.
pub fn refresh_psi(
    run: &mut RunningSolution,
    state_gamma: f64,
    p: &Plaquette,
    delta_e: f64,
    green: &GreenTable,
    spec: &LatticeSpec,
) {
    let gt = state_gamma / (spec.h() * spec.h());
    for e in p.edges(spec) {
        add_green_shifted(run.psi.comp_mut(e.comp), green, e.node, e.sign as f64 * gt);
    }
    run.energy += delta_e;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use crate::state::{Circulation, Plane, VortexState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(n: usize) -> LatticeSpec {
        LatticeSpec::new(n).unwrap()
    }

    fn random_plaquette<R: Rng>(rng: &mut R, n: usize) -> Plaquette {
        Plaquette {
            base: [rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(0..n)],
            plane: Plane::from_index(rng.gen_range(0..3)),
            orientation: if rng.gen::<bool>() { 1 } else { -1 },
        }
    }

    fn random_state(n: usize, loops: usize, seed: u64) -> (LatticeSpec, VortexState) {
        let sp = spec(n);
        let mut st = VortexState::empty(&sp, Circulation::new(1.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..loops {
            st.apply_plaquette(&random_plaquette(&mut rng, n), &sp);
        }
        (sp, st)
    }

    #[test]
    fn green_matches_dense_inverse() {
        for n in [2, 3, 4] {
            let sp = spec(n);
            let green = GreenTable::build(&sp).unwrap();
            let dense = reference::dense_green_column(&sp).unwrap();
            for (x, (g, d)) in green.values().iter().zip(&dense).enumerate() {
                assert!((g - d).abs() <= 1e-10, "n={n} node={x}: {g} vs {d}");
            }
        }
    }

    #[test]
    fn green_has_cubic_symmetry() {
        let sp = spec(5);
        let g = GreenTable::build(&sp).unwrap();
        let n = 5;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let v = g.at(i, j, k);
                    // Reflection through the origin and index permutations.
                    for w in [
                        g.at((n - i) % n, j, k),
                        g.at(j, i, k),
                        g.at(k, j, i),
                        g.at(i, k, j),
                    ] {
                        assert!((v - w).abs() <= 1e-13);
                    }
                }
            }
        }
    }

    #[test]
    fn corrupted_green_fails_residual_check() {
        let sp = spec(4);
        let g = GreenTable::build(&sp).unwrap().with_fault(7, 1e-6);
        assert!(g.poisson_residual(&sp) > GREEN_RESIDUAL_TOL);
    }

    #[test]
    fn self_energy_closed_form() {
        // 2 gamma_t^2 h^3 (G0 - G1) collapses to Gamma^2 h (1 - N^-3) / 3.
        for n in [2, 4, 8] {
            let sp = spec(n);
            let g = GreenTable::build(&sp).unwrap();
            for gamma in [1.0, 2.5] {
                let want = gamma * gamma * sp.h() * (1.0 - 1.0 / sp.nodes() as f64) / 3.0;
                let got = g.loop_self_energy(gamma, &sp);
                assert!((got - want).abs() <= 1e-12 * want, "n={n}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn single_loop_energy_is_the_self_energy() {
        let sp = spec(4);
        let g = GreenTable::build(&sp).unwrap();
        let mut st = VortexState::empty(&sp, Circulation::new(1.0).unwrap());
        st.apply_plaquette(&Plaquette { base: [2, 1, 0], plane: Plane::Xy, orientation: 1 }, &sp);
        let sol = solve_fields(&st, &g, &sp).unwrap();
        let want = g.loop_self_energy(1.0, &sp);
        assert!((sol.energy - want).abs() <= 1e-12 * want);
        // Both energy forms agree.
        let inter = interaction_energy(&st, &sol.psi, &sp);
        assert!((inter - sol.energy).abs() <= 1e-12 * want);
    }

    #[test]
    fn spectral_solve_matches_dense_solve() {
        let (sp, st) = random_state(4, 60, 21);
        let g = GreenTable::build(&sp).unwrap();
        let sol = solve_fields(&st, &g, &sp).unwrap();
        let (u_dense, e_dense) = reference::dense_solution(&st, &sp).unwrap();
        assert!((sol.energy - e_dense).abs() <= 1e-10 * e_dense.abs().max(1.0));
        for x in 0..3 * sp.nodes() {
            let a = sol.u.as_slice()[x];
            let b = u_dense.as_slice()[x];
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn energy_forms_agree_on_random_states() {
        for seed in 0..5 {
            let (sp, st) = random_state(4, 80, 1000 + seed);
            let g = GreenTable::build(&sp).unwrap();
            let sol = solve_fields(&st, &g, &sp).unwrap();
            let inter = interaction_energy(&st, &sol.psi, &sp);
            assert!(
                (inter - sol.energy).abs() <= 1e-11 * sol.energy.abs().max(1e-12),
                "seed {seed}: {inter} vs {}",
                sol.energy
            );
        }
    }

    #[test]
    fn energy_delta_matches_full_recompute() {
        let (sp, mut st) = random_state(4, 40, 5);
        let g = GreenTable::build(&sp).unwrap();
        let mut run = RunningSolution::solve(&st, &g, &sp).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for step in 0..300 {
            let p = random_plaquette(&mut rng, 4);
            let de = energy_delta(&st, &run, &p, &g, &sp);
            let before = RunningSolution::solve(&st, &g, &sp).unwrap().energy();
            st.apply_plaquette(&p, &sp);
            let after = RunningSolution::solve(&st, &g, &sp).unwrap().energy();
            let scale = before.abs().max(after.abs()).max(1e-9);
            assert!(
                ((after - before) - de).abs() <= 1e-11 * scale,
                "step {step}: de={de} vs {}",
                after - before
            );
            refresh_psi(&mut run, 1.0, &p, de, &g, &sp);
        }
    }

    #[test]
    fn add_then_remove_is_energy_neutral() {
        let (sp, mut st) = random_state(4, 30, 77);
        let g = GreenTable::build(&sp).unwrap();
        let mut run = RunningSolution::solve(&st, &g, &sp).unwrap();
        let p = Plaquette { base: [3, 0, 2], plane: Plane::Zx, orientation: 1 };
        let psi_before = run.psi().clone();

        let de1 = energy_delta(&st, &run, &p, &g, &sp);
        st.apply_plaquette(&p, &sp);
        refresh_psi(&mut run, 1.0, &p, de1, &g, &sp);

        let q = p.reversed();
        let de2 = energy_delta(&st, &run, &q, &g, &sp);
        st.apply_plaquette(&q, &sp);
        refresh_psi(&mut run, 1.0, &q, de2, &g, &sp);

        assert!((de1 + de2).abs() <= 1e-12 * de1.abs().max(1.0));
        for (a, b) in run.psi().as_slice().iter().zip(psi_before.as_slice()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn incremental_psi_tracks_fresh_solve() {
        let sp = spec(4);
        let g = GreenTable::build(&sp).unwrap();
        let mut st = VortexState::empty(&sp, Circulation::new(1.0).unwrap());
        let mut run = RunningSolution::empty(&sp);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let p = random_plaquette(&mut rng, 4);
            let de = energy_delta(&st, &run, &p, &g, &sp);
            st.apply_plaquette(&p, &sp);
            refresh_psi(&mut run, 1.0, &p, de, &g, &sp);
        }
        let fresh = RunningSolution::solve(&st, &g, &sp).unwrap();
        let mut worst = 0.0f64;
        for (a, b) in run.psi().as_slice().iter().zip(fresh.psi().as_slice()) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst <= 1e-9, "psi drift {worst}");
        assert!((run.energy() - fresh.energy()).abs() <= 1e-9 * fresh.energy().abs().max(1.0));
    }

    #[test]
    fn one_accepted_loop_reproduces_direct_solve() {
        let sp = spec(3);
        let g = GreenTable::build(&sp).unwrap();
        let mut st = VortexState::empty(&sp, Circulation::new(2.0).unwrap());
        let mut run = RunningSolution::empty(&sp);
        let p = Plaquette { base: [1, 0, 2], plane: Plane::Yz, orientation: -1 };
        let de = energy_delta(&st, &run, &p, &g, &sp);
        st.apply_plaquette(&p, &sp);
        refresh_psi(&mut run, 2.0, &p, de, &g, &sp);
        let direct = RunningSolution::solve(&st, &g, &sp).unwrap();
        for (a, b) in run.psi().as_slice().iter().zip(direct.psi().as_slice()) {
            assert!((a - b).abs() <= 1e-13);
        }
        assert!((run.energy() - direct.energy()).abs() <= 1e-13 * direct.energy());
    }

    #[test]
    fn solve_rejects_net_flux() {
        // A straight periodic line of edges is divergence free but carries
        // net flux; it cannot be built from loops and must be rejected.
        let sp = spec(3);
        let nodes = sp.nodes();
        let mut m = vec![0i32; 3 * nodes];
        // Component 0 line along axis 0 at j=k=0: edges (0,0,0),(1,0,0),(2,0,0).
        for i in 0..3 {
            m[sp.node(i, 0, 0)] = 1;
        }
        let gamma = Circulation::new(1.0).unwrap();
        let err = VortexState::from_multiplicities(&sp, gamma, m).unwrap_err();
        match err {
            VortexError::IncompatibleState { component: 0, net_flux: 3 } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }
}
