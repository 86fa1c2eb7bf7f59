//! Velocity statistics over sampled states: longitudinal structure function,
//! componentwise moments, and cross-chain aggregation.
//!
//! All reductions run over immutable sample slices (parallel over samples,
//! deterministic order), and error bars come from contiguous-block jackknife
//! so correlated successive snapshots stay honestly counted.

use crate::error::{Result, VortexError};
use crate::lattice::LatticeSpec;
use crate::poisson::{solve_fields, FieldSolution, GreenTable};
use crate::sampler::{jackknife_stderr, Snapshot};
use crate::state::{Circulation, VortexState};
use rayon::prelude::*;

/// Largest jackknife block count; fewer samples fall back to one per block.
const MAX_BLOCKS: usize = 20;

/// Mean and contiguous-block jackknife stderr of per-sample values.
pub(crate) fn block_jackknife(per_sample: &[f64]) -> (f64, f64) {
    let n = per_sample.len();
    let total: f64 = per_sample.iter().sum();
    let mean = total / n as f64;
    let nb = n.min(MAX_BLOCKS);
    if nb < 2 {
        return (mean, f64::INFINITY);
    }
    let mut loo = Vec::with_capacity(nb);
    for b in 0..nb {
        let lo = b * n / nb;
        let hi = (b + 1) * n / nb;
        let block: f64 = per_sample[lo..hi].iter().sum();
        loo.push((total - block) / (n - (hi - lo)) as f64);
    }
    (mean, jackknife_stderr(&loo))
}

/// Solve each integer snapshot back into fields. Deterministic: the output
/// order matches the snapshot order regardless of thread scheduling.
pub fn solutions_from_snapshots(
    snapshots: &[Snapshot],
    gamma: Circulation,
    spec: &LatticeSpec,
    green: &GreenTable,
) -> Result<Vec<FieldSolution>> {
    snapshots
        .par_iter()
        .map(|snap| {
            let state = VortexState::from_multiplicities(spec, gamma, snap.multiplicities.clone())?;
            solve_fields(&state, green, spec)
        })
        .collect()
}

/// Componentwise velocity moments <u_c^p> with jackknife error bars.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTable {
    max_p: usize,
    n_samples: usize,
    /// moments[c][p-1] = <u_c^p> over all nodes and samples.
    moments: [Vec<f64>; 3],
    stderr: [Vec<f64>; 3],
}

impl MomentTable {
    #[inline]
    pub fn max_p(&self) -> usize {
        self.max_p
    }

    #[inline]
    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    #[inline]
    pub fn moment(&self, c: usize, p: usize) -> f64 {
        self.moments[c][p - 1]
    }

    #[inline]
    pub fn stderr(&self, c: usize, p: usize) -> f64 {
        self.stderr[c][p - 1]
    }

    /// <u_c^4> / <u_c^2>^2; None when the fourth moment is out of range or
    /// the second moment vanishes.
    pub fn flatness(&self, c: usize) -> Option<f64> {
        if self.max_p < 4 {
            return None;
        }
        let m2 = self.moment(c, 2);
        if m2 <= 0.0 {
            return None;
        }
        Some(self.moment(c, 4) / (m2 * m2))
    }

    /// <|u|^2>: sum of the three component second moments.
    pub fn mean_speed_squared(&self) -> f64 {
        (0..3).map(|c| self.moment(c, 2)).sum()
    }

    /// Largest pairwise discrepancy between component second moments, in
    /// combined-stderr units. Cubic-symmetric ensembles should keep this small.
    pub fn isotropy_max_sigma(&self) -> f64 {
        let mut worst = 0.0f64;
        for a in 0..3 {
            for b in (a + 1)..3 {
                let d = (self.moment(a, 2) - self.moment(b, 2)).abs();
                let s = (self.stderr(a, 2).powi(2) + self.stderr(b, 2).powi(2)).sqrt();
                if s > 0.0 {
                    worst = worst.max(d / s);
                } else if d > 0.0 {
                    worst = f64::INFINITY;
                }
            }
        }
        worst
    }
}

/// Node-and-sample averages of u_c^p for p = 1..max_p, per component.
/// Needs at least two samples for the error bars.
pub fn velocity_moments(
    samples: &[FieldSolution],
    spec: &LatticeSpec,
    max_p: usize,
) -> Result<MomentTable> {
    if samples.len() < 2 {
        return Err(VortexError::InsufficientSamples { got: samples.len(), needed: 2 });
    }
    if max_p == 0 {
        return Err(VortexError::InvalidConfig { what: "max_p must be at least 1".into() });
    }
    let nodes = spec.nodes() as f64;

    // per_sample[s][c * max_p + (p-1)]
    let per_sample: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|sol| {
            let mut acc = vec![0.0; 3 * max_p];
            for c in 0..3 {
                for &v in sol.u.comp(c) {
                    let mut pw = v;
                    for p in 0..max_p {
                        acc[c * max_p + p] += pw;
                        pw *= v;
                    }
                }
            }
            for a in &mut acc {
                *a /= nodes;
            }
            acc
        })
        .collect();

    let mut moments: [Vec<f64>; 3] = Default::default();
    let mut stderr: [Vec<f64>; 3] = Default::default();
    let mut series = Vec::with_capacity(samples.len());
    for c in 0..3 {
        for p in 0..max_p {
            series.clear();
            series.extend(per_sample.iter().map(|s| s[c * max_p + p]));
            let (m, e) = block_jackknife(&series);
            moments[c].push(m);
            stderr[c].push(e);
        }
    }
    Ok(MomentTable { max_p, n_samples: samples.len(), moments, stderr })
}

/// Second-order longitudinal structure function on axis-aligned separations
/// r = m h, m = 1..N/2, averaged over nodes, the three axes, and samples.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureFunction {
    pub separations: Vec<f64>,
    /// <(u_k(x + m h e_k) - u_k(x))^2>, axis-averaged.
    pub raw: Vec<f64>,
    pub raw_stderr: Vec<f64>,
    /// raw scaled so the large-separation plateau sits at 1; None when the
    /// plateau is degenerate (constant field).
    pub normalized: Option<Vec<f64>>,
    pub normalized_stderr: Option<Vec<f64>>,
    /// 1 / plateau, the empirical normalization constant.
    pub c_empirical: Option<f64>,
    /// (4/3) / <|u|^2>, reported for comparison only.
    pub c_alternative: Option<f64>,
    /// Mean of raw over the largest quarter of separations.
    pub plateau_raw: f64,
    pub mean_speed_squared: f64,
    pub n_samples: usize,
}

impl StructureFunction {
    /// Number of trailing separations that define the plateau.
    pub fn plateau_len(&self) -> usize {
        (self.separations.len() / 4).max(1)
    }
}

pub fn structure_function(
    samples: &[FieldSolution],
    spec: &LatticeSpec,
) -> Result<StructureFunction> {
    if samples.is_empty() {
        return Err(VortexError::InsufficientSamples { got: 0, needed: 1 });
    }
    let n = spec.n();
    let seps = n / 2;
    let nodes = spec.nodes() as f64;

    // per_sample[s][m-1]: axis-averaged squared longitudinal increment.
    let per_sample: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|sol| {
            let mut acc = vec![0.0; seps];
            for k in 0..3 {
                let u = sol.u.comp(k);
                for i in 0..n {
                    for j in 0..n {
                        for l in 0..n {
                            let x = spec.node(i, j, l);
                            let mut ahead = [i, j, l];
                            for m in 1..=seps {
                                ahead[k] = (ahead[k] + 1) % n;
                                let d = u[spec.node(ahead[0], ahead[1], ahead[2])] - u[x];
                                acc[m - 1] += d * d;
                            }
                        }
                    }
                }
            }
            for a in &mut acc {
                *a /= 3.0 * nodes;
            }
            acc
        })
        .collect();

    let mut raw = Vec::with_capacity(seps);
    let mut raw_stderr = Vec::with_capacity(seps);
    let mut series = Vec::with_capacity(samples.len());
    for m in 0..seps {
        series.clear();
        series.extend(per_sample.iter().map(|s| s[m]));
        let (v, e) = block_jackknife(&series);
        raw.push(v);
        raw_stderr.push(e);
    }

    let mean_speed_squared = samples
        .iter()
        .map(|sol| sol.u.norm2() / nodes)
        .sum::<f64>()
        / samples.len() as f64;

    let q = (seps / 4).max(1);
    let plateau_raw = raw[seps - q..].iter().sum::<f64>() / q as f64;
    // Plateau treated as a constant when scaling error bars; its own
    // uncertainty is visible in the raw columns.
    let (normalized, normalized_stderr, c_empirical) = if plateau_raw > 0.0 && plateau_raw.is_finite()
    {
        let c = 1.0 / plateau_raw;
        (
            Some(raw.iter().map(|v| v * c).collect()),
            Some(raw_stderr.iter().map(|e| e * c).collect()),
            Some(c),
        )
    } else {
        (None, None, None)
    };
    let c_alternative =
        if mean_speed_squared > 0.0 { Some((4.0 / 3.0) / mean_speed_squared) } else { None };

    Ok(StructureFunction {
        separations: (1..=seps).map(|m| m as f64 * spec.h()).collect(),
        raw,
        raw_stderr,
        normalized,
        normalized_stderr,
        c_empirical,
        c_alternative,
        plateau_raw,
        mean_speed_squared,
        n_samples: samples.len(),
    })
}

/// Inverse-variance merge of per-chain estimates of one quantity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergedEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_chains: usize,
    /// Chains left after collapsing bit-identical duplicates.
    pub n_independent: usize,
    /// Largest pairwise discrepancy between independent chains, in
    /// combined-stderr units.
    pub max_pair_sigma: f64,
}

impl MergedEstimate {
    /// Bit-identical chains were collapsed; usually a duplicated seed.
    pub fn duplicates_detected(&self) -> bool {
        self.n_independent < self.n_chains
    }

    /// Chains disagree beyond 3 sigma; usually failed equilibration.
    pub fn discrepant(&self) -> bool {
        self.max_pair_sigma > 3.0
    }
}

/// Merge (value, stderr) pairs from independent chains. Bit-identical pairs
/// collapse to one vote first, so rerunning the same seed twice cannot shrink
/// the error bar. Falls back to an equal-weight mean with scatter-based
/// stderr when the error bars are unusable (zero or non-finite).
pub fn merge_estimates(estimates: &[(f64, f64)]) -> Result<MergedEstimate> {
    if estimates.is_empty() {
        return Err(VortexError::InsufficientSamples { got: 0, needed: 1 });
    }
    let mut unique: Vec<(f64, f64)> = Vec::with_capacity(estimates.len());
    for &(v, s) in estimates {
        let dup = unique
            .iter()
            .any(|&(uv, us)| uv.to_bits() == v.to_bits() && us.to_bits() == s.to_bits());
        if !dup {
            unique.push((v, s));
        }
    }

    let mut max_pair_sigma = 0.0f64;
    for a in 0..unique.len() {
        for b in (a + 1)..unique.len() {
            let d = (unique[a].0 - unique[b].0).abs();
            let s = (unique[a].1 * unique[a].1 + unique[b].1 * unique[b].1).sqrt();
            if s > 0.0 && s.is_finite() {
                max_pair_sigma = max_pair_sigma.max(d / s);
            } else if d > 0.0 {
                max_pair_sigma = f64::INFINITY;
            }
        }
    }

    let usable = unique.iter().all(|&(_, s)| s > 0.0 && s.is_finite());
    let (value, stderr) = if unique.len() == 1 {
        // Exact pass-through: a collapsed duplicate set must not drift by
        // round-off, so reruns of one seed merge to the original bits.
        unique[0]
    } else if usable {
        let wsum: f64 = unique.iter().map(|&(_, s)| 1.0 / (s * s)).sum();
        let value = unique.iter().map(|&(v, s)| v / (s * s)).sum::<f64>() / wsum;
        (value, (1.0 / wsum).sqrt())
    } else {
        let k = unique.len() as f64;
        let mean = unique.iter().map(|&(v, _)| v).sum::<f64>() / k;
        let var = unique.iter().map(|&(v, _)| (v - mean) * (v - mean)).sum::<f64>() / k;
        let stderr = if unique.len() > 1 { (var / (k - 1.0)).sqrt() } else { f64::INFINITY };
        (mean, stderr)
    };

    Ok(MergedEstimate {
        value,
        stderr,
        n_chains: estimates.len(),
        n_independent: unique.len(),
        max_pair_sigma,
    })
}

/// Cross-chain health summary attached to merged tables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateReport {
    pub n_chains: usize,
    pub n_independent: usize,
    pub max_pair_sigma: f64,
}

impl AggregateReport {
    pub fn duplicates_detected(&self) -> bool {
        self.n_independent < self.n_chains
    }

    pub fn discrepant(&self) -> bool {
        self.max_pair_sigma > 3.0
    }
}

/// Cell-wise merge of per-chain moment tables. Tables that are bit-identical
/// collapse to one before merging.
pub fn aggregate_moment_tables(tables: &[MomentTable]) -> Result<(MomentTable, AggregateReport)> {
    if tables.is_empty() {
        return Err(VortexError::InsufficientSamples { got: 0, needed: 1 });
    }
    let max_p = tables[0].max_p;
    if tables.iter().any(|t| t.max_p != max_p) {
        return Err(VortexError::InvalidConfig { what: "moment tables disagree on max_p".into() });
    }
    let mut unique: Vec<&MomentTable> = Vec::with_capacity(tables.len());
    for t in tables {
        if !unique.iter().any(|u| bitwise_table_eq(u, t)) {
            unique.push(t);
        }
    }

    let mut moments: [Vec<f64>; 3] = Default::default();
    let mut stderr: [Vec<f64>; 3] = Default::default();
    let mut max_pair_sigma = 0.0f64;
    for c in 0..3 {
        for p in 1..=max_p {
            let cells: Vec<(f64, f64)> =
                unique.iter().map(|t| (t.moment(c, p), t.stderr(c, p))).collect();
            let merged = merge_estimates(&cells)?;
            max_pair_sigma = max_pair_sigma.max(merged.max_pair_sigma);
            moments[c].push(merged.value);
            stderr[c].push(merged.stderr);
        }
    }
    let merged = MomentTable {
        max_p,
        n_samples: unique.iter().map(|t| t.n_samples).sum(),
        moments,
        stderr,
    };
    let report = AggregateReport {
        n_chains: tables.len(),
        n_independent: unique.len(),
        max_pair_sigma,
    };
    Ok((merged, report))
}

fn bitwise_table_eq(a: &MomentTable, b: &MomentTable) -> bool {
    if a.max_p != b.max_p || a.n_samples != b.n_samples {
        return false;
    }
    for c in 0..3 {
        let same = a.moments[c]
            .iter()
            .zip(&b.moments[c])
            .all(|(x, y)| x.to_bits() == y.to_bits())
            && a.stderr[c].iter().zip(&b.stderr[c]).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            return false;
        }
    }
    true
}

/// Separation-wise merge of per-chain structure functions; the plateau and
/// normalization are recomputed from the merged raw curve.
pub fn aggregate_structure_functions(
    curves: &[StructureFunction],
) -> Result<(StructureFunction, AggregateReport)> {
    if curves.is_empty() {
        return Err(VortexError::InsufficientSamples { got: 0, needed: 1 });
    }
    let seps = &curves[0].separations;
    if curves.iter().any(|c| c.separations != *seps) {
        return Err(VortexError::InvalidConfig { what: "structure functions disagree on separations".into() });
    }
    let mut unique: Vec<&StructureFunction> = Vec::with_capacity(curves.len());
    for c in curves {
        let dup = unique.iter().any(|u| {
            u.n_samples == c.n_samples
                && u.raw.iter().zip(&c.raw).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        if !dup {
            unique.push(c);
        }
    }

    let mut raw = Vec::with_capacity(seps.len());
    let mut raw_stderr = Vec::with_capacity(seps.len());
    let mut max_pair_sigma = 0.0f64;
    for m in 0..seps.len() {
        let cells: Vec<(f64, f64)> =
            unique.iter().map(|c| (c.raw[m], c.raw_stderr[m])).collect();
        let merged = merge_estimates(&cells)?;
        max_pair_sigma = max_pair_sigma.max(merged.max_pair_sigma);
        raw.push(merged.value);
        raw_stderr.push(merged.stderr);
    }
    let total_samples: usize = unique.iter().map(|c| c.n_samples).sum();
    let mean_speed_squared = unique
        .iter()
        .map(|c| c.mean_speed_squared * c.n_samples as f64)
        .sum::<f64>()
        / total_samples as f64;

    let q = (seps.len() / 4).max(1);
    let plateau_raw = raw[seps.len() - q..].iter().sum::<f64>() / q as f64;
    let (normalized, normalized_stderr, c_empirical) = if plateau_raw > 0.0 && plateau_raw.is_finite()
    {
        let c = 1.0 / plateau_raw;
        (
            Some(raw.iter().map(|v| v * c).collect::<Vec<_>>()),
            Some(raw_stderr.iter().map(|e| e * c).collect::<Vec<_>>()),
            Some(c),
        )
    } else {
        (None, None, None)
    };
    let c_alternative =
        if mean_speed_squared > 0.0 { Some((4.0 / 3.0) / mean_speed_squared) } else { None };

    let merged = StructureFunction {
        separations: seps.clone(),
        raw,
        raw_stderr,
        normalized,
        normalized_stderr,
        c_empirical,
        c_alternative,
        plateau_raw,
        mean_speed_squared,
        n_samples: total_samples,
    };
    let report = AggregateReport {
        n_chains: curves.len(),
        n_independent: unique.len(),
        max_pair_sigma,
    };
    Ok((merged, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{FieldRole, NodeField3};
    use crate::state::{Plane, Plaquette, VortexState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn solution_from_u(u: NodeField3, spec: &LatticeSpec) -> FieldSolution {
        let energy = 0.5 * spec.h().powi(3) * u.norm2();
        FieldSolution { psi: NodeField3::zeros(spec.n(), FieldRole::VectorPotential), u, energy }
    }

    fn constant_solution(spec: &LatticeSpec, values: [f64; 3]) -> FieldSolution {
        let mut u = NodeField3::zeros(spec.n(), FieldRole::Velocity);
        for (c, val) in values.iter().enumerate() {
            for v in u.comp_mut(c) {
                *v = *val;
            }
        }
        solution_from_u(u, spec)
    }

    #[test]
    fn uniform_field_degenerates_cleanly() {
        let spec = LatticeSpec::new(6).unwrap();
        let samples = vec![constant_solution(&spec, [1.0, 1.0, 1.0])];
        let sf = structure_function(&samples, &spec).unwrap();
        assert!(sf.raw.iter().all(|&v| v == 0.0));
        assert!(sf.normalized.is_none());
        assert!(sf.c_empirical.is_none());
        // The alternative constant only needs <|u|^2>, which is 3 here.
        let c_alt = sf.c_alternative.unwrap();
        assert!((c_alt - 4.0 / 9.0).abs() <= 1e-15);
    }

    #[test]
    fn single_mode_matches_closed_form() {
        // u_1(x) = A sin(2 pi i / N), other components zero. The axis-1
        // longitudinal increment has mean A^2 (1 - cos(2 pi m / N)) over
        // nodes; axes 2 and 3 contribute zero, so the axis average is a
        // third of that, equal to (1/3) * 2 <u_1^2> (1 - cos(2 pi m / N)).
        let n = 8;
        let amp = 2.0;
        let spec = LatticeSpec::new(n).unwrap();
        let mut u = NodeField3::zeros(n, FieldRole::Velocity);
        for i in 0..n {
            let v = amp * (2.0 * std::f64::consts::PI * i as f64 / n as f64).sin();
            for j in 0..n {
                for k in 0..n {
                    u.set(0, i, j, k, v);
                }
            }
        }
        let samples = vec![solution_from_u(u, &spec)];
        let sf = structure_function(&samples, &spec).unwrap();
        let u1_sq = amp * amp / 2.0;
        for (m, &got) in sf.raw.iter().enumerate() {
            let theta = 2.0 * std::f64::consts::PI * (m + 1) as f64 / n as f64;
            let want = 2.0 * u1_sq * (1.0 - theta.cos()) / 3.0;
            assert!(
                (got - want).abs() <= 1e-12 * want.abs().max(1.0),
                "m={}: {got} vs {want}",
                m + 1
            );
        }
        // Last quarter of the 4 separations is just m = 4, so the final
        // normalized point is exactly 1.
        assert_eq!(sf.plateau_len(), 1);
        let norm = sf.normalized.as_ref().unwrap();
        assert!((norm[3] - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn moments_of_constant_fields_match_hand_jackknife() {
        let spec = LatticeSpec::new(4).unwrap();
        let samples = vec![
            constant_solution(&spec, [1.0, 0.0, 0.0]),
            constant_solution(&spec, [3.0, 0.0, 0.0]),
        ];
        let table = velocity_moments(&samples, &spec, 4).unwrap();
        // Two-sample jackknife stderr of a mean is |a - b| / 2.
        assert_eq!(table.moment(0, 1), 2.0);
        assert!((table.stderr(0, 1) - 1.0).abs() <= 1e-14);
        assert_eq!(table.moment(0, 2), 5.0);
        assert!((table.stderr(0, 2) - 4.0).abs() <= 1e-14);
        assert_eq!(table.moment(1, 2), 0.0);
        assert_eq!(table.stderr(2, 3), 0.0);
        assert_eq!(table.n_samples(), 2);

        let zero = vec![
            constant_solution(&spec, [0.0, 0.0, 0.0]),
            constant_solution(&spec, [0.0, 0.0, 0.0]),
        ];
        let zt = velocity_moments(&zero, &spec, 6).unwrap();
        for c in 0..3 {
            for p in 1..=6 {
                assert_eq!(zt.moment(c, p), 0.0);
            }
        }
        assert!(zt.flatness(0).is_none());
    }

    #[test]
    fn moments_need_two_samples() {
        let spec = LatticeSpec::new(4).unwrap();
        let one = vec![constant_solution(&spec, [1.0, 0.0, 0.0])];
        match velocity_moments(&one, &spec, 2) {
            Err(VortexError::InsufficientSamples { got: 1, needed: 2 }) => {}
            other => panic!("expected InsufficientSamples, got {other:?}"),
        }
        match structure_function(&[], &spec) {
            Err(VortexError::InsufficientSamples { got: 0, needed: 1 }) => {}
            other => panic!("expected InsufficientSamples, got {other:?}"),
        }
    }

    #[test]
    fn second_moments_tie_to_energy() {
        // Unit box: <|u|^2> = 2 E for every solved sample, so the table's
        // summed second moments must reproduce the mean energy exactly.
        let spec = LatticeSpec::new(4).unwrap();
        let green = GreenTable::build(&spec).unwrap();
        let gamma = Circulation::new(1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut samples = Vec::new();
        for _ in 0..3 {
            let mut state = VortexState::empty(&spec, gamma);
            for _ in 0..40 {
                let p = Plaquette {
                    base: [rng.gen_range(0..4), rng.gen_range(0..4), rng.gen_range(0..4)],
                    plane: Plane::ALL[rng.gen_range(0..3)],
                    orientation: if rng.gen::<bool>() { 1 } else { -1 },
                };
                state.apply_plaquette(&p, &spec);
            }
            samples.push(solve_fields(&state, &green, &spec).unwrap());
        }
        let table = velocity_moments(&samples, &spec, 2).unwrap();
        let mean_energy: f64 =
            samples.iter().map(|s| s.energy).sum::<f64>() / samples.len() as f64;
        let u2: f64 = table.mean_speed_squared();
        assert!(
            (u2 - 2.0 * mean_energy).abs() <= 1e-11 * (2.0 * mean_energy).max(1.0),
            "{u2} vs {}",
            2.0 * mean_energy
        );
    }

    #[test]
    fn snapshots_solve_back_to_identical_fields() {
        let spec = LatticeSpec::new(4).unwrap();
        let green = GreenTable::build(&spec).unwrap();
        let gamma = Circulation::new(2.0).unwrap();
        let mut state = VortexState::empty(&spec, gamma);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..25 {
            let p = Plaquette {
                base: [rng.gen_range(0..4), rng.gen_range(0..4), rng.gen_range(0..4)],
                plane: Plane::ALL[rng.gen_range(0..3)],
                orientation: 1,
            };
            state.apply_plaquette(&p, &spec);
        }
        let direct = solve_fields(&state, &green, &spec).unwrap();
        let snaps = vec![Snapshot { sweep: 7, multiplicities: state.multiplicities().to_vec() }];
        let solved = solutions_from_snapshots(&snaps, gamma, &spec, &green).unwrap();
        assert_eq!(solved.len(), 1);
        assert_eq!(solved[0].u, direct.u);
        assert_eq!(solved[0].energy, direct.energy);
    }

    #[test]
    fn merging_identical_chains_detects_correlation() {
        let merged = merge_estimates(&[(41.3, 0.7), (41.3, 0.7)]).unwrap();
        assert_eq!(merged.value, 41.3);
        assert_eq!(merged.stderr, 0.7);
        assert_eq!(merged.n_chains, 2);
        assert_eq!(merged.n_independent, 1);
        assert!(merged.duplicates_detected());
        assert!(!merged.discrepant());
    }

    #[test]
    fn four_equal_weight_chains_halve_the_stderr() {
        let merged =
            merge_estimates(&[(1.0, 0.2), (1.1, 0.2), (0.9, 0.2), (1.05, 0.2)]).unwrap();
        assert!((merged.stderr - 0.1).abs() <= 1e-15);
        assert!((merged.value - 1.0125).abs() <= 1e-12);
        assert_eq!(merged.n_independent, 4);
        assert!(!merged.discrepant());
    }

    #[test]
    fn discrepant_chains_are_flagged() {
        let merged = merge_estimates(&[(0.0, 0.1), (1.0, 0.1)]).unwrap();
        assert!(merged.discrepant());
        assert!(merged.max_pair_sigma > 7.0);
        assert!(merge_estimates(&[]).is_err());
    }

    #[test]
    fn table_aggregation_is_identity_for_one_and_collapses_duplicates() {
        let spec = LatticeSpec::new(4).unwrap();
        let samples = vec![
            constant_solution(&spec, [1.0, 0.5, 0.0]),
            constant_solution(&spec, [3.0, 0.7, 0.0]),
        ];
        let table = velocity_moments(&samples, &spec, 3).unwrap();

        let (one, rep) = aggregate_moment_tables(std::slice::from_ref(&table)).unwrap();
        assert_eq!(one, table);
        assert_eq!(rep.n_independent, 1);

        let (dup, rep2) = aggregate_moment_tables(&[table.clone(), table.clone()]).unwrap();
        assert_eq!(dup.moment(0, 1), table.moment(0, 1));
        assert_eq!(dup.stderr(0, 1), table.stderr(0, 1));
        assert!(rep2.duplicates_detected());
    }

    #[test]
    fn structure_aggregation_recomputes_normalization() {
        let n = 8;
        let spec = LatticeSpec::new(n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut curves = Vec::new();
        for _ in 0..2 {
            let mut series = Vec::new();
            for _ in 0..6 {
                let mut u = NodeField3::zeros(n, FieldRole::Velocity);
                for v in u.as_mut_slice() {
                    *v = rng.gen_range(-1.0..1.0);
                }
                series.push(solution_from_u(u, &spec));
            }
            curves.push(structure_function(&series, &spec).unwrap());
        }
        let (merged, rep) = aggregate_structure_functions(&curves).unwrap();
        assert_eq!(rep.n_independent, 2);
        assert_eq!(merged.n_samples, 12);
        let norm = merged.normalized.as_ref().unwrap();
        let q = merged.plateau_len();
        let tail: f64 = norm[norm.len() - q..].iter().sum::<f64>() / q as f64;
        assert!((tail - 1.0).abs() <= 1e-12);
        // Merged raw points sit within the band spanned by the inputs.
        for m in 0..merged.raw.len() {
            let lo = curves[0].raw[m].min(curves[1].raw[m]);
            let hi = curves[0].raw[m].max(curves[1].raw[m]);
            assert!(merged.raw[m] >= lo - 1e-12 && merged.raw[m] <= hi + 1e-12);
        }
    }
}
