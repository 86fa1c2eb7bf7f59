//! Enstrophy-bound targeting: measure the unconstrained Z2 baseline, sweep a
//! grid of bounds to tabulate beta against delta Z2, and bisect the bound
//! toward a requested beta.
//!
//! Tightening the bound (larger delta Z2) lowers beta, so the bisection
//! brackets a decreasing response. Probe noise is handled explicitly: a probe
//! whose error bar swallows its distance to the target is re-run with a
//! doubled measurement budget before the bracket moves.

use crate::error::{Result, VortexError};
use crate::lattice::LatticeSpec;
use crate::observables::block_jackknife;
use crate::poisson::GreenTable;
use crate::sampler::{run_chain, BetaEstimates, SamplerConfig};
use crate::state::Circulation;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Cap on probe re-runs at one bound: budgets double at most twice.
const MAX_SWEEP_MULTIPLIER: u32 = 4;

/// Unconstrained enstrophy equilibrium, the reference point for bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineZ2 {
    pub z2_mean: f64,
    pub z2_stderr: f64,
    /// Estimate from the same run; None when no measurement sweeps ran.
    pub beta: Option<BetaEstimates>,
    pub sweeps: u64,
}

/// Run one unbounded chain and average Z2 over the measurement records.
pub fn baseline_z2(
    spec: &LatticeSpec,
    gamma: Circulation,
    cfg: &SamplerConfig,
    green: &GreenTable,
) -> Result<BaselineZ2> {
    let mut cfg = cfg.clone();
    cfg.z2_bound = f64::INFINITY;
    let res = run_chain(spec, gamma, cfg, green)?;
    if res.log.records.is_empty() {
        return Err(VortexError::EmptyLog);
    }
    let series: Vec<f64> = res.log.records.iter().map(|r| r.z2).collect();
    let (z2_mean, z2_stderr) = block_jackknife(&series);
    Ok(BaselineZ2 {
        z2_mean,
        z2_stderr,
        beta: res.beta,
        sweeps: (res.config.equilibration_sweeps + res.config.measurement_sweeps) as u64,
    })
}

/// One probe of the bound-to-beta response. Everything needed to reproduce
/// the run bit-for-bit is stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabulationRecord {
    pub n: usize,
    pub gamma: f64,
    pub target_energy: f64,
    pub demon_cap: f64,
    pub z2_baseline: f64,
    pub delta_z2: f64,
    pub z2_bound: f64,
    pub feasible: bool,
    pub beta: Option<f64>,
    pub beta_stderr: Option<f64>,
    pub seed: u64,
    pub stream: u64,
    pub equilibration_sweeps: u32,
    pub measurement_sweeps: u32,
    pub warning: Option<String>,
}

impl TabulationRecord {
    /// Rebuild the exact sampler configuration this record came from.
    pub fn to_config(&self, base: &SamplerConfig) -> SamplerConfig {
        SamplerConfig {
            target_energy: self.target_energy,
            demon_cap: self.demon_cap,
            z2_bound: self.z2_bound,
            equilibration_sweeps: self.equilibration_sweeps,
            measurement_sweeps: self.measurement_sweeps,
            seed: self.seed,
            stream: self.stream,
            ..base.clone()
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_probe(
    spec: &LatticeSpec,
    gamma: Circulation,
    base: &SamplerConfig,
    z2_baseline: f64,
    delta_z2: f64,
    stream: u64,
    sweep_multiplier: u32,
    green: &GreenTable,
) -> Result<TabulationRecord> {
    let cfg = SamplerConfig {
        z2_bound: z2_baseline - delta_z2,
        measurement_sweeps: base.measurement_sweeps * sweep_multiplier,
        stream,
        ..base.clone()
    };
    let mut record = TabulationRecord {
        n: spec.n(),
        gamma: gamma.value(),
        target_energy: cfg.target_energy,
        demon_cap: cfg.demon_cap,
        z2_baseline,
        delta_z2,
        z2_bound: cfg.z2_bound,
        feasible: true,
        beta: None,
        beta_stderr: None,
        seed: cfg.seed,
        stream: cfg.stream,
        equilibration_sweeps: cfg.equilibration_sweeps,
        measurement_sweeps: cfg.measurement_sweeps,
        warning: None,
    };
    match run_chain(spec, gamma, cfg, green) {
        Ok(res) => {
            if let Some(est) = res.beta {
                record.beta = Some(est.primary().beta);
                record.beta_stderr = Some(est.primary().stderr);
            } else {
                record.warning = Some("no measurement samples; beta not estimated".into());
            }
            Ok(record)
        }
        Err(VortexError::Infeasible { reached, .. }) => {
            record.feasible = false;
            record.warning =
                Some(format!("infeasible: initializer stalled at energy {reached:.4}"));
            Ok(record)
        }
        Err(VortexError::DegenerateHistogram { nonempty, needed }) => {
            record.warning = Some(format!(
                "beta not estimated: demon histogram too narrow ({nonempty} usable bins, need {needed})"
            ));
            Ok(record)
        }
        Err(VortexError::EmptyLog) => {
            record.warning = Some("beta not estimated: empty measurement log".into());
            Ok(record)
        }
        Err(e) => Err(e),
    }
}

/// One chain per delta-Z2 value, in parallel; infeasible bounds come back as
/// flagged records, never as errors. Records are sorted by z2_bound.
pub fn tabulate(
    spec: &LatticeSpec,
    gamma: Circulation,
    base: &SamplerConfig,
    z2_baseline: f64,
    deltas: &[f64],
    green: &GreenTable,
) -> Result<Vec<TabulationRecord>> {
    let mut records: Vec<TabulationRecord> = deltas
        .par_iter()
        .enumerate()
        .map(|(i, &delta)| {
            // Distinct RNG stream per probe; stream 0 stays reserved for the
            // caller's own chain.
            run_probe(spec, gamma, base, z2_baseline, delta, base.stream + 1 + i as u64, 1, green)
        })
        .collect::<Result<_>>()?;
    records.sort_by(|a, b| a.z2_bound.total_cmp(&b.z2_bound));
    Ok(records)
}

/// Bisection on delta-Z2 toward a requested beta, with an injected probe.
/// `probe(delta_z2, sweep_multiplier)` runs one chain; the multiplier doubles
/// when a probe's error bar swallows its distance to the target. Every probe
/// call counts against `max_probes`. Returns the best record seen, with a
/// warning attached if the response was non-monotone beyond noise or the
/// probe budget ran out.
pub fn home_in_with<F>(
    mut probe: F,
    lo_delta: f64,
    hi_delta: f64,
    beta_target: f64,
    tolerance: f64,
    max_probes: usize,
) -> Result<TabulationRecord>
where
    F: FnMut(f64, u32) -> Result<TabulationRecord>,
{
    if lo_delta.is_nan() || hi_delta.is_nan() || lo_delta >= hi_delta || tolerance <= 0.0 {
        return Err(VortexError::InvalidConfig {
            what: "home_in needs lo_delta < hi_delta and a positive tolerance".into(),
        });
    }
    let close_enough = |rec: &TabulationRecord| -> bool {
        match (rec.beta, rec.beta_stderr) {
            (Some(b), Some(s)) => {
                (b - beta_target).abs() <= (tolerance * beta_target.abs()).max(2.0 * s)
            }
            _ => false,
        }
    };

    let rec_lo = probe(lo_delta, 1)?;
    if close_enough(&rec_lo) {
        return Ok(rec_lo);
    }
    let rec_hi = probe(hi_delta, 1)?;
    if close_enough(&rec_hi) {
        return Ok(rec_hi);
    }

    // Beta decreases as the bound tightens, so the bracket must straddle the
    // target from above at lo_delta and from below at hi_delta.
    let beta_at_lo = rec_lo.beta.unwrap_or(f64::NAN);
    let beta_at_hi = rec_hi.beta.unwrap_or(f64::NAN);
    if !(beta_at_lo >= beta_target && beta_at_hi <= beta_target) {
        return Err(VortexError::BracketFailure {
            target: beta_target,
            lo_beta: beta_at_lo,
            hi_beta: beta_at_hi,
        });
    }

    let mut lo = lo_delta;
    let mut hi = hi_delta;
    let mut beta_lo = beta_at_lo;
    let mut beta_hi = beta_at_hi;
    let mut probes_used = 2usize;
    let mut best: TabulationRecord =
        if (beta_at_lo - beta_target).abs() <= (beta_at_hi - beta_target).abs() {
            rec_lo
        } else {
            rec_hi
        };
    let mut warning: Option<String> = None;
    let better = |rec: &TabulationRecord, cur: &TabulationRecord| -> bool {
        match (rec.beta, cur.beta) {
            (Some(a), Some(b)) => (a - beta_target).abs() < (b - beta_target).abs(),
            (Some(_), None) => true,
            _ => false,
        }
    };

    let mut multiplier = 1u32;
    let mut mid = 0.5 * (lo + hi);
    while probes_used < max_probes {
        let mut rec = probe(mid, multiplier)?;
        probes_used += 1;

        if !rec.feasible {
            // Feasibility shrinks with delta, so the target must lie below.
            hi = mid;
            mid = 0.5 * (lo + hi);
            multiplier = 1;
            continue;
        }
        let (beta, stderr) = match (rec.beta, rec.beta_stderr) {
            (Some(b), Some(s)) => (b, s),
            _ => {
                hi = mid;
                mid = 0.5 * (lo + hi);
                multiplier = 1;
                continue;
            }
        };

        if beta > beta_lo + 3.0 * stderr || beta < beta_hi - 3.0 * stderr {
            let w = format!(
                "non-monotone response: beta {beta:.4} at delta {mid:.4} outside bracket [{beta_hi:.4}, {beta_lo:.4}]"
            );
            warning.get_or_insert(w);
        }

        if close_enough(&rec) {
            if rec.warning.is_none() {
                rec.warning = warning;
            }
            return Ok(rec);
        }
        if better(&rec, &best) {
            best = rec.clone();
        }

        // Error bar swallows the residual: the sign of (beta - target) is
        // noise, so buy sweeps instead of moving the bracket on it.
        if stderr > (beta - beta_target).abs() && multiplier < MAX_SWEEP_MULTIPLIER {
            multiplier *= 2;
            continue;
        }

        if beta > beta_target {
            lo = mid;
            beta_lo = beta;
        } else {
            hi = mid;
            beta_hi = beta;
        }
        mid = 0.5 * (lo + hi);
        multiplier = 1;
    }

    let exhausted = format!("probe budget exhausted after {probes_used} probes");
    best.warning = Some(match warning {
        Some(w) => format!("{exhausted}; {w}"),
        None => exhausted,
    });
    Ok(best)
}

/// Production wrapper: bisect real chains, one RNG stream per probe.
#[allow(clippy::too_many_arguments)]
pub fn home_in(
    spec: &LatticeSpec,
    gamma: Circulation,
    base: &SamplerConfig,
    z2_baseline: f64,
    lo_delta: f64,
    hi_delta: f64,
    beta_target: f64,
    tolerance: f64,
    green: &GreenTable,
) -> Result<TabulationRecord> {
    let mut next_stream = base.stream + 1;
    home_in_with(
        |delta, multiplier| {
            let stream = next_stream;
            next_stream += 1;
            run_probe(spec, gamma, base, z2_baseline, delta, stream, multiplier, green)
        },
        lo_delta,
        hi_delta,
        beta_target,
        tolerance,
        20,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_base(target: f64) -> SamplerConfig {
        SamplerConfig {
            equilibration_sweeps: 60,
            measurement_sweeps: 240,
            jackknife_blocks: 10,
            seed: 123,
            ..SamplerConfig::new(target)
        }
    }

    fn setup4() -> (LatticeSpec, GreenTable, Circulation) {
        let spec = LatticeSpec::new(4).unwrap();
        let green = GreenTable::build(&spec).unwrap();
        (spec, green, Circulation::new(1.0).unwrap())
    }

    #[test]
    fn baseline_is_stable_across_seeds() {
        let (spec, green, gamma) = setup4();
        let a = baseline_z2(&spec, gamma, &small_base(30.0), &green).unwrap();
        let b = baseline_z2(
            &spec,
            gamma,
            &SamplerConfig { seed: 777, ..small_base(30.0) },
            &green,
        )
        .unwrap();
        assert!(a.z2_mean > 4000.0 && a.z2_mean < 9000.0, "z2 baseline {}", a.z2_mean);
        assert!(a.z2_stderr.is_finite() && a.z2_stderr > 0.0);
        assert!(
            (a.z2_mean - b.z2_mean).abs() <= 900.0,
            "seeds disagree: {} vs {}",
            a.z2_mean,
            b.z2_mean
        );
        let beta = a.beta.unwrap().primary().beta;
        assert!(beta > 1.0 && beta < 3.5, "baseline beta {beta}");
    }

    #[test]
    fn tabulate_orders_records_and_captures_infeasibility() {
        let (spec, green, gamma) = setup4();
        let baseline = 6200.0;
        let records =
            tabulate(&spec, gamma, &small_base(30.0), baseline, &[0.0, 800.0, 3500.0], &green)
                .unwrap();
        assert_eq!(records.len(), 3);
        for w in records.windows(2) {
            assert!(w[0].z2_bound <= w[1].z2_bound);
        }
        // Tightest bound (6200 - 3500 = 2700) cannot hold the target energy.
        assert!(!records[0].feasible);
        assert!(records[0].beta.is_none());
        assert!(records[0].warning.is_some());
        assert!(records[1].feasible && records[2].feasible);
        let tight = records[1].beta.unwrap();
        let loose = records[2].beta.unwrap();
        assert!(loose > tight - 0.8, "beta should fall as the bound tightens: {loose} vs {tight}");
    }

    #[test]
    fn tabulated_records_rerun_to_identical_beta() {
        let (spec, green, gamma) = setup4();
        let base = small_base(30.0);
        let records = tabulate(&spec, gamma, &base, 6200.0, &[400.0], &green).unwrap();
        let rec = &records[0];
        assert!(rec.feasible);
        let rerun = run_chain(&spec, gamma, rec.to_config(&base), &green).unwrap();
        let beta = rerun.beta.unwrap().primary().beta;
        assert_eq!(Some(beta), rec.beta);
    }

    /// Deterministic noisy linear response: beta(delta) = a - b delta + eps.
    fn synthetic_probe(
        a: f64,
        b: f64,
        noise: f64,
    ) -> (impl FnMut(f64, u32) -> Result<TabulationRecord>, std::rc::Rc<std::cell::Cell<usize>>)
    {
        let calls = std::rc::Rc::new(std::cell::Cell::new(0usize));
        let counter = calls.clone();
        let probe = move |delta: f64, multiplier: u32| {
            counter.set(counter.get() + 1);
            // Cheap deterministic hash of the probe point for the noise term.
            let bits = delta.to_bits().wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let unit = (bits >> 11) as f64 / (1u64 << 53) as f64;
            let eps = noise * (2.0 * unit - 1.0) / (multiplier as f64).sqrt();
            Ok(TabulationRecord {
                n: 16,
                gamma: 1.0,
                target_energy: 100.0,
                demon_cap: 10.0,
                z2_baseline: 1000.0,
                delta_z2: delta,
                z2_bound: 1000.0 - delta,
                feasible: true,
                beta: Some(a - b * delta + eps),
                beta_stderr: Some(noise / (multiplier as f64).sqrt()),
                seed: 1,
                stream: 1,
                equilibration_sweeps: 10,
                measurement_sweeps: 10 * multiplier,
                warning: None,
            })
        };
        (probe, calls)
    }

    #[test]
    fn synthetic_bisection_converges_quickly() {
        // Response range 4.0 over the bracket; noise at 5% of that.
        let (probe, calls) = synthetic_probe(5.0, 0.1, 0.2);
        let rec = home_in_with(probe, 0.0, 40.0, 2.6, 0.02, 20).unwrap();
        let beta = rec.beta.unwrap();
        let spread = (tol_window(2.6, 0.02)).max(2.0 * rec.beta_stderr.unwrap());
        assert!((beta - 2.6).abs() <= spread, "converged to {beta}");
        assert!(calls.get() <= 10, "used {} probes", calls.get());
    }

    fn tol_window(target: f64, tol: f64) -> f64 {
        tol * target.abs()
    }

    #[test]
    fn target_at_endpoint_returns_immediately() {
        let (probe, calls) = synthetic_probe(5.0, 0.1, 0.01);
        let rec = home_in_with(probe, 0.0, 40.0, 5.0, 0.05, 20).unwrap();
        assert_eq!(calls.get(), 1);
        assert_eq!(rec.delta_z2, 0.0);
    }

    #[test]
    fn unbracketed_target_fails() {
        let (probe, _) = synthetic_probe(5.0, 0.1, 0.01);
        match home_in_with(probe, 0.0, 40.0, 7.0, 0.05, 20) {
            Err(VortexError::BracketFailure { target, lo_beta, hi_beta }) => {
                assert_eq!(target, 7.0);
                assert!(lo_beta < 7.0 && hi_beta < lo_beta);
            }
            other => panic!("expected BracketFailure, got {other:?}"),
        }
    }

    #[test]
    fn home_in_hits_target_on_real_chains() {
        let (spec, green, gamma) = setup4();
        let base = small_base(30.0);
        let baseline = baseline_z2(&spec, gamma, &base, &green).unwrap();
        let rec =
            home_in(&spec, gamma, &base, baseline.z2_mean, 0.0, 1700.0, 1.0, 0.35, &green)
                .unwrap();
        assert!(rec.feasible);
        let beta = rec.beta.unwrap();
        let window = 0.35f64.max(2.0 * rec.beta_stderr.unwrap());
        assert!((beta - 1.0).abs() <= window, "homed to beta {beta}");
    }
}
