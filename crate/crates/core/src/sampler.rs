//! Microcanonical demon dynamics under an enstrophy budget, plus the two
//! inverse-temperature estimators read off the demon.
//!
//! A chain holds a loop state, its live field solution, and a demon with
//! energy in [0, cap]. A proposed loop stamp is accepted iff the enstrophy
//! stays within its bound and the demon can pay the energy difference while
//! staying inside its cap. Total energy (state + demon) is conserved; float
//! drift from the incremental psi updates is corrected by a periodic fresh
//! solve. In equilibrium the demon energy is exponentially distributed with
//! rate beta truncated to [0, cap], which is what the estimators invert.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VortexError};
use crate::lattice::LatticeSpec;
use crate::poisson::{energy_delta, refresh_psi, GreenTable, RunningSolution};
use crate::state::{
    read_f64, read_i32, read_u128, read_u16, read_u32, read_u64, Circulation, Plane, Plaquette,
    VortexState,
};

/// Fraction of the enstrophy bound the greedy initializer is allowed to
/// spend. The headroom keeps the chain mobile from sweep one; without it a
/// tightly bounded chain starts wedged against its own budget.
const INIT_HEADROOM: f64 = 0.9;

/// Histogram range in units of the equilibrated mean demon energy. Wide
/// enough that overflow is negligible at any temperature sign, tight enough
/// to resolve steep positive-beta decays.
const HIST_RANGE_FACTOR: f64 = 24.0;

/// Bins with fewer counts than this are left out of the log-linear fit.
const MIN_FIT_COUNT: u64 = 5;

/// |beta| ceiling for the mean-relation root solve.
const BETA_ABS_MAX: f64 = 1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Energy the chain is prepared at and conserves (jointly with the demon).
    pub target_energy: f64,
    /// Enstrophy ceiling; `f64::INFINITY` runs unconstrained.
    pub z2_bound: f64,
    /// Demon capacity. Acceptance requires the demon stays in [0, cap].
    pub demon_cap: f64,
    pub equilibration_sweeps: u32,
    pub measurement_sweeps: u32,
    /// Sweeps between state snapshots during measurement; 0 disables them.
    pub snapshot_stride: u32,
    /// Sweeps between fresh field solves that absorb float drift.
    pub refresh_sweeps: u32,
    pub hist_bins: usize,
    pub jackknife_blocks: usize,
    pub seed: u64,
    /// RNG stream, used to decorrelate chains sharing a seed.
    pub stream: u64,
}

impl SamplerConfig {
    /// Defaults sized for production runs; tests and scans dial the sweep
    /// counts down.
    pub fn new(target_energy: f64) -> Self {
        Self {
            target_energy,
            z2_bound: f64::INFINITY,
            demon_cap: target_energy / 10.0,
            equilibration_sweeps: 1_000,
            measurement_sweeps: 10_000,
            snapshot_stride: 0,
            refresh_sweeps: 8,
            hist_bins: 160,
            jackknife_blocks: 20,
            seed: 1,
            stream: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(VortexError::InvalidConfig { what: what.into() });
        if !(self.target_energy.is_finite() && self.target_energy > 0.0) {
            return bad("target_energy must be finite and > 0");
        }
        if self.z2_bound.is_nan() || self.z2_bound <= 0.0 {
            return bad("z2_bound must be > 0 (use infinity for unconstrained)");
        }
        if !(self.demon_cap.is_finite() && self.demon_cap > 0.0) {
            return bad("demon_cap must be finite and > 0");
        }
        if self.refresh_sweeps == 0 {
            return bad("refresh_sweeps must be >= 1");
        }
        if self.hist_bins < 8 {
            return bad("hist_bins must be >= 8");
        }
        if self.jackknife_blocks < 2 {
            return bad("jackknife_blocks must be >= 2");
        }
        Ok(())
    }
}

/// Fixed-range histogram over [0, hi) with an explicit overflow bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub hi: f64,
    pub bins: Vec<u64>,
    pub overflow: u64,
    pub total: u64,
    pub sum: f64,
}

impl Histogram {
    pub fn new(hi: f64, nbins: usize) -> Self {
        Self { hi, bins: vec![0; nbins], overflow: 0, total: 0, sum: 0.0 }
    }

    #[inline]
    pub fn add(&mut self, v: f64) {
        self.total += 1;
        self.sum += v;
        let scaled = v / self.hi * self.bins.len() as f64;
        let idx = scaled as usize;
        if idx < self.bins.len() {
            self.bins[idx] += 1;
        } else if v <= self.hi * (1.0 + 1e-9) {
            *self.bins.last_mut().unwrap() += 1;
        } else {
            self.overflow += 1;
        }
    }

    pub fn bin_width(&self) -> f64 {
        self.hi / self.bins.len() as f64
    }

    pub fn center(&self, idx: usize) -> f64 {
        (idx as f64 + 0.5) * self.bin_width()
    }

    pub fn mean(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.sum / self.total as f64
        }
    }
}

/// Per-block demon statistics backing the jackknife errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockStat {
    pub ed_sum: f64,
    pub count: u64,
    pub hist: Vec<u64>,
}

/// One line of the per-sweep sample log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub sweep: u32,
    pub energy: f64,
    pub demon: f64,
    pub z2: f64,
    pub lambda: f64,
    pub snapshot: bool,
}

/// Integer state snapshot taken during measurement. Velocity statistics are
/// recomputed from these exactly, so logs stay compact and reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub sweep: u32,
    pub multiplicities: Vec<i32>,
}

/// Everything recorded during the measurement phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLog {
    pub records: Vec<SweepRecord>,
    pub hist: Histogram,
    pub blocks: Vec<BlockStat>,
    pub snapshots: Vec<Snapshot>,
}

impl SampleLog {
    fn empty(bins: usize) -> Self {
        Self { records: Vec::new(), hist: Histogram::new(1.0, bins), blocks: Vec::new(), snapshots: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BetaMethod {
    /// Invert <E_d> = 1/beta - cap / (exp(beta cap) - 1).
    MeanRelation,
    /// Weighted log-linear fit of the demon energy histogram.
    HistogramFit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaEstimate {
    pub beta: f64,
    pub stderr: f64,
    pub method: BetaMethod,
}

/// Both estimators over the same log. The mean relation is the primary
/// number; the histogram fit is its cross-check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaEstimates {
    pub mean_relation: BetaEstimate,
    pub histogram_fit: BetaEstimate,
}

impl BetaEstimates {
    pub fn primary(&self) -> &BetaEstimate {
        &self.mean_relation
    }

    /// Relative disagreement between the two methods.
    pub fn method_spread(&self) -> f64 {
        let a = self.mean_relation.beta;
        let b = self.histogram_fit.beta;
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }
}

/// Mean demon energy of the truncated exponential with rate beta on [0, cap].
pub fn truncated_exp_mean(beta: f64, cap: f64) -> f64 {
    let x = beta * cap;
    if x.abs() < 1e-6 {
        // Series around beta = 0 avoids the 1/beta cancellation.
        cap * (0.5 - x / 12.0 + x * x * x / 720.0)
    } else {
        1.0 / beta - cap / x.exp_m1()
    }
}

/// Invert the truncated-exponential mean by bisection. Monotone decreasing
/// in beta, so the root is unique; means outside (0, cap) clamp to the
/// bracket ends.
pub fn solve_mean_relation(mean: f64, cap: f64) -> f64 {
    if mean <= 0.0 {
        return BETA_ABS_MAX;
    }
    if mean >= cap {
        return -BETA_ABS_MAX;
    }
    let (mut lo, mut hi) = (-BETA_ABS_MAX, BETA_ABS_MAX);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if truncated_exp_mean(mid, cap) > mean {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub(crate) fn jackknife_stderr(leave_one_out: &[f64]) -> f64 {
    let b = leave_one_out.len();
    if b < 2 {
        return f64::INFINITY;
    }
    let bf = b as f64;
    let mean = leave_one_out.iter().sum::<f64>() / bf;
    let ss: f64 = leave_one_out.iter().map(|v| (v - mean) * (v - mean)).sum();
    ((bf - 1.0) / bf * ss).sqrt()
}

/// Weighted least-squares slope of ln(count) against bin center, restricted
/// to bins with at least `MIN_FIT_COUNT` entries. Returns -slope.
///
/// Two passes: the first weights by observed counts, the second reweights by
/// the counts the first fit predicts. Observed-count weights correlate with
/// the Poisson noise in ln(count) (upward fluctuations get both more weight
/// and higher ordinate), which biases the slope shallow; predicted-count
/// weights break that correlation.
fn fit_histogram_rate(hist_bins: &[u64], width: f64) -> Result<f64> {
    let pts: Vec<(f64, f64, f64)> = hist_bins
        .iter()
        .enumerate()
        .filter(|(_, &c)| c >= MIN_FIT_COUNT)
        .map(|(i, &c)| {
            let x = (i as f64 + 0.5) * width;
            (x, (c as f64).ln(), c as f64)
        })
        .collect();
    if pts.len() < 3 {
        return Err(VortexError::DegenerateHistogram { nonempty: pts.len(), needed: 3 });
    }
    let wls = |weights: &dyn Fn(usize) -> f64| -> Option<(f64, f64)> {
        let wsum: f64 = (0..pts.len()).map(weights).sum();
        let xbar: f64 = pts.iter().enumerate().map(|(i, p)| p.0 * weights(i)).sum::<f64>() / wsum;
        let ybar: f64 = pts.iter().enumerate().map(|(i, p)| p.1 * weights(i)).sum::<f64>() / wsum;
        let sxx: f64 =
            pts.iter().enumerate().map(|(i, p)| weights(i) * (p.0 - xbar) * (p.0 - xbar)).sum();
        let sxy: f64 =
            pts.iter().enumerate().map(|(i, p)| weights(i) * (p.0 - xbar) * (p.1 - ybar)).sum();
        if sxx <= 0.0 {
            return None;
        }
        let slope = sxy / sxx;
        Some((slope, ybar - slope * xbar))
    };
    let degenerate = || VortexError::DegenerateHistogram { nonempty: pts.len(), needed: 3 };
    let (slope, intercept) = wls(&|i| pts[i].2).ok_or_else(degenerate)?;
    let (slope, _) =
        wls(&|i| (intercept + slope * pts[i].0).exp()).ok_or_else(degenerate)?;
    Ok(-slope)
}

fn estimate_from_parts(hist: &Histogram, blocks: &[BlockStat], cap: f64) -> Result<BetaEstimates> {
    if hist.total == 0 {
        return Err(VortexError::EmptyLog);
    }

    // Method A: invert the mean relation, jackknifing over blocks.
    let full_sum: f64 = blocks.iter().map(|b| b.ed_sum).sum();
    let full_count: u64 = blocks.iter().map(|b| b.count).sum();
    if full_count == 0 {
        return Err(VortexError::EmptyLog);
    }
    let beta_a = solve_mean_relation(full_sum / full_count as f64, cap);
    let mut loo = Vec::with_capacity(blocks.len());
    for b in blocks {
        let count = full_count - b.count;
        if count == 0 {
            continue;
        }
        loo.push(solve_mean_relation((full_sum - b.ed_sum) / count as f64, cap));
    }
    let stderr_a = jackknife_stderr(&loo);

    // Method B: histogram decay rate, jackknifing by subtracting block hists.
    let width = hist.bin_width();
    let beta_b = fit_histogram_rate(&hist.bins, width)?;
    let mut loo_b = Vec::with_capacity(blocks.len());
    for b in blocks {
        let reduced: Vec<u64> = hist.bins.iter().zip(&b.hist).map(|(&t, &x)| t - x).collect();
        if let Ok(v) = fit_histogram_rate(&reduced, width) {
            loo_b.push(v);
        }
    }
    let stderr_b = jackknife_stderr(&loo_b);

    Ok(BetaEstimates {
        mean_relation: BetaEstimate { beta: beta_a, stderr: stderr_a, method: BetaMethod::MeanRelation },
        histogram_fit: BetaEstimate { beta: beta_b, stderr: stderr_b, method: BetaMethod::HistogramFit },
    })
}

/// Estimate beta from a measurement log. Errors on an empty log and on a
/// histogram too degenerate to fit.
pub fn estimate_beta(log: &SampleLog, demon_cap: f64) -> Result<BetaEstimates> {
    estimate_from_parts(&log.hist, &log.blocks, demon_cap)
}

/// Estimate beta straight from a sample array (synthetic-data path). Splits
/// the samples into contiguous blocks for the jackknife.
pub fn estimate_beta_from_samples(
    samples: &[f64],
    demon_cap: f64,
    bins: usize,
    blocks: usize,
) -> Result<BetaEstimates> {
    if samples.is_empty() {
        return Err(VortexError::EmptyLog);
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let hi = demon_cap.min(HIST_RANGE_FACTOR * mean).max(demon_cap * 1e-12);
    let mut hist = Histogram::new(hi, bins);
    let nb = blocks.max(2);
    let mut block_stats: Vec<BlockStat> =
        (0..nb).map(|_| BlockStat { ed_sum: 0.0, count: 0, hist: vec![0; bins] }).collect();
    for (i, &v) in samples.iter().enumerate() {
        let b = (i * nb / samples.len()).min(nb - 1);
        hist.add(v);
        block_stats[b].ed_sum += v;
        block_stats[b].count += 1;
        let scaled = v / hi * bins as f64;
        let idx = scaled as usize;
        if idx < bins {
            block_stats[b].hist[idx] += 1;
        } else if v <= hi * (1.0 + 1e-9) {
            block_stats[b].hist[bins - 1] += 1;
        }
    }
    estimate_from_parts(&hist, &block_stats, demon_cap)
}

/// A live demon chain. Construct with [`DemonChain::initialize`], drive with
/// [`DemonChain::run_to_completion`] or single [`DemonChain::step`]s.
#[derive(Debug, Clone)]
pub struct DemonChain {
    spec: LatticeSpec,
    cfg: SamplerConfig,
    state: VortexState,
    run: RunningSolution,
    z2_unit: f64,
    demon: f64,
    /// Conserved state + demon energy, fixed at initialization.
    total: f64,
    rng: ChaCha8Rng,
    accepted: u64,
    proposed: u64,
    sweeps_done: u32,
    log: SampleLog,
    /// Set once measurement starts; fixes the histogram range.
    hist_armed: bool,
    equil_ed_sum: f64,
    equil_ed_count: u64,
}

/// Final product of a chain run.
#[derive(Debug, Clone)]
pub struct ChainResult {
    pub config: SamplerConfig,
    pub gamma: f64,
    pub final_state: VortexState,
    pub final_demon: f64,
    pub accepted: u64,
    pub proposed: u64,
    /// None when no measurement sweeps were configured.
    pub beta: Option<BetaEstimates>,
    pub log: SampleLog,
}

impl DemonChain {
    /// Greedy preparation: stamp random loops, keeping only stamps that
    /// raise the energy without overshooting the target or spending more
    /// than `INIT_HEADROOM` of the enstrophy bound, until no candidate is
    /// found for a full stall window. The leftover deficit seeds the demon;
    /// a deficit above the cap means the constraints are infeasible.
    pub fn initialize(
        spec: &LatticeSpec,
        gamma: Circulation,
        cfg: SamplerConfig,
        green: &GreenTable,
    ) -> Result<DemonChain> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(cfg.stream);

        let mut state = VortexState::empty(spec, gamma);
        let mut run = RunningSolution::empty(spec);
        let z2_unit = state.enstrophy_unit(spec);
        let budget = if cfg.z2_bound.is_finite() { cfg.z2_bound * INIT_HEADROOM } else { f64::INFINITY };
        let stall_limit = (20 * 3 * spec.nodes() as u64).max(50_000);

        let mut energy = 0.0;
        let mut since_accept = 0u64;
        while since_accept < stall_limit {
            let p = propose(&mut rng, spec.n());
            since_accept += 1;
            let dm2 = state.delta_sum_m2(&p, spec);
            if z2_unit * (state.sum_m2() + dm2) as f64 > budget {
                continue;
            }
            let de = energy_delta(&state, &run, &p, green, spec);
            if de <= 0.0 || energy + de > cfg.target_energy {
                continue;
            }
            state.apply_plaquette(&p, spec);
            refresh_psi(&mut run, gamma.value(), &p, de, green, spec);
            energy += de;
            since_accept = 0;
        }

        // Re-sync on a fresh solve before handing the deficit to the demon.
        let run = RunningSolution::solve(&state, green, spec)?;
        let demon = (cfg.target_energy - run.energy()).max(0.0);
        if demon > cfg.demon_cap {
            return Err(VortexError::Infeasible {
                target: cfg.target_energy,
                reached: run.energy(),
                z2_bound: cfg.z2_bound,
                cap: cfg.demon_cap,
            });
        }
        let total = run.energy() + demon;
        let bins = cfg.hist_bins;
        Ok(DemonChain {
            spec: *spec,
            cfg,
            state,
            run,
            z2_unit,
            demon,
            total,
            rng,
            accepted: 0,
            proposed: 0,
            sweeps_done: 0,
            log: SampleLog::empty(bins),
            hist_armed: false,
            equil_ed_sum: 0.0,
            equil_ed_count: 0,
        })
    }

    /// One proposal: reject on the enstrophy bound, then on demon solvency.
    /// Zero-cost moves ride through on the enstrophy check alone.
    #[inline]
    pub fn step(&mut self, green: &GreenTable) -> bool {
        self.proposed += 1;
        let p = propose(&mut self.rng, self.spec.n());
        if self.cfg.z2_bound.is_finite() {
            let dm2 = self.state.delta_sum_m2(&p, &self.spec);
            if self.z2_unit * (self.state.sum_m2() + dm2) as f64 > self.cfg.z2_bound {
                return false;
            }
        }
        let de = energy_delta(&self.state, &self.run, &p, green, &self.spec);
        let demon_after = self.demon - de;
        if demon_after < 0.0 || demon_after > self.cfg.demon_cap {
            return false;
        }
        self.state.apply_plaquette(&p, &self.spec);
        refresh_psi(&mut self.run, self.state.gamma().value(), &p, de, green, &self.spec);
        self.demon = demon_after;
        self.accepted += 1;
        true
    }

    /// Fresh field solve; drift is folded back into the demon so the total
    /// stays exactly on its initial value. Returns the correction absorbed.
    pub fn full_refresh(&mut self, green: &GreenTable) -> Result<f64> {
        let fresh = RunningSolution::solve(&self.state, green, &self.spec)?;
        let correction = self.total - fresh.energy() - self.demon;
        self.run = fresh;
        self.demon = (self.total - self.run.energy()).clamp(0.0, self.cfg.demon_cap);
        Ok(correction)
    }

    fn sweep_once(&mut self, green: &GreenTable) {
        let measuring = self.sweeps_done >= self.cfg.equilibration_sweeps;
        let block = if measuring {
            let meas_idx = (self.sweeps_done - self.cfg.equilibration_sweeps) as usize;
            let nb = self.effective_blocks();
            Some((meas_idx * nb / self.cfg.measurement_sweeps.max(1) as usize).min(nb - 1))
        } else {
            None
        };
        let steps = 3 * self.spec.nodes();
        for _ in 0..steps {
            self.step(green);
            match block {
                Some(b) => {
                    self.log.hist.add(self.demon);
                    let bs = &mut self.log.blocks[b];
                    bs.ed_sum += self.demon;
                    bs.count += 1;
                    let hi = self.log.hist.hi;
                    let bins = bs.hist.len();
                    let idx = (self.demon / hi * bins as f64) as usize;
                    if idx < bins {
                        bs.hist[idx] += 1;
                    } else if self.demon <= hi * (1.0 + 1e-9) {
                        bs.hist[bins - 1] += 1;
                    }
                }
                None => {
                    self.equil_ed_sum += self.demon;
                    self.equil_ed_count += 1;
                }
            }
        }
        self.sweeps_done += 1;

        if measuring {
            let z2 = self.state.enstrophy_z2(&self.spec);
            let energy = self.run.energy();
            let meas_idx = self.sweeps_done - self.cfg.equilibration_sweeps;
            let snap = self.cfg.snapshot_stride > 0 && meas_idx.is_multiple_of(self.cfg.snapshot_stride);
            self.log.records.push(SweepRecord {
                sweep: self.sweeps_done,
                energy,
                demon: self.demon,
                z2,
                lambda: self.state.lambda_parameter(energy, &self.spec),
                snapshot: snap,
            });
            if snap {
                self.log.snapshots.push(Snapshot {
                    sweep: self.sweeps_done,
                    multiplicities: self.state.multiplicities().to_vec(),
                });
            }
        }
    }

    fn effective_blocks(&self) -> usize {
        self.cfg.jackknife_blocks.min(self.cfg.measurement_sweeps.max(1) as usize).max(1)
    }

    fn arm_measurement(&mut self) {
        let mean = if self.equil_ed_count > 0 {
            self.equil_ed_sum / self.equil_ed_count as f64
        } else {
            0.0
        };
        let hi = if mean > 0.0 {
            self.cfg.demon_cap.min(HIST_RANGE_FACTOR * mean)
        } else {
            self.cfg.demon_cap
        };
        let bins = self.cfg.hist_bins;
        self.log.hist = Histogram::new(hi, bins);
        self.log.blocks = (0..self.effective_blocks())
            .map(|_| BlockStat { ed_sum: 0.0, count: 0, hist: vec![0; bins] })
            .collect();
        self.hist_armed = true;
    }

    /// Drive the chain through its remaining sweeps. `on_refresh` fires
    /// right after every periodic fresh solve (checkpoint hook); the chain
    /// is in a fully re-solved, self-consistent pose at each call.
    pub fn run_to_completion(
        &mut self,
        green: &GreenTable,
        on_refresh: impl FnMut(&DemonChain) -> Result<()>,
    ) -> Result<()> {
        self.run_until(u32::MAX, green, on_refresh)
    }

    /// Like [`run_to_completion`](Self::run_to_completion) but returns after
    /// the first refresh at or past `stop_at_sweeps`, leaving the chain in a
    /// checkpointable pose. Lets callers split a long run across invocations.
    pub fn run_until(
        &mut self,
        stop_at_sweeps: u32,
        green: &GreenTable,
        mut on_refresh: impl FnMut(&DemonChain) -> Result<()>,
    ) -> Result<()> {
        let total_sweeps = self.cfg.equilibration_sweeps + self.cfg.measurement_sweeps;
        while self.sweeps_done < total_sweeps {
            if self.sweeps_done >= self.cfg.equilibration_sweeps && !self.hist_armed {
                self.arm_measurement();
            }
            self.sweep_once(green);
            if self.sweeps_done.is_multiple_of(self.cfg.refresh_sweeps) || self.sweeps_done == total_sweeps {
                self.full_refresh(green)?;
                on_refresh(&*self)?;
                if self.sweeps_done >= stop_at_sweeps {
                    return Ok(());
                }
            }
        }
        Ok(())
    }

    pub fn into_result(self) -> Result<ChainResult> {
        let beta = if self.log.hist.total > 0 {
            Some(estimate_beta(&self.log, self.cfg.demon_cap)?)
        } else {
            None
        };
        Ok(ChainResult {
            gamma: self.state.gamma().value(),
            config: self.cfg,
            final_state: self.state,
            final_demon: self.demon,
            accepted: self.accepted,
            proposed: self.proposed,
            beta,
            log: self.log,
        })
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn state(&self) -> &VortexState {
        &self.state
    }

    pub fn energy(&self) -> f64 {
        self.run.energy()
    }

    pub fn demon_energy(&self) -> f64 {
        self.demon
    }

    pub fn total_energy(&self) -> f64 {
        self.total
    }

    pub fn z2(&self) -> f64 {
        self.state.enstrophy_z2(&self.spec)
    }

    pub fn sweeps_done(&self) -> u32 {
        self.sweeps_done
    }

    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    pub fn proposed(&self) -> u64 {
        self.proposed
    }

    pub fn log(&self) -> &SampleLog {
        &self.log
    }

    /// |state energy + demon - total| / total; bounded by float drift since
    /// the last refresh.
    pub fn conservation_residual(&self) -> f64 {
        ((self.run.energy() + self.demon - self.total) / self.total).abs()
    }
}

#[inline]
fn propose(rng: &mut ChaCha8Rng, n: usize) -> Plaquette {
    Plaquette {
        base: [rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(0..n)],
        plane: Plane::from_index(rng.gen_range(0..3usize)),
        orientation: if rng.gen::<bool>() { 1 } else { -1 },
    }
}

/// Initialize and run a chain to completion.
pub fn run_chain(
    spec: &LatticeSpec,
    gamma: Circulation,
    cfg: SamplerConfig,
    green: &GreenTable,
) -> Result<ChainResult> {
    let mut chain = DemonChain::initialize(spec, gamma, cfg, green)?;
    chain.run_to_completion(green, |_| Ok(()))?;
    chain.into_result()
}

/// Canonical cross-check: Metropolis sampling of the same move set at fixed
/// beta > 0, unconstrained. Returns the mean state energy with a jackknife
/// error, for comparison against the demon chain's conserved energy.
#[derive(Debug, Clone, Copy)]
pub struct MetropolisResult {
    pub mean_energy: f64,
    pub stderr: f64,
    pub acceptance: f64,
}

pub fn metropolis_reference(
    spec: &LatticeSpec,
    gamma: Circulation,
    beta: f64,
    equilibration_sweeps: u32,
    measurement_sweeps: u32,
    seed: u64,
    green: &GreenTable,
) -> Result<MetropolisResult> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(VortexError::InvalidConfig {
            what: format!("metropolis reference requires beta > 0, got {beta}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x4d45_5452);
    let mut state = VortexState::empty(spec, gamma);
    let mut run = RunningSolution::empty(spec);
    let steps = 3 * spec.nodes();
    let refresh = 8u32;
    let mut accepted = 0u64;
    let mut proposed = 0u64;
    let nblocks = 20usize.min(measurement_sweeps.max(1) as usize).max(1);
    let mut block_sums = vec![0.0f64; nblocks];
    let mut block_counts = vec![0u64; nblocks];

    for sweep in 0..(equilibration_sweeps + measurement_sweeps) {
        for _ in 0..steps {
            proposed += 1;
            let p = propose(&mut rng, spec.n());
            let de = energy_delta(&state, &run, &p, green, spec);
            let accept = de <= 0.0 || rng.gen::<f64>() < (-beta * de).exp();
            if accept {
                state.apply_plaquette(&p, spec);
                refresh_psi(&mut run, gamma.value(), &p, de, green, spec);
                accepted += 1;
            }
        }
        if (sweep + 1) % refresh == 0 {
            run = RunningSolution::solve(&state, green, spec)?;
        }
        if sweep >= equilibration_sweeps {
            let b = ((sweep - equilibration_sweeps) as usize * nblocks
                / measurement_sweeps.max(1) as usize)
                .min(nblocks - 1);
            block_sums[b] += run.energy();
            block_counts[b] += 1;
        }
    }
    let total_sum: f64 = block_sums.iter().sum();
    let total_count: u64 = block_counts.iter().sum();
    if total_count == 0 {
        return Err(VortexError::EmptyLog);
    }
    let mean = total_sum / total_count as f64;
    let loo: Vec<f64> = block_sums
        .iter()
        .zip(&block_counts)
        .filter(|(_, &c)| total_count > c)
        .map(|(&s, &c)| (total_sum - s) / (total_count - c) as f64)
        .collect();
    Ok(MetropolisResult {
        mean_energy: mean,
        stderr: jackknife_stderr(&loo),
        acceptance: accepted as f64 / proposed as f64,
    })
}

const CHAIN_MAGIC: &[u8; 4] = b"VXCK";
const CHAIN_VERSION: u16 = 1;

/// Read just the lattice size from a serialized chain checkpoint, so callers
/// can build the matching Green table before the full load.
pub fn checkpoint_lattice_size<R: Read>(r: &mut R) -> Result<usize> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHAIN_MAGIC {
        return Err(VortexError::CheckpointFormat { what: "bad chain magic".into() });
    }
    if read_u16(r)? != CHAIN_VERSION {
        return Err(VortexError::CheckpointFormat { what: "unsupported chain version".into() });
    }
    Ok(read_u32(r)? as usize)
}

impl DemonChain {
    /// Serialize the complete chain: config, counters, RNG position, log,
    /// and the validated state block. Written at refresh points, so the
    /// stored demon energy is exactly consistent with a fresh field solve
    /// of the stored state and a resumed chain continues bit-identically.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHAIN_MAGIC)?;
        w.write_all(&CHAIN_VERSION.to_le_bytes())?;
        w.write_all(&(self.spec.n() as u32).to_le_bytes())?;
        let c = &self.cfg;
        for v in [c.target_energy, c.z2_bound, c.demon_cap] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in [c.equilibration_sweeps, c.measurement_sweeps, c.snapshot_stride, c.refresh_sweeps] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(c.hist_bins as u32).to_le_bytes())?;
        w.write_all(&(c.jackknife_blocks as u32).to_le_bytes())?;
        w.write_all(&c.seed.to_le_bytes())?;
        w.write_all(&c.stream.to_le_bytes())?;

        w.write_all(&self.sweeps_done.to_le_bytes())?;
        w.write_all(&self.demon.to_le_bytes())?;
        w.write_all(&self.total.to_le_bytes())?;
        w.write_all(&self.accepted.to_le_bytes())?;
        w.write_all(&self.proposed.to_le_bytes())?;
        w.write_all(&self.equil_ed_sum.to_le_bytes())?;
        w.write_all(&self.equil_ed_count.to_le_bytes())?;
        w.write_all(&[self.hist_armed as u8])?;

        w.write_all(&self.rng.get_seed())?;
        w.write_all(&self.rng.get_stream().to_le_bytes())?;
        w.write_all(&self.rng.get_word_pos().to_le_bytes())?;

        let h = &self.log.hist;
        w.write_all(&h.hi.to_le_bytes())?;
        w.write_all(&(h.bins.len() as u32).to_le_bytes())?;
        for &b in &h.bins {
            w.write_all(&b.to_le_bytes())?;
        }
        w.write_all(&h.overflow.to_le_bytes())?;
        w.write_all(&h.total.to_le_bytes())?;
        w.write_all(&h.sum.to_le_bytes())?;

        w.write_all(&(self.log.blocks.len() as u32).to_le_bytes())?;
        for b in &self.log.blocks {
            w.write_all(&b.ed_sum.to_le_bytes())?;
            w.write_all(&b.count.to_le_bytes())?;
            for &x in &b.hist {
                w.write_all(&x.to_le_bytes())?;
            }
        }

        w.write_all(&(self.log.records.len() as u32).to_le_bytes())?;
        for r in &self.log.records {
            w.write_all(&r.sweep.to_le_bytes())?;
            for v in [r.energy, r.demon, r.z2, r.lambda] {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&[r.snapshot as u8])?;
        }

        w.write_all(&(self.log.snapshots.len() as u32).to_le_bytes())?;
        for s in &self.log.snapshots {
            w.write_all(&s.sweep.to_le_bytes())?;
            for &v in &s.multiplicities {
                w.write_all(&v.to_le_bytes())?;
            }
        }

        self.state.write_checkpoint(w)?;
        Ok(())
    }

    /// Inverse of [`write_checkpoint`]. The field solution is rebuilt from
    /// the stored state, which reproduces the refreshed solution bit for bit.
    pub fn read_checkpoint<R: Read>(r: &mut R, green: &GreenTable) -> Result<DemonChain> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHAIN_MAGIC {
            return Err(VortexError::CheckpointFormat { what: "bad chain magic".into() });
        }
        if read_u16(r)? != CHAIN_VERSION {
            return Err(VortexError::CheckpointFormat { what: "unsupported chain version".into() });
        }
        let n = read_u32(r)? as usize;
        let spec = LatticeSpec::new(n)
            .map_err(|_| VortexError::CheckpointFormat { what: format!("bad lattice size {n}") })?;
        let target_energy = read_f64(r)?;
        let z2_bound = read_f64(r)?;
        let demon_cap = read_f64(r)?;
        let equilibration_sweeps = read_u32(r)?;
        let measurement_sweeps = read_u32(r)?;
        let snapshot_stride = read_u32(r)?;
        let refresh_sweeps = read_u32(r)?;
        let hist_bins = read_u32(r)? as usize;
        let jackknife_blocks = read_u32(r)? as usize;
        let seed = read_u64(r)?;
        let stream = read_u64(r)?;
        let cfg = SamplerConfig {
            target_energy,
            z2_bound,
            demon_cap,
            equilibration_sweeps,
            measurement_sweeps,
            snapshot_stride,
            refresh_sweeps,
            hist_bins,
            jackknife_blocks,
            seed,
            stream,
        };
        cfg.validate().map_err(|e| VortexError::CheckpointFormat { what: format!("bad config: {e}") })?;

        let sweeps_done = read_u32(r)?;
        let demon = read_f64(r)?;
        let total = read_f64(r)?;
        let accepted = read_u64(r)?;
        let proposed = read_u64(r)?;
        let equil_ed_sum = read_f64(r)?;
        let equil_ed_count = read_u64(r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let hist_armed = flag[0] != 0;

        let mut rng_seed = [0u8; 32];
        r.read_exact(&mut rng_seed)?;
        let rng_stream = read_u64(r)?;
        let word_pos = read_u128(r)?;
        let mut rng = ChaCha8Rng::from_seed(rng_seed);
        rng.set_stream(rng_stream);
        rng.set_word_pos(word_pos);

        let hist_hi = read_f64(r)?;
        let nbins = read_u32(r)? as usize;
        let mut hist = Histogram::new(hist_hi, nbins);
        for b in hist.bins.iter_mut() {
            *b = read_u64(r)?;
        }
        hist.overflow = read_u64(r)?;
        hist.total = read_u64(r)?;
        hist.sum = read_f64(r)?;

        let nblocks = read_u32(r)? as usize;
        let mut blocks = Vec::with_capacity(nblocks);
        for _ in 0..nblocks {
            let ed_sum = read_f64(r)?;
            let count = read_u64(r)?;
            let mut bh = vec![0u64; nbins];
            for x in bh.iter_mut() {
                *x = read_u64(r)?;
            }
            blocks.push(BlockStat { ed_sum, count, hist: bh });
        }

        let nrec = read_u32(r)? as usize;
        let mut records = Vec::with_capacity(nrec);
        for _ in 0..nrec {
            let sweep = read_u32(r)?;
            let energy = read_f64(r)?;
            let d = read_f64(r)?;
            let z2 = read_f64(r)?;
            let lambda = read_f64(r)?;
            r.read_exact(&mut flag)?;
            records.push(SweepRecord { sweep, energy, demon: d, z2, lambda, snapshot: flag[0] != 0 });
        }

        let nsnap = read_u32(r)? as usize;
        let edges = 3 * spec.nodes();
        let mut snapshots = Vec::with_capacity(nsnap);
        for _ in 0..nsnap {
            let sweep = read_u32(r)?;
            let mut m = vec![0i32; edges];
            for v in m.iter_mut() {
                *v = read_i32(r)?;
            }
            snapshots.push(Snapshot { sweep, multiplicities: m });
        }

        let state = VortexState::read_checkpoint(r)?;
        if state.n() != n {
            return Err(VortexError::CheckpointFormat {
                what: format!("state lattice {} does not match header {}", state.n(), n),
            });
        }
        let z2_unit = state.enstrophy_unit(&spec);
        // Checkpoints are written right after a refresh, so a fresh solve
        // reproduces the stored running solution exactly.
        let run = RunningSolution::solve(&state, green, &spec)?;
        let drift = (run.energy() + demon - total).abs();
        if drift > 1e-6 * total.abs().max(1.0) {
            return Err(VortexError::CheckpointFormat {
                what: format!("stored energies violate conservation by {drift:.3e}"),
            });
        }

        Ok(DemonChain {
            spec,
            cfg,
            state,
            run,
            z2_unit,
            demon,
            total,
            rng,
            accepted,
            proposed,
            sweeps_done,
            log: SampleLog { records, hist, blocks, snapshots },
            hist_armed,
            equil_ed_sum,
            equil_ed_count,
        })
    }
}
