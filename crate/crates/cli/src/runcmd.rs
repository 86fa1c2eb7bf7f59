//! The `run` and `resume` subcommands: policy resolution, chain driving,
//! checkpointing, and the output artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use vortexmc::{
    aggregate_moment_tables, aggregate_structure_functions, baseline_z2, checkpoint_lattice_size,
    home_in, merge_estimates, solutions_from_snapshots, structure_function, velocity_moments,
    BetaEstimates, ChainResult, Circulation, DemonChain, GreenTable, LatticeSpec, MomentTable,
    SamplerConfig, StructureFunction, VortexError,
};

use crate::artifacts::{
    self, default_out_dir, prepare_out_dir, sha256_hex, write_bytes, write_json, ChainSeed,
};
use crate::config::{RunConfig, Z2Policy};
use crate::Failure;

/// RNG stream bands. Chains use stream + chain index; service runs sit far
/// above so no probe ever shares a stream with a measurement chain.
pub(crate) const BASELINE_STREAM_OFFSET: u64 = 1_000_000;
pub(crate) const TARGETING_STREAM_OFFSET: u64 = 2_000_000;

/// Velocity moments are tabulated up to this power.
const MOMENT_MAX_P: usize = 6;

#[derive(Serialize)]
pub(crate) struct BaselineOut {
    pub(crate) z2_mean: f64,
    pub(crate) z2_stderr: f64,
    pub(crate) sweeps: u64,
    pub(crate) beta: Option<BetaEstimates>,
}

impl From<&vortexmc::BaselineZ2> for BaselineOut {
    fn from(b: &vortexmc::BaselineZ2) -> BaselineOut {
        BaselineOut { z2_mean: b.z2_mean, z2_stderr: b.z2_stderr, sweeps: b.sweeps, beta: b.beta }
    }
}

#[derive(Serialize)]
struct ChainSummary {
    chain: u32,
    seed: u64,
    stream: u64,
    sweeps_done: u32,
    proposed: u64,
    accepted: u64,
    acceptance: f64,
    final_energy: f64,
    final_demon: f64,
    final_z2: f64,
    mean_energy: f64,
    mean_demon: f64,
    mean_z2: f64,
    histogram_overflow: u64,
    beta: Option<BetaEstimates>,
}

#[derive(Serialize)]
struct MergedOut {
    value: f64,
    stderr: f64,
    n_chains: usize,
    n_independent: usize,
    max_pair_sigma: f64,
}

#[derive(Serialize)]
struct ChainBetaOut {
    chain: u32,
    beta: f64,
    stderr: f64,
    method_spread: f64,
}

#[derive(Serialize)]
struct RunEstimates {
    z2_bound: f64,
    per_chain: Vec<ChainBetaOut>,
    merged_beta: Option<MergedOut>,
}

#[derive(Serialize)]
struct VelocityMeta {
    n_chains: usize,
    n_samples: usize,
    flatness: Vec<Option<f64>>,
    mean_speed_squared: f64,
    isotropy_max_sigma: f64,
    moment_max_pair_sigma: f64,
    c_empirical: Option<f64>,
    c_alternative: Option<f64>,
    plateau_raw: f64,
}

pub fn cmd_run(cfg: &RunConfig, out_flag: Option<PathBuf>, stop_after: Option<u32>) -> Result<(), Failure> {
    let started = Instant::now();
    cfg.validate()?;
    let out = default_out_dir(out_flag.or_else(|| cfg.out.clone()), "vortexmc-run");
    prepare_out_dir(&out)?;

    let spec = LatticeSpec::new(cfg.n)?;
    let gamma = Circulation::new(cfg.gamma)?;
    let green = GreenTable::build(&spec)?;
    let resolved = cfg.resolved();

    let z2_bound = resolve_policy(&resolved, &spec, gamma, &green, &out)?;

    let config_bytes = artifacts::to_json_bytes(&resolved)?;
    write_bytes(&out, "config.json", &config_bytes)?;
    let config_sha = sha256_hex(&config_bytes);

    let mut completed: Vec<(u32, ChainResult)> = Vec::new();
    let mut interrupted = false;
    for chain_idx in 0..resolved.chains {
        let scfg = resolved.to_sampler_config_with_bound(chain_idx, z2_bound);
        let chain_dir = out.join(chain_dir_name(chain_idx));
        fs::create_dir_all(&chain_dir)
            .map_err(|e| Failure::from_io(&format!("create {}", chain_dir.display()), e))?;
        let mut chain = DemonChain::initialize(&spec, gamma, scfg, &green)
            .map_err(|e| annotate_chain(chain_idx, e))?;
        if drive_chain(&mut chain, &green, &chain_dir, resolved.checkpoint_sweeps, stop_after)? {
            println!(
                "chain {chain_idx:02}: paused at sweep {} of {}; checkpoint written",
                chain.sweeps_done(),
                resolved.total_sweeps()
            );
            interrupted = true;
        } else {
            completed.push((chain_idx, chain.into_result()?));
        }
    }

    finalize(&out, &resolved, &spec, gamma, &green, &completed, interrupted, config_sha, started)?;
    if interrupted {
        println!("resume with: vortexmc resume --dir {}", out.display());
    }
    Ok(())
}

pub fn cmd_resume(dir: PathBuf, stop_after: Option<u32>) -> Result<(), Failure> {
    let started = Instant::now();
    let config_path = dir.join("config.json");
    let config_bytes = fs::read(&config_path)
        .map_err(|e| Failure::Config(format!("{} is not a run directory: {e}", dir.display())))?;
    let cfg: RunConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| Failure::Config(format!("bad config {}: {e}", config_path.display())))?;
    cfg.validate()?;
    let config_sha = sha256_hex(&config_bytes);

    // The resolved bound travels inside each checkpoint; the first one found
    // also fixes the lattice for chains that never got to start.
    let mut checkpoints: Vec<Option<Vec<u8>>> = Vec::new();
    for chain_idx in 0..cfg.chains {
        let path = dir.join(chain_dir_name(chain_idx)).join("checkpoint.bin");
        checkpoints.push(fs::read(&path).ok());
    }
    let first = checkpoints
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Failure::Config(format!("{} holds no checkpoints; nothing to resume", dir.display())))?;
    let ckpt_n = checkpoint_lattice_size(&mut first.as_slice())?;
    if ckpt_n != cfg.n {
        return Err(Failure::Config(format!(
            "checkpoint lattice {ckpt_n} does not match config n {}",
            cfg.n
        )));
    }
    let spec = LatticeSpec::new(cfg.n)?;
    let gamma = Circulation::new(cfg.gamma)?;
    let green = GreenTable::build(&spec)?;

    let mut loaded: Vec<Option<DemonChain>> = Vec::with_capacity(cfg.chains as usize);
    for bytes in &checkpoints {
        loaded.push(match bytes {
            Some(b) => Some(DemonChain::read_checkpoint(&mut b.as_slice(), &green)?),
            None => None,
        });
    }
    let z2_bound = loaded
        .iter()
        .flatten()
        .next()
        .expect("at least one checkpoint was read")
        .config()
        .z2_bound;
    let mut chains: Vec<DemonChain> = Vec::with_capacity(cfg.chains as usize);
    for (chain_idx, slot) in loaded.into_iter().enumerate() {
        chains.push(match slot {
            Some(chain) => chain,
            None => {
                // This chain never started; bring it up under the same bound.
                let scfg = cfg.to_sampler_config_with_bound(chain_idx as u32, z2_bound);
                let chain_dir = dir.join(chain_dir_name(chain_idx as u32));
                fs::create_dir_all(&chain_dir)
                    .map_err(|e| Failure::from_io(&format!("create {}", chain_dir.display()), e))?;
                DemonChain::initialize(&spec, gamma, scfg, &green)
                    .map_err(|e| annotate_chain(chain_idx as u32, e))?
            }
        });
    }

    let mut completed: Vec<(u32, ChainResult)> = Vec::new();
    let mut interrupted = false;
    for (chain_idx, mut chain) in chains.into_iter().enumerate() {
        let chain_idx = chain_idx as u32;
        let chain_dir = dir.join(chain_dir_name(chain_idx));
        let before = chain.sweeps_done();
        if drive_chain(&mut chain, &green, &chain_dir, cfg.checkpoint_sweeps, stop_after)? {
            println!(
                "chain {chain_idx:02}: paused at sweep {} of {}; checkpoint written",
                chain.sweeps_done(),
                cfg.total_sweeps()
            );
            interrupted = true;
        } else {
            if before < cfg.total_sweeps() {
                println!("chain {chain_idx:02}: continued from sweep {before} to {}", cfg.total_sweeps());
            }
            completed.push((chain_idx, chain.into_result()?));
        }
    }

    finalize(&dir, &cfg, &spec, gamma, &green, &completed, interrupted, config_sha, started)?;
    if interrupted {
        println!("resume with: vortexmc resume --dir {}", dir.display());
    }
    Ok(())
}

fn chain_dir_name(chain: u32) -> String {
    format!("chain_{chain:02}")
}

fn annotate_chain(chain: u32, e: VortexError) -> Failure {
    match Failure::from(e) {
        Failure::Infeasible(m) => Failure::Infeasible(format!("chain {chain:02}: {m}")),
        other => other,
    }
}

/// Measure or search for the enstrophy bound the policy asks for, persisting
/// what the decision was based on. Service runs use reserved stream bands.
fn resolve_policy(
    cfg: &RunConfig,
    spec: &LatticeSpec,
    gamma: Circulation,
    green: &GreenTable,
    out: &Path,
) -> Result<f64, Failure> {
    let baseline = |stream_offset: u64| -> Result<BaselineOut, Failure> {
        let base = SamplerConfig {
            stream: cfg.stream + stream_offset,
            snapshot_stride: 0,
            ..cfg.to_sampler_config(0)
        };
        Ok(BaselineOut::from(&baseline_z2(spec, gamma, &base, green)?))
    };
    match &cfg.z2 {
        Z2Policy::Unbounded => {
            println!("enstrophy bound: none (unconstrained)");
            Ok(f64::INFINITY)
        }
        Z2Policy::Bound { z2_bound } => {
            println!("enstrophy bound: {z2_bound}");
            Ok(*z2_bound)
        }
        Z2Policy::DeltaFromBaseline { delta_z2 } => {
            let b = baseline(BASELINE_STREAM_OFFSET)?;
            write_json(out, "baseline.json", &b)?;
            let bound = b.z2_mean - delta_z2;
            if !(bound.is_finite() && bound > 0.0) {
                return Err(Failure::Infeasible(format!(
                    "delta_z2 {delta_z2} leaves no enstrophy budget: baseline mean is {:.4}",
                    b.z2_mean
                )));
            }
            println!(
                "enstrophy bound: {bound:.4} (baseline {:.4} +- {:.4}, delta {delta_z2})",
                b.z2_mean, b.z2_stderr
            );
            Ok(bound)
        }
        Z2Policy::TargetBeta { beta, tolerance, delta_lo_frac, delta_hi_frac } => {
            let b = baseline(BASELINE_STREAM_OFFSET)?;
            write_json(out, "baseline.json", &b)?;
            let base = SamplerConfig {
                stream: cfg.stream + TARGETING_STREAM_OFFSET,
                snapshot_stride: 0,
                ..cfg.to_sampler_config(0)
            };
            let record = home_in(
                spec,
                gamma,
                &base,
                b.z2_mean,
                delta_lo_frac * b.z2_mean,
                delta_hi_frac * b.z2_mean,
                *beta,
                *tolerance,
                green,
            )?;
            write_json(out, "targeting.json", &record)?;
            if !record.feasible {
                return Err(Failure::Infeasible(format!(
                    "target beta {beta}: bound {:.4} is infeasible ({})",
                    record.z2_bound,
                    record.warning.as_deref().unwrap_or("no detail")
                )));
            }
            if let Some(w) = &record.warning {
                eprintln!("warning: beta search: {w}");
            }
            println!(
                "enstrophy bound: {:.4} (target beta {beta}, homed beta {} +- {})",
                record.z2_bound,
                record.beta.unwrap_or(f64::NAN),
                record.beta_stderr.unwrap_or(f64::NAN)
            );
            Ok(record.z2_bound)
        }
    }
}

/// Run one chain to completion or to the requested pause point, writing
/// checkpoints at the configured cadence. Returns true when paused early.
fn drive_chain(
    chain: &mut DemonChain,
    green: &GreenTable,
    chain_dir: &Path,
    checkpoint_sweeps: u32,
    stop_after: Option<u32>,
) -> Result<bool, Failure> {
    let total = chain.config().equilibration_sweeps + chain.config().measurement_sweeps;
    let ckpt_path = chain_dir.join("checkpoint.bin");
    let stop = stop_after.unwrap_or(u32::MAX);
    chain.run_until(stop, green, |c| {
        let due = (checkpoint_sweeps > 0 && c.sweeps_done().is_multiple_of(checkpoint_sweeps))
            || c.sweeps_done() >= total
            || c.sweeps_done() >= stop;
        if due {
            write_checkpoint_file(c, &ckpt_path)?;
        }
        Ok(())
    })?;
    Ok(chain.sweeps_done() < total)
}

fn write_checkpoint_file(chain: &DemonChain, path: &Path) -> vortexmc::error::Result<()> {
    let mut buf = Vec::new();
    chain.write_checkpoint(&mut buf)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn samples_csv(res: &ChainResult) -> String {
    let mut s = String::from("sweep,energy,demon_energy,z2,lambda,snapshot\n");
    for r in &res.log.records {
        writeln!(s, "{},{},{},{},{},{}", r.sweep, r.energy, r.demon, r.z2, r.lambda, r.snapshot as u8).unwrap();
    }
    s
}

fn demon_hist_csv(res: &ChainResult) -> String {
    let mut s = String::from("bin_center,count\n");
    for (i, &c) in res.log.hist.bins.iter().enumerate() {
        writeln!(s, "{},{c}", res.log.hist.center(i)).unwrap();
    }
    s
}

#[allow(clippy::too_many_arguments)]
fn finalize(
    out: &Path,
    cfg: &RunConfig,
    spec: &LatticeSpec,
    gamma: Circulation,
    green: &GreenTable,
    completed: &[(u32, ChainResult)],
    interrupted: bool,
    config_sha: String,
    started: Instant,
) -> Result<(), Failure> {
    for (chain_idx, res) in completed {
        let rel = chain_dir_name(*chain_idx);
        write_bytes(out, &format!("{rel}/samples.csv"), samples_csv(res).as_bytes())?;
        write_bytes(out, &format!("{rel}/demon_hist.csv"), demon_hist_csv(res).as_bytes())?;
        let records = &res.log.records;
        let nrec = records.len().max(1) as f64;
        let summary = ChainSummary {
            chain: *chain_idx,
            seed: res.config.seed,
            stream: res.config.stream,
            sweeps_done: res.config.equilibration_sweeps + res.config.measurement_sweeps,
            proposed: res.proposed,
            accepted: res.accepted,
            acceptance: res.accepted as f64 / res.proposed.max(1) as f64,
            final_energy: res.config.target_energy - res.final_demon,
            final_demon: res.final_demon,
            final_z2: res.final_state.enstrophy_z2(spec),
            mean_energy: records.iter().map(|r| r.energy).sum::<f64>() / nrec,
            mean_demon: records.iter().map(|r| r.demon).sum::<f64>() / nrec,
            mean_z2: records.iter().map(|r| r.z2).sum::<f64>() / nrec,
            histogram_overflow: res.log.hist.overflow,
            beta: res.beta,
        };
        write_json(out, &format!("{rel}/beta.json"), &summary)?;
        match &res.beta {
            Some(b) => println!(
                "chain {chain_idx:02}: beta {:.6} +- {:.6} (histogram {:.6} +- {:.6}), acceptance {:.4}",
                b.mean_relation.beta,
                b.mean_relation.stderr,
                b.histogram_fit.beta,
                b.histogram_fit.stderr,
                summary.acceptance
            ),
            None => println!("chain {chain_idx:02}: no measurement sweeps; beta not estimated"),
        }
    }

    if !interrupted {
        write_estimates(out, cfg, completed)?;
        write_velocity_tables(out, spec, gamma, green, completed)?;
    }

    let seeds: Vec<ChainSeed> = (0..cfg.chains)
        .map(|c| ChainSeed { chain: c, seed: cfg.seed, stream: cfg.stream + c as u64 })
        .collect();
    let status = if interrupted { "interrupted" } else { "complete" };
    artifacts::write_manifest(out, status, Some(config_sha), seeds, started)?;
    println!("wrote {} ({status})", out.display());
    Ok(())
}

fn write_estimates(out: &Path, cfg: &RunConfig, completed: &[(u32, ChainResult)]) -> Result<(), Failure> {
    let mut per_chain = Vec::new();
    let mut pairs = Vec::new();
    let mut z2_bound = f64::INFINITY;
    for (chain_idx, res) in completed {
        z2_bound = res.config.z2_bound;
        if let Some(b) = &res.beta {
            per_chain.push(ChainBetaOut {
                chain: *chain_idx,
                beta: b.mean_relation.beta,
                stderr: b.mean_relation.stderr,
                method_spread: b.method_spread(),
            });
            pairs.push((b.mean_relation.beta, b.mean_relation.stderr));
        }
    }
    let merged_beta = if pairs.is_empty() {
        None
    } else {
        let m = merge_estimates(&pairs)?;
        if m.discrepant() {
            eprintln!(
                "warning: chains disagree on beta beyond noise (max pairwise sigma {:.2}); check equilibration",
                m.max_pair_sigma
            );
        }
        Some(MergedOut {
            value: m.value,
            stderr: m.stderr,
            n_chains: m.n_chains,
            n_independent: m.n_independent,
            max_pair_sigma: m.max_pair_sigma,
        })
    };
    if let Some(m) = &merged_beta {
        if cfg.chains > 1 {
            println!(
                "merged beta {:.6} +- {:.6} over {} chain(s), max pairwise sigma {:.2}",
                m.value, m.stderr, m.n_chains, m.max_pair_sigma
            );
        }
    }
    write_json(out, "estimates.json", &RunEstimates { z2_bound, per_chain, merged_beta })
}

/// Velocity statistics from the snapshots, merged across chains. Skipped
/// with a note when snapshots were not collected.
fn write_velocity_tables(
    out: &Path,
    spec: &LatticeSpec,
    gamma: Circulation,
    green: &GreenTable,
    completed: &[(u32, ChainResult)],
) -> Result<(), Failure> {
    let mut tables: Vec<MomentTable> = Vec::new();
    let mut sfs: Vec<StructureFunction> = Vec::new();
    let mut n_samples = 0usize;
    for (chain_idx, res) in completed {
        if res.log.snapshots.is_empty() {
            continue;
        }
        if res.log.snapshots.len() < 2 {
            eprintln!(
                "note: chain {chain_idx:02} has {} snapshot(s); velocity tables need at least 2",
                res.log.snapshots.len()
            );
            continue;
        }
        let sols = solutions_from_snapshots(&res.log.snapshots, gamma, spec, green)?;
        n_samples += sols.len();
        tables.push(velocity_moments(&sols, spec, MOMENT_MAX_P)?);
        sfs.push(structure_function(&sols, spec)?);
    }
    if tables.is_empty() {
        return Ok(());
    }
    let (moments, m_report) = aggregate_moment_tables(&tables)?;
    let (sf, _) = aggregate_structure_functions(&sfs)?;
    write_bytes(out, "moments.csv", artifacts::moments_csv(&moments).as_bytes())?;
    let structure = format!("{}\n{}", artifacts::STRUCTURE_HEADER, artifacts::structure_rows(&sf, ""));
    write_bytes(out, "structure.csv", structure.as_bytes())?;
    let meta = VelocityMeta {
        n_chains: tables.len(),
        n_samples,
        flatness: (0..3).map(|c| moments.flatness(c)).collect(),
        mean_speed_squared: moments.mean_speed_squared(),
        isotropy_max_sigma: moments.isotropy_max_sigma(),
        moment_max_pair_sigma: m_report.max_pair_sigma,
        c_empirical: sf.c_empirical,
        c_alternative: sf.c_alternative,
        plateau_raw: sf.plateau_raw,
    };
    write_json(out, "velocity_meta.json", &meta)?;
    println!(
        "velocity tables from {n_samples} snapshot(s): <u1^2> = {:.4} +- {:.4}, flatness {}",
        moments.moment(0, 2),
        moments.stderr(0, 2),
        moments.flatness(0).map_or("n/a".to_string(), |f| format!("{f:.3}")),
    );
    Ok(())
}
