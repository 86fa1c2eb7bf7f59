//! The `figure` and `tabulate` subcommands: canned experiment sweeps that
//! emit plot-ready CSVs with error columns, plus their JSON sidecars.

use std::fmt::Write as _;
use std::time::Instant;

use clap::ValueEnum;
use serde::Serialize;
use vortexmc::sampler::run_chain;
use vortexmc::{
    baseline_z2, home_in, solutions_from_snapshots, structure_function, tabulate,
    velocity_moments, BetaEstimates, Circulation, GreenTable, LatticeSpec, SamplerConfig,
    TabulationRecord, VortexError,
};

use crate::artifacts::{
    csv_field, default_out_dir, moments_csv, prepare_out_dir, structure_rows, write_bytes,
    write_json, write_manifest, ChainSeed, STRUCTURE_HEADER,
};
use crate::runcmd::{BaselineOut, BASELINE_STREAM_OFFSET, TARGETING_STREAM_OFFSET};
use crate::{Failure, FigureArgs, TabulateArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FigureId {
    /// Inverse temperature versus lattice size, unconstrained.
    Fig2,
    /// Inverse temperature versus enstrophy reduction at fixed size.
    Fig3,
    /// Normalized structure function at two target temperatures.
    Fig4,
    /// Componentwise velocity moment table.
    Moments,
}

/// Sweep budgets: `desk` finishes the whole figure suite in minutes on one
/// core, `paper` runs the production-length chains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

#[derive(Clone, Copy)]
struct Budget {
    equil: u32,
    meas: u32,
    stride: u32,
}

impl Budget {
    fn override_with(mut self, args: &FigureArgs) -> Budget {
        if let Some(e) = args.equilibration_sweeps {
            self.equil = e;
        }
        if let Some(m) = args.measurement_sweeps {
            self.meas = m;
        }
        if let Some(s) = args.snapshot_stride {
            self.stride = s;
        }
        self
    }
}

const PAPER_BUDGET: Budget = Budget { equil: 1_000, meas: 10_000, stride: 10 };

/// Unconstrained chains mix slower on small lattices relative to their cost,
/// so the desk preset trades sweeps for size.
fn fig2_budget(preset: Preset, n: usize) -> Budget {
    match preset {
        Preset::Paper => PAPER_BUDGET,
        Preset::Desk if n <= 4 => Budget { equil: 300, meas: 900, stride: 0 },
        Preset::Desk if n <= 8 => Budget { equil: 150, meas: 450, stride: 0 },
        Preset::Desk => Budget { equil: 40, meas: 120, stride: 0 },
    }
}

fn probe_budget(preset: Preset) -> Budget {
    match preset {
        Preset::Paper => PAPER_BUDGET,
        Preset::Desk => Budget { equil: 60, meas: 120, stride: 0 },
    }
}

fn snapshot_budget(preset: Preset) -> Budget {
    match preset {
        Preset::Paper => PAPER_BUDGET,
        Preset::Desk => Budget { equil: 30, meas: 120, stride: 5 },
    }
}

pub fn cmd_figure(args: &FigureArgs) -> Result<(), Failure> {
    match args.id {
        FigureId::Fig2 => fig2(args),
        FigureId::Fig3 => fig3(args),
        FigureId::Fig4 => fig4(args),
        FigureId::Moments => moments(args),
    }
}

fn base_seed(args: &FigureArgs) -> u64 {
    args.seed.unwrap_or(11)
}

/// Slope of the least-squares line through (x, y) pairs.
fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

#[derive(Serialize)]
struct Fig2Meta {
    target_energy: f64,
    gamma: f64,
    seed: u64,
    preset: String,
    sizes: Vec<usize>,
    /// ln(beta) vs ln(n) least-squares slope; None when a beta is
    /// non-positive or there are fewer than two sizes.
    slope: Option<f64>,
}

fn fig2(args: &FigureArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let out = default_out_dir(args.out.clone(), "fig2");
    prepare_out_dir(&out)?;
    let sizes = args.sizes.clone().unwrap_or_else(|| vec![4, 8, 16]);
    if sizes.is_empty() {
        return Err(Failure::Config("--sizes must name at least one lattice size".into()));
    }
    let target_energy = args.target_energy.unwrap_or(100.0);
    let gamma = Circulation::new(args.gamma.unwrap_or(1.0))?;
    let seed = base_seed(args);

    let mut csv = String::from("n,beta,beta_stderr,beta_histogram,beta_histogram_stderr,acceptance\n");
    let mut fit_points = Vec::new();
    let mut fit_ok = true;
    for &n in &sizes {
        let b = fig2_budget(args.preset, n).override_with(args);
        let spec = LatticeSpec::new(n)?;
        let green = GreenTable::build(&spec)?;
        let cfg = SamplerConfig {
            equilibration_sweeps: b.equil,
            measurement_sweeps: b.meas,
            seed,
            ..SamplerConfig::new(target_energy)
        };
        let res = run_chain(&spec, gamma, cfg, &green)?;
        let est: BetaEstimates = res
            .beta
            .ok_or_else(|| Failure::Other(format!("n {n}: no beta estimate; measurement budget too small")))?;
        let acceptance = res.accepted as f64 / res.proposed.max(1) as f64;
        writeln!(
            csv,
            "{n},{},{},{},{},{acceptance}",
            est.mean_relation.beta,
            est.mean_relation.stderr,
            est.histogram_fit.beta,
            est.histogram_fit.stderr
        )
        .unwrap();
        println!(
            "n {n}: beta {:.6} +- {:.6} (histogram {:.6})",
            est.mean_relation.beta, est.mean_relation.stderr, est.histogram_fit.beta
        );
        if est.mean_relation.beta > 0.0 {
            fit_points.push(((n as f64).ln(), est.mean_relation.beta.ln()));
        } else {
            fit_ok = false;
        }
    }

    let slope = (fit_ok && fit_points.len() >= 2).then(|| least_squares_slope(&fit_points));
    match slope {
        Some(s) => println!("fitted slope of ln(beta) vs ln(n): {s:.4}"),
        None => println!("slope not fitted (need >= 2 sizes with positive beta)"),
    }
    write_bytes(&out, "fig2.csv", csv.as_bytes())?;
    let meta = Fig2Meta {
        target_energy,
        gamma: gamma.value(),
        seed,
        preset: args.preset.name().to_string(),
        sizes: sizes.clone(),
        slope,
    };
    write_json(&out, "fig2_meta.json", &meta)?;
    let seeds = (0..sizes.len() as u32).map(|i| ChainSeed { chain: i, seed, stream: 0 }).collect();
    write_manifest(&out, "complete", None, seeds, started)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub(crate) fn tabulation_csv(records: &[TabulationRecord]) -> String {
    let mut s = String::from("delta_z2,z2_bound,beta,beta_stderr,feasible,warning\n");
    for r in records {
        let beta = r.beta.map(|b| b.to_string()).unwrap_or_default();
        let err = r.beta_stderr.map(|e| e.to_string()).unwrap_or_default();
        let warn = csv_field(r.warning.as_deref().unwrap_or(""));
        writeln!(s, "{},{},{beta},{err},{},{warn}", r.delta_z2, r.z2_bound, r.feasible).unwrap();
    }
    s
}

fn print_tabulation(records: &[TabulationRecord]) {
    for r in records {
        match (r.feasible, r.beta) {
            (true, Some(b)) => println!(
                "delta_z2 {:.4}: bound {:.4}, beta {b:.6} +- {:.6}",
                r.delta_z2,
                r.z2_bound,
                r.beta_stderr.unwrap_or(f64::NAN)
            ),
            (true, None) => println!(
                "delta_z2 {:.4}: bound {:.4}, beta not estimated ({})",
                r.delta_z2,
                r.z2_bound,
                r.warning.as_deref().unwrap_or("no detail")
            ),
            (false, _) => println!("delta_z2 {:.4}: bound {:.4} INFEASIBLE", r.delta_z2, r.z2_bound),
        }
    }
}

#[derive(Serialize)]
struct Fig3Meta {
    n: usize,
    target_energy: f64,
    gamma: f64,
    seed: u64,
    preset: String,
    delta_fracs: Vec<f64>,
    baseline_z2_mean: f64,
    baseline_z2_stderr: f64,
}

fn fig3(args: &FigureArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let out = default_out_dir(args.out.clone(), "fig3");
    prepare_out_dir(&out)?;
    let n = args.n.unwrap_or(16);
    let target_energy = args.target_energy.unwrap_or(100.0);
    let gamma = Circulation::new(args.gamma.unwrap_or(1.0))?;
    let seed = base_seed(args);
    let fracs = args
        .delta_fracs
        .clone()
        .unwrap_or_else(|| vec![0.02, 0.05, 0.10, 0.15, 0.20, 0.25]);
    if fracs.is_empty() {
        return Err(Failure::Config("--delta-fracs must name at least one reduction".into()));
    }
    let b = probe_budget(args.preset).override_with(args);

    let spec = LatticeSpec::new(n)?;
    let green = GreenTable::build(&spec)?;
    let base = SamplerConfig {
        equilibration_sweeps: b.equil,
        measurement_sweeps: b.meas,
        seed,
        ..SamplerConfig::new(target_energy)
    };
    let baseline = BaselineOut::from(&baseline_z2(
        &spec,
        gamma,
        &SamplerConfig { stream: base.stream + BASELINE_STREAM_OFFSET, ..base.clone() },
        &green,
    )?);
    write_json(&out, "baseline.json", &baseline)?;
    println!("baseline z2 {:.4} +- {:.4}", baseline.z2_mean, baseline.z2_stderr);

    let deltas: Vec<f64> = fracs.iter().map(|f| f * baseline.z2_mean).collect();
    let records = tabulate(&spec, gamma, &base, baseline.z2_mean, &deltas, &green)?;
    print_tabulation(&records);

    write_bytes(&out, "fig3.csv", tabulation_csv(&records).as_bytes())?;
    write_json(&out, "fig3_records.json", &records)?;
    let meta = Fig3Meta {
        n,
        target_energy,
        gamma: gamma.value(),
        seed,
        preset: args.preset.name().to_string(),
        delta_fracs: fracs,
        baseline_z2_mean: baseline.z2_mean,
        baseline_z2_stderr: baseline.z2_stderr,
    };
    write_json(&out, "fig3_meta.json", &meta)?;
    write_manifest(&out, "complete", None, vec![ChainSeed { chain: 0, seed, stream: 0 }], started)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct TargetMeta {
    beta_target: f64,
    homed_beta: Option<f64>,
    homed_beta_stderr: Option<f64>,
    delta_z2: Option<f64>,
    z2_bound: Option<f64>,
    n_samples: usize,
    plateau_raw: Option<f64>,
    c_empirical: Option<f64>,
    c_alternative: Option<f64>,
    mean_speed_squared: Option<f64>,
    warning: Option<String>,
}

#[derive(Serialize)]
struct Fig4Meta {
    n: usize,
    target_energy: f64,
    gamma: f64,
    seed: u64,
    preset: String,
    tolerance: f64,
    targets: Vec<TargetMeta>,
}

fn fig4(args: &FigureArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let out = default_out_dir(args.out.clone(), "fig4");
    prepare_out_dir(&out)?;
    let n = args.n.unwrap_or(16);
    let target_energy = args.target_energy.unwrap_or(100.0);
    let gamma = Circulation::new(args.gamma.unwrap_or(1.0))?;
    let seed = base_seed(args);
    let targets = args.beta_targets.clone().unwrap_or_else(|| vec![3.0, 40.2]);
    if targets.is_empty() {
        return Err(Failure::Config("--beta-targets must name at least one target".into()));
    }
    let tolerance = args.beta_tolerance.unwrap_or(0.1);
    let lo_frac = args.delta_lo_frac.unwrap_or(0.0);
    let hi_frac = args.delta_hi_frac.unwrap_or(0.4);
    let search = probe_budget(args.preset).override_with(args);
    let snap = snapshot_budget(args.preset).override_with(args);
    if snap.stride == 0 {
        return Err(Failure::Config("snapshot_stride must be > 0 for fig4".into()));
    }

    let spec = LatticeSpec::new(n)?;
    let green = GreenTable::build(&spec)?;
    let probe_base = SamplerConfig {
        equilibration_sweeps: search.equil,
        measurement_sweeps: search.meas,
        seed,
        ..SamplerConfig::new(target_energy)
    };
    let baseline = BaselineOut::from(&baseline_z2(
        &spec,
        gamma,
        &SamplerConfig { stream: BASELINE_STREAM_OFFSET, ..probe_base.clone() },
        &green,
    )?);
    write_json(&out, "baseline.json", &baseline)?;
    println!("baseline z2 {:.4} +- {:.4}", baseline.z2_mean, baseline.z2_stderr);

    let mut csv = format!("beta_target,{STRUCTURE_HEADER}\n");
    let mut metas = Vec::new();
    let mut records = Vec::new();
    let mut curves = 0usize;
    for (t_idx, &beta_target) in targets.iter().enumerate() {
        // Non-overlapping stream bands per target: the search consumes a
        // handful from the base, the snapshot run sits at +500.
        let stream_base = TARGETING_STREAM_OFFSET + 1_000 * t_idx as u64;
        let search_result = home_in(
            &spec,
            gamma,
            &SamplerConfig { stream: stream_base, ..probe_base.clone() },
            baseline.z2_mean,
            lo_frac * baseline.z2_mean,
            hi_frac * baseline.z2_mean,
            beta_target,
            tolerance,
            &green,
        );
        let record = match search_result {
            Ok(r) => r,
            Err(e @ VortexError::BracketFailure { .. }) => {
                eprintln!("warning: beta target {beta_target}: {e}");
                metas.push(TargetMeta {
                    beta_target,
                    homed_beta: None,
                    homed_beta_stderr: None,
                    delta_z2: None,
                    z2_bound: None,
                    n_samples: 0,
                    plateau_raw: None,
                    c_empirical: None,
                    c_alternative: None,
                    mean_speed_squared: None,
                    warning: Some(e.to_string()),
                });
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        if let Some(w) = &record.warning {
            eprintln!("warning: beta target {beta_target}: {w}");
        }
        if !record.feasible {
            metas.push(TargetMeta {
                beta_target,
                homed_beta: None,
                homed_beta_stderr: None,
                delta_z2: Some(record.delta_z2),
                z2_bound: Some(record.z2_bound),
                n_samples: 0,
                plateau_raw: None,
                c_empirical: None,
                c_alternative: None,
                mean_speed_squared: None,
                warning: record.warning.clone().or_else(|| Some("infeasible".into())),
            });
            records.push(record);
            continue;
        }

        let snap_cfg = SamplerConfig {
            equilibration_sweeps: snap.equil,
            measurement_sweeps: snap.meas,
            snapshot_stride: snap.stride,
            z2_bound: record.z2_bound,
            seed: seed + 100,
            stream: stream_base + 500,
            ..SamplerConfig::new(target_energy)
        };
        let res = run_chain(&spec, gamma, snap_cfg, &green)?;
        if res.log.snapshots.len() < 2 {
            return Err(Failure::Other(format!(
                "beta target {beta_target}: {} snapshot(s); raise measurement sweeps or lower the stride",
                res.log.snapshots.len()
            )));
        }
        let sols = solutions_from_snapshots(&res.log.snapshots, gamma, &spec, &green)?;
        let sf = structure_function(&sols, &spec)?;
        csv.push_str(&structure_rows(&sf, &format!("{beta_target},")));
        curves += 1;
        println!(
            "beta target {beta_target}: homed {} +- {} at delta_z2 {:.4}; plateau {:.6e} over {} snapshot(s)",
            record.beta.unwrap_or(f64::NAN),
            record.beta_stderr.unwrap_or(f64::NAN),
            record.delta_z2,
            sf.plateau_raw,
            sf.n_samples
        );
        metas.push(TargetMeta {
            beta_target,
            homed_beta: record.beta,
            homed_beta_stderr: record.beta_stderr,
            delta_z2: Some(record.delta_z2),
            z2_bound: Some(record.z2_bound),
            n_samples: sf.n_samples,
            plateau_raw: Some(sf.plateau_raw),
            c_empirical: sf.c_empirical,
            c_alternative: sf.c_alternative,
            mean_speed_squared: Some(sf.mean_speed_squared),
            warning: record.warning.clone(),
        });
        records.push(record);
    }

    if curves == 0 {
        return Err(Failure::Infeasible(format!(
            "no beta target out of {:?} produced a structure function",
            targets
        )));
    }
    write_bytes(&out, "fig4.csv", csv.as_bytes())?;
    write_json(&out, "fig4_targeting.json", &records)?;
    let meta = Fig4Meta {
        n,
        target_energy,
        gamma: gamma.value(),
        seed,
        preset: args.preset.name().to_string(),
        tolerance,
        targets: metas,
    };
    write_json(&out, "fig4_meta.json", &meta)?;
    write_manifest(&out, "complete", None, vec![ChainSeed { chain: 0, seed, stream: 0 }], started)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct MomentsMeta {
    n: usize,
    target_energy: f64,
    gamma: f64,
    seed: u64,
    preset: String,
    n_samples: usize,
    flatness: Vec<Option<f64>>,
    mean_speed_squared: f64,
    isotropy_max_sigma: f64,
    beta: Option<BetaEstimates>,
}

fn moments(args: &FigureArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let out = default_out_dir(args.out.clone(), "moments");
    prepare_out_dir(&out)?;
    let n = args.n.unwrap_or(16);
    let target_energy = args.target_energy.unwrap_or(100.0);
    // Stronger loops concentrate the vorticity, which is what the moment
    // table is meant to exhibit; the single-component averages themselves
    // are fixed by the energy.
    let gamma = Circulation::new(args.gamma.unwrap_or(3.0))?;
    let seed = base_seed(args);
    let max_p = args.max_p.unwrap_or(6);
    let b = snapshot_budget(args.preset).override_with(args);
    if b.stride == 0 {
        return Err(Failure::Config("snapshot_stride must be > 0 for moments".into()));
    }

    let spec = LatticeSpec::new(n)?;
    let green = GreenTable::build(&spec)?;
    let cfg = SamplerConfig {
        equilibration_sweeps: b.equil,
        measurement_sweeps: b.meas,
        snapshot_stride: b.stride,
        seed,
        ..SamplerConfig::new(target_energy)
    };
    let res = run_chain(&spec, gamma, cfg, &green)?;
    if res.log.snapshots.len() < 2 {
        return Err(Failure::Other(format!(
            "{} snapshot(s); raise measurement sweeps or lower the stride",
            res.log.snapshots.len()
        )));
    }
    let sols = solutions_from_snapshots(&res.log.snapshots, gamma, &spec, &green)?;
    let table = velocity_moments(&sols, &spec, max_p)?;

    write_bytes(&out, "moments.csv", moments_csv(&table).as_bytes())?;
    let meta = MomentsMeta {
        n,
        target_energy,
        gamma: gamma.value(),
        seed,
        preset: args.preset.name().to_string(),
        n_samples: table.n_samples(),
        flatness: (0..3).map(|c| table.flatness(c)).collect(),
        mean_speed_squared: table.mean_speed_squared(),
        isotropy_max_sigma: table.isotropy_max_sigma(),
        beta: res.beta,
    };
    write_json(&out, "moments_meta.json", &meta)?;
    println!(
        "<u1^2> = {:.4} +- {:.4} over {} snapshot(s); flatness {}; <|u|^2> = {:.4}",
        table.moment(0, 2),
        table.stderr(0, 2),
        table.n_samples(),
        table.flatness(0).map_or("n/a".to_string(), |f| format!("{f:.3}")),
        table.mean_speed_squared()
    );
    write_manifest(&out, "complete", None, vec![ChainSeed { chain: 0, seed, stream: 0 }], started)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_tabulate(args: &TabulateArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let out = default_out_dir(args.out.clone(), "tabulation");
    prepare_out_dir(&out)?;
    let n = args.n.ok_or_else(|| Failure::Config("--n is required".into()))?;
    let target_energy =
        args.target_energy.ok_or_else(|| Failure::Config("--target-energy is required".into()))?;
    let gamma = Circulation::new(args.gamma.unwrap_or(1.0))?;
    let seed = args.seed.unwrap_or(11);
    let stream = args.stream.unwrap_or(0);

    let spec = LatticeSpec::new(n)?;
    let green = GreenTable::build(&spec)?;
    let base = SamplerConfig {
        demon_cap: args.demon_cap.unwrap_or(target_energy / 10.0),
        equilibration_sweeps: args.equilibration_sweeps.unwrap_or(60),
        measurement_sweeps: args.measurement_sweeps.unwrap_or(120),
        seed,
        stream,
        ..SamplerConfig::new(target_energy)
    };
    let baseline = BaselineOut::from(&baseline_z2(
        &spec,
        gamma,
        &SamplerConfig { stream: stream + BASELINE_STREAM_OFFSET, ..base.clone() },
        &green,
    )?);
    write_json(&out, "baseline.json", &baseline)?;
    println!("baseline z2 {:.4} +- {:.4}", baseline.z2_mean, baseline.z2_stderr);

    let deltas: Vec<f64> = match (&args.deltas, &args.delta_fracs) {
        (Some(d), None) => d.clone(),
        (None, Some(f)) => f.iter().map(|f| f * baseline.z2_mean).collect(),
        (None, None) => {
            return Err(Failure::Config("provide --deltas or --delta-fracs".into()));
        }
        (Some(_), Some(_)) => {
            return Err(Failure::Config("--deltas and --delta-fracs are mutually exclusive".into()));
        }
    };
    if deltas.is_empty() {
        return Err(Failure::Config("the delta grid is empty".into()));
    }

    let records = tabulate(&spec, gamma, &base, baseline.z2_mean, &deltas, &green)?;
    print_tabulation(&records);
    let feasible = records.iter().filter(|r| r.feasible).count();
    println!("{feasible} of {} bounds feasible", records.len());

    write_bytes(&out, "tabulation.csv", tabulation_csv(&records).as_bytes())?;
    write_json(&out, "tabulation.json", &records)?;
    write_manifest(&out, "complete", None, vec![ChainSeed { chain: 0, seed, stream }], started)?;
    println!("wrote {}", out.display());
    Ok(())
}
