//! Run configuration: the JSON schema, its validation, and the translation
//! into per-chain sampler configurations.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vortexmc::SamplerConfig;

use crate::Failure;

/// How the enstrophy ceiling is chosen for a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Z2Policy {
    /// No ceiling; the equipartition regime.
    #[default]
    Unbounded,
    /// Explicit ceiling on Z2.
    Bound { z2_bound: f64 },
    /// Ceiling set to (unconstrained mean - delta_z2), with the mean measured
    /// by a baseline run at the same budgets.
    DeltaFromBaseline { delta_z2: f64 },
    /// Ceiling found by bisection so the measured inverse temperature lands
    /// on `beta` within `tolerance` (relative). The search brackets are
    /// fractions of the baseline mean.
    TargetBeta {
        beta: f64,
        #[serde(default = "default_beta_tolerance")]
        tolerance: f64,
        #[serde(default)]
        delta_lo_frac: f64,
        #[serde(default = "default_delta_hi_frac")]
        delta_hi_frac: f64,
    },
}

pub fn default_beta_tolerance() -> f64 {
    0.1
}

pub fn default_delta_hi_frac() -> f64 {
    0.5
}

fn default_gamma() -> f64 {
    1.0
}

fn default_equilibration() -> u32 {
    1_000
}

fn default_measurement() -> u32 {
    10_000
}

fn default_refresh() -> u32 {
    8
}

fn default_checkpoint() -> u32 {
    64
}

fn default_hist_bins() -> usize {
    160
}

fn default_jackknife_blocks() -> usize {
    20
}

fn default_chains() -> u32 {
    1
}

fn default_seed() -> u64 {
    1
}

/// Complete description of a run. Serialized verbatim into the output
/// directory; a persisted config re-runs to byte-identical data files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub n: usize,
    pub target_energy: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub z2: Z2Policy,
    /// None means target_energy / 10; persisted configs carry the resolved value.
    #[serde(default)]
    pub demon_cap: Option<f64>,
    #[serde(default = "default_equilibration")]
    pub equilibration_sweeps: u32,
    #[serde(default = "default_measurement")]
    pub measurement_sweeps: u32,
    /// Sweeps between state snapshots during measurement; 0 disables them.
    #[serde(default)]
    pub snapshot_stride: u32,
    #[serde(default = "default_refresh")]
    pub refresh_sweeps: u32,
    /// Sweeps between checkpoint writes; 0 keeps only the final checkpoint.
    /// Must be a multiple of refresh_sweeps: checkpoints are only valid in a
    /// freshly re-solved pose, which is what makes resumption bit-exact.
    #[serde(default = "default_checkpoint")]
    pub checkpoint_sweeps: u32,
    #[serde(default = "default_hist_bins")]
    pub hist_bins: usize,
    #[serde(default = "default_jackknife_blocks")]
    pub jackknife_blocks: usize,
    #[serde(default = "default_chains")]
    pub chains: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Base RNG stream; chain i runs on stream + i.
    #[serde(default)]
    pub stream: u64,
    /// Output directory. --out beats this, $VORTEXMC_OUT fills in below it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Fresh config with production-sized budgets; flags dial it in.
    pub fn template(n: usize, target_energy: f64) -> RunConfig {
        RunConfig {
            n,
            target_energy,
            gamma: default_gamma(),
            z2: Z2Policy::default(),
            demon_cap: None,
            equilibration_sweeps: default_equilibration(),
            measurement_sweeps: default_measurement(),
            snapshot_stride: 0,
            refresh_sweeps: default_refresh(),
            checkpoint_sweeps: default_checkpoint(),
            hist_bins: default_hist_bins(),
            jackknife_blocks: default_jackknife_blocks(),
            chains: default_chains(),
            seed: default_seed(),
            stream: 0,
            out: None,
        }
    }

    pub fn demon_cap_effective(&self) -> f64 {
        self.demon_cap.unwrap_or(self.target_energy / 10.0)
    }

    /// Copy with every optional field made explicit, for persisting. The
    /// output directory is dropped: the persisted file sits inside it, and
    /// keeping the path would make otherwise-identical runs hash apart.
    pub fn resolved(&self) -> RunConfig {
        RunConfig { demon_cap: Some(self.demon_cap_effective()), out: None, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let bad = |m: String| Err(Failure::Config(m));
        if self.n < 2 {
            return bad(format!("n must be >= 2, got {}", self.n));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return bad(format!("gamma must be finite and > 0, got {}", self.gamma));
        }
        if self.chains == 0 {
            return bad("chains must be >= 1".into());
        }
        if self.checkpoint_sweeps > 0 && !self.checkpoint_sweeps.is_multiple_of(self.refresh_sweeps.max(1)) {
            return bad(format!(
                "checkpoint_sweeps ({}) must be a multiple of refresh_sweeps ({})",
                self.checkpoint_sweeps, self.refresh_sweeps
            ));
        }
        match &self.z2 {
            Z2Policy::Unbounded => {}
            Z2Policy::Bound { z2_bound } => {
                if !(z2_bound.is_finite() && *z2_bound > 0.0) {
                    return bad(format!("z2_bound must be finite and > 0, got {z2_bound}"));
                }
            }
            Z2Policy::DeltaFromBaseline { delta_z2 } => {
                if !(delta_z2.is_finite() && *delta_z2 >= 0.0) {
                    return bad(format!("delta_z2 must be finite and >= 0, got {delta_z2}"));
                }
            }
            Z2Policy::TargetBeta { beta, tolerance, delta_lo_frac, delta_hi_frac } => {
                if !beta.is_finite() {
                    return bad(format!("target beta must be finite, got {beta}"));
                }
                if !(tolerance.is_finite() && *tolerance > 0.0) {
                    return bad(format!("beta tolerance must be > 0, got {tolerance}"));
                }
                if !(0.0..1.0).contains(delta_lo_frac) || !(*delta_hi_frac > *delta_lo_frac && *delta_hi_frac <= 1.0) {
                    return bad(format!(
                        "delta fractions must satisfy 0 <= lo < hi <= 1, got lo {delta_lo_frac} hi {delta_hi_frac}"
                    ));
                }
            }
        }
        // Numeric sampler fields share the sampler's own validation.
        self.to_sampler_config(0).validate().map_err(Failure::from)?;
        Ok(())
    }

    /// Sampler view for one chain. The enstrophy bound is a placeholder;
    /// callers substitute the policy resolution.
    pub fn to_sampler_config(&self, chain: u32) -> SamplerConfig {
        SamplerConfig {
            target_energy: self.target_energy,
            z2_bound: f64::INFINITY,
            demon_cap: self.demon_cap_effective(),
            equilibration_sweeps: self.equilibration_sweeps,
            measurement_sweeps: self.measurement_sweeps,
            snapshot_stride: self.snapshot_stride,
            refresh_sweeps: self.refresh_sweeps,
            hist_bins: self.hist_bins,
            jackknife_blocks: self.jackknife_blocks,
            seed: self.seed,
            stream: self.stream + chain as u64,
        }
    }

    pub fn to_sampler_config_with_bound(&self, chain: u32, z2_bound: f64) -> SamplerConfig {
        SamplerConfig { z2_bound, ..self.to_sampler_config(chain) }
    }

    pub fn total_sweeps(&self) -> u32 {
        self.equilibration_sweeps + self.measurement_sweeps
    }
}

pub fn load_config_file(path: &Path) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("bad config {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in_and_unknown_fields_are_rejected() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"n": 8, "target_energy": 100.0}"#).unwrap();
        assert_eq!(cfg.z2, Z2Policy::Unbounded);
        assert_eq!(cfg.demon_cap_effective(), 10.0);
        assert_eq!(cfg.refresh_sweeps, 8);
        assert_eq!(cfg.chains, 1);
        cfg.validate().unwrap();

        let err = serde_json::from_str::<RunConfig>(r#"{"n": 8, "target_energy": 100.0, "sweeps": 3}"#);
        assert!(err.is_err());
    }

    #[test]
    fn policy_serialization_round_trips() {
        let policies = [
            Z2Policy::Unbounded,
            Z2Policy::Bound { z2_bound: 5000.0 },
            Z2Policy::DeltaFromBaseline { delta_z2: 120.5 },
            Z2Policy::TargetBeta { beta: 3.0, tolerance: 0.05, delta_lo_frac: 0.1, delta_hi_frac: 0.4 },
        ];
        for p in policies {
            let json = serde_json::to_string(&p).unwrap();
            let back: Z2Policy = serde_json::from_str(&json).unwrap();
            assert_eq!(back, p);
        }
        // Optional targeting knobs default in.
        let p: Z2Policy = serde_json::from_str(r#"{"mode": "target_beta", "beta": 3.0}"#).unwrap();
        assert_eq!(
            p,
            Z2Policy::TargetBeta { beta: 3.0, tolerance: 0.1, delta_lo_frac: 0.0, delta_hi_frac: 0.5 }
        );
    }

    #[test]
    fn validation_catches_misaligned_checkpoints() {
        let mut cfg = RunConfig::template(4, 30.0);
        cfg.checkpoint_sweeps = 12;
        cfg.refresh_sweeps = 8;
        assert!(matches!(cfg.validate(), Err(Failure::Config(_))));
        cfg.checkpoint_sweeps = 16;
        cfg.validate().unwrap();
    }

    #[test]
    fn resolving_pins_the_cap_and_drops_the_directory() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"n": 4, "target_energy": 30.0, "out": "somewhere/else"}"#,
        )
        .unwrap();
        assert_eq!(cfg.out.as_deref(), Some(Path::new("somewhere/else")));
        let resolved = cfg.resolved();
        assert_eq!(resolved.demon_cap, Some(3.0));
        assert_eq!(resolved.out, None);
        assert!(!serde_json::to_string(&resolved).unwrap().contains("\"out\""));
    }

    #[test]
    fn chain_streams_are_consecutive() {
        let mut cfg = RunConfig::template(4, 30.0);
        cfg.stream = 7;
        assert_eq!(cfg.to_sampler_config(0).stream, 7);
        assert_eq!(cfg.to_sampler_config(3).stream, 10);
        assert_eq!(cfg.to_sampler_config_with_bound(1, 99.0).z2_bound, 99.0);
    }
}
