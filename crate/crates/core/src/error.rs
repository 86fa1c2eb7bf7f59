//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VortexError {
    #[error("invalid lattice size {n}: need n >= 2")]
    InvalidLattice { n: usize },

    #[error("invalid circulation {value}: must be finite and > 0")]
    InvalidCirculation { value: f64 },

    #[error("invalid configuration: {what}")]
    InvalidConfig { what: String },

    #[error(
        "infeasible constraints: reached energy {reached:.6} of target {target:.6} \
         under enstrophy bound {z2_bound:.6} with demon cap {cap:.6}"
    )]
    Infeasible {
        target: f64,
        reached: f64,
        z2_bound: f64,
        cap: f64,
    },

    #[error("vorticity is not representable by closed loops: component {component} has net flux {net_flux}")]
    IncompatibleState { component: usize, net_flux: i64 },

    #[error("vorticity is not divergence free at node {node}: residual {residual}")]
    NotDivergenceFree { node: usize, residual: i64 },

    #[error("Green table failed its Poisson residual check: max residual {residual:.3e} (tolerance {tolerance:.1e})")]
    GreenResidual { residual: f64, tolerance: f64 },

    #[error("demon histogram is degenerate: {nonempty} nonempty bins (need >= {needed})")]
    DegenerateHistogram { nonempty: usize, needed: usize },

    #[error("not enough samples: got {got}, need >= {needed}")]
    InsufficientSamples { got: usize, needed: usize },

    #[error("empty measurement log")]
    EmptyLog,

    #[error(
        "bracket does not straddle target beta {target:.4}: endpoints give {lo_beta:.4} and {hi_beta:.4}"
    )]
    BracketFailure {
        target: f64,
        lo_beta: f64,
        hi_beta: f64,
    },

    #[error("checkpoint is malformed: {what}")]
    CheckpointFormat { what: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VortexError>;
