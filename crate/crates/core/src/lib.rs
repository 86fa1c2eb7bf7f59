//! Discrete vortex-loop model on a periodic cubic lattice, sampled with a
//! microcanonical (demon) Monte Carlo scheme under an enstrophy budget.
//!
//! The crate is organized bottom-up: difference operators ([`lattice`]),
//! integer vortex states ([`state`]), the periodic Green function and field
//! solves ([`poisson`]), the demon sampler and temperature estimators
//! ([`sampler`]), velocity statistics ([`observables`]), and the search for
//! enstrophy bounds that realize a requested inverse temperature
//! ([`targeting`]). [`reference`] holds slow dense-matrix oracles used only
//! for validation.

pub mod error;
pub mod lattice;
pub mod observables;
pub mod poisson;
pub mod reference;
pub mod sampler;
pub mod state;
pub mod targeting;

pub use error::VortexError;
pub use lattice::{FieldRole, LatticeSpec, NodeField3, ScalarField};
pub use observables::{
    aggregate_moment_tables, aggregate_structure_functions, merge_estimates,
    solutions_from_snapshots, structure_function, velocity_moments, AggregateReport,
    MergedEstimate, MomentTable, StructureFunction,
};
pub use poisson::{FieldSolution, GreenTable, RunningSolution};
pub use sampler::{
    checkpoint_lattice_size, BetaEstimate, BetaEstimates, ChainResult, DemonChain, SampleLog,
    SamplerConfig,
};
pub use state::{Circulation, Plane, Plaquette, VortexState};
pub use targeting::{baseline_z2, home_in, home_in_with, tabulate, BaselineZ2, TabulationRecord};
