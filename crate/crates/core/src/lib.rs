//! Sampling diverse solutions of CNF formulas with categorical denoising
//! diffusion.
//!
//! The crate is organized bottom-up:
//!
//! * [`formula`]: CNF formulas, DIMACS and solution-file I/O, factor graphs.
//! * [`generate`]: random 3-SAT and triangle-finding instance families.
//! * [`oracle`]: exact solution enumeration and the Bayes-optimal denoiser.
//! * [`diffusion`]: noise schedule, forward noising, posterior, KL, and the
//!   reverse sampling loop.
//! * [`tensor`]: a small reverse-mode differentiation engine.
//! * [`gnn`]: the recurrent message-passing denoiser and its checkpoints.
//! * [`train`]: batching, the diffusion loss, AdaBelief, the training loop.
//! * [`eval`]: accuracy, uniqueness, agreement, and timing metrics.
//! * [`dataset`]: on-disk dataset layout.

pub mod dataset;
pub mod diffusion;
pub mod eval;
pub mod formula;
pub mod generate;
pub mod gnn;
pub mod oracle;
pub mod tensor;
pub mod train;

pub use diffusion::{CategoricalState, Denoiser, FnDenoiser, NoiseSchedule, SampleTrace};
pub use formula::{Assignment, CnfFormula, FactorGraph, Lit};
