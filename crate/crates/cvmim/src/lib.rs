//! CV-MIM workbench: contrastive cross-view mutual-information maximization
//! for view-disentangled 2D pose representations, with exact information
//! oracles, a synthetic multi-view pose generator, and single-shot cross-view
//! evaluation.

pub mod array;
pub mod checks;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod nets;
pub mod oracle;
pub mod rng;
pub mod tape;
pub mod trainer;

pub use array::Array2D;

/// CLI entry point; returns the process exit code.
pub fn run() -> i32 {
    cli::run()
}

pub use error::{CvmimError, Result};
pub use rng::Rng;
pub use tape::{BnState, NodeId, Tape};
