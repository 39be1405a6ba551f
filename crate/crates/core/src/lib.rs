//! Multi-accent acoustic model adaptation toolkit.
//!
//! BLSTM acoustic models over synthetic accented speech features, with the
//! adaptation methods compared in the experiments: selective fine-tuning,
//! linear adapters, accent-specific top layers, gate units fed by hard accent
//! labels (AST-G) or by a jointly trained accent classifier (MTL-G).

pub mod adapt;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod gates;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod mtl;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "AMAG_THREADS";

/// Sizes the global worker pool from `AMAG_THREADS` when it is set.
/// Has no effect once the pool exists.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
