//! Anomaly detection by non-negative matrix factorization guided by a
//! minimum-spanning-tree similarity structure.
//!
//! The library factorizes a non-negative data matrix `A ≈ W·H` while pulling
//! the weight matrix `W` toward a sparse similarity matrix `S` built from the
//! MST over the observations; reconstruction error then scores each
//! observation. Both an offline block-SGD solver and an online buffered
//! solver are provided, together with plain NMF, graph-regularized NMF and
//! symmetric NMF baselines and a benchmark harness.

pub mod baselines;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod model;
pub mod offline;
pub mod online;
pub mod synthetic;

pub use error::{Error, Result};
pub use model::{AnomalyReport, DataMatrix, FactorPair, HyperParams};

use std::sync::OnceLock;

/// Shared worker pool. `NSNMF_THREADS` caps the worker count; the default is
/// the machine parallelism.
pub fn thread_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(threads) = std::env::var("NSNMF_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&t| t >= 1)
        {
            builder = builder.num_threads(threads);
        }
        builder.build().expect("worker pool construction")
    })
}
