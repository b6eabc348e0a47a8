//! Data-parallel map over independent work items.
//!
//! With the `parallel` feature (default) work runs on a rayon pool; without it,
//! or with [`Parallelism::Sequential`], it runs in order on the calling thread.
//! Results always come back in input order, so reductions over them are
//! deterministic either way.

use std::env;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "PF_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    /// `None` lets the pool pick its default width.
    Threads(Option<usize>),
}

impl Parallelism {
    /// Reads `PF_THREADS`; `1` means sequential, unset means the pool default.
    pub fn from_env() -> Self {
        match env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
            Some(0) | None => Parallelism::Threads(None),
            Some(1) => Parallelism::Sequential,
            Some(n) => Parallelism::Threads(Some(n)),
        }
    }
}

impl Default for Parallelism {
    fn default() -> Self {
        Self::from_env()
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(items: &[T], parallelism: Parallelism, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match parallelism {
        Parallelism::Sequential => items.iter().map(f).collect(),
        Parallelism::Threads(width) => parallel_map(items, width, f),
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<T, R, F>(items: &[T], width: Option<usize>, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    match width {
        None => items.par_iter().map(f).collect(),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| items.par_iter().map(f).collect()),
            Err(_) => items.iter().map(f).collect(),
        },
    }
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T, R, F>(items: &[T], _width: Option<usize>, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}
