//! File formats, configuration, the scorer client and the command-line
//! pipeline around `reasonedit-core`.

pub use reasonedit_core as core;

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod report;
pub mod scorer;
pub mod verify;

use std::path::{Path, PathBuf};

use reasonedit_core::Executor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] reasonedit_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("{0}")]
    Failed(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn json(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Runs jobs on up to `threads` scoped workers, each taking a contiguous
/// block of indices. Output order matches [`reasonedit_core::Sequential`].
#[derive(Debug, Clone, Copy)]
pub struct Threaded {
    pub threads: usize,
}

impl Threaded {
    /// `0` means the available parallelism.
    pub fn new(threads: usize) -> Self {
        let threads = if threads == 0 {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        } else {
            threads
        };
        Self { threads }
    }
}

impl Executor for Threaded {
    fn map<T: Send>(&self, n: usize, f: &(dyn Fn(usize) -> T + Sync)) -> Vec<T> {
        if self.threads <= 1 || n <= 1 {
            return (0..n).map(f).collect();
        }
        let chunk = n.div_ceil(self.threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..n)
                .step_by(chunk)
                .map(|start| s.spawn(move || (start..(start + chunk).min(n)).map(f).collect::<Vec<T>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use reasonedit_core::Sequential;

    #[test]
    fn threaded_matches_sequential_order() {
        let f = |i: usize| i * i + 1;
        for threads in [1, 2, 3, 8] {
            for n in [0, 1, 5, 17] {
                assert_eq!(Threaded::new(threads).map(n, &f), Sequential.map(n, &f));
            }
        }
    }
}
