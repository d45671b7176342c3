//! File formats, run pipelines and the `lsta` command line around
//! `lsta-core`.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod report;
pub mod run;

pub use error::{CliError, Result};

/// Raises glibc's heap trim threshold. Training builds and drops one tape
/// per clip; with the default threshold every drop returns pages to the
/// kernel and the next clip faults them back in.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_TRIM_THRESHOLD, 256 << 20);
        libc::mallopt(libc::M_MMAP_THRESHOLD, 64 << 20);
    }
}
