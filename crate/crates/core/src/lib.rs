pub mod dataset;
pub mod error;
pub mod experiments;
pub mod harmonics;
pub mod kernels;
pub mod network;
pub mod operators;
pub mod rotations;
pub mod volume;

pub use error::{Error, Result};

/// Caps rayon's global pool at `LRI3D_THREADS` when set. Call once, before
/// any parallel work; later calls are no-ops.
pub fn configure_threads() {
    if let Some(n) = std::env::var("LRI3D_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}
