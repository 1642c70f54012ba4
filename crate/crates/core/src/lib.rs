//! Hourglass diffusion transformer built on a small reverse-mode autodiff
//! tensor library.
//!
//! The crate is organized bottom-up: [`tensor`] and [`rng`] provide the
//! numerical substrate, [`nn`] the transformer building blocks, [`model`] the
//! hourglass network, [`diffusion`] and [`sampler`] the training objective and
//! the ODE sampler, [`cost`] the analytic FLOP/parameter model, and [`data`],
//! [`checkpoint`], [`config`] and [`train`] the operator-facing plumbing.

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod diffusion;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod train;
pub mod verify;

pub use tensor::{DType, Element, Tensor, TensorError};

/// Sizes the global kernel thread pool; returns `false` if it was already
/// initialized. Without the `parallel` feature kernels are single-threaded
/// and this is a no-op.
pub fn init_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        true
    }
}
