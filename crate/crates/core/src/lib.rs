//! Ground-truth simulation for a mid-resolution sensor from high-resolution
//! hyperspectral cubes, and a small patch-based CNN trained on the result.
//!
//! The pipeline runs in stages that each map to a module:
//!
//! * [`scenegen`] renders synthetic scenes from the linear mixture model.
//! * [`unmixing`] estimates fully constrained abundances per pixel by
//!   projected gradient descent on a spectral-angle objective.
//! * [`resolution`] aggregates cubes and fraction maps to the coarse grid,
//!   selects target bands, and labels each coarse pixel by its dominant
//!   endmember.
//! * [`dataset`] standardizes, cuts patches, augments and splits them.
//! * [`nn`] trains and applies the classifier.
//! * [`cube_io`] holds the containers and their on-disk formats.

pub mod cube_io;
pub mod dataset;
mod error;
pub mod nn;
pub mod pipeline;
pub mod resolution;
pub mod rng;
pub mod scenegen;
pub mod unmixing;

#[cfg(feature = "cli")]
pub mod cli;

pub use error::{Error, Result};

pub(crate) mod par {
    //! Order-preserving map that runs on the rayon pool when the `parallel`
    //! feature is enabled. Output order never depends on scheduling.

    #[cfg(feature = "parallel")]
    pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }

    #[cfg(not(feature = "parallel"))]
    pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
    where
        F: Fn(usize) -> T,
    {
        (0..n).map(f).collect()
    }
}
