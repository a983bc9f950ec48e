//! Ground-truth engines: closed-form Gaussian tilts, an exact soft dynamic
//! program on 1D grids, affine-chain analysis for single-Gaussian bases, and
//! a MALA sampler for tilted densities.

mod chain;
mod grid;
mod mala;
mod tilt;

pub use chain::AffineChain;
pub use grid::{grid_build, grid_soft_solve, verify_theorems, GridMDP, GridSpec, SoftSolution, TheoremReport};
pub use mala::{mala_sample, MalaConfig, MalaResult};
pub use tilt::{tilted_gaussian_target, TiltedGaussian};
