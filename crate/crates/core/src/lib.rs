//! Numerical laboratory for posterior collapse in Gaussian VAEs.
//!
//! The crate provides a small reverse-mode differentiator ([`diff`]), the
//! network building blocks ([`nets`]), the VAE energy ([`objective`]), the
//! closed-form affine optimum ([`linear_oracle`]), executable checks of the
//! collapse results ([`propositions`]), a training harness ([`trainer`]) and
//! collapse diagnostics ([`diagnostics`]).

pub mod datasets;
pub mod diagnostics;
pub mod diff;
pub mod error;
pub mod linalg;
pub mod linear_oracle;
pub mod nets;
pub mod objective;
pub mod propositions;
pub mod rng;
pub mod trainer;

pub use datasets::DataBatch;
pub use diagnostics::{CollapseLabel, CollapseReport};
pub use diff::{Tape, Tensor, Var};
pub use error::{Error, Result};
pub use nets::{LatentGaussian, ModelSpec, VaeModel};
pub use objective::{GammaMode, LossBreakdown};
pub use propositions::PropositionReport;
pub use trainer::{RunLog, TrainConfig, TrainMode};
