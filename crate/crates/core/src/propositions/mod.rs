//! Executable checks of the collapse results.

pub mod lipschitz;
pub mod oracle;
pub mod prop1;
pub mod prop2;
pub mod report;
pub mod stationary;
pub mod sweep;

pub use lipschitz::estimate_lipschitz;
pub use prop1::{
    prop1_collapsed_point, prop1_family_energy, prop1_gradient_pullback, prop1_hessian_blocks, prop1_suite,
    HessianBlockReport, Prop1Config, Prop1Point,
};
pub use prop2::{happr_gamma_prime, happr_reduced, prop2_suite, ReducedSurrogate};
pub use report::{Check, PropositionReport};
pub use stationary::{stationary_point_check, stationary_suite, StationaryConfig, StationaryReport};
pub use sweep::{collapse_gamma_sweep, SweepEntry, SweepReport};
pub use oracle::linear_oracle_suite;
