//! Conformal prediction under distribution shift, through the lens of
//! one-dimensional optimal transport.
//!
//! Split conformal prediction calibrates a score threshold on held-out data
//! and only guarantees coverage when calibration and test scores are
//! exchangeable. This crate quantifies what a distribution shift costs in
//! coverage and learns calibration weights that claw it back:
//!
//! - [`empirical`]: finite one-dimensional score distributions — CDFs,
//!   quantiles, exact 1-Wasserstein distances, stochastic dominance, and
//!   DKW confidence bands.
//! - [`density`]: weighted Gaussian KDE on `[0, 1]` with boundary
//!   reflection, supplying the density factors of the bounds.
//! - [`auxiliary`]: surrogate test-score distributions built from unlabeled
//!   score matrices that sandwich the unknown test distribution.
//! - [`bounds`]: upper bounds on the total coverage gap — labeled and
//!   unlabeled, weighted-CDF and Wasserstein flavors, with optional
//!   finite-sample DKW corrections.
//! - [`reweight`]: gradient descent (Adam) on simplex-constrained
//!   calibration weights minimizing the unlabeled bound.
//! - [`conformal`]: weighted split conformal prediction sets, coverage and
//!   set-size evaluation.
//! - [`baselines`]: uncorrected, oracle, true-likelihood-ratio and
//!   entropy-scaled comparison methods.
//! - [`experiments`]: a reproducible synthetic regression-as-classification
//!   harness with covariate and label shift.
//! - [`io`]: CSV score-matrix ingestion and JSON/CSV result emission.

pub mod auxiliary;
pub mod baselines;
pub mod bounds;
pub mod conformal;
pub mod density;
pub mod empirical;
pub mod error;
pub mod experiments;
pub mod io;
pub mod reweight;

pub use auxiliary::{AuxiliaryPair, PairKind, ScoreMatrix};
pub use bounds::{BoundFlavor, BoundReport, Estimator};
pub use conformal::{CoverageReport, PredictionSet};
pub use density::KdeDensity;
pub use empirical::{DkwBand, QuantileConvention, WeightedEmpirical};
pub use error::{Error, Result};
pub use reweight::{OptimizerConfig, SimplexWeights};
