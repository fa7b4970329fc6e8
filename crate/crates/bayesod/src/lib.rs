//! Bayesian inference chain for object detections.
//!
//! The crate turns raw per-anchor detector outputs (stochastic box
//! regressions, reported aleatoric covariances, category logits) into fused
//! detections with calibrated uncertainty:
//!
//! 1. [`mc`] collapses the stochastic runs into per-anchor Gaussian and
//!    categorical sufficient statistics;
//! 2. [`priors`] folds in conjugate Gaussian box priors and Dirichlet
//!    category priors;
//! 3. [`fusion`] replaces non-maximum suppression with greedy IoU clustering
//!    followed by closed-form Bayesian fusion of every cluster member;
//! 4. [`metrics`] scores the result (mAP, minimum uncertainty error, PDQ);
//! 5. [`loss`] provides the regression loss kernels a trainer would use to
//!    produce full-covariance aleatoric estimates;
//! 6. [`synth`] simulates a detector at desk scale so the full chain can be
//!    exercised end to end with a fixed seed;
//! 7. [`io`] and [`render`] define the JSON-Lines wire formats and the SVG
//!    overlay emitter used by the CLI.

pub mod detection;
pub mod error;
pub mod fusion;
pub mod io;
pub mod loss;
pub mod mc;
pub mod metrics;
pub mod priors;
pub mod render;
pub mod stream;
pub mod synth;

pub use detection::{
    categorical_entropy, gaussian_entropy, iou, BoundingBox, BoxGaussian, CategoricalDist,
    CategoryTable,
};
pub use error::{Error, Result};
pub use fusion::{FinalDetection, FusionConfig, InferenceOutput};
pub use mc::{AnchorBelief, AnchorPrediction};
pub use priors::{BoxPrior, CategoryCountConfig, CountMode, DirichletState};
