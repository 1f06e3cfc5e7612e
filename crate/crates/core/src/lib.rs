//! Neural control barrier functions with split-conformal safety certification.
//!
//! The crate trains a softplus MLP `h_θ` as a control barrier function for a
//! control-affine system `ẋ = f(x) + g(x)u`, certifies it with split conformal
//! prediction over i.i.d. state samples, retrains with a robustness margin until the
//! conformal score is non-positive, and deploys the result as a CBF-QP safety filter.
//!
//! Module map:
//!
//! - [`mlp`]: the certificate network, its input gradient, nested parameter
//!   gradients of losses that contain `∇ₓh`, and Adam.
//! - [`dynamics`]: control-affine systems and the built-in benchmarks.
//! - [`sampling`]: uniform sampling, labelled datasets, collision-cone labelling.
//! - [`certificate`]: violation terms, training loss, conformal quantile, Beta tail
//!   machinery and the safety quantification routine.
//! - [`controller`]: the CBF-QP safety filter.
//! - [`trainer`]: phase training and the iterative conformal refinement loop.
//! - [`simulator`]: RK4 rollouts, empirical safety rates and level-set grids.
//! - [`config`]: the TOML run configuration shared by the CLI and Python bindings.
//! - [`artifacts`]: output directories written by each pipeline command.

pub mod artifacts;
pub mod certificate;
pub mod config;
pub mod controller;
pub mod dynamics;
pub mod error;
pub mod mlp;
pub mod sampling;
pub mod simulator;
pub mod trainer;

pub(crate) mod linalg;
pub(crate) mod seeds;

pub use certificate::{
    conformal_quantile, epsilon_for, quantify_safety, regularized_incomplete_beta,
    ConformalReport, LossWeights, ViolationTerms,
};
pub use controller::{CbfQp, ControlLaw, ReferencePolicy, SafetyFilter};
pub use dynamics::{BenchmarkId, ControlAffineSystem, Interval, Label, SystemParams};
pub use error::{Error, Result};
pub use mlp::{MlpCertificate, OptimizerState, ParamGradient};
pub use sampling::TrainingDatasets;
pub use simulator::{Rollout, RolloutStatus, SliceSpec};
pub use trainer::{refine, TrainConfig, TrainingHistory};
