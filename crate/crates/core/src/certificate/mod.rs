//! Violation terms, the training loss, and split-conformal certification.

mod beta;
mod conformal;
mod violation;

pub use beta::{
    alpha_for_epsilon, conformal_index, epsilon_for, epsilon_for_index, ln_beta, ln_gamma,
    regularized_incomplete_beta,
};
pub use conformal::{
    conformal_quantile, conformal_scores, quantify_safety, quantify_safety_with_scores,
    write_scores_csv, ConformalReport, ScoreSummary,
};
pub use violation::{
    batch_loss_gradient, controls_at, total_loss, violation_terms, violation_terms_with_law,
    CbfBatchLoss, Controls, LossBreakdown, LossWeights, ViolationTerms,
};
