//! Split-conformal quantification of a certificate over uniform samples from X.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use super::beta::{conformal_index, epsilon_for_index};
use super::violation::{violation_terms_with_law, LossWeights};
use crate::controller::ControlLaw;
use crate::error::{Error, Result};
use crate::mlp::MlpCertificate;
use crate::sampling::sample_uniform;

/// The `k`-th smallest score, `k = N + 1 − ⌊(N+1)α⌋ = ⌈(N+1)(1−α)⌉`.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    let n = scores.len();
    let l = conformal_index(n, alpha)?;
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite { quantity: "conformal score", index: i });
    }
    let k = n + 1 - l;
    let mut sorted = scores.to_vec();
    let (_, kth, _) = sorted.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Number of scores strictly above zero.
    pub n_positive: usize,
}

impl ScoreSummary {
    pub fn of(scores: &[f64]) -> Self {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for &s in scores {
            min = min.min(s);
            max = max.max(s);
            sum += s;
        }
        Self {
            min,
            max,
            mean: if scores.is_empty() { f64::NAN } else { sum / scores.len() as f64 },
            n_positive: scores.iter().filter(|&&s| s > 0.0).count(),
        }
    }
}

/// Result of one conformal quantification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConformalReport {
    pub n_samples: usize,
    pub alpha: f64,
    /// `l = ⌊(N+1)α⌋`.
    pub index_l: usize,
    /// `k = N + 1 − l`, the 1-based rank of the quantile.
    pub rank_k: usize,
    pub quantile: f64,
    pub epsilon: f64,
    pub beta: f64,
    pub seed: u64,
    pub score_summary: ScoreSummary,
}

impl ConformalReport {
    /// Builds the report for precomputed scores.
    pub fn from_scores(scores: &[f64], alpha: f64, beta: f64, seed: u64) -> Result<Self> {
        let n = scores.len();
        let l = conformal_index(n, alpha)?;
        Ok(Self {
            n_samples: n,
            alpha,
            index_l: l,
            rank_k: n + 1 - l,
            quantile: conformal_quantile(scores, alpha)?,
            epsilon: epsilon_for_index(n, l, beta)?,
            beta,
            seed,
            score_summary: ScoreSummary::of(scores),
        })
    }

    /// Whether the quantile certifies the conditions (`q̂ ≤ 0`).
    pub fn certified(&self) -> bool {
        self.quantile <= 0.0
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Scores `max` of the active violation terms at each state.
pub fn conformal_scores(
    cert: &MlpCertificate,
    law: &dyn ControlLaw,
    states: &[Vec<f64>],
    weights: &LossWeights,
) -> Result<Vec<f64>> {
    states
        .par_iter()
        .map(|x| violation_terms_with_law(cert, law, x, weights).map(|t| t.score))
        .collect()
}

/// Samples `n_samples` states uniformly from X, scores them with `u = law(x)` and returns
/// the conformal report together with the scores in sample order.
pub fn quantify_safety_with_scores(
    cert: &MlpCertificate,
    law: &dyn ControlLaw,
    weights: &LossWeights,
    n_samples: usize,
    alpha: f64,
    beta: f64,
    seed: u64,
) -> Result<(ConformalReport, Vec<f64>)> {
    // Validate (N, α, β) before sampling.
    let l = conformal_index(n_samples, alpha)?;
    epsilon_for_index(n_samples, l, beta)?;
    let states = sample_uniform(law.system().state_bounds(), n_samples, seed)?;
    let scores = conformal_scores(cert, law, &states, weights)?;
    let report = ConformalReport::from_scores(&scores, alpha, beta, seed)?;
    Ok((report, scores))
}

/// Split-conformal safety quantification of `cert` under `law`.
pub fn quantify_safety(
    cert: &MlpCertificate,
    law: &dyn ControlLaw,
    weights: &LossWeights,
    n_samples: usize,
    alpha: f64,
    beta: f64,
    seed: u64,
) -> Result<ConformalReport> {
    quantify_safety_with_scores(cert, law, weights, n_samples, alpha, beta, seed).map(|(r, _)| r)
}

/// Writes scores as a single-column CSV.
pub fn write_scores_csv(scores: &[f64], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["score"])?;
    for s in scores {
        w.write_record([format!("{s:e}")])?;
    }
    w.flush()?;
    Ok(())
}
