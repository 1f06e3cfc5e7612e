//! Phase training on the hinge loss and the iterative conformal refinement loop.
//!
//! Phase 0 trains with margin `ψ = 0`. After each phase the certificate is quantified on
//! fresh uniform samples; a non-positive conformal quantile `q̂` certifies it, otherwise
//! `ψ` is tightened by `q̂` and training resumes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::certificate::{
    alpha_for_epsilon, batch_loss_gradient, conformal_index, epsilon_for, epsilon_for_index,
    quantify_safety, total_loss, ConformalReport, Controls, LossBreakdown, LossWeights,
};
use crate::controller::{CbfQp, ReferencePolicy};
use crate::dynamics::{ControlAffineSystem, SystemParams, SystemRegistry};
use crate::error::{Error, Result};
use crate::mlp::{AdamConfig, MlpCertificate, OptimizerState};
use crate::sampling::{build_datasets, TrainingDatasets};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub hidden_layers: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { hidden_layers: vec![64] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_safe: usize,
    pub n_unsafe: usize,
    pub n_domain: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_safe: 5_000, n_unsafe: 5_000, n_domain: 10_000 }
    }
}

/// How ψ moves after a failed quantification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiUpdate {
    /// `ψ ← ψ − max(q̂, 0)`.
    Cumulative,
    /// `ψ ← −q̂`.
    Reset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs_phase0: usize,
    pub epochs_refine: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss_tolerance: f64,
    pub max_refinements: usize,
    pub psi_update: PsiUpdate,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs_phase0: 300,
            epochs_refine: 100,
            batch_size: 256,
            learning_rate: 1e-3,
            loss_tolerance: 1e-6,
            max_refinements: 3,
            psi_update: PsiUpdate::Cumulative,
        }
    }
}

/// Loss weights without the margin ψ, which the refinement loop owns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub delta: f64,
    pub kappa_gain: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self { lambda1: w.lambda1, lambda2: w.lambda2, delta: w.delta, kappa_gain: w.kappa_gain }
    }
}

impl LossConfig {
    pub fn weights(&self, psi: f64) -> LossWeights {
        LossWeights { lambda1: self.lambda1, lambda2: self.lambda2, delta: self.delta, psi, kappa_gain: self.kappa_gain }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConformalConfig {
    pub n_samples: usize,
    /// Conformal level α. Mutually exclusive with `target_epsilon`.
    pub alpha: Option<f64>,
    /// Desired violation bound ε; α is then the largest `l/(N+1)` achieving it.
    pub target_epsilon: Option<f64>,
    pub beta: f64,
}

pub const DEFAULT_ALPHA: f64 = 0.005;

impl Default for ConformalConfig {
    fn default() -> Self {
        Self { n_samples: 20_000, alpha: None, target_epsilon: None, beta: 1e-3 }
    }
}

impl ConformalConfig {
    pub fn resolved_alpha(&self) -> Result<f64> {
        match (self.alpha, self.target_epsilon) {
            (Some(_), Some(_)) => Err(Error::config("conformal", "set either alpha or target_epsilon, not both")),
            (Some(a), None) => Ok(a),
            (None, Some(eps)) => alpha_for_epsilon(self.n_samples, eps, self.beta).map_err(|e| match e {
                Error::InsufficientSamples { .. } => Error::config(
                    "conformal.target_epsilon",
                    format!("N = {} samples cannot reach epsilon {eps} at beta {}", self.n_samples, self.beta),
                ),
                other => other,
            }),
            (None, None) => Ok(DEFAULT_ALPHA),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    /// Constant reference input; the system default when absent.
    pub reference: Option<Vec<f64>>,
    pub train_with_input_bounds: bool,
    pub verify_with_input_bounds: bool,
}

/// Everything needed for a reproducible training and refinement run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub system: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub system_params: SystemParams,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub conformal: ConformalConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
}

impl TrainConfig {
    pub fn new(system: impl Into<String>) -> Self {
        Self {
            system: system.into(),
            seed: 0,
            system_params: SystemParams::default(),
            network: NetworkConfig::default(),
            data: DataConfig::default(),
            training: TrainingConfig::default(),
            loss: LossConfig::default(),
            conformal: ConformalConfig::default(),
            controller: ControllerConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// All validation problems as `(field path, message)` pairs, given the system's
    /// state and input dimensions.
    pub fn issues(&self, sys: Option<&ControlAffineSystem>) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |p: &str, m: String| out.push((p.to_string(), m));
        if self.network.hidden_layers.contains(&0) {
            push("network.hidden_layers", "widths must be positive".into());
        }
        for (p, v) in [("data.n_safe", self.data.n_safe), ("data.n_unsafe", self.data.n_unsafe), ("data.n_domain", self.data.n_domain)] {
            if v == 0 {
                push(p, "must be positive".into());
            }
        }
        let t = &self.training;
        for (p, v) in [
            ("training.epochs_phase0", t.epochs_phase0),
            ("training.epochs_refine", t.epochs_refine),
            ("training.batch_size", t.batch_size),
            ("training.max_refinements", t.max_refinements),
        ] {
            if v == 0 {
                push(p, "must be at least 1".into());
            }
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            push("training.learning_rate", format!("must be positive, got {}", t.learning_rate));
        }
        if !(t.loss_tolerance >= 0.0) {
            push("training.loss_tolerance", format!("must be non-negative, got {}", t.loss_tolerance));
        }
        if let Err(Error::Config { path, message }) = self.loss.weights(0.0).validate() {
            push(&path, message);
        }
        let c = &self.conformal;
        if c.n_samples == 0 {
            push("conformal.n_samples", "must be positive".into());
        }
        if !(c.beta > 0.0 && c.beta < 1.0) {
            push("conformal.beta", format!("must lie in (0, 1), got {}", c.beta));
        } else if c.n_samples > 0 {
            match c.resolved_alpha() {
                Ok(alpha) => {
                    if let Err(e) = conformal_index(c.n_samples, alpha) {
                        push("conformal.alpha", e.to_string());
                    }
                }
                Err(Error::Config { path, message }) => push(&path, message),
                Err(e) => push("conformal", e.to_string()),
            }
        }
        if let Some(sys) = sys {
            if let Some(r) = &self.controller.reference {
                if r.len() != sys.input_dim() || !crate::linalg::all_finite(r) {
                    push("controller.reference", format!("expected {} finite values, got {:?}", sys.input_dim(), r));
                }
            }
        }
        out
    }

    /// Validates every field, reporting all problems at once.
    pub fn validate(&self, registry: &SystemRegistry) -> Result<ControlAffineSystem> {
        let sys = registry.build(&self.system, &self.system_params);
        let mut issues = self.issues(sys.as_ref().ok());
        if let Err(e) = &sys {
            issues.insert(0, ("system".into(), e.to_string()));
        }
        if issues.is_empty() {
            return sys;
        }
        Err(join_issues(issues))
    }

    pub fn layer_sizes(&self, state_dim: usize) -> Vec<usize> {
        let mut sizes = vec![state_dim];
        sizes.extend(&self.network.hidden_layers);
        sizes.push(1);
        sizes
    }

    fn reference(&self, sys: &ControlAffineSystem) -> ReferencePolicy {
        ReferencePolicy::Constant(self.controller.reference.clone().unwrap_or_else(|| sys.default_reference().to_vec()))
    }

    /// The QP used inside the training loss.
    pub fn training_law(&self, sys: &ControlAffineSystem) -> Result<CbfQp> {
        Ok(CbfQp::new(sys.clone(), self.loss.kappa_gain, self.reference(sys))?
            .with_input_bounds(self.controller.train_with_input_bounds)
            .with_degenerate_fallback(true))
    }

    /// The QP used when scoring verification samples.
    pub fn verification_law(&self, sys: &ControlAffineSystem) -> Result<CbfQp> {
        Ok(CbfQp::new(sys.clone(), self.loss.kappa_gain, self.reference(sys))?
            .with_input_bounds(self.controller.verify_with_input_bounds)
            .with_degenerate_fallback(true))
    }

    /// The deployment filter: input bounds enforced, no fallback.
    pub fn deployment_law(&self, sys: &ControlAffineSystem) -> Result<CbfQp> {
        Ok(CbfQp::new(sys.clone(), self.loss.kappa_gain, self.reference(sys))?.with_input_bounds(sys.input_bounds().is_some()))
    }
}

pub(crate) fn join_issues(issues: Vec<(String, String)>) -> Error {
    let path = issues.iter().map(|(p, _)| p.as_str()).collect::<Vec<_>>().join(", ");
    let message = issues.iter().map(|(p, m)| format!("{p}: {m}")).collect::<Vec<_>>().join("; ");
    Error::Config { path, message }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: usize,
    /// 0 is the evaluation before the first update.
    pub epoch: usize,
    pub psi: f64,
    pub loss: LossBreakdown,
    pub best_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementRecord {
    pub phase: usize,
    pub psi: f64,
    pub quantile: f64,
    pub epsilon: f64,
    pub beta: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Certified,
    BudgetExhausted,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub refinements: Vec<RefinementRecord>,
    pub phase_seconds: Vec<f64>,
    pub status: Option<RunStatus>,
}

/// Wall-clock timings are ignored.
impl PartialEq for TrainingHistory {
    fn eq(&self, other: &Self) -> bool {
        self.epochs == other.epochs
            && self.refinements == other.refinements
            && self.phase_seconds.len() == other.phase_seconds.len()
            && self.status == other.status
    }
}

impl TrainingHistory {
    pub fn psi_sequence(&self) -> Vec<f64> {
        self.refinements.iter().map(|r| r.psi).collect()
    }

    /// Columns `phase, epoch, psi, l1, l2, l3, total, best`.
    pub fn write_loss_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["phase", "epoch", "psi", "l1", "l2", "l3", "total", "best"])?;
        for e in &self.epochs {
            w.write_record([
                e.phase.to_string(),
                e.epoch.to_string(),
                format!("{:e}", e.psi),
                format!("{:e}", e.loss.l1),
                format!("{:e}", e.loss.l2),
                format!("{:e}", e.loss.l3),
                format!("{:e}", e.loss.total),
                format!("{:e}", e.best_loss),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Optimiser settings of one training phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss_tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct PhaseResult {
    /// The lowest-loss parameters seen during the phase.
    pub certificate: MlpCertificate,
    pub epochs: Vec<EpochRecord>,
}

fn diverged(e: Error, phase: usize, epoch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { phase, epoch },
        other => other,
    }
}

/// Mini-batch Adam on the hinge loss until the full-data loss drops to
/// `loss_tolerance` or the epoch budget runs out.
///
/// Each epoch shuffles every bucket and deals it proportionally over
/// `⌈(|S|+|U|+|D|)/batch_size⌉` batches. The control input inside `q₃` is recomputed from
/// the current certificate for every batch.
pub fn train_phase(
    cert: &MlpCertificate,
    data: &TrainingDatasets,
    law: &CbfQp,
    weights: &LossWeights,
    settings: &PhaseSettings,
    phase: usize,
    seed: u64,
) -> Result<PhaseResult> {
    weights.validate()?;
    if settings.batch_size == 0 || settings.epochs == 0 {
        return Err(Error::config("training", "epochs and batch size must be positive"));
    }
    let sys = &law.system;
    let record = |epoch: usize, loss: LossBreakdown, best: f64| EpochRecord {
        phase,
        epoch,
        psi: weights.psi,
        loss,
        best_loss: best,
    };

    let initial = total_loss(cert, data, law, weights).map_err(|e| diverged(e, phase, 0))?;
    if !initial.total.is_finite() {
        return Err(Error::Diverged { phase, epoch: 0 });
    }
    let mut epochs = vec![record(0, initial, initial.total)];
    let mut best = (initial.total, cert.clone());
    if initial.total <= settings.loss_tolerance {
        return Ok(PhaseResult { certificate: best.1, epochs });
    }

    let mut current = cert.clone();
    let mut opt = OptimizerState::new(
        &current,
        AdamConfig { learning_rate: settings.learning_rate, ..AdamConfig::default() },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seeds::derive(seed, seeds::SHUFFLE), phase as u64));
    let mut order = [
        (0..data.safe.len()).collect::<Vec<_>>(),
        (0..data.unsafe_.len()).collect::<Vec<_>>(),
        (0..data.domain.len()).collect::<Vec<_>>(),
    ];
    let n_batches = data.len().div_ceil(settings.batch_size);

    for epoch in 1..=settings.epochs {
        for o in order.iter_mut() {
            o.shuffle(&mut rng);
        }
        for b in 0..n_batches {
            let s = batch_slice(&order[0], &data.safe, b, n_batches);
            let u = batch_slice(&order[1], &data.unsafe_, b, n_batches);
            let d = batch_slice(&order[2], &data.domain, b, n_batches);
            if s.is_empty() && u.is_empty() && d.is_empty() {
                continue;
            }
            let (_, grad) = batch_loss_gradient(&current, sys, &s, &u, &d, Controls::Law(law), weights)
                .map_err(|e| diverged(e, phase, epoch))?;
            opt.step(&mut current, &grad)?;
        }
        if !crate::linalg::all_finite(&current.params_flat()) {
            return Err(Error::Diverged { phase, epoch });
        }
        let loss = total_loss(&current, data, law, weights).map_err(|e| diverged(e, phase, epoch))?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged { phase, epoch });
        }
        if loss.total < best.0 {
            best = (loss.total, current.clone());
        }
        epochs.push(record(epoch, loss, best.0));
        if loss.total <= settings.loss_tolerance {
            break;
        }
    }
    Ok(PhaseResult { certificate: best.1, epochs })
}

/// The `b`-th of `n` near-equal consecutive chunks of `order`, resolved to points.
fn batch_slice<'a>(order: &[usize], pts: &'a [Vec<f64>], b: usize, n: usize) -> Vec<&'a [f64]> {
    let len = order.len();
    order[b * len / n..(b + 1) * len / n].iter().map(|&i| pts[i].as_slice()).collect()
}

/// Progress notifications from [`refine_system`].
#[derive(Debug)]
pub enum RefineEvent<'a> {
    PhaseTrained { phase: usize, psi: f64, certificate: &'a MlpCertificate },
    Quantified { phase: usize, certificate: &'a MlpCertificate, report: &'a ConformalReport },
}

#[derive(Debug, Clone)]
pub struct RefineOutput {
    pub certificate: MlpCertificate,
    pub history: TrainingHistory,
    pub report: ConformalReport,
    pub status: RunStatus,
    pub datasets: TrainingDatasets,
}

/// Trains, quantifies and retrains with a tightened margin until `q̂ ≤ 0` or the
/// refinement budget is spent. On budget exhaustion the certificate with the lowest
/// `q̂` is returned.
pub fn refine_system(
    config: &TrainConfig,
    sys: &ControlAffineSystem,
    observer: &mut dyn FnMut(RefineEvent<'_>),
) -> Result<RefineOutput> {
    let issues = config.issues(Some(sys));
    if !issues.is_empty() {
        return Err(join_issues(issues));
    }
    let alpha = config.conformal.resolved_alpha()?;
    let c = &config.conformal;
    epsilon_for(c.n_samples, alpha, c.beta)?;

    let seed = config.seed;
    let data = build_datasets(sys, config.data.n_safe, config.data.n_unsafe, config.data.n_domain, seed)?;
    let mut cert = MlpCertificate::init_glorot(&config.layer_sizes(sys.state_dim()), seeds::derive(seed, seeds::INIT))?;
    let train_law = config.training_law(sys)?;
    let verify_law = config.verification_law(sys)?;
    let t = &config.training;

    let mut history = TrainingHistory::default();
    let mut psi = 0.0;
    let mut best: Option<(ConformalReport, MlpCertificate)> = None;
    for phase in 0..=t.max_refinements {
        let settings = PhaseSettings {
            epochs: if phase == 0 { t.epochs_phase0 } else { t.epochs_refine },
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            loss_tolerance: t.loss_tolerance,
        };
        let started = Instant::now();
        let weights = config.loss.weights(psi);
        let result = train_phase(&cert, &data, &train_law, &weights, &settings, phase, seed)?;
        history.phase_seconds.push(started.elapsed().as_secs_f64());
        history.epochs.extend(result.epochs);
        cert = result.certificate;
        observer(RefineEvent::PhaseTrained { phase, psi, certificate: &cert });

        let verify_seed = seeds::derive(seed, seeds::VERIFY_BASE + phase as u64);
        let report = quantify_safety(&cert, &verify_law, &weights, c.n_samples, alpha, c.beta, verify_seed)?;
        history.refinements.push(RefinementRecord {
            phase,
            psi,
            quantile: report.quantile,
            epsilon: report.epsilon,
            beta: report.beta,
            alpha: report.alpha,
        });
        observer(RefineEvent::Quantified { phase, certificate: &cert, report: &report });

        if best.as_ref().is_none_or(|(r, _)| report.quantile < r.quantile) {
            best = Some((report.clone(), cert.clone()));
        }
        if report.certified() {
            history.status = Some(RunStatus::Certified);
            return Ok(RefineOutput { certificate: cert, history, report, status: RunStatus::Certified, datasets: data });
        }
        psi = match t.psi_update {
            PsiUpdate::Cumulative => psi - report.quantile.max(0.0),
            PsiUpdate::Reset => -report.quantile,
        };
    }
    let (report, certificate) = best.expect("at least one phase ran");
    history.status = Some(RunStatus::BudgetExhausted);
    Ok(RefineOutput { certificate, history, report, status: RunStatus::BudgetExhausted, datasets: data })
}

/// [`refine_system`] on a system resolved through the built-in registry.
pub fn refine(config: &TrainConfig) -> Result<RefineOutput> {
    let sys = config.validate(&SystemRegistry::with_builtins())?;
    refine_system(config, &sys, &mut |_| {})
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n_samples: usize,
    pub beta: f64,
    pub alpha: f64,
    pub epsilon: Option<f64>,
    pub error: Option<String>,
}

/// `ε(N, α, β)` at each α; invalid points carry their error instead of aborting.
pub fn alpha_epsilon_curve(n_samples: usize, beta: f64, alphas: &[f64]) -> Vec<CurvePoint> {
    alphas
        .iter()
        .map(|&alpha| {
            let eps = conformal_index(n_samples, alpha).and_then(|l| epsilon_for_index(n_samples, l, beta));
            CurvePoint {
                n_samples,
                beta,
                alpha,
                epsilon: eps.as_ref().ok().copied(),
                error: eps.err().map(|e| e.to_string()),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::integrator_1d_system;

    fn toy_config() -> TrainConfig {
        let mut c = TrainConfig::new("integrator_1d");
        c.network.hidden_layers = vec![16];
        c.data = DataConfig { n_safe: 100, n_unsafe: 100, n_domain: 200 };
        c.training.epochs_phase0 = 300;
        c.training.epochs_refine = 50;
        c.training.batch_size = 64;
        c.training.learning_rate = 1e-2;
        c.training.max_refinements = 2;
        c.conformal = ConformalConfig { n_samples: 2000, alpha: Some(0.01), target_epsilon: None, beta: 1e-3 };
        c.seed = 5;
        c
    }

    #[test]
    fn toy_phase_fits_labels() {
        let c = toy_config();
        let sys = integrator_1d_system();
        let data = build_datasets(&sys, 100, 100, 200, 1).unwrap();
        let cert = MlpCertificate::init_glorot(&c.layer_sizes(1), 3).unwrap();
        let law = c.training_law(&sys).unwrap();
        let settings = PhaseSettings { epochs: 300, batch_size: 64, learning_rate: 1e-2, loss_tolerance: 1e-9 };
        let out = train_phase(&cert, &data, &law, &c.loss.weights(0.0), &settings, 0, 1).unwrap();
        let final_loss = total_loss(&out.certificate, &data, &law, &c.loss.weights(0.0)).unwrap();
        assert_eq!((final_loss.l1, final_loss.l2), (0.0, 0.0), "{final_loss:?}");
        for x in &data.safe {
            assert!(out.certificate.forward(x).unwrap() >= 0.0);
        }
        for x in &data.unsafe_ {
            assert!(out.certificate.forward(x).unwrap() <= -c.loss.delta);
        }
        let best: Vec<f64> = out.epochs.iter().map(|e| e.best_loss).collect();
        assert!(best.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(best.last().copied(), Some(final_loss.total));
    }

    #[test]
    fn zero_loss_returns_unchanged() {
        let sys = integrator_1d_system();
        let data = build_datasets(&sys, 10, 10, 10, 1).unwrap();
        let cert = MlpCertificate::zeros(&[1, 1]).unwrap();
        let law = TrainConfig::new("integrator_1d").training_law(&sys).unwrap();
        // h ≡ 0 leaves q₁ = q₃ = 0 and q₂ = δ, all below ψ = δ.
        let w = LossWeights::default().with_psi(0.01);
        let settings = PhaseSettings { epochs: 10, batch_size: 8, learning_rate: 1e-3, loss_tolerance: 0.0 };
        let out = train_phase(&cert, &data, &law, &w, &settings, 0, 0).unwrap();
        assert_eq!(out.certificate, cert);
        assert_eq!(out.epochs.len(), 1);
    }

    #[test]
    fn refine_is_reproducible_and_monotone() {
        let c = toy_config();
        let a = refine(&c).unwrap();
        let b = refine(&c).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.certificate, b.certificate);
        let psi = a.history.psi_sequence();
        assert_eq!(psi[0], 0.0);
        assert!(psi.windows(2).all(|w| w[1] <= w[0]));
        match a.status {
            RunStatus::Certified => assert!(a.report.quantile <= 0.0),
            RunStatus::BudgetExhausted => assert_eq!(a.history.refinements.len(), c.training.max_refinements + 1),
        }
        assert_eq!(a.history.phase_seconds.len(), a.history.refinements.len());
    }

    #[test]
    fn validation_reports_every_field() {
        let mut c = TrainConfig::new("integrator_1d");
        c.data.n_safe = 0;
        c.training.learning_rate = -1.0;
        c.conformal.n_samples = 100;
        c.conformal.alpha = Some(0.001);
        let err = c.validate(&SystemRegistry::with_builtins()).unwrap_err().to_string();
        for needle in ["data.n_safe", "training.learning_rate", "conformal.alpha", "N = 100"] {
            assert!(err.contains(needle), "{needle} missing in {err}");
        }
        let mut c = TrainConfig::new("nope");
        c.controller.reference = Some(vec![1.0, 2.0]);
        assert!(c.validate(&SystemRegistry::with_builtins()).unwrap_err().to_string().contains("unknown system"));
        let mut c = TrainConfig::new("integrator_1d");
        c.conformal.alpha = Some(0.01);
        c.conformal.target_epsilon = Some(0.02);
        assert!(c.validate(&SystemRegistry::with_builtins()).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
            system = "dubins"
            seed = 7
            [network]
            hidden_layers = [32]
            [conformal]
            n_samples = 1000
            target_epsilon = 0.05
        "#;
        let c = TrainConfig::from_toml(text).unwrap();
        assert_eq!(c.network.hidden_layers, vec![32]);
        assert_eq!(c.training.batch_size, 256);
        let alpha = c.conformal.resolved_alpha().unwrap();
        assert!(epsilon_for(1000, alpha, 1e-3).unwrap() <= 0.05);
        assert_eq!(TrainConfig::from_toml(&toml::to_string(&c).unwrap()).unwrap(), c);
        assert!(TrainConfig::from_toml("system = \"dubins\"\nbogus = 1").is_err());
    }

    #[test]
    fn curve_points() {
        assert!(alpha_epsilon_curve(100, 1e-3, &[]).is_empty());
        let pts = alpha_epsilon_curve(100_000, 1e-3, &[0.05, 1e-7]);
        assert!(pts[0].epsilon.unwrap() - 0.05 < 0.005);
        assert!(pts[1].epsilon.is_none() && pts[1].error.is_some());
        let small = alpha_epsilon_curve(500, 1e-3, &[0.05])[0].epsilon.unwrap();
        let large = alpha_epsilon_curve(5000, 1e-3, &[0.05])[0].epsilon.unwrap();
        assert!(small >= large);
    }
}
