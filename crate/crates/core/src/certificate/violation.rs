//! Violation terms `q₁, q₂, q₃`, the conformal score and the hinge training loss.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{constraint_coefficients, ControlLaw};
use crate::dynamics::{ControlAffineSystem, Label};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::mlp::{loss_param_gradient, BatchLoss, MlpCertificate, ParamGradient, PointCotangent, PointEval};
use crate::sampling::TrainingDatasets;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Strictness offset in `q₂ = h + δ`.
    pub delta: f64,
    /// Robustness margin subtracted inside every hinge.
    pub psi: f64,
    /// Gain γ of the class-K function `κ(h) = γh`.
    pub kappa_gain: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 0.1, delta: 0.01, psi: 0.0, kappa_gain: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("loss.lambda1", self.lambda1),
            ("loss.lambda2", self.lambda2),
            ("loss.delta", self.delta),
            ("loss.kappa_gain", self.kappa_gain),
        ];
        for (path, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(path, format!("must be positive and finite, got {v}")));
            }
        }
        if !self.psi.is_finite() {
            return Err(Error::config("loss.psi", "must be finite"));
        }
        Ok(())
    }

    pub fn with_psi(mut self, psi: f64) -> Self {
        self.psi = psi;
        self
    }
}

/// The three CBF violation terms at one state. Inactive terms are `None` and do not
/// take part in the score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViolationTerms {
    pub q1: Option<f64>,
    pub q2: Option<f64>,
    pub q3: f64,
    pub score: f64,
}

impl ViolationTerms {
    /// Terms from `h(x)`, the constraint `a·u ≥ b` and the applied input `u`.
    pub fn from_parts(label: Label, h: f64, a: &[f64], b: f64, u: &[f64], delta: f64) -> Self {
        let q1 = (label == Label::Safe).then_some(-h);
        let q2 = (label == Label::Unsafe).then_some(h + delta);
        // −∇h·(f + g u) − γh = b − a·u.
        let q3 = b - dot(a, u);
        let score = q1.into_iter().chain(q2).fold(q3, f64::max);
        Self { q1, q2, q3, score }
    }
}

/// Violation terms at `x` for a given input `u`.
pub fn violation_terms(
    cert: &MlpCertificate,
    sys: &ControlAffineSystem,
    u: &[f64],
    x: &[f64],
    weights: &LossWeights,
) -> Result<ViolationTerms> {
    if u.len() != sys.input_dim() {
        return Err(Error::Shape { context: "input", expected: sys.input_dim(), got: u.len() });
    }
    let (h, grad) = cert.value_and_gradient(x)?;
    if !h.is_finite() || !crate::linalg::all_finite(&grad) {
        return Err(Error::NonFinite { quantity: "certificate value", index: 0 });
    }
    let (a, b) = constraint_coefficients(sys, x, h, &grad, weights.kappa_gain)?;
    Ok(ViolationTerms::from_parts(sys.label(x), h, &a, b, u, weights.delta))
}

/// Violation terms at `x` with `u` chosen by `law` from the current certificate.
pub fn violation_terms_with_law(
    cert: &MlpCertificate,
    law: &dyn ControlLaw,
    x: &[f64],
    weights: &LossWeights,
) -> Result<ViolationTerms> {
    let sys = law.system();
    let (h, grad) = cert.value_and_gradient(x)?;
    if !h.is_finite() || !crate::linalg::all_finite(&grad) {
        return Err(Error::NonFinite { quantity: "certificate value", index: 0 });
    }
    let u = law.control(x, h, &grad)?;
    let (a, b) = constraint_coefficients(sys, x, h, &grad, weights.kappa_gain)?;
    Ok(ViolationTerms::from_parts(sys.label(x), h, &a, b, &u, weights.delta))
}

/// `L = L₁ + λ₁L₂ + λ₂L₃` and its components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn combine(l1: f64, l2: f64, l3: f64, w: &LossWeights) -> Self {
        Self { l1, l2, l3, total: l1 + w.lambda1 * l2 + w.lambda2 * l3 }
    }
}

fn hinge(q: f64, psi: f64) -> f64 {
    (q - psi).max(0.0)
}

fn ordered_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Full-dataset training loss with `u` at each domain point chosen by `law`.
pub fn total_loss(
    cert: &MlpCertificate,
    data: &TrainingDatasets,
    law: &dyn ControlLaw,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    for (path, bucket) in [("data.n_safe", &data.safe), ("data.n_unsafe", &data.unsafe_), ("data.n_domain", &data.domain)] {
        if bucket.is_empty() {
            return Err(Error::config(path, "dataset bucket is empty"));
        }
    }
    let psi = weights.psi;
    let value_hinge = |pts: &[Vec<f64>], f: &(dyn Fn(f64) -> f64 + Sync)| -> Result<Vec<f64>> {
        pts.par_iter()
            .enumerate()
            .map(|(i, x)| {
                let h = cert.forward(x)?;
                if !h.is_finite() {
                    return Err(Error::NonFinite { quantity: "certificate value", index: i });
                }
                Ok(hinge(f(h), psi))
            })
            .collect()
    };
    let l1 = ordered_mean(&value_hinge(&data.safe, &|h| -h)?);
    let l2 = ordered_mean(&value_hinge(&data.unsafe_, &|h| h + weights.delta)?);
    let q3: Vec<f64> = data
        .domain
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let (h, grad) = cert.value_and_gradient(x)?;
            if !h.is_finite() || !crate::linalg::all_finite(&grad) {
                return Err(Error::NonFinite { quantity: "certificate value", index: i });
            }
            let u = law.control(x, h, &grad)?;
            let (a, b) = constraint_coefficients(law.system(), x, h, &grad, weights.kappa_gain)?;
            Ok(hinge(b - dot(&a, &u), psi))
        })
        .collect::<Result<_>>()?;
    Ok(LossBreakdown::combine(l1, l2, ordered_mean(&q3), weights))
}

/// Source of the input `u` at each domain point of a batch.
#[derive(Clone, Copy)]
pub enum Controls<'a> {
    /// Recompute `u` from the current certificate with a control law.
    Law(&'a dyn ControlLaw),
    /// Fixed inputs, one per domain point.
    Frozen(&'a [Vec<f64>]),
}

/// The hinge loss over one mini-batch, as a [`BatchLoss`].
///
/// Points are laid out as `safe ++ unsafe ++ domain`. Each bucket contributes its batch
/// mean (zero when the batch holds none of it). The input `u` enters `q₃` as a
/// constant, so only `h` and `∇ₓh` carry θ-dependence.
pub struct CbfBatchLoss<'a> {
    pub system: &'a ControlAffineSystem,
    pub weights: LossWeights,
    pub n_safe: usize,
    pub n_unsafe: usize,
    pub domain: &'a [&'a [f64]],
    pub controls: Controls<'a>,
}

impl CbfBatchLoss<'_> {
    fn domain_offset(&self) -> usize {
        self.n_safe + self.n_unsafe
    }
}

impl BatchLoss for CbfBatchLoss<'_> {
    fn needs_input_gradient(&self, index: usize) -> bool {
        index >= self.domain_offset()
    }

    fn evaluate(&self, evals: &[PointEval]) -> Result<(f64, Vec<PointCotangent>)> {
        let w = &self.weights;
        let off = self.domain_offset();
        if evals.len() != off + self.domain.len() {
            return Err(Error::Shape { context: "batch layout", expected: off + self.domain.len(), got: evals.len() });
        }
        if let Controls::Frozen(u) = self.controls {
            if u.len() != self.domain.len() {
                return Err(Error::Shape { context: "frozen controls", expected: self.domain.len(), got: u.len() });
            }
        }
        let mut cot = vec![PointCotangent::default(); evals.len()];

        let s_scale = if self.n_safe > 0 { 1.0 / self.n_safe as f64 } else { 0.0 };
        let mut l1 = 0.0;
        for i in 0..self.n_safe {
            let r = -evals[i].value - w.psi;
            if r > 0.0 {
                l1 += r;
                cot[i].value = -s_scale;
            }
        }
        let u_scale = if self.n_unsafe > 0 { w.lambda1 / self.n_unsafe as f64 } else { 0.0 };
        let mut l2 = 0.0;
        for i in self.n_safe..off {
            let r = evals[i].value + w.delta - w.psi;
            if r > 0.0 {
                l2 += r;
                cot[i].value = u_scale;
            }
        }

        let d_scale = if self.domain.is_empty() { 0.0 } else { w.lambda2 / self.domain.len() as f64 };
        let domain: Vec<(f64, Option<(f64, Vec<f64>)>)> = self
            .domain
            .par_iter()
            .enumerate()
            .map(|(j, x)| {
                let e = &evals[off + j];
                let grad = e
                    .input_gradient
                    .as_deref()
                    .ok_or(Error::NonFinite { quantity: "missing input gradient", index: off + j })?;
                let u = match self.controls {
                    Controls::Law(law) => law.control(x, e.value, grad)?,
                    Controls::Frozen(us) => us[j].clone(),
                };
                let (a, b) = constraint_coefficients(self.system, x, e.value, grad, w.kappa_gain)?;
                let r = b - dot(&a, &u) - w.psi;
                if r <= 0.0 {
                    return Ok((0.0, None));
                }
                // ∂q₃/∂h = −γ and ∂q₃/∂(∇h) = −(f + g u).
                let v = self.system.closed_loop_field(x, &u)?;
                let gcot = v.iter().map(|vi| -d_scale * vi).collect();
                Ok((r, Some((-d_scale * w.kappa_gain, gcot))))
            })
            .collect::<Result<_>>()?;
        let mut l3 = 0.0;
        for (j, (r, c)) in domain.into_iter().enumerate() {
            l3 += r;
            if let Some((cv, cg)) = c {
                cot[off + j] = PointCotangent { value: cv, input_gradient: Some(cg) };
            }
        }

        let total = l1 * s_scale + l2 * u_scale + l3 * d_scale;
        Ok((total, cot))
    }
}

/// Mini-batch loss value and θ-gradient.
pub fn batch_loss_gradient(
    cert: &MlpCertificate,
    system: &ControlAffineSystem,
    safe: &[&[f64]],
    unsafe_: &[&[f64]],
    domain: &[&[f64]],
    controls: Controls<'_>,
    weights: &LossWeights,
) -> Result<(f64, ParamGradient)> {
    let points: Vec<&[f64]> = safe.iter().chain(unsafe_).chain(domain).copied().collect();
    let loss = CbfBatchLoss {
        system,
        weights: *weights,
        n_safe: safe.len(),
        n_unsafe: unsafe_.len(),
        domain,
        controls,
    };
    loss_param_gradient(cert, &points, &loss)
}

/// The inputs `law` applies at each point under the current certificate.
pub fn controls_at(cert: &MlpCertificate, law: &dyn ControlLaw, points: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    points
        .par_iter()
        .map(|x| {
            let (h, g) = cert.value_and_gradient(x)?;
            law.control(x, h, &g)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{CbfQp, ReferencePolicy};
    use crate::dynamics::{dubins_system, integrator_1d_system};
    use crate::mlp::DenseLayer;
    use proptest::prelude::*;

    fn constant_cert(n: usize, c: f64) -> MlpCertificate {
        let mut layer = DenseLayer::zeros(n, 1);
        layer.biases[0] = c;
        MlpCertificate::from_layers(vec![layer]).unwrap()
    }

    fn linear_cert(w: &[f64]) -> MlpCertificate {
        let mut layer = DenseLayer::zeros(w.len(), 1);
        layer.weights.copy_from_slice(w);
        MlpCertificate::from_layers(vec![layer]).unwrap()
    }

    #[test]
    fn constant_certificate_terms() {
        let sys = dubins_system();
        let w = LossWeights::default();
        let cert = constant_cert(3, 0.7);
        let t = violation_terms(&cert, &sys, &[1.0, 0.0], &[1.8, 0.0, 0.0], &w).unwrap();
        assert_eq!(t.q1, Some(-0.7));
        assert_eq!(t.q2, None);
        assert!((t.q3 + 0.7).abs() < 1e-15);
        assert_eq!(t.score, -0.7);
        let t = violation_terms(&cert, &sys, &[0.3, 0.2], &[0.0, 0.1, 2.0], &w).unwrap();
        assert_eq!(t.q1, None);
        assert!((t.q2.unwrap() - 0.71).abs() < 1e-15);
        assert!((t.score - 0.71).abs() < 1e-15);
        // Unlabeled: only q₃, even if it is negative.
        let t = violation_terms(&cert, &sys, &[0.3, 0.2], &[1.0, 0.0, 0.0], &w).unwrap();
        assert_eq!((t.q1, t.q2), (None, None));
        assert_eq!(t.score, t.q3);
    }

    #[test]
    fn linear_certificate_q3() {
        let sys = dubins_system();
        let wv = [0.5, -0.3, 0.9];
        let x = [1.0, 0.4, 0.0];
        let gamma = 2.0;
        let weights = LossWeights { kappa_gain: gamma, ..LossWeights::default() };
        let t = violation_terms(&linear_cert(&wv), &sys, &[1.0, 0.0], &x, &weights).unwrap();
        let want = -wv[0] - gamma * dot(&wv, &x);
        assert!((t.q3 - want).abs() < 1e-15);
    }

    #[test]
    fn loss_substitution_example() {
        // One point per bucket, 1-D integrator, h(x) = w x + c.
        let sys = integrator_1d_system();
        let weights = LossWeights::default();
        let psi = 0.0;
        // Safe point x = 0.5 with h = −0.5 → q₁ − ψ = 0.5.
        // Unsafe point x = 1.8 with h = w·1.8 + c must give q₂ − ψ = −1.
        // Pick w = −1, c = 0: h(0.5) = −0.5, h(1.8) = −1.8 → q₂ = −1.79 (hinge 0).
        // Domain point with frozen u: q₃ = −w u − γ h = u − γ(−x) = u + x; x = 1.2, u = 0.8 → 2.0.
        let cert = {
            let mut l = DenseLayer::zeros(1, 1);
            l.weights[0] = -1.0;
            MlpCertificate::from_layers(vec![l]).unwrap()
        };
        let safe = [0.5];
        let unsafe_ = [1.8];
        let dom = [1.2];
        let frozen = vec![vec![0.8]];
        let (v, _) = batch_loss_gradient(
            &cert,
            &sys,
            &[&safe[..]],
            &[&unsafe_[..]],
            &[&dom[..]],
            Controls::Frozen(&frozen),
            &weights.with_psi(psi),
        )
        .unwrap();
        assert!((v - 0.7).abs() < 1e-14, "{v}");
    }

    #[test]
    fn total_loss_zero_and_unbounded() {
        let sys = dubins_system();
        let data = crate::sampling::build_datasets(&sys, 20, 20, 20, 3).unwrap();
        let qp = CbfQp::new(sys.clone(), 1.0, ReferencePolicy::Constant(vec![1.0, 0.0]))
            .unwrap()
            .with_input_bounds(false)
            .with_degenerate_fallback(true);
        let cert = constant_cert(3, 0.0);
        let w = LossWeights::default();
        // h ≡ 0: q₁ = 0, q₂ = δ, q₃ = 0. With ψ = δ every hinge is inactive.
        let l = total_loss(&cert, &data, &qp, &w.with_psi(w.delta)).unwrap();
        assert_eq!(l.total, 0.0);
        let mut last = l.total;
        for psi in [-1.0, -10.0, -100.0] {
            let l = total_loss(&cert, &data, &qp, &w.with_psi(psi)).unwrap();
            assert!(l.total > last);
            last = l.total;
        }
        let mut empty = data.clone();
        empty.domain.clear();
        assert!(matches!(total_loss(&cert, &empty, &qp, &w), Err(Error::Config { .. })));
    }

    #[test]
    fn active_qp_drives_q3_to_nonpositive() {
        let sys = dubins_system();
        let qp = CbfQp::new(sys.clone(), 1.0, ReferencePolicy::Constant(vec![1.0, 0.0]))
            .unwrap()
            .with_input_bounds(false);
        let cert = MlpCertificate::init_glorot(&[3, 8, 1], 4).unwrap();
        let w = LossWeights::default();
        let pts = crate::sampling::sample_uniform(sys.state_bounds(), 500, 8).unwrap();
        for x in &pts {
            let t = violation_terms_with_law(&cert, &qp, x, &w).unwrap();
            assert!(t.q3 <= 0.0, "{x:?} {t:?}");
        }
    }

    proptest! {
        #[test]
        fn score_is_max_of_active_terms(h in -5.0f64..5.0, b in -5.0f64..5.0, a0 in -2.0f64..2.0, u0 in -2.0f64..2.0, which in 0usize..3) {
            let label = [Label::Safe, Label::Unsafe, Label::Unlabeled][which];
            let t = ViolationTerms::from_parts(label, h, &[a0], b, &[u0], 0.01);
            let mut active = vec![t.q3];
            active.extend(t.q1);
            active.extend(t.q2);
            prop_assert_eq!(t.score, active.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            prop_assert!(t.score.is_finite());
            prop_assert_eq!(t.q1.is_some(), label == Label::Safe);
            prop_assert_eq!(t.q2.is_some(), label == Label::Unsafe);
        }
    }
}
