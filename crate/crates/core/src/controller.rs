//! The CBF-QP safety filter
//!
//! ```text
//! min_u ‖u − u_ref(x)‖²   s.t.   a·u ≥ b,   u ∈ U (optional box)
//! a = ∇ₓh·g(x),   b = −∇ₓh·f(x) − γ h(x)
//! ```
//!
//! With a single affine constraint the optimum is a Euclidean projection, solved in
//! closed form without bounds and by active-set enumeration inside a box.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlAffineSystem, Interval};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm_sq};
use crate::mlp::MlpCertificate;

/// Largest input dimension the box-constrained enumeration accepts (3^m patterns).
pub const MAX_BOXED_INPUTS: usize = 8;

/// `(a, b)` of the constraint `a·u ≥ b` at state `x`, given `h(x)` and `∇ₓh(x)`.
pub fn constraint_coefficients(
    sys: &ControlAffineSystem,
    x: &[f64],
    h: f64,
    grad_h: &[f64],
    kappa_gain: f64,
) -> Result<(Vec<f64>, f64)> {
    let n = sys.state_dim();
    let m = sys.input_dim();
    if grad_h.len() != n {
        return Err(Error::Shape { context: "certificate gradient", expected: n, got: grad_h.len() });
    }
    let f = sys.eval_f(x)?;
    let g = sys.eval_g(x)?;
    let mut a = vec![0.0; m];
    for (i, &gi) in grad_h.iter().enumerate() {
        if gi != 0.0 {
            for (j, aj) in a.iter_mut().enumerate() {
                *aj += gi * g[i * m + j];
            }
        }
    }
    let b = -dot(grad_h, &f) - kappa_gain * h;
    Ok((a, b))
}

/// Solution of the projection QP.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub input: Vec<f64>,
    /// Whether `u_ref` had to be modified.
    pub active: bool,
}

/// Nearest point to `u_ref` in `{u : a·u ≥ b}`, intersected with `bounds` when given.
pub fn project_onto_constraint(
    a: &[f64],
    b: f64,
    u_ref: &[f64],
    bounds: Option<&[Interval]>,
) -> Result<Projection> {
    let m = a.len();
    if u_ref.len() != m {
        return Err(Error::Shape { context: "reference input", expected: m, got: u_ref.len() });
    }
    if !(b.is_finite() && crate::linalg::all_finite(a) && crate::linalg::all_finite(u_ref)) {
        return Err(Error::Infeasible("non-finite constraint data".into()));
    }
    match bounds {
        None => project_halfspace(a, b, u_ref),
        Some(bounds) => {
            if bounds.len() != m {
                return Err(Error::Shape { context: "input bounds", expected: m, got: bounds.len() });
            }
            project_box(a, b, u_ref, bounds)
        }
    }
}

fn project_halfspace(a: &[f64], b: f64, u_ref: &[f64]) -> Result<Projection> {
    if dot(a, u_ref) >= b {
        return Ok(Projection { input: u_ref.to_vec(), active: false });
    }
    let aa = norm_sq(a);
    if aa == 0.0 {
        return Err(Error::Infeasible(format!(
            "L_g h = 0 while the constraint is violated by {}",
            b - dot(a, u_ref)
        )));
    }
    let t0 = (b - dot(a, u_ref)) / aa;
    let shift = |t: f64| -> Vec<f64> { u_ref.iter().zip(a).map(|(u, ai)| u + t * ai).collect() };
    // Rounding can leave a·u a few ulps short of b; grow t until the constraint holds.
    let mut t = t0;
    let mut step = t0.abs().max(f64::MIN_POSITIVE) * f64::EPSILON;
    for _ in 0..200 {
        let u = shift(t);
        if dot(a, &u) >= b {
            return Ok(Projection { input: u, active: true });
        }
        t += step;
        step *= 2.0;
    }
    Err(Error::Infeasible("projection failed to reach the half-space".into()))
}

#[derive(Clone, Copy)]
enum Pin {
    Free,
    Lo,
    Hi,
}

fn project_box(a: &[f64], b: f64, u_ref: &[f64], bounds: &[Interval]) -> Result<Projection> {
    let m = a.len();
    if m > MAX_BOXED_INPUTS {
        return Err(Error::Domain(format!(
            "box-constrained CBF-QP supports at most {MAX_BOXED_INPUTS} inputs, got {m}"
        )));
    }
    let clamp = |u: &mut [f64]| {
        for (v, bd) in u.iter_mut().zip(bounds) {
            *v = bd.clamp(*v);
        }
    };
    let mut u0 = u_ref.to_vec();
    clamp(&mut u0);
    if u0 == u_ref && dot(a, &u0) >= b {
        return Ok(Projection { input: u0, active: false });
    }

    let box_tol = 1e-12;
    let feas_tol = 1e-12 * (1.0 + b.abs());
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut pins = vec![Pin::Free; m];
    let mut u = vec![0.0; m];
    for code in 0..3usize.pow(m as u32) {
        let mut c = code;
        for p in pins.iter_mut() {
            *p = [Pin::Free, Pin::Lo, Pin::Hi][c % 3];
            c /= 3;
        }
        for hyperplane in [false, true] {
            for j in 0..m {
                u[j] = match pins[j] {
                    Pin::Free => u_ref[j],
                    Pin::Lo => bounds[j].lo,
                    Pin::Hi => bounds[j].hi,
                };
            }
            if hyperplane {
                let free_norm: f64 = (0..m).filter(|&j| matches!(pins[j], Pin::Free)).map(|j| a[j] * a[j]).sum();
                if free_norm == 0.0 {
                    continue;
                }
                let t = (b - dot(a, &u)) / free_norm;
                for j in 0..m {
                    if matches!(pins[j], Pin::Free) {
                        u[j] += t * a[j];
                    }
                }
            }
            let in_box = u.iter().zip(bounds).all(|(v, bd)| v >= &(bd.lo - box_tol) && v <= &(bd.hi + box_tol));
            if !in_box {
                continue;
            }
            let mut cand = u.clone();
            clamp(&mut cand);
            if dot(a, &cand) < b - feas_tol {
                continue;
            }
            let d: f64 = cand.iter().zip(u_ref).map(|(x, y)| (x - y) * (x - y)).sum();
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, cand));
            }
        }
    }
    match best {
        Some((_, input)) => {
            let active = input.as_slice() != u_ref;
            Ok(Projection { input, active })
        }
        None => Err(Error::Infeasible(format!(
            "no input in the box satisfies the CBF constraint (max a·u = {:.6e} < b = {b:.6e})",
            a.iter().zip(bounds).map(|(ai, bd)| (ai * bd.lo).max(ai * bd.hi)).sum::<f64>()
        ))),
    }
}

/// Nominal input `u_ref(x)` fed to the filter.
#[derive(Clone)]
pub enum ReferencePolicy {
    Constant(Vec<f64>),
    Custom(Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>),
}

impl fmt::Debug for ReferencePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReferencePolicy::Constant(u) => f.debug_tuple("Constant").field(u).finish(),
            ReferencePolicy::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl ReferencePolicy {
    pub fn evaluate(&self, x: &[f64]) -> Vec<f64> {
        match self {
            ReferencePolicy::Constant(u) => u.clone(),
            ReferencePolicy::Custom(p) => p(x),
        }
    }
}

/// One filter evaluation, as logged during simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub input: Vec<f64>,
    pub reference: Vec<f64>,
    /// Whether the constraint modified the reference input.
    pub active: bool,
    /// `a·u − b` at the returned input.
    pub slack: f64,
}

/// A state feedback law that may read the certificate value and gradient.
pub trait ControlLaw: Send + Sync {
    fn system(&self) -> &ControlAffineSystem;

    fn decide(&self, x: &[f64], h: f64, grad_h: &[f64]) -> Result<FilterDecision>;

    fn control(&self, x: &[f64], h: f64, grad_h: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decide(x, h, grad_h)?.input)
    }
}

/// CBF-QP filter around a reference policy.
#[derive(Debug, Clone)]
pub struct CbfQp {
    pub system: ControlAffineSystem,
    pub kappa_gain: f64,
    pub reference: ReferencePolicy,
    pub respect_input_bounds: bool,
    /// Return `u_ref` instead of an error when `L_g h = 0` makes the constraint
    /// unsatisfiable. The resulting `q₃` still scores the violation.
    pub degenerate_fallback: bool,
}

impl CbfQp {
    /// Deployment filter: input bounds enforced, infeasibility is an error.
    pub fn new(system: ControlAffineSystem, kappa_gain: f64, reference: ReferencePolicy) -> Result<Self> {
        if !(kappa_gain > 0.0 && kappa_gain.is_finite()) {
            return Err(Error::Domain(format!("kappa gain must be positive, got {kappa_gain}")));
        }
        if let ReferencePolicy::Constant(u) = &reference {
            if u.len() != system.input_dim() {
                return Err(Error::Shape { context: "reference input", expected: system.input_dim(), got: u.len() });
            }
        }
        Ok(Self {
            respect_input_bounds: system.input_bounds().is_some(),
            system,
            kappa_gain,
            reference,
            degenerate_fallback: false,
        })
    }

    pub fn with_input_bounds(mut self, on: bool) -> Self {
        self.respect_input_bounds = on;
        self
    }

    pub fn with_degenerate_fallback(mut self, on: bool) -> Self {
        self.degenerate_fallback = on;
        self
    }

    fn bounds(&self) -> Option<&[Interval]> {
        if self.respect_input_bounds {
            self.system.input_bounds()
        } else {
            None
        }
    }
}

impl ControlLaw for CbfQp {
    fn system(&self) -> &ControlAffineSystem {
        &self.system
    }

    fn decide(&self, x: &[f64], h: f64, grad_h: &[f64]) -> Result<FilterDecision> {
        let (a, b) = constraint_coefficients(&self.system, x, h, grad_h, self.kappa_gain)?;
        let reference = self.reference.evaluate(x);
        if reference.len() != self.system.input_dim() {
            return Err(Error::Shape {
                context: "reference input",
                expected: self.system.input_dim(),
                got: reference.len(),
            });
        }
        let projection = match project_onto_constraint(&a, b, &reference, self.bounds()) {
            Ok(p) => p,
            Err(Error::Infeasible(_)) if self.degenerate_fallback => {
                Projection { input: reference.clone(), active: false }
            }
            Err(e) => return Err(e),
        };
        Ok(FilterDecision {
            slack: dot(&a, &projection.input) - b,
            input: projection.input,
            reference,
            active: projection.active,
        })
    }
}

/// Unfiltered reference policy; reports the CBF slack for logging only.
#[derive(Debug, Clone)]
pub struct Passthrough {
    pub system: ControlAffineSystem,
    pub kappa_gain: f64,
    pub reference: ReferencePolicy,
}

impl ControlLaw for Passthrough {
    fn system(&self) -> &ControlAffineSystem {
        &self.system
    }

    fn decide(&self, x: &[f64], h: f64, grad_h: &[f64]) -> Result<FilterDecision> {
        let (a, b) = constraint_coefficients(&self.system, x, h, grad_h, self.kappa_gain)?;
        let reference = self.reference.evaluate(x);
        Ok(FilterDecision {
            slack: dot(&a, &reference) - b,
            input: reference.clone(),
            reference,
            active: false,
        })
    }
}

/// A certificate paired with a control law.
#[derive(Clone)]
pub struct SafetyFilter {
    certificate: MlpCertificate,
    law: Arc<dyn ControlLaw>,
}

impl fmt::Debug for SafetyFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SafetyFilter")
            .field("certificate", &self.certificate.layer_sizes())
            .field("system", &self.law.system().name())
            .finish_non_exhaustive()
    }
}

impl SafetyFilter {
    pub fn new(certificate: MlpCertificate, law: impl ControlLaw + 'static) -> Result<Self> {
        Self::from_arc(certificate, Arc::new(law))
    }

    pub fn from_arc(certificate: MlpCertificate, law: Arc<dyn ControlLaw>) -> Result<Self> {
        if certificate.input_dim() != law.system().state_dim() {
            return Err(Error::Shape {
                context: "certificate input vs state dimension",
                expected: law.system().state_dim(),
                got: certificate.input_dim(),
            });
        }
        Ok(Self { certificate, law })
    }

    pub fn certificate(&self) -> &MlpCertificate {
        &self.certificate
    }

    pub fn system(&self) -> &ControlAffineSystem {
        self.law.system()
    }

    pub fn law(&self) -> &dyn ControlLaw {
        self.law.as_ref()
    }

    pub fn constraint_coefficients(&self, x: &[f64], kappa_gain: f64) -> Result<(Vec<f64>, f64)> {
        let (h, grad) = self.certificate.value_and_gradient(x)?;
        constraint_coefficients(self.system(), x, h, &grad, kappa_gain)
    }

    pub fn decide(&self, x: &[f64]) -> Result<FilterDecision> {
        let (h, grad) = self.certificate.value_and_gradient(x)?;
        self.law.decide(x, h, &grad)
    }

    pub fn filter_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decide(x)?.input)
    }
}
