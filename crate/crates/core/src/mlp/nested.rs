//! θ-gradients of batch losses built from `h_θ(xᵢ)` and `∇ₓh_θ(xᵢ)`.
//!
//! A loss `L(h₁, ∇h₁, …, h_B, ∇h_B)` is supplied as a [`BatchLoss`]: given the point
//! evaluations it returns its value together with the cotangents `∂L/∂hᵢ` and
//! `∂L/∂(∇ₓhᵢ)`. By the chain rule
//!
//! ```text
//! ∂L/∂θ = Σᵢ cᵢ ∂hᵢ/∂θ + ∂(wᵢ · ∇ₓhᵢ)/∂θ,    cᵢ = ∂L/∂hᵢ,  wᵢ = ∂L/∂(∇ₓhᵢ)
//! ```
//!
//! The directional derivative `wᵢ · ∇ₓhᵢ` is obtained by pushing the tangent `wᵢ`
//! forward through the network, and both terms are then reverse-accumulated over the
//! combined primal/tangent graph. Softplus is smooth, so this is exact.

use rayon::prelude::*;

use super::{sigmoid, MlpCertificate, ParamGradient, Trace};
use crate::error::{Error, Result};

/// `h_θ` and (when requested) `∇ₓh_θ` at one batch point.
#[derive(Debug, Clone)]
pub struct PointEval {
    pub value: f64,
    pub input_gradient: Option<Vec<f64>>,
}

/// Cotangents `∂L/∂h` and `∂L/∂(∇ₓh)` at one batch point. `None` means zero.
#[derive(Debug, Clone, Default)]
pub struct PointCotangent {
    pub value: f64,
    pub input_gradient: Option<Vec<f64>>,
}

/// A scalar loss over per-point certificate values and input gradients.
///
/// Hinge-type terms should report the derivative of the inactive branch (zero) at
/// their kink.
pub trait BatchLoss: Sync {
    /// Whether the loss reads `∇ₓh` at point `index`; skipping saves a reverse pass.
    fn needs_input_gradient(&self, _index: usize) -> bool {
        true
    }

    fn evaluate(&self, evals: &[PointEval]) -> Result<(f64, Vec<PointCotangent>)>;
}

const CHUNK: usize = 32;

/// Loss value and its gradient with respect to every weight and bias.
///
/// Per-point work fans out over rayon in fixed-size chunks whose partial gradients are
/// summed in chunk order, so the result does not depend on the worker count.
pub fn loss_param_gradient(
    cert: &MlpCertificate,
    points: &[&[f64]],
    loss: &dyn BatchLoss,
) -> Result<(f64, ParamGradient)> {
    for x in points {
        cert.check_input(x)?;
    }

    let forward: Vec<(Trace, PointEval)> = points
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut trace = Trace::default();
            cert.trace(x, &mut trace);
            let value = trace.pre[cert.layers.len() - 1][0];
            let input_gradient = loss
                .needs_input_gradient(i)
                .then(|| cert.input_gradient_from_trace(&trace));
            (trace, PointEval { value, input_gradient })
        })
        .collect();

    for (i, (_, e)) in forward.iter().enumerate() {
        if !e.value.is_finite() {
            return Err(Error::NonFinite { quantity: "certificate value", index: i });
        }
        if let Some(g) = &e.input_gradient {
            if !crate::linalg::all_finite(g) {
                return Err(Error::NonFinite { quantity: "input gradient", index: i });
            }
        }
    }

    let evals: Vec<PointEval> = forward.iter().map(|(_, e)| e.clone()).collect();
    let (value, cotangents) = loss.evaluate(&evals)?;
    if !value.is_finite() {
        return Err(Error::NonFinite { quantity: "loss", index: 0 });
    }
    if cotangents.len() != points.len() {
        return Err(Error::Shape {
            context: "loss cotangents",
            expected: points.len(),
            got: cotangents.len(),
        });
    }
    for (i, c) in cotangents.iter().enumerate() {
        let finite = c.value.is_finite()
            && c.input_gradient.as_deref().is_none_or(crate::linalg::all_finite);
        if !finite {
            return Err(Error::NonFinite { quantity: "loss cotangent", index: i });
        }
        if let Some(w) = &c.input_gradient {
            if w.len() != cert.input_dim() {
                return Err(Error::Shape {
                    context: "input-gradient cotangent",
                    expected: cert.input_dim(),
                    got: w.len(),
                });
            }
        }
    }

    let partials: Vec<ParamGradient> = (0..points.len())
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|idx| {
            let mut grad = ParamGradient::zeros_like(cert);
            for &i in idx {
                let c = &cotangents[i];
                if c.value == 0.0 && c.input_gradient.is_none() {
                    continue;
                }
                accumulate(cert, points[i], &forward[i].0, c, &mut grad);
            }
            grad
        })
        .collect();

    let mut grad = ParamGradient::zeros_like(cert);
    for p in &partials {
        grad.add_assign(p);
    }
    Ok((value, grad))
}

/// Adds `c_h ∂h/∂θ + ∂(w·∇ₓh)/∂θ` at one point into `grad`.
fn accumulate(
    cert: &MlpCertificate,
    x: &[f64],
    trace: &Trace,
    cot: &PointCotangent,
    grad: &mut ParamGradient,
) {
    let layers = &cert.layers;
    let depth = layers.len();

    // Forward tangent: ż_l = W_l ȧ_{l-1}, ȧ_l = σ'(z_l) ż_l, seeded with ȧ_{-1} = w.
    let tangent: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = cot.input_gradient.as_ref().map(|w| {
        let mut zdot: Vec<Vec<f64>> = Vec::with_capacity(depth);
        let mut adot: Vec<Vec<f64>> = Vec::with_capacity(depth.saturating_sub(1));
        for l in 0..depth {
            let mut zd = Vec::new();
            let input = if l == 0 { w.as_slice() } else { adot[l - 1].as_slice() };
            layers[l].linear(input, &mut zd);
            if l + 1 < depth {
                adot.push(
                    zd.iter()
                        .zip(&trace.pre[l])
                        .map(|(d, &z)| sigmoid(z) * d)
                        .collect(),
                );
            }
            zdot.push(zd);
        }
        (zdot, adot)
    });

    let mut zbar = vec![cot.value];
    let mut zdbar = vec![if tangent.is_some() { 1.0 } else { 0.0 }];
    let mut abar = Vec::new();
    let mut adbar = Vec::new();

    for l in (0..depth).rev() {
        let layer = &layers[l];
        let input: &[f64] = if l == 0 { x } else { &trace.post[l - 1] };
        let input_dot: Option<&[f64]> = tangent.as_ref().map(|(_, adot)| {
            if l == 0 {
                cot.input_gradient.as_deref().unwrap()
            } else {
                adot[l - 1].as_slice()
            }
        });

        let g = &mut grad.layers[l];
        for i in 0..layer.outputs {
            let (zb, zdb) = (zbar[i], zdbar[i]);
            g.biases[i] += zb;
            let row = &mut g.weights[i * layer.inputs..(i + 1) * layer.inputs];
            if zb != 0.0 {
                for (r, a) in row.iter_mut().zip(input) {
                    *r += zb * a;
                }
            }
            if let (Some(ad), true) = (input_dot, zdb != 0.0) {
                for (r, a) in row.iter_mut().zip(ad) {
                    *r += zdb * a;
                }
            }
        }

        if l == 0 {
            break;
        }
        layer.transpose_mul(&zbar, &mut abar);
        let z = &trace.pre[l - 1];
        match &tangent {
            Some((zdot, _)) => {
                layer.transpose_mul(&zdbar, &mut adbar);
                let zd = &zdot[l - 1];
                zbar.clear();
                zdbar.clear();
                for k in 0..z.len() {
                    let s = sigmoid(z[k]);
                    zbar.push(abar[k] * s + adbar[k] * s * (1.0 - s) * zd[k]);
                    zdbar.push(adbar[k] * s);
                }
            }
            None => {
                zbar.clear();
                zbar.extend(abar.iter().zip(z).map(|(a, &zk)| a * sigmoid(zk)));
                zdbar.clear();
                zdbar.resize(z.len(), 0.0);
            }
        }
    }
}
