//! Softplus MLP barrier certificates.
//!
//! The network maps a state `x ∈ ℝⁿ` to a scalar `h_θ(x)` through dense layers with
//! softplus activations on every hidden layer and an identity output layer. Besides the
//! value, the module provides
//!
//! - [`MlpCertificate::input_gradient`]: `∇ₓh_θ(x)` by reverse accumulation, and
//! - [`loss_param_gradient`]: θ-gradients of batch losses whose expressions contain
//!   both `h_θ(xᵢ)` and `∇ₓh_θ(xᵢ)` (forward tangent over reverse accumulation).
//!
//! All arithmetic is `f64`.

mod adam;
mod nested;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use nested::{loss_param_gradient, BatchLoss, PointCotangent, PointEval};

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Pre-activation threshold beyond which softplus is evaluated by its asymptote.
const SOFTPLUS_GUARD: f64 = 30.0;

#[inline]
pub(crate) fn softplus(z: f64) -> f64 {
    if z > SOFTPLUS_GUARD {
        z
    } else if z < -SOFTPLUS_GUARD {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

/// Derivative of softplus, i.e. the logistic sigmoid.
#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One dense layer, `z = W a + b`, with `W` stored row-major as `outputs × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.inputs..(i + 1) * self.inputs]
    }

    /// `out = W a + b`
    #[inline]
    fn affine(&self, a: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.outputs).map(|i| crate::linalg::dot(self.row(i), a) + self.biases[i]));
    }

    /// `out = W a` (tangent propagation, no bias)
    #[inline]
    fn linear(&self, a: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.outputs).map(|i| crate::linalg::dot(self.row(i), a)));
    }

    /// `out = Wᵀ c`
    #[inline]
    fn transpose_mul(&self, c: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.resize(self.inputs, 0.0);
        for (i, &ci) in c.iter().enumerate() {
            if ci == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(i)) {
                *o += w * ci;
            }
        }
    }

    fn frobenius_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }
}

/// A scalar-valued softplus MLP `h_θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCertificate {
    layer_sizes: Vec<usize>,
    layers: Vec<DenseLayer>,
}

/// Per-point activations kept for the backward pass.
#[derive(Debug, Default, Clone)]
pub(crate) struct Trace {
    /// Pre-activations `z_l` for every layer (the last one has length 1).
    pub pre: Vec<Vec<f64>>,
    /// Post-activations `softplus(z_l)` for hidden layers.
    pub post: Vec<Vec<f64>>,
}

impl MlpCertificate {
    /// Builds a certificate from explicit layers, validating shapes and finiteness.
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidCertificate("at least one layer is required".into()));
        }
        let mut layer_sizes = vec![layers[0].inputs];
        for (l, layer) in layers.iter().enumerate() {
            if layer.inputs != *layer_sizes.last().unwrap() {
                return Err(Error::InvalidCertificate(format!(
                    "layer {l} expects {} inputs but the previous layer produces {}",
                    layer.inputs,
                    layer_sizes.last().unwrap()
                )));
            }
            if layer.inputs == 0 || layer.outputs == 0 {
                return Err(Error::InvalidCertificate(format!("layer {l} has a zero dimension")));
            }
            if layer.weights.len() != layer.inputs * layer.outputs
                || layer.biases.len() != layer.outputs
            {
                return Err(Error::InvalidCertificate(format!(
                    "layer {l} parameter lengths do not match {}x{}",
                    layer.outputs, layer.inputs
                )));
            }
            if !crate::linalg::all_finite(&layer.weights) || !crate::linalg::all_finite(&layer.biases)
            {
                return Err(Error::InvalidCertificate(format!("layer {l} has non-finite parameters")));
            }
            layer_sizes.push(layer.outputs);
        }
        if *layer_sizes.last().unwrap() != 1 {
            return Err(Error::InvalidCertificate(format!(
                "output dimension must be 1, got {}",
                layer_sizes.last().unwrap()
            )));
        }
        Ok(Self { layer_sizes, layers })
    }

    /// All-zero parameters with the given architecture.
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidCertificate(
                "layer_sizes needs at least an input and an output entry".into(),
            ));
        }
        Self::from_layers(
            layer_sizes
                .windows(2)
                .map(|w| DenseLayer::zeros(w[0], w[1]))
                .collect(),
        )
    }

    /// Uniform Glorot initialisation `±sqrt(6/(fan_in+fan_out))`, zero biases.
    pub fn init_glorot(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        let mut cert = Self::zeros(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut cert.layers {
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            for w in &mut layer.weights {
                *w = dist.sample(&mut rng);
            }
        }
        Ok(cert)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Parameters flattened layer by layer, weights (row-major) before biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    /// Inverse of [`params_flat`](Self::params_flat).
    pub fn with_params_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape {
                context: "flat parameter vector",
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut out = self.clone();
        let mut offset = 0;
        for l in &mut out.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        if !crate::linalg::all_finite(flat) {
            return Err(Error::InvalidCertificate("non-finite parameters".into()));
        }
        Ok(out)
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                context: "certificate input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn trace(&self, x: &[f64], trace: &mut Trace) {
        let depth = self.layers.len();
        trace.pre.resize_with(depth, Vec::new);
        trace.post.resize_with(depth - 1, Vec::new);
        for l in 0..depth {
            let mut z = std::mem::take(&mut trace.pre[l]);
            let input = if l == 0 { x } else { &trace.post[l - 1] };
            self.layers[l].affine(input, &mut z);
            if l + 1 < depth {
                let a = &mut trace.post[l];
                a.clear();
                a.extend(z.iter().map(|&v| softplus(v)));
            }
            trace.pre[l] = z;
        }
    }

    /// `h_θ(x)`.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let mut trace = Trace::default();
        self.trace(x, &mut trace);
        Ok(trace.pre[self.layers.len() - 1][0])
    }

    /// Reverse pass from an already computed trace; returns `∇ₓh`.
    pub(crate) fn input_gradient_from_trace(&self, trace: &Trace) -> Vec<f64> {
        let depth = self.layers.len();
        let mut adj = vec![1.0];
        let mut next = Vec::new();
        for l in (0..depth).rev() {
            self.layers[l].transpose_mul(&adj, &mut next);
            std::mem::swap(&mut adj, &mut next);
            if l > 0 {
                for (g, &z) in adj.iter_mut().zip(&trace.pre[l - 1]) {
                    *g *= sigmoid(z);
                }
            }
        }
        adj
    }

    /// `∇ₓh_θ(x)`.
    pub fn input_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut trace = Trace::default();
        self.trace(x, &mut trace);
        Ok(self.input_gradient_from_trace(&trace))
    }

    /// `(h_θ(x), ∇ₓh_θ(x))` from a single forward pass.
    pub fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        let mut trace = Trace::default();
        self.trace(x, &mut trace);
        let h = trace.pre[self.layers.len() - 1][0];
        Ok((h, self.input_gradient_from_trace(&trace)))
    }

    /// Product of per-layer Frobenius norms, an upper bound on the Lipschitz constant of
    /// `h_θ` (softplus has slope in (0, 1)).
    pub fn lipschitz_upper_bound(&self) -> f64 {
        self.layers.iter().map(DenseLayer::frobenius_norm).product()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&CertificateDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CertificateDocument = serde_json::from_str(text)?;
        doc.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// θ-gradient with the same layout as the certificate parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub layers: Vec<DenseLayer>,
}

impl ParamGradient {
    pub fn zeros_like(cert: &MlpCertificate) -> Self {
        Self {
            layers: cert
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn add_assign(&mut self, other: &ParamGradient) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += y;
            }
            for (x, y) in a.biases.iter_mut().zip(&b.biases) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|x| *x *= s);
            l.biases.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|&x| x == 0.0))
    }

    pub(crate) fn matches(&self, cert: &MlpCertificate) -> bool {
        self.layers.len() == cert.layers.len()
            && self
                .layers
                .iter()
                .zip(&cert.layers)
                .all(|(g, l)| g.inputs == l.inputs && g.outputs == l.outputs)
    }
}

/// On-disk certificate format (`format_version` 1).
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CertificateDocument {
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
    format_version: u32,
}

const FORMAT_VERSION: u32 = 1;

impl From<&MlpCertificate> for CertificateDocument {
    fn from(cert: &MlpCertificate) -> Self {
        Self {
            layer_sizes: cert.layer_sizes.clone(),
            weights: cert
                .layers
                .iter()
                .map(|l| l.weights.chunks(l.inputs).map(<[f64]>::to_vec).collect())
                .collect(),
            biases: cert.layers.iter().map(|l| l.biases.clone()).collect(),
            format_version: FORMAT_VERSION,
        }
    }
}

impl TryFrom<CertificateDocument> for MlpCertificate {
    type Error = Error;

    fn try_from(doc: CertificateDocument) -> Result<Self> {
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::InvalidCertificate(format!(
                "unsupported format_version {}",
                doc.format_version
            )));
        }
        if doc.layer_sizes.len() < 2
            || doc.weights.len() != doc.layer_sizes.len() - 1
            || doc.biases.len() != doc.weights.len()
        {
            return Err(Error::InvalidCertificate(
                "layer_sizes, weights and biases disagree on the number of layers".into(),
            ));
        }
        let mut layers = Vec::with_capacity(doc.weights.len());
        for (l, (rows, biases)) in doc.weights.into_iter().zip(doc.biases).enumerate() {
            let (inputs, outputs) = (doc.layer_sizes[l], doc.layer_sizes[l + 1]);
            if rows.len() != outputs || rows.iter().any(|r| r.len() != inputs) {
                return Err(Error::InvalidCertificate(format!(
                    "weights of layer {l} are not {outputs}x{inputs}"
                )));
            }
            layers.push(DenseLayer {
                inputs,
                outputs,
                weights: rows.into_iter().flatten().collect(),
                biases,
            });
        }
        let cert = MlpCertificate::from_layers(layers)?;
        if cert.layer_sizes != doc.layer_sizes {
            return Err(Error::InvalidCertificate("layer_sizes mismatch".into()));
        }
        Ok(cert)
    }
}
