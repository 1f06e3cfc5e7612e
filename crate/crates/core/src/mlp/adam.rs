use serde::{Deserialize, Serialize};

use super::{MlpCertificate, ParamGradient};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment accumulators, shaped like the certificate parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: ParamGradient,
    pub second_moment: ParamGradient,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(cert: &MlpCertificate, config: AdamConfig) -> Result<Self> {
        let valid = config.learning_rate > 0.0
            && (0.0..1.0).contains(&config.beta1)
            && config.beta1 > 0.0
            && (0.0..1.0).contains(&config.beta2)
            && config.beta2 > 0.0
            && config.epsilon > 0.0;
        if !valid {
            return Err(Error::Domain(format!("invalid Adam configuration {config:?}")));
        }
        Ok(Self {
            first_moment: ParamGradient::zeros_like(cert),
            second_moment: ParamGradient::zeros_like(cert),
            step_count: 0,
            config,
        })
    }

    /// One bias-corrected Adam update, in place.
    pub fn step(&mut self, cert: &mut MlpCertificate, grad: &ParamGradient) -> Result<()> {
        if !grad.matches(cert) || !self.first_moment.matches(cert) {
            return Err(Error::Shape {
                context: "Adam gradient",
                expected: cert.num_params(),
                got: grad.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum(),
            });
        }
        self.step_count += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);

        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        };

        for (l, layer) in cert.layers_mut().iter_mut().enumerate() {
            let g = &grad.layers[l];
            let m = &mut self.first_moment.layers[l];
            let v = &mut self.second_moment.layers[l];
            update(&mut layer.weights, &g.weights, &mut m.weights, &mut v.weights);
            update(&mut layer.biases, &g.biases, &mut m.biases, &mut v.biases);
        }
        Ok(())
    }
}

/// Functional form of [`OptimizerState::step`].
pub fn adam_step(
    state: &OptimizerState,
    cert: &MlpCertificate,
    grad: &ParamGradient,
) -> Result<(OptimizerState, MlpCertificate)> {
    let mut state = state.clone();
    let mut cert = cert.clone();
    state.step(&mut cert, grad)?;
    Ok((state, cert))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(cert: &MlpCertificate, value: f64) -> ParamGradient {
        let mut g = ParamGradient::zeros_like(cert);
        for l in &mut g.layers {
            l.weights.iter_mut().for_each(|w| *w = value);
            l.biases.iter_mut().for_each(|b| *b = value);
        }
        g
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let cert = MlpCertificate::init_glorot(&[2, 3, 1], 0).unwrap();
        let state = OptimizerState::new(&cert, AdamConfig::default()).unwrap();
        let (state, next) = adam_step(&state, &cert, &ParamGradient::zeros_like(&cert)).unwrap();
        assert_eq!(next, cert);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let cert = MlpCertificate::init_glorot(&[2, 3, 1], 0).unwrap();
        let cfg = AdamConfig::default();
        let state = OptimizerState::new(&cert, cfg).unwrap();
        for g in [0.37, -2.5, 1e-6] {
            let (_, next) = adam_step(&state, &cert, &filled(&cert, g)).unwrap();
            let expected = -cfg.learning_rate * g / (g.abs() + cfg.epsilon);
            for (a, b) in next.params_flat().iter().zip(cert.params_flat()) {
                assert!(((a - b) - expected).abs() < 1e-15, "{g}");
            }
        }
    }

    #[test]
    fn constant_gradient_step_tends_to_learning_rate() {
        let mut cert = MlpCertificate::zeros(&[1, 1]).unwrap();
        let cfg = AdamConfig::default();
        let mut state = OptimizerState::new(&cert, cfg).unwrap();
        let g = filled(&cert, -0.8);
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = cert.params_flat()[0];
            state.step(&mut cert, &g).unwrap();
            last = cert.params_flat()[0] - before;
        }
        assert!((last - cfg.learning_rate).abs() < 1e-8, "{last}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = MlpCertificate::zeros(&[2, 3, 1]).unwrap();
        let b = MlpCertificate::zeros(&[2, 4, 1]).unwrap();
        let state = OptimizerState::new(&a, AdamConfig::default()).unwrap();
        assert!(adam_step(&state, &a, &ParamGradient::zeros_like(&b)).is_err());
    }
}
