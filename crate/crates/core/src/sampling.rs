//! Uniform state sampling, labelled training datasets and the collision-cone labeller.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::dynamics::{ControlAffineSystem, Interval, Label};
use crate::error::{Error, Result};
use crate::seeds;

/// Rejection sampling gives up when fewer than `STALL_RATE` of the draws in a window of
/// `STALL_WINDOW` draws are accepted.
pub const STALL_WINDOW: u64 = 1_000_000;
pub const STALL_RATE: f64 = 1e-4;

/// Streaming uniform sampler over a box.
pub struct UniformBox {
    rng: ChaCha8Rng,
    axes: Vec<Uniform<f64>>,
}

impl UniformBox {
    pub fn new(bounds: &[Interval], seed: u64) -> Result<Self> {
        if bounds.iter().any(|b| !(b.lo < b.hi) || !b.lo.is_finite() || !b.hi.is_finite()) {
            return Err(Error::Domain("sampling bounds must be finite with lo < hi".into()));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            axes: bounds.iter().map(|b| Uniform::new_inclusive(b.lo, b.hi)).collect(),
        })
    }

    pub fn draw(&mut self) -> Vec<f64> {
        self.axes.iter().map(|d| d.sample(&mut self.rng)).collect()
    }
}

/// `count` i.i.d. points, each coordinate uniform over its interval.
pub fn sample_uniform(bounds: &[Interval], count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut sampler = UniformBox::new(bounds, seed)?;
    Ok((0..count).map(|_| sampler.draw()).collect())
}

/// Draws uniform points from the state bounds of `sys` until `count` of them satisfy
/// `accept`.
pub fn rejection_sample(
    sys: &ControlAffineSystem,
    count: usize,
    seed: u64,
    bucket: &'static str,
    accept: impl Fn(&[f64]) -> bool,
) -> Result<Vec<Vec<f64>>> {
    let mut sampler = UniformBox::new(sys.state_bounds(), seed)?;
    let mut out = Vec::with_capacity(count);
    let (mut drawn, mut window_drawn, mut window_accepted) = (0usize, 0u64, 0u64);
    while out.len() < count {
        let x = sampler.draw();
        drawn += 1;
        window_drawn += 1;
        if accept(&x) {
            out.push(x);
            window_accepted += 1;
        }
        if window_drawn == STALL_WINDOW {
            if (window_accepted as f64) < STALL_RATE * STALL_WINDOW as f64 {
                return Err(Error::SamplingStall { bucket, accepted: out.len(), drawn });
            }
            window_drawn = 0;
            window_accepted = 0;
        }
    }
    Ok(out)
}

/// Uniform samples from the region of X labelled `label`.
pub fn sample_labeled(
    sys: &ControlAffineSystem,
    label: Label,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let bucket = match label {
        Label::Safe => "safe",
        Label::Unsafe => "unsafe",
        Label::Unlabeled => "unlabeled",
    };
    rejection_sample(sys, count, seed, bucket, |x| sys.label(x) == label)
}

/// The labelled point sets S (safe), U (unsafe) and D (whole domain).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingDatasets {
    pub safe: Vec<Vec<f64>>,
    #[serde(rename = "unsafe")]
    pub unsafe_: Vec<Vec<f64>>,
    pub domain: Vec<Vec<f64>>,
    pub seed: u64,
}

impl TrainingDatasets {
    pub fn len(&self) -> usize {
        self.safe.len() + self.unsafe_.len() + self.domain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One state per row with a leading `bucket` column (`safe`, `unsafe`, `domain`).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let n = self
            .safe
            .first()
            .or(self.unsafe_.first())
            .or(self.domain.first())
            .map_or(0, Vec::len);
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["bucket".to_string()];
        header.extend((0..n).map(|i| format!("x{i}")));
        w.write_record(&header)?;
        for (name, pts) in [("safe", &self.safe), ("unsafe", &self.unsafe_), ("domain", &self.domain)] {
            for p in pts {
                let mut row = vec![name.to_string()];
                row.extend(p.iter().map(|v| format!("{v:e}")));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut f, self)?;
        f.flush()?;
        Ok(())
    }
}

/// Builds S, U by rejection sampling on the system labeller and D by plain uniform
/// sampling over X. Each bucket draws from its own stream derived from `seed`.
pub fn build_datasets(
    sys: &ControlAffineSystem,
    n_safe: usize,
    n_unsafe: usize,
    n_domain: usize,
    seed: u64,
) -> Result<TrainingDatasets> {
    if n_safe == 0 || n_unsafe == 0 || n_domain == 0 {
        return Err(Error::config("data", "dataset sizes must all be positive"));
    }
    Ok(TrainingDatasets {
        safe: sample_labeled(sys, Label::Safe, n_safe, seeds::derive(seed, seeds::DATA_SAFE))?,
        unsafe_: sample_labeled(sys, Label::Unsafe, n_unsafe, seeds::derive(seed, seeds::DATA_UNSAFE))?,
        domain: sample_uniform(sys.state_bounds(), n_domain, seeds::derive(seed, seeds::DATA_DOMAIN))?,
        seed,
    })
}

/// Closest-approach distance between robot and obstacle if both keep their current
/// velocities. Returns `(|p|, miss, approaching)`.
pub fn closest_approach(state: &[f64], speed: f64) -> (f64, f64, bool) {
    let (sin, cos) = state[2].sin_cos();
    let p = [state[3] - state[0], state[4] - state[1]];
    let v = [state[5] - speed * cos, state[6] - speed * sin];
    let dist = p[0].hypot(p[1]);
    let along = p[0] * v[0] + p[1] * v[1];
    let v_norm = v[0].hypot(v[1]);
    if along < 0.0 && v_norm > 0.0 {
        let miss = (p[0] * v[1] - p[1] * v[0]).abs() / v_norm;
        (dist, miss, true)
    } else {
        (dist, dist, false)
    }
}

/// Labels a quadruped state `(x₁, x₂, φ, x_o1, x_o2, v_o1, v_o2, r)`.
///
/// Unsafe when already in contact (`|p| ≤ r`) or when the relative velocity at nominal
/// robot speed points into the collision cone (closing with miss distance `≤ r`). Safe
/// when `|p| ≥ r + margin` and the miss distance is at least `r + margin`.
pub fn collision_cone_label(state: &[f64], robot_speed_nominal: f64, margin: f64) -> Label {
    let r = state[7];
    let (dist, miss, approaching) = closest_approach(state, robot_speed_nominal);
    if dist <= r || (approaching && miss <= r) {
        Label::Unsafe
    } else if dist >= r + margin && !(approaching && miss < r + margin) {
        Label::Safe
    } else {
        Label::Unlabeled
    }
}
