//! Fixed-step RK4 closed-loop simulation, empirical safety rates and level-set grids.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::controller::{FilterDecision, SafetyFilter};
use crate::dynamics::{ControlAffineSystem, Interval, Label};
use crate::error::{Error, Result};
use crate::mlp::MlpCertificate;
use crate::sampling::sample_labeled;

/// One classical RK4 step with `u` held constant over the step.
pub fn rk4_step(sys: &ControlAffineSystem, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("time step must be positive, got {dt}")));
    }
    let axpy = |k: &[f64], s: f64| -> Vec<f64> { x.iter().zip(k).map(|(xi, ki)| xi + s * ki).collect() };
    let k1 = sys.closed_loop_field(x, u)?;
    let k2 = sys.closed_loop_field(&axpy(&k1, 0.5 * dt), u)?;
    let k3 = sys.closed_loop_field(&axpy(&k2, 0.5 * dt), u)?;
    let k4 = sys.closed_loop_field(&axpy(&k3, dt), u)?;
    let next: Vec<f64> = (0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    if !crate::linalg::all_finite(&next) {
        return Err(Error::NonFinite { quantity: "integrated state", index: 0 });
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutStatus {
    Completed,
    EnteredUnsafe,
    FilterInfeasible,
    ExitedDomain,
}

impl RolloutStatus {
    /// Whether a rollout ending in this status counts as safe for `sys`.
    pub fn is_safe_for(self, sys: &ControlAffineSystem) -> bool {
        match self {
            RolloutStatus::Completed => true,
            RolloutStatus::EnteredUnsafe | RolloutStatus::FilterInfeasible => false,
            RolloutStatus::ExitedDomain => !sys.exit_is_unsafe(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub states: Vec<Vec<f64>>,
    /// `inputs[t]` is applied on `[t·dt, (t+1)·dt)`; one fewer than `states`.
    pub inputs: Vec<Vec<f64>>,
    pub h_values: Vec<f64>,
    pub decisions: Vec<FilterDecision>,
    pub dt: f64,
    pub status: RolloutStatus,
}

impl Rollout {
    pub fn min_h(&self) -> f64 {
        self.h_values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Columns `t, x0.., u0.., h, active, slack`; the final row has empty input fields.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let n = self.states.first().map_or(0, Vec::len);
        let m = self.inputs.first().map_or(0, Vec::len);
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend((0..m).map(|i| format!("u{i}")));
        header.extend(["h", "active", "slack"].map(String::from));
        w.write_record(&header)?;
        for (t, x) in self.states.iter().enumerate() {
            let mut row = vec![format!("{}", t as f64 * self.dt)];
            row.extend(x.iter().map(|v| format!("{v:e}")));
            match (self.inputs.get(t), self.decisions.get(t)) {
                (Some(u), Some(d)) => {
                    row.extend(u.iter().map(|v| format!("{v:e}")));
                    row.push(format!("{:e}", self.h_values[t]));
                    row.push(d.active.to_string());
                    row.push(format!("{:e}", d.slack));
                }
                _ => {
                    row.extend((0..m).map(|_| String::new()));
                    row.push(format!("{:e}", self.h_values[t]));
                    row.push(String::new());
                    row.push(String::new());
                }
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Simulates the filtered closed loop from `x0` for up to `horizon_steps` steps.
///
/// Stops early when the state enters the unsafe set, leaves X, or the filter has no
/// feasible input. Safety is judged with the system labeller, not with `h`.
pub fn rollout(filter: &SafetyFilter, x0: &[f64], horizon_steps: usize, dt: f64) -> Result<Rollout> {
    let sys = filter.system();
    if x0.len() != sys.state_dim() {
        return Err(Error::Shape { context: "initial state", expected: sys.state_dim(), got: x0.len() });
    }
    if !sys.in_domain(x0) {
        return Err(Error::Domain("initial state lies outside the state bounds".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("time step must be positive, got {dt}")));
    }
    let cert = filter.certificate();
    let mut out = Rollout {
        states: Vec::with_capacity(horizon_steps + 1),
        inputs: Vec::with_capacity(horizon_steps),
        h_values: Vec::with_capacity(horizon_steps + 1),
        decisions: Vec::with_capacity(horizon_steps),
        dt,
        status: RolloutStatus::Completed,
    };
    let mut x = x0.to_vec();
    for step in 0..=horizon_steps {
        if sys.label(&x) == Label::Unsafe {
            out.status = RolloutStatus::EnteredUnsafe;
        } else if !sys.in_domain(&x) {
            out.status = RolloutStatus::ExitedDomain;
        }
        let (h, grad) = if sys.in_domain(&x) || crate::linalg::all_finite(&x) {
            cert.value_and_gradient(&x)?
        } else {
            (f64::NAN, vec![])
        };
        out.states.push(x.clone());
        out.h_values.push(h);
        if out.status != RolloutStatus::Completed || step == horizon_steps {
            break;
        }
        let decision = match filter.law().decide(&x, h, &grad) {
            Ok(d) => d,
            Err(Error::Infeasible(_)) => {
                out.status = RolloutStatus::FilterInfeasible;
                break;
            }
            Err(e) => return Err(e),
        };
        let next = match rk4_step(sys, &x, &decision.input, dt) {
            Ok(next) => next,
            Err(Error::NonFinite { .. }) => {
                out.status = RolloutStatus::ExitedDomain;
                out.inputs.push(decision.input.clone());
                out.decisions.push(decision);
                break;
            }
            Err(e) => return Err(e),
        };
        out.inputs.push(decision.input.clone());
        out.decisions.push(decision);
        x = next;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub completed: usize,
    pub entered_unsafe: usize,
    pub filter_infeasible: usize,
    pub exited_domain: usize,
}

impl StatusCounts {
    pub fn add(&mut self, s: RolloutStatus) {
        match s {
            RolloutStatus::Completed => self.completed += 1,
            RolloutStatus::EnteredUnsafe => self.entered_unsafe += 1,
            RolloutStatus::FilterInfeasible => self.filter_infeasible += 1,
            RolloutStatus::ExitedDomain => self.exited_domain += 1,
        }
    }
}

/// Outcome of a simulation campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetySummary {
    pub system: String,
    pub rate: f64,
    pub n_rollouts: usize,
    pub n_safe: usize,
    pub counts: StatusCounts,
    pub horizon_steps: usize,
    pub dt: f64,
    pub seed: u64,
    /// Per-rollout terminal status, in start-state order.
    pub statuses: Vec<RolloutStatus>,
    /// Per-rollout minimum of `h` along the trajectory.
    pub min_h: Vec<f64>,
}

/// Rolls out from each start state in parallel; keeps the first `keep` trajectories.
pub fn safety_rate_from(
    filter: &SafetyFilter,
    starts: &[Vec<f64>],
    horizon_steps: usize,
    dt: f64,
    seed: u64,
    keep: usize,
) -> Result<(SafetySummary, Vec<Rollout>)> {
    if starts.is_empty() {
        return Err(Error::config("simulation.n_rollouts", "must be at least 1"));
    }
    let sys = filter.system();
    let results: Vec<Rollout> = starts
        .par_iter()
        .map(|x0| rollout(filter, x0, horizon_steps, dt))
        .collect::<Result<_>>()?;
    let mut counts = StatusCounts::default();
    let mut n_safe = 0;
    for r in &results {
        counts.add(r.status);
        n_safe += r.status.is_safe_for(sys) as usize;
    }
    let summary = SafetySummary {
        system: sys.name().to_string(),
        rate: n_safe as f64 / results.len() as f64,
        n_rollouts: results.len(),
        n_safe,
        counts,
        horizon_steps,
        dt,
        seed,
        statuses: results.iter().map(|r| r.status).collect(),
        min_h: results.iter().map(Rollout::min_h).collect(),
    };
    Ok((summary, results.into_iter().take(keep).collect()))
}

/// Fraction of rollouts from uniform Safe-labelled starts that never reach the unsafe
/// set or an infeasible filter state (leaving X counts as unsafe where the system says
/// so).
pub fn empirical_safety_rate(
    filter: &SafetyFilter,
    n_rollouts: usize,
    horizon_steps: usize,
    dt: f64,
    seed: u64,
    keep: usize,
) -> Result<(SafetySummary, Vec<Rollout>)> {
    if n_rollouts == 0 {
        return Err(Error::config("simulation.n_rollouts", "must be at least 1"));
    }
    let starts = sample_labeled(filter.system(), Label::Safe, n_rollouts, seed)?;
    safety_rate_from(filter, &starts, horizon_steps, dt, seed, keep)
}

/// A 2-D slice through the state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceSpec {
    pub free_axes: [usize; 2],
    /// Values of the remaining coordinates, in ascending index order.
    pub fixed_values: Vec<f64>,
    pub resolution: usize,
}

impl SliceSpec {
    pub fn validate(&self, n: usize) -> Result<()> {
        let [i, j] = self.free_axes;
        if i == j || i >= n || j >= n {
            return Err(Error::config("levelset.free_axes", format!("need two distinct indices below {n}, got {:?}", self.free_axes)));
        }
        if self.fixed_values.len() + 2 != n {
            return Err(Error::config(
                "levelset.fixed_values",
                format!("expected {} values, got {}", n - 2, self.fixed_values.len()),
            ));
        }
        if self.resolution < 2 {
            return Err(Error::config("levelset.resolution", "must be at least 2"));
        }
        Ok(())
    }

    /// Full state for free-axis values `(v0, v1)`.
    pub fn assemble(&self, v0: f64, v1: f64) -> Vec<f64> {
        let n = self.fixed_values.len() + 2;
        let mut fixed = self.fixed_values.iter();
        (0..n)
            .map(|k| {
                if k == self.free_axes[0] {
                    v0
                } else if k == self.free_axes[1] {
                    v1
                } else {
                    *fixed.next().expect("validated length")
                }
            })
            .collect()
    }
}

/// `h` on a `resolution × resolution` grid; `values[i * resolution + j]` is at
/// `(axis0[i], axis1[j])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSetGrid {
    pub slice: SliceSpec,
    pub bounds: [Interval; 2],
    pub axis0: Vec<f64>,
    pub axis1: Vec<f64>,
    pub values: Vec<f64>,
}

fn linspace(b: Interval, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| if i + 1 == n { b.hi } else { b.lo + (b.hi - b.lo) * i as f64 / (n - 1) as f64 })
        .collect()
}

pub fn levelset_grid(cert: &MlpCertificate, slice: &SliceSpec, state_bounds: &[Interval]) -> Result<LevelSetGrid> {
    slice.validate(cert.input_dim())?;
    if state_bounds.len() != cert.input_dim() {
        return Err(Error::Shape { context: "state bounds", expected: cert.input_dim(), got: state_bounds.len() });
    }
    let bounds = [state_bounds[slice.free_axes[0]], state_bounds[slice.free_axes[1]]];
    let axis0 = linspace(bounds[0], slice.resolution);
    let axis1 = linspace(bounds[1], slice.resolution);
    let values = (0..slice.resolution * slice.resolution)
        .into_par_iter()
        .map(|k| cert.forward(&slice.assemble(axis0[k / slice.resolution], axis1[k % slice.resolution])))
        .collect::<Result<Vec<f64>>>()?;
    Ok(LevelSetGrid { slice: slice.clone(), bounds, axis0, axis1, values })
}

#[derive(Serialize)]
struct LevelSetSidecar<'a> {
    axes: [usize; 2],
    fixed_values: &'a [f64],
    resolution: usize,
    bounds: [[f64; 2]; 2],
}

impl LevelSetGrid {
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.slice.resolution + j]
    }

    /// Grid CSV: the first row holds the second axis' coordinates, each later row
    /// starts with the first axis' coordinate followed by `h` along the second axis.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![format!("x{}\\x{}", self.slice.free_axes[0], self.slice.free_axes[1])];
        header.extend(self.axis1.iter().map(|v| format!("{v:e}")));
        w.write_record(&header)?;
        for (i, a) in self.axis0.iter().enumerate() {
            let mut row = vec![format!("{a:e}")];
            row.extend((0..self.slice.resolution).map(|j| format!("{:e}", self.value(i, j))));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn sidecar_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&LevelSetSidecar {
            axes: self.slice.free_axes,
            fixed_values: &self.slice.fixed_values,
            resolution: self.slice.resolution,
            bounds: [[self.bounds[0].lo, self.bounds[0].hi], [self.bounds[1].lo, self.bounds[1].hi]],
        })?)
    }
}
