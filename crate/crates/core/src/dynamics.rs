//! Control-affine systems `ẋ = f(x) + g(x)u` and the built-in benchmarks.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Safe,
    Unsafe,
    Unlabeled,
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    #[inline]
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

pub fn within(bounds: &[Interval], x: &[f64]) -> bool {
    bounds.len() == x.len() && bounds.iter().zip(x).all(|(b, &v)| b.contains(v))
}

/// The vector fields and labelling predicate behind a [`ControlAffineSystem`].
pub trait ControlAffine: Send + Sync {
    /// Writes `f(x)` into `out` (length n).
    fn drift(&self, x: &[f64], out: &mut [f64]);
    /// Writes `g(x)` into `out` as a row-major n×m matrix.
    fn actuation(&self, x: &[f64], out: &mut [f64]);
    /// Labels a state already known to lie in the state bounds.
    fn label(&self, x: &[f64]) -> Label;
}

type VecFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
type LabelFn = dyn Fn(&[f64]) -> Label + Send + Sync;

/// [`ControlAffine`] backed by closures, for user-defined systems.
pub struct FnModel {
    drift: Box<VecFn>,
    actuation: Box<VecFn>,
    label: Box<LabelFn>,
}

impl FnModel {
    pub fn new(
        drift: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        actuation: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        label: impl Fn(&[f64]) -> Label + Send + Sync + 'static,
    ) -> Self {
        Self {
            drift: Box::new(drift),
            actuation: Box::new(actuation),
            label: Box::new(label),
        }
    }
}

impl ControlAffine for FnModel {
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }
    fn actuation(&self, x: &[f64], out: &mut [f64]) {
        (self.actuation)(x, out)
    }
    fn label(&self, x: &[f64]) -> Label {
        (self.label)(x)
    }
}

/// An immutable control-affine system with its state set X, optional input set U and
/// safe/unsafe labelling. Cloning is cheap.
#[derive(Clone)]
pub struct ControlAffineSystem {
    name: String,
    state_dim: usize,
    input_dim: usize,
    state_bounds: Vec<Interval>,
    input_bounds: Option<Vec<Interval>>,
    model: Arc<dyn ControlAffine>,
    exit_is_unsafe: bool,
    default_reference: Vec<f64>,
}

impl fmt::Debug for ControlAffineSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffineSystem")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .field("state_bounds", &self.state_bounds)
            .field("input_bounds", &self.input_bounds)
            .finish_non_exhaustive()
    }
}

impl ControlAffineSystem {
    pub fn new(
        name: impl Into<String>,
        state_bounds: Vec<Interval>,
        input_dim: usize,
        input_bounds: Option<Vec<Interval>>,
        model: Arc<dyn ControlAffine>,
    ) -> Result<Self> {
        let name = name.into();
        if state_bounds.is_empty() || input_dim == 0 {
            return Err(Error::Domain(format!("system `{name}` needs n >= 1 and m >= 1")));
        }
        if state_bounds.iter().any(|b| !(b.lo < b.hi) || !b.lo.is_finite() || !b.hi.is_finite()) {
            return Err(Error::Domain(format!("system `{name}` has degenerate state bounds")));
        }
        if let Some(ub) = &input_bounds {
            if ub.len() != input_dim || ub.iter().any(|b| !(b.lo <= b.hi)) {
                return Err(Error::Domain(format!("system `{name}` has invalid input bounds")));
            }
        }
        Ok(Self {
            name,
            state_dim: state_bounds.len(),
            input_dim,
            state_bounds,
            input_bounds,
            model,
            exit_is_unsafe: false,
            default_reference: vec![0.0; input_dim],
        })
    }

    /// Whether leaving X counts as a safety violation in simulation.
    pub fn with_exit_unsafe(mut self, exit_is_unsafe: bool) -> Self {
        self.exit_is_unsafe = exit_is_unsafe;
        self
    }

    pub fn with_default_reference(mut self, u: Vec<f64>) -> Result<Self> {
        if u.len() != self.input_dim {
            return Err(Error::Shape {
                context: "default reference input",
                expected: self.input_dim,
                got: u.len(),
            });
        }
        self.default_reference = u;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
    pub fn state_bounds(&self) -> &[Interval] {
        &self.state_bounds
    }
    pub fn input_bounds(&self) -> Option<&[Interval]> {
        self.input_bounds.as_deref()
    }
    pub fn exit_is_unsafe(&self) -> bool {
        self.exit_is_unsafe
    }
    pub fn default_reference(&self) -> &[f64] {
        &self.default_reference
    }

    pub fn in_domain(&self, x: &[f64]) -> bool {
        within(&self.state_bounds, x)
    }

    /// Safe / Unsafe / Unlabeled; anything outside X is Unlabeled.
    pub fn label(&self, x: &[f64]) -> Label {
        if self.in_domain(x) {
            self.model.label(x)
        } else {
            Label::Unlabeled
        }
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.state_dim {
            return Err(Error::Shape { context: "state", expected: self.state_dim, got: x.len() });
        }
        Ok(())
    }

    pub fn eval_f(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_state(x)?;
        let mut out = vec![0.0; self.state_dim];
        self.model.drift(x, &mut out);
        Ok(out)
    }

    /// `g(x)` as a row-major n×m matrix.
    pub fn eval_g(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_state(x)?;
        let mut out = vec![0.0; self.state_dim * self.input_dim];
        self.model.actuation(x, &mut out);
        Ok(out)
    }

    /// `f(x) + g(x) u`.
    pub fn closed_loop_field(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.input_dim {
            return Err(Error::Shape { context: "input", expected: self.input_dim, got: u.len() });
        }
        let mut dx = self.eval_f(x)?;
        let g = self.eval_g(x)?;
        for (i, d) in dx.iter_mut().enumerate() {
            *d += crate::linalg::dot(&g[i * self.input_dim..(i + 1) * self.input_dim], u);
        }
        Ok(dx)
    }
}

/// Numeric parameters of the built-in systems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemParams {
    /// Obstacle velocity drift (quadruped).
    pub k1: f64,
    pub k2: f64,
    /// Obstacle radius drift (quadruped).
    pub kr: f64,
    /// Robot speed used by the collision-cone labeller.
    pub robot_speed_nominal: f64,
    /// Inflation of the collision cone separating Safe from Unlabeled.
    pub cone_margin: f64,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            k1: 0.0,
            k2: 0.0,
            kr: 0.0,
            robot_speed_nominal: 1.0,
            cone_margin: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkId {
    DubinsCar,
    PlanarAerial,
    QuadrupedDynamicObstacle,
}

impl BenchmarkId {
    pub const ALL: [BenchmarkId; 3] = [
        BenchmarkId::DubinsCar,
        BenchmarkId::PlanarAerial,
        BenchmarkId::QuadrupedDynamicObstacle,
    ];

    /// Config-file name of the benchmark.
    pub fn name(self) -> &'static str {
        match self {
            BenchmarkId::DubinsCar => "dubins",
            BenchmarkId::PlanarAerial => "planar_aerial",
            BenchmarkId::QuadrupedDynamicObstacle => "quadruped",
        }
    }

    pub fn build(self, params: &SystemParams) -> ControlAffineSystem {
        match self {
            BenchmarkId::DubinsCar => dubins_system(),
            BenchmarkId::PlanarAerial => planar_aerial_system(),
            BenchmarkId::QuadrupedDynamicObstacle => quadruped_system_with(params),
        }
    }

    /// Hidden layer widths used for the benchmark at paper scale.
    pub fn reference_hidden_layers(self) -> Vec<usize> {
        match self {
            BenchmarkId::DubinsCar => vec![64],
            BenchmarkId::PlanarAerial | BenchmarkId::QuadrupedDynamicObstacle => vec![128, 128],
        }
    }
}

impl FromStr for BenchmarkId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        BenchmarkId::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::UnknownSystem(s.to_string()))
    }
}

struct Dubins;

impl ControlAffine for Dubins {
    fn drift(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn actuation(&self, x: &[f64], out: &mut [f64]) {
        let (s, c) = x[2].sin_cos();
        out.copy_from_slice(&[c, 0.0, s, 0.0, 0.0, 1.0]);
    }
    fn label(&self, x: &[f64]) -> Label {
        let (ax, ay) = (x[0].abs(), x[1].abs());
        if ax <= 0.2 && ay <= 0.2 {
            Label::Unsafe
        } else if ax > 1.5 || ay > 1.5 {
            Label::Safe
        } else {
            Label::Unlabeled
        }
    }
}

/// Unicycle `ẋ₁ = u₁ cos φ, ẋ₂ = u₁ sin φ, φ̇ = u₂` on `[−2,2]²×[−π,π]` with a static
/// obstacle box `[−0.2,0.2]²` and safe shell outside `[−1.5,1.5]²`.
pub fn dubins_system() -> ControlAffineSystem {
    ControlAffineSystem::new(
        BenchmarkId::DubinsCar.name(),
        vec![Interval::new(-2.0, 2.0), Interval::new(-2.0, 2.0), Interval::new(-PI, PI)],
        2,
        Some(vec![Interval::new(0.0, 1.0), Interval::new(-1.0, 1.0)]),
        Arc::new(Dubins),
    )
    .and_then(|s| s.with_default_reference(vec![1.0, 0.0]))
    .expect("built-in system is valid")
}

struct PlanarAerial;

const AERIAL_MASS: f64 = 1.0;
const AERIAL_INV_LJ: f64 = 1.0;

impl ControlAffine for PlanarAerial {
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[x[3], x[4], x[5], 0.0, -GRAVITY, 0.0]);
    }
    fn actuation(&self, x: &[f64], out: &mut [f64]) {
        let (s, c) = x[2].sin_cos();
        out.fill(0.0);
        out[6] = -s / AERIAL_MASS;
        out[7] = -s / AERIAL_MASS;
        out[8] = c / AERIAL_MASS;
        out[9] = c / AERIAL_MASS;
        out[10] = AERIAL_INV_LJ;
        out[11] = -AERIAL_INV_LJ;
    }
    fn label(&self, x: &[f64]) -> Label {
        let (ax, ay) = (x[0].abs(), x[1].abs());
        if ax <= 0.8 && ay <= 0.8 {
            Label::Safe
        } else if ax > 1.0 || ay > 1.0 {
            Label::Unsafe
        } else {
            Label::Unlabeled
        }
    }
}

/// Planar quadrotor `(x₁, x₂, φ, ẋ₁, ẋ₂, φ̇)` with two motor thrusts, normalised to unit
/// mass and `1/(LJ) = 1`. Safe inside `[−0.8,0.8]²`, unsafe outside the `[−1,1]²`
/// geofence.
pub fn planar_aerial_system() -> ControlAffineSystem {
    let hover = GRAVITY * AERIAL_MASS / 2.0;
    let mut bounds = vec![Interval::new(-2.0, 2.0), Interval::new(-2.0, 2.0), Interval::new(-PI, PI)];
    bounds.extend([Interval::new(-2.0, 2.0); 3]);
    ControlAffineSystem::new(
        BenchmarkId::PlanarAerial.name(),
        bounds,
        2,
        Some(vec![Interval::new(0.0, 2.0 * AERIAL_MASS * GRAVITY); 2]),
        Arc::new(PlanarAerial),
    )
    .and_then(|s| s.with_default_reference(vec![hover, hover]))
    .expect("built-in system is valid")
    .with_exit_unsafe(true)
}

struct Quadruped {
    params: SystemParams,
}

impl ControlAffine for Quadruped {
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let p = &self.params;
        out.copy_from_slice(&[0.0, 0.0, 0.0, x[5], x[6], p.k1, p.k2, p.kr]);
    }
    fn actuation(&self, x: &[f64], out: &mut [f64]) {
        let (s, c) = x[2].sin_cos();
        out.fill(0.0);
        out[0] = c;
        out[2] = s;
        out[5] = 1.0;
    }
    fn label(&self, x: &[f64]) -> Label {
        crate::sampling::collision_cone_label(x, self.params.robot_speed_nominal, self.params.cone_margin)
    }
}

/// Reduced-order quadruped `(x₁, x₂, φ, x_o1, x_o2, v_o1, v_o2, r)` avoiding a moving
/// circular obstacle; labels come from the collision cone.
pub fn quadruped_system(k1: f64, k2: f64, kr: f64) -> ControlAffineSystem {
    quadruped_system_with(&SystemParams { k1, k2, kr, ..SystemParams::default() })
}

pub fn quadruped_system_with(params: &SystemParams) -> ControlAffineSystem {
    let mut bounds = vec![Interval::new(-2.0, 2.0), Interval::new(-2.0, 2.0), Interval::new(-PI, PI)];
    bounds.extend([Interval::new(-2.0, 2.0); 2]);
    bounds.extend([Interval::new(-1.0, 1.0); 2]);
    bounds.push(Interval::new(0.5, 1.0));
    ControlAffineSystem::new(
        BenchmarkId::QuadrupedDynamicObstacle.name(),
        bounds,
        2,
        Some(vec![Interval::new(0.0, 1.0), Interval::new(-1.0, 1.0)]),
        Arc::new(Quadruped { params: *params }),
    )
    .and_then(|s| s.with_default_reference(vec![1.0, 0.0]))
    .expect("built-in system is valid")
}

/// One-dimensional single integrator `ẋ = u` on `[−2, 2]`, safe for `|x| ≤ 1`, unsafe for
/// `|x| > 1.5`. Useful as a small sanity benchmark.
pub fn integrator_1d_system() -> ControlAffineSystem {
    let model = FnModel::new(
        |_, out| out[0] = 0.0,
        |_, out| out[0] = 1.0,
        |x| {
            if x[0].abs() <= 1.0 {
                Label::Safe
            } else if x[0].abs() > 1.5 {
                Label::Unsafe
            } else {
                Label::Unlabeled
            }
        },
    );
    ControlAffineSystem::new(
        "integrator_1d",
        vec![Interval::new(-2.0, 2.0)],
        1,
        Some(vec![Interval::new(-1.0, 1.0)]),
        Arc::new(model),
    )
    .and_then(|s| s.with_default_reference(vec![1.0]))
    .expect("built-in system is valid")
}

type Builder = Arc<dyn Fn(&SystemParams) -> ControlAffineSystem + Send + Sync>;

/// Name → system constructor map used by configuration files.
#[derive(Clone)]
pub struct SystemRegistry {
    builders: BTreeMap<String, Builder>,
}

impl Default for SystemRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl SystemRegistry {
    pub fn empty() -> Self {
        Self { builders: BTreeMap::new() }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        for b in BenchmarkId::ALL {
            r.register(b.name(), move |p| b.build(p));
        }
        r.register("integrator_1d", |_| integrator_1d_system());
        r
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        builder: impl Fn(&SystemParams) -> ControlAffineSystem + Send + Sync + 'static,
    ) {
        self.builders.insert(name.into(), Arc::new(builder));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.builders.keys().map(String::as_str)
    }

    pub fn build(&self, name: &str, params: &SystemParams) -> Result<ControlAffineSystem> {
        self.builders
            .get(name)
            .map(|b| b(params))
            .ok_or_else(|| Error::UnknownSystem(name.to_string()))
    }
}
