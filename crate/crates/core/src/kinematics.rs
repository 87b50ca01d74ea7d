//! Class-specific kinematic layers.
//!
//! Unbounded network outputs are squashed into the control box with a scaled
//! `tanh`, then rolled out with an explicit Euler integrator:
//!
//! | model               | controls        | state update                                          |
//! |---------------------|-----------------|-------------------------------------------------------|
//! | unicycle            | `(a, κ)`        | `v' = clamp(v + a dt)`, `θ' = θ + κ v dt`, `p' = p + v (cos θ, sin θ) dt` |
//! | single integrator   | `(vx, vy)`      | `p' = p + u dt`                                       |
//! | double integrator   | `(ax, ay)`      | `v' = v + a dt`, `p' = p + v dt`                      |
//!
//! Integrator speeds and accelerations are bounded by norm: the per-axis
//! squashed box is projected radially onto the disc of the limit magnitude,
//! and the double integrator scales its acceleration along its own direction
//! so the next speed never exceeds the maximum.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{wrap_angle, Vec2};
use crate::scene::{AgentClass, V_HEADING_MIN};

/// Default top speed (m/s) for vehicles and cyclists.
pub const VEHICLE_V_MAX: f64 = 50.0;
/// Default reverse speed bound (m/s) for vehicles and cyclists.
pub const VEHICLE_V_MIN: f64 = -2.0;

#[derive(Debug, Error, PartialEq)]
pub enum KinematicsError {
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("dt must be positive, got {0}")]
    InvalidTimestep(f64),
    #[error("{model} requires a {what} limit")]
    MissingLimit { model: KinematicModel, what: &'static str },
    #[error("invalid limits: {0}")]
    InvalidLimits(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KinematicModel {
    Unicycle,
    SingleIntegrator,
    DoubleIntegrator,
}

impl KinematicModel {
    pub const ALL: [KinematicModel; 3] =
        [KinematicModel::Unicycle, KinematicModel::SingleIntegrator, KinematicModel::DoubleIntegrator];

    pub fn as_str(self) -> &'static str {
        match self {
            KinematicModel::Unicycle => "unicycle",
            KinematicModel::SingleIntegrator => "single_integrator",
            KinematicModel::DoubleIntegrator => "double_integrator",
        }
    }
}

impl std::fmt::Display for KinematicModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Closed interval `[lo, hi]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn symmetric(bound: f64) -> Self {
        Interval::new(-bound, bound)
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    /// Largest magnitude in the interval.
    pub fn magnitude_bound(&self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    fn is_valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi
    }
}

impl From<[f64; 2]> for Interval {
    fn from(v: [f64; 2]) -> Self {
        Interval::new(v[0], v[1])
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

/// Control and state bounds for one class/model pairing. Absent limits are
/// unconstrained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KinematicLimits {
    /// Acceleration (m/s²).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accel: Option<Interval>,
    /// Curvature (1/m).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curvature: Option<Interval>,
    /// Signed speed along the heading for the unicycle; for the integrators
    /// only the magnitude bound applies.
    pub speed: Interval,
}

impl KinematicLimits {
    pub fn validate(&self) -> Result<(), KinematicsError> {
        for (name, iv) in [("accel", self.accel), ("curvature", self.curvature), ("speed", Some(self.speed))] {
            if let Some(iv) = iv {
                if !iv.is_valid() {
                    return Err(KinematicsError::InvalidLimits(format!("{name} must satisfy lo < hi, got {:?}", iv)));
                }
            }
        }
        Ok(())
    }

    /// Per-channel squashing bounds for `model`.
    pub fn channel_bounds(&self, model: KinematicModel) -> Result<[Interval; 2], KinematicsError> {
        let need = |iv: Option<Interval>, what| iv.ok_or(KinematicsError::MissingLimit { model, what });
        match model {
            KinematicModel::Unicycle => Ok([need(self.accel, "accel")?, need(self.curvature, "curvature")?]),
            KinematicModel::SingleIntegrator => {
                let v = Interval::symmetric(self.speed.magnitude_bound());
                Ok([v, v])
            }
            KinematicModel::DoubleIntegrator => {
                let a = need(self.accel, "accel")?;
                Ok([a, a])
            }
        }
    }
}

/// Default limits for a class/model pairing.
///
/// Vehicles and cyclists share the car limits (acceleration ±8 m/s²,
/// curvature ±0.3 1/m, speed in [-2, 50] m/s). Pedestrians get ±8 m/s² and
/// speed in [0, 10] m/s; the single integrator drops the acceleration limit
/// and the pedestrian unicycle borrows the vehicle curvature bound.
pub fn default_limits(class: AgentClass, model: KinematicModel) -> KinematicLimits {
    let accel = Some(Interval::new(-8.0, 8.0));
    let curvature = Some(Interval::new(-0.3, 0.3));
    match class {
        AgentClass::Vehicle | AgentClass::Cyclist => KinematicLimits {
            accel,
            curvature: (model == KinematicModel::Unicycle).then_some(curvature).flatten(),
            speed: Interval::new(VEHICLE_V_MIN, VEHICLE_V_MAX),
        },
        AgentClass::Pedestrian => {
            let speed = Interval::new(0.0, 10.0);
            match model {
                KinematicModel::SingleIntegrator => KinematicLimits { accel: None, curvature: None, speed },
                KinematicModel::DoubleIntegrator => KinematicLimits { accel, curvature: None, speed },
                KinematicModel::Unicycle => KinematicLimits { accel, curvature, speed },
            }
        }
    }
}

/// Rollout state. The unicycle's signed speed is the projection of `(vx, vy)`
/// onto the heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub vx: f64,
    pub vy: f64,
}

impl KinState {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn velocity(&self) -> Vec2 {
        Vec2::new(self.vx, self.vy)
    }

    /// Signed speed along the heading.
    pub fn speed_along_heading(&self) -> f64 {
        self.velocity().dot(Vec2::from_angle(self.theta))
    }

    fn unicycle(x: f64, y: f64, theta: f64, v: f64) -> Self {
        let dir = Vec2::from_angle(theta);
        KinState { x, y, theta, vx: v * dir.x, vy: v * dir.y }
    }

    fn integrator(p: Vec2, v: Vec2, held_theta: f64) -> Self {
        let theta = if v.norm() >= V_HEADING_MIN { v.angle() } else { held_theta };
        KinState { x: p.x, y: p.y, theta, vx: v.x, vy: v.y }
    }

    fn is_finite(&self) -> bool {
        [self.x, self.y, self.theta, self.vx, self.vy].iter().all(|v| v.is_finite())
    }
}

/// Raw network outputs and their squashed counterparts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSequence {
    pub model: KinematicModel,
    pub raw: Vec<[f64; 2]>,
    pub squashed: Vec<[f64; 2]>,
}

impl ControlSequence {
    pub fn from_raw(model: KinematicModel, raw: Vec<[f64; 2]>, limits: &KinematicLimits) -> Result<Self, KinematicsError> {
        let squashed = squash_controls(&raw, model, limits)?;
        Ok(ControlSequence { model, raw, squashed })
    }
}

fn squash_one(raw: f64, iv: Interval) -> f64 {
    iv.lo + (iv.hi - iv.lo) * (raw.tanh() + 1.0) * 0.5
}

/// Maps unbounded outputs into the control box with `lo + (hi - lo)(tanh(r) + 1)/2`.
pub fn squash_controls(
    raw: &[[f64; 2]],
    model: KinematicModel,
    limits: &KinematicLimits,
) -> Result<Vec<[f64; 2]>, KinematicsError> {
    let [b0, b1] = limits.channel_bounds(model)?;
    Ok(raw.iter().map(|r| [squash_one(r[0], b0), squash_one(r[1], b1)]).collect())
}

/// Element-wise derivative of [`squash_controls`] with respect to the raw input.
pub fn squash_derivative(
    raw: &[[f64; 2]],
    model: KinematicModel,
    limits: &KinematicLimits,
) -> Result<Vec<[f64; 2]>, KinematicsError> {
    let [b0, b1] = limits.channel_bounds(model)?;
    let d = |r: f64, iv: Interval| 0.5 * (iv.hi - iv.lo) * (1.0 - r.tanh().powi(2));
    Ok(raw.iter().map(|r| [d(r[0], b0), d(r[1], b1)]).collect())
}

/// Which projections fired during one Euler step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepClip {
    /// Control channel `c` was outside its box and got clamped.
    pub channel: [bool; 2],
    /// Speed or acceleration magnitude projection engaged.
    pub state: bool,
}

impl StepClip {
    pub fn any(&self) -> bool {
        self.channel[0] || self.channel[1] || self.state
    }
}

/// Projects an initial state onto the model's feasible speed set.
pub fn project_initial(model: KinematicModel, s: &KinState, limits: &KinematicLimits) -> (KinState, bool) {
    match model {
        KinematicModel::Unicycle => {
            let v = s.speed_along_heading();
            let clamped = limits.speed.clamp(v);
            (KinState::unicycle(s.x, s.y, wrap_angle(s.theta), clamped), clamped != v)
        }
        KinematicModel::SingleIntegrator | KinematicModel::DoubleIntegrator => {
            let vmax = limits.speed.magnitude_bound();
            let v = s.velocity();
            let n = v.norm();
            if n > vmax {
                let v = v * (vmax / n);
                (KinState { vx: v.x, vy: v.y, ..*s }, true)
            } else {
                (*s, false)
            }
        }
    }
}

fn radial_clip(v: Vec2, bound: f64) -> (Vec2, bool) {
    let n = v.norm();
    if n > bound {
        (v * (bound / n), true)
    } else {
        (v, false)
    }
}

/// Largest `s ∈ [0, 1]` with `|v + s w| <= vmax`, assuming `|v| <= vmax`.
fn speed_limited_scale(v: Vec2, w: Vec2, vmax: f64) -> f64 {
    let ww = w.norm_sq();
    if ww == 0.0 || (v + w).norm() <= vmax {
        return 1.0;
    }
    let vw = v.dot(w);
    let disc = vw * vw + ww * (vmax * vmax - v.norm_sq());
    if disc <= 0.0 {
        return 0.0;
    }
    ((-vw + disc.sqrt()) / ww).clamp(0.0, 1.0)
}

/// One Euler step. Controls outside the box are clamped into it.
pub fn step(
    model: KinematicModel,
    s: &KinState,
    u: [f64; 2],
    dt: f64,
    limits: &KinematicLimits,
) -> Result<(KinState, StepClip), KinematicsError> {
    let [b0, b1] = limits.channel_bounds(model)?;
    let u0 = b0.clamp(u[0]);
    let u1 = b1.clamp(u[1]);
    let mut clip = StepClip { channel: [u0 != u[0], u1 != u[1]], state: false };
    let next = match model {
        KinematicModel::Unicycle => {
            let v = s.speed_along_heading();
            let v_next_raw = v + u0 * dt;
            let v_next = limits.speed.clamp(v_next_raw);
            clip.state = v_next != v_next_raw;
            let theta_next = wrap_angle(s.theta + u1 * v * dt);
            let p = s.position() + Vec2::from_angle(s.theta) * (v * dt);
            KinState::unicycle(p.x, p.y, theta_next, v_next)
        }
        KinematicModel::SingleIntegrator => {
            let (u, clipped) = radial_clip(Vec2::new(u0, u1), limits.speed.magnitude_bound());
            clip.state = clipped;
            KinState::integrator(s.position() + u * dt, u, s.theta)
        }
        KinematicModel::DoubleIntegrator => {
            let accel = limits.accel.ok_or(KinematicsError::MissingLimit { model, what: "accel" })?;
            let (a, mag_clipped) = radial_clip(Vec2::new(u0, u1), accel.magnitude_bound());
            let v = s.velocity();
            let scale = speed_limited_scale(v, a * dt, limits.speed.magnitude_bound());
            clip.state = mag_clipped || scale < 1.0;
            let v_next = v + a * (scale * dt);
            KinState::integrator(s.position() + v * dt, v_next, s.theta)
        }
    };
    Ok((next, clip))
}

/// Result of a rollout: `states[t]` is the state after applying control `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub initial: KinState,
    pub initial_projected: bool,
    pub states: Vec<KinState>,
    pub clips: Vec<StepClip>,
}

impl Rollout {
    /// Initial position followed by every rolled-out position.
    pub fn positions(&self) -> Vec<Vec2> {
        std::iter::once(self.initial.position()).chain(self.states.iter().map(|s| s.position())).collect()
    }
}

fn check_inputs(initial: &KinState, controls: &[[f64; 2]], dt: f64) -> Result<(), KinematicsError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(KinematicsError::InvalidTimestep(dt));
    }
    if !initial.is_finite() {
        return Err(KinematicsError::NonFiniteInput("initial state".into()));
    }
    if let Some(t) = controls.iter().position(|u| !(u[0].is_finite() && u[1].is_finite())) {
        return Err(KinematicsError::NonFiniteInput(format!("control at step {t}")));
    }
    Ok(())
}

/// Rolls squashed controls forward from `initial`. The initial speed is first
/// projected onto the feasible set so every produced step respects the limits.
pub fn rollout(
    model: KinematicModel,
    initial: &KinState,
    controls: &[[f64; 2]],
    dt: f64,
    limits: &KinematicLimits,
) -> Result<Rollout, KinematicsError> {
    check_inputs(initial, controls, dt)?;
    limits.validate()?;
    let (start, initial_projected) = project_initial(model, initial, limits);
    let mut states = Vec::with_capacity(controls.len());
    let mut clips = Vec::with_capacity(controls.len());
    let mut s = start;
    for u in controls {
        let (next, clip) = step(model, &s, *u, dt, limits)?;
        states.push(next);
        clips.push(clip);
        s = next;
    }
    Ok(Rollout { initial: start, initial_projected, states, clips })
}

/// Dense Jacobian of rolled-out positions with respect to squashed controls.
///
/// Row `2 t' + i` is coordinate `i` (x or y) of `states[t']`; column `2 t + c`
/// is channel `c` of control `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Jacobian {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }
}

/// Analytic Jacobian by forward-mode propagation through the Euler recursion.
///
/// A projection that engages at a step contributes zero derivative through the
/// clipped quantity (a clamped control channel, a clamped unicycle speed, or
/// the scaled integrator velocity/acceleration).
pub fn rollout_jacobian(
    model: KinematicModel,
    initial: &KinState,
    controls: &[[f64; 2]],
    dt: f64,
    limits: &KinematicLimits,
) -> Result<Jacobian, KinematicsError> {
    let roll = rollout(model, initial, controls, dt, limits)?;
    let n = controls.len();
    let mut jac = Jacobian { rows: 2 * n, cols: 2 * n, data: vec![0.0; 4 * n * n] };
    let state_at = |t: usize| if t == 0 { roll.initial } else { roll.states[t - 1] };

    for t in 0..n {
        for c in 0..2 {
            if roll.clips[t].channel[c] {
                continue;
            }
            // Tangent: (dx, dy, d3, d4) where d3, d4 are (dθ, dv) for the
            // unicycle and (dvx, dvy) for the integrators.
            let mut tan = [0.0f64; 4];
            for k in t..n {
                let s = state_at(k);
                let clip = roll.clips[k];
                let du = if k == t {
                    let mut du = [0.0; 2];
                    du[c] = 1.0;
                    du
                } else {
                    [0.0; 2]
                };
                tan = match model {
                    KinematicModel::Unicycle => {
                        let [dx, dy, dth, dv] = tan;
                        let v = s.speed_along_heading();
                        let kappa = limits.curvature.map_or(0.0, |iv| iv.clamp(controls[k][1]));
                        let (sin, cos) = s.theta.sin_cos();
                        [
                            dx + dt * (cos * dv - v * sin * dth),
                            dy + dt * (sin * dv + v * cos * dth),
                            dth + dt * (kappa * dv + v * du[1]),
                            if clip.state { 0.0 } else { dv + dt * du[0] },
                        ]
                    }
                    KinematicModel::SingleIntegrator => {
                        let scale = if clip.state { 0.0 } else { dt };
                        [tan[0] + scale * du[0], tan[1] + scale * du[1], 0.0, 0.0]
                    }
                    KinematicModel::DoubleIntegrator => {
                        let [dx, dy, dvx, dvy] = tan;
                        let scale = if clip.state { 0.0 } else { dt };
                        [dx + dt * dvx, dy + dt * dvy, dvx + scale * du[0], dvy + scale * du[1]]
                    }
                };
                jac.set(2 * k, 2 * t + c, tan[0]);
                jac.set(2 * k + 1, 2 * t + c, tan[1]);
            }
        }
    }
    Ok(jac)
}

/// Limit overrides keyed by class, then model; missing entries fall back to
/// [`default_limits`].
///
/// ```toml
/// [pedestrian.double_integrator]
/// accel = [-6.0, 6.0]
/// speed = [0.0, 8.0]
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LimitsTable(pub BTreeMap<AgentClass, BTreeMap<KinematicModel, KinematicLimits>>);

impl LimitsTable {
    pub fn get(&self, class: AgentClass, model: KinematicModel) -> KinematicLimits {
        self.0.get(&class).and_then(|m| m.get(&model)).copied().unwrap_or_else(|| default_limits(class, model))
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        for (class, models) in &self.0 {
            for (model, lim) in models {
                lim.validate()
                    .and_then(|_| lim.channel_bounds(*model).map(|_| ()))
                    .map_err(|e| KinematicsError::InvalidLimits(format!("{class}.{model}: {e}")))?;
            }
        }
        Ok(())
    }
}

/// Rollout input: raw network outputs for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlRecord {
    pub scene_id: String,
    pub agent_id: String,
    pub class: AgentClass,
    pub model: KinematicModel,
    pub dt: f64,
    pub initial: KinState,
    pub raw: Vec<[f64; 2]>,
}

/// A rolled-out trajectory. `raw` is absent for controls that did not come
/// from network outputs (for example fitted ones).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutRecord {
    pub scene_id: String,
    pub agent_id: String,
    pub class: AgentClass,
    pub model: KinematicModel,
    pub dt: f64,
    pub initial: KinState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<Vec<[f64; 2]>>,
    pub squashed: Vec<[f64; 2]>,
    pub states: Vec<KinState>,
}

impl RolloutRecord {
    /// Initial position followed by every rolled-out position.
    pub fn positions(&self) -> Vec<Vec2> {
        std::iter::once(self.initial.position()).chain(self.states.iter().map(|s| s.position())).collect()
    }
}

/// Squashes and rolls out one control record.
pub fn rollout_record(rec: &ControlRecord, limits: &KinematicLimits) -> Result<RolloutRecord, KinematicsError> {
    if let Some(t) = rec.raw.iter().position(|u| !(u[0].is_finite() && u[1].is_finite())) {
        return Err(KinematicsError::NonFiniteInput(format!("raw control at step {t}")));
    }
    let seq = ControlSequence::from_raw(rec.model, rec.raw.clone(), limits)?;
    let r = rollout(rec.model, &rec.initial, &seq.squashed, rec.dt, limits)?;
    Ok(RolloutRecord {
        scene_id: rec.scene_id.clone(),
        agent_id: rec.agent_id.clone(),
        class: rec.class,
        model: rec.model,
        dt: rec.dt,
        initial: r.initial,
        raw: Some(seq.raw),
        squashed: seq.squashed,
        states: r.states,
    })
}
