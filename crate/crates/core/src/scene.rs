//! Scene data model, JSON Lines ingestion, neighbor selection and synthetic
//! scene generation.
//!
//! A scene stores one track per agent over `t_obs + t_horizon` steps. The last
//! observed step (`t_obs - 1`) is the reference time for neighbor selection and
//! for the interaction priors.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{wrap_angle, Vec2};

/// Below this speed (m/s) the heading is held from the last moving step.
pub const V_HEADING_MIN: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("scene {scene_id}: {reason}")]
    InvariantViolation { scene_id: String, reason: String },
    #[error("unknown agent {0}")]
    UnknownAgent(String),
    #[error("agent {0} is not valid at the last observed step")]
    NotValidAtReference(String),
    #[error("synthetic spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentClass {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentClass {
    pub const ALL: [AgentClass; 3] = [AgentClass::Vehicle, AgentClass::Pedestrian, AgentClass::Cyclist];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentClass::Vehicle => "vehicle",
            AgentClass::Pedestrian => "pedestrian",
            AgentClass::Cyclist => "cyclist",
        }
    }
}

impl std::fmt::Display for AgentClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Pose and velocity of one agent at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub heading: f64,
    pub valid: bool,
}

impl AgentState {
    pub const INVALID: AgentState = AgentState { x: 0.0, y: 0.0, vx: 0.0, vy: 0.0, heading: 0.0, valid: false };

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn velocity(&self) -> Vec2 {
        Vec2::new(self.vx, self.vy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrack {
    pub agent_id: String,
    pub class: AgentClass,
    pub states: Vec<AgentState>,
    /// Generating motion profile, set for synthetic tracks.
    pub profile: Option<String>,
}

impl AgentTrack {
    pub fn is_valid_at(&self, t: usize) -> bool {
        self.states.get(t).is_some_and(|s| s.valid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub dt: f64,
    pub t_obs: usize,
    pub t_horizon: usize,
    pub tracks: Vec<AgentTrack>,
    pub focal_ids: Vec<String>,
}

/// The K nearest neighbors of a focal agent at the last observed step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSet {
    pub focal_id: String,
    pub neighbor_ids: Vec<String>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.t_obs + self.t_horizon
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    /// Index of the last observed step.
    pub fn reference_step(&self) -> usize {
        self.t_obs - 1
    }

    pub fn track(&self, agent_id: &str) -> Option<&AgentTrack> {
        self.tracks.iter().find(|t| t.agent_id == agent_id)
    }

    /// State of `agent_id` at the last observed step; fails if the agent is
    /// unknown or occluded there.
    pub fn reference_state(&self, agent_id: &str) -> Result<&AgentState, SceneError> {
        let track = self.track(agent_id).ok_or_else(|| SceneError::UnknownAgent(agent_id.to_string()))?;
        let state = &track.states[self.reference_step()];
        if !state.valid {
            return Err(SceneError::NotValidAtReference(agent_id.to_string()));
        }
        Ok(state)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let fail = |reason: String| SceneError::InvariantViolation { scene_id: self.scene_id.clone(), reason };
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(fail(format!("dt must be positive, got {}", self.dt)));
        }
        if self.t_obs < 1 || self.t_horizon < 1 {
            return Err(fail(format!("t_obs and t_horizon must be >= 1, got {} and {}", self.t_obs, self.t_horizon)));
        }
        let mut seen = HashSet::new();
        for track in &self.tracks {
            if !seen.insert(track.agent_id.as_str()) {
                return Err(fail(format!("duplicate agent_id {}", track.agent_id)));
            }
            if track.states.len() != self.len() {
                return Err(fail(format!(
                    "track {} has {} states, expected {}",
                    track.agent_id,
                    track.states.len(),
                    self.len()
                )));
            }
            for (t, s) in track.states.iter().enumerate() {
                if s.valid {
                    let finite = [s.x, s.y, s.vx, s.vy, s.heading].iter().all(|v| v.is_finite());
                    if !finite {
                        return Err(fail(format!("track {} step {t}: non-finite state", track.agent_id)));
                    }
                    if !(s.heading > -std::f64::consts::PI && s.heading <= std::f64::consts::PI) {
                        return Err(fail(format!("track {} step {t}: heading {} outside (-pi, pi]", track.agent_id, s.heading)));
                    }
                } else if *s != AgentState::INVALID {
                    return Err(fail(format!("track {} step {t}: invalid step must carry zeroed fields", track.agent_id)));
                }
            }
        }
        let mut focal_seen = HashSet::new();
        for id in &self.focal_ids {
            if !focal_seen.insert(id.as_str()) {
                return Err(fail(format!("duplicate focal id {id}")));
            }
            let track = self.track(id).ok_or_else(|| fail(format!("focal id {id} has no track")))?;
            if !track.is_valid_at(self.reference_step()) {
                return Err(fail(format!("focal agent {id} is not valid at step {}", self.reference_step())));
            }
            // Once observed, a focal agent must stay observed up to the reference step.
            let observed = &track.states[..self.t_obs];
            if let Some(first) = observed.iter().position(|s| s.valid) {
                if observed[first..].iter().any(|s| !s.valid) {
                    return Err(fail(format!("focal agent {id} has a gap in its observed window")));
                }
            }
        }
        Ok(())
    }
}

/// K nearest valid agents to `focal` at the last observed step, ascending by
/// distance with ties broken by agent id.
pub fn knn_neighbors(scene: &Scene, focal: &str, k: usize) -> Result<NeighborSet, SceneError> {
    let origin = scene.reference_state(focal)?.position();
    let t = scene.reference_step();
    let mut candidates: Vec<(f64, &str)> = scene
        .tracks
        .iter()
        .filter(|tr| tr.agent_id != focal && tr.states[t].valid)
        .map(|tr| (tr.states[t].position().distance(origin), tr.agent_id.as_str()))
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    candidates.truncate(k);
    Ok(NeighborSet {
        focal_id: focal.to_string(),
        neighbor_ids: candidates.into_iter().map(|(_, id)| id.to_string()).collect(),
    })
}

// ---------------------------------------------------------------------------
// JSON Lines wire format

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateRecord {
    t: usize,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    heading: f64,
    valid: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackRecord {
    agent_id: String,
    class: AgentClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    profile: Option<String>,
    states: Vec<StateRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    scene_id: String,
    dt: f64,
    t_obs: usize,
    t_horizon: usize,
    focal_ids: Vec<String>,
    tracks: Vec<TrackRecord>,
}

impl From<&Scene> for SceneRecord {
    fn from(scene: &Scene) -> Self {
        SceneRecord {
            scene_id: scene.scene_id.clone(),
            dt: scene.dt,
            t_obs: scene.t_obs,
            t_horizon: scene.t_horizon,
            focal_ids: scene.focal_ids.clone(),
            tracks: scene
                .tracks
                .iter()
                .map(|tr| TrackRecord {
                    agent_id: tr.agent_id.clone(),
                    class: tr.class,
                    profile: tr.profile.clone(),
                    states: tr
                        .states
                        .iter()
                        .enumerate()
                        .map(|(t, s)| StateRecord { t, x: s.x, y: s.y, vx: s.vx, vy: s.vy, heading: s.heading, valid: s.valid })
                        .collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<SceneRecord> for Scene {
    type Error = SceneError;

    fn try_from(rec: SceneRecord) -> Result<Self, SceneError> {
        let mut tracks = Vec::with_capacity(rec.tracks.len());
        for tr in rec.tracks {
            for (i, s) in tr.states.iter().enumerate() {
                if s.t != i {
                    return Err(SceneError::InvariantViolation {
                        scene_id: rec.scene_id.clone(),
                        reason: format!("track {}: state {i} has t = {}, steps must be listed in order from 0", tr.agent_id, s.t),
                    });
                }
            }
            tracks.push(AgentTrack {
                agent_id: tr.agent_id,
                class: tr.class,
                profile: tr.profile,
                states: tr
                    .states
                    .into_iter()
                    .map(|s| AgentState { x: s.x, y: s.y, vx: s.vx, vy: s.vy, heading: s.heading, valid: s.valid })
                    .collect(),
            });
        }
        let scene = Scene {
            scene_id: rec.scene_id,
            dt: rec.dt,
            t_obs: rec.t_obs,
            t_horizon: rec.t_horizon,
            tracks,
            focal_ids: rec.focal_ids,
        };
        scene.validate()?;
        Ok(scene)
    }
}

/// Parses one scene line; `line` is 1-based and used for error context.
pub fn parse_scene_line(text: &str, line: usize) -> Result<Scene, SceneError> {
    let rec: SceneRecord =
        serde_json::from_str(text).map_err(|e| SceneError::Parse { line, reason: e.to_string() })?;
    Scene::try_from(rec)
}

pub fn scene_to_json(scene: &Scene) -> String {
    serde_json::to_string(&SceneRecord::from(scene)).expect("scene records always serialize")
}

/// Reads a JSON Lines scene file. Blank lines are ignored; any malformed
/// record fails the whole load.
pub fn load_scenes(path: impl AsRef<Path>) -> Result<Vec<Scene>, SceneError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            lines.push((i + 1, line));
        }
    }
    let parsed: Vec<Result<Scene, SceneError>> = lines.par_iter().map(|(n, l)| parse_scene_line(l, *n)).collect();
    parsed.into_iter().collect()
}

pub fn save_scenes(scenes: &[Scene], path: impl AsRef<Path>) -> Result<(), SceneError> {
    let mut out = BufWriter::new(File::create(path)?);
    for scene in scenes {
        out.write_all(scene_to_json(scene).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic generation

/// A scalar parameter that is either fixed or drawn uniformly from `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Param {
    Fixed(f64),
    Range([f64; 2]),
}

impl Param {
    fn check(&self, name: &str) -> Result<(), SceneError> {
        match *self {
            Param::Fixed(v) if v.is_finite() => Ok(()),
            Param::Range([lo, hi]) if lo.is_finite() && hi.is_finite() && lo <= hi => Ok(()),
            _ => Err(SceneError::Spec(format!("parameter {name} must be finite (and lo <= hi for ranges)"))),
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            Param::Fixed(v) => v,
            Param::Range([lo, hi]) if lo == hi => lo,
            Param::Range([lo, hi]) => rng.gen_range(lo..=hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MotionProfile {
    ConstantVelocity { speed: Param },
    /// Speed changes linearly and stops at zero when braking.
    ConstantAcceleration { speed: Param, accel: Param },
    CircularArc { speed: Param, curvature: Param },
    /// Constant velocity with an instantaneous sideways jump of `offset`
    /// meters (to the left of travel) at step `at_step`; heading is unchanged.
    LateralStep {
        speed: Param,
        offset: Param,
        #[serde(default)]
        at_step: Option<usize>,
    },
    /// Speed follows `speed * (1 - cos(2π t / period)) / 2`.
    StopAndGo { speed: Param, period: Param },
}

impl MotionProfile {
    pub fn name(&self) -> &'static str {
        match self {
            MotionProfile::ConstantVelocity { .. } => "constant_velocity",
            MotionProfile::ConstantAcceleration { .. } => "constant_acceleration",
            MotionProfile::CircularArc { .. } => "circular_arc",
            MotionProfile::LateralStep { .. } => "lateral_step",
            MotionProfile::StopAndGo { .. } => "stop_and_go",
        }
    }

    fn check(&self) -> Result<(), SceneError> {
        match self {
            MotionProfile::ConstantVelocity { speed } => speed.check("speed"),
            MotionProfile::ConstantAcceleration { speed, accel } => {
                speed.check("speed")?;
                accel.check("accel")
            }
            MotionProfile::CircularArc { speed, curvature } => {
                speed.check("speed")?;
                curvature.check("curvature")
            }
            MotionProfile::LateralStep { speed, offset, .. } => {
                speed.check("speed")?;
                offset.check("offset")
            }
            MotionProfile::StopAndGo { speed, period } => {
                speed.check("speed")?;
                period.check("period")?;
                let positive = match *period {
                    Param::Fixed(p) => p > 0.0,
                    Param::Range([lo, _]) => lo > 0.0,
                };
                if positive {
                    Ok(())
                } else {
                    Err(SceneError::Spec("stop_and_go period must be positive".into()))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentGroup {
    pub class: AgentClass,
    pub count: usize,
    pub profile: MotionProfile,
    /// Initial heading in radians; uniform over the circle when absent.
    #[serde(default)]
    pub heading: Option<Param>,
}

fn default_num_scenes() -> usize {
    1
}
fn default_dt() -> f64 {
    0.1
}
fn default_t_obs() -> usize {
    50
}
fn default_t_horizon() -> usize {
    60
}
fn default_focal_count() -> usize {
    1
}
fn default_area() -> f64 {
    30.0
}

/// Recipe for synthetic scenes. Every scene contains all agent groups; the
/// first `focal_count` tracks are focal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_num_scenes")]
    pub num_scenes: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_obs")]
    pub t_obs: usize,
    #[serde(default = "default_t_horizon")]
    pub t_horizon: usize,
    #[serde(default = "default_focal_count")]
    pub focal_count: usize,
    /// Half-width (m) of the square that initial positions are drawn from.
    #[serde(default = "default_area")]
    pub area: f64,
    pub agents: Vec<AgentGroup>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        let err = |m: &str| Err(SceneError::Spec(m.to_string()));
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return err("dt must be positive");
        }
        if self.t_obs < 1 || self.t_horizon < 1 {
            return err("t_obs and t_horizon must be >= 1");
        }
        if !(self.area.is_finite() && self.area >= 0.0) {
            return err("area must be finite and non-negative");
        }
        if self.agents.is_empty() {
            return err("at least one agent group is required");
        }
        for g in &self.agents {
            if g.count < 1 {
                return err("agent group counts must be >= 1");
            }
            g.profile.check()?;
            if let Some(h) = &g.heading {
                h.check("heading")?;
            }
        }
        let total: usize = self.agents.iter().map(|g| g.count).sum();
        if self.focal_count < 1 || self.focal_count > total {
            return err("focal_count must be between 1 and the total agent count");
        }
        Ok(())
    }
}

/// Generates `spec.num_scenes` scenes deterministically from `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Scene>, SceneError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scenes = Vec::with_capacity(spec.num_scenes);
    for s in 0..spec.num_scenes {
        let mut tracks = Vec::new();
        for group in &spec.agents {
            for _ in 0..group.count {
                let id = format!("agent_{:03}", tracks.len());
                tracks.push(generate_track(spec, group, id, &mut rng));
            }
        }
        let focal_ids = tracks.iter().take(spec.focal_count).map(|t| t.agent_id.clone()).collect();
        let scene = Scene {
            scene_id: format!("syn_{seed}_{s:05}"),
            dt: spec.dt,
            t_obs: spec.t_obs,
            t_horizon: spec.t_horizon,
            tracks,
            focal_ids,
        };
        scene.validate()?;
        scenes.push(scene);
    }
    Ok(scenes)
}

fn generate_track(spec: &SyntheticSpec, group: &AgentGroup, agent_id: String, rng: &mut ChaCha8Rng) -> AgentTrack {
    let n = spec.t_obs + spec.t_horizon;
    let dt = spec.dt;
    let start = Vec2::new(rng.gen_range(-spec.area..=spec.area), rng.gen_range(-spec.area..=spec.area));
    let heading0 = match &group.heading {
        Some(p) => p.sample(rng),
        None => rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
    };

    // Per-step speed and direction of travel.
    let (speeds, headings): (Vec<f64>, Vec<f64>) = match &group.profile {
        MotionProfile::ConstantVelocity { speed } => {
            let v = speed.sample(rng);
            ((0..n).map(|_| v).collect(), vec![heading0; n])
        }
        MotionProfile::ConstantAcceleration { speed, accel } => {
            let v0 = speed.sample(rng);
            let a = accel.sample(rng);
            ((0..n).map(|t| (v0 + a * t as f64 * dt).max(0.0)).collect(), vec![heading0; n])
        }
        MotionProfile::CircularArc { speed, curvature } => {
            let v = speed.sample(rng);
            let k = curvature.sample(rng);
            let mut h = Vec::with_capacity(n);
            let mut theta = heading0;
            for _ in 0..n {
                h.push(theta);
                theta += k * v * dt;
            }
            (vec![v; n], h)
        }
        MotionProfile::LateralStep { speed, .. } => {
            let v = speed.sample(rng);
            (vec![v; n], vec![heading0; n])
        }
        MotionProfile::StopAndGo { speed, period } => {
            let v = speed.sample(rng);
            let p = period.sample(rng);
            let speeds = (0..n)
                .map(|t| v * 0.5 * (1.0 - (2.0 * std::f64::consts::PI * t as f64 * dt / p).cos()))
                .collect();
            (speeds, vec![heading0; n])
        }
    };
    let jump = match &group.profile {
        MotionProfile::LateralStep { offset, at_step, .. } => {
            let off = offset.sample(rng);
            let step = at_step.unwrap_or(n / 2).min(n.saturating_sub(2));
            Some((step, Vec2::from_angle(heading0 + std::f64::consts::FRAC_PI_2) * off))
        }
        _ => None,
    };

    let mut states = Vec::with_capacity(n);
    let mut pos = start;
    let mut held = wrap_angle(heading0);
    for t in 0..n {
        let vel = Vec2::from_angle(headings[t]) * speeds[t];
        if speeds[t].abs() > V_HEADING_MIN {
            held = wrap_angle(headings[t]);
        }
        states.push(AgentState { x: pos.x, y: pos.y, vx: vel.x, vy: vel.y, heading: held, valid: true });
        pos = pos + vel * dt;
        if let Some((step, offset)) = jump {
            if t == step {
                pos = pos + offset;
            }
        }
    }
    AgentTrack { agent_id, class: group.class, states, profile: Some(group.profile.name().to_string()) }
}
