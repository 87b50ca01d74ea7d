//! Greedy reproduction of ground-truth trajectories under kinematic limits.
//!
//! At each step the oracle first tries the exact control that reaches the next
//! ground-truth position. When that control is outside the limits it falls
//! back to the best feasible control: an exact projection for the integrators,
//! a grid search plus coordinate descent for the unicycle.
//!
//! For the double integrator and the unicycle the next position is already
//! fixed by the current state, so the control chosen at step `t` aims at the
//! position two steps ahead. The last control of those models is a coast.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{wrap_angle, Vec2};
use crate::kinematics::{
    project_initial, step, KinState, KinematicLimits, KinematicModel, KinematicsError, LimitsTable, Rollout,
    RolloutRecord,
};
use crate::metrics::{ade, fde, MISS_THRESHOLD};
use crate::scene::{AgentClass, Scene};

/// Tolerance for accepting the exact control without clamping.
pub const EXACT_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ReproductionError {
    #[error("need at least 2 poses, got {0}")]
    TooShort(usize),
    #[error("dt must be positive, got {0}")]
    InvalidTimestep(f64),
    #[error("non-finite pose at step {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// Unicycle sub-step solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Grid points per control axis.
    pub grid: usize,
    /// Coordinate-descent sweeps after the grid search.
    pub refine_iters: usize,
    /// Heading weight in m²/rad².
    pub w_theta: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { grid: 51, refine_iters: 20, w_theta: 1.0 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), KinematicsError> {
        if self.grid < 2 || !(self.w_theta.is_finite() && self.w_theta >= 0.0) {
            return Err(KinematicsError::InvalidLimits(format!("invalid solver config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reproduction {
    pub model: KinematicModel,
    /// `N - 1` controls for `N` ground-truth poses.
    pub controls: Vec<[f64; 2]>,
    /// Whether the solver had to fall back to a constrained control.
    pub clamped: Vec<bool>,
    /// Number of controls chosen by the solver (excludes trailing coasts).
    pub decisions: usize,
    pub rollout: Rollout,
}

impl Reproduction {
    pub fn clamped_steps(&self) -> usize {
        self.clamped.iter().filter(|c| **c).count()
    }

    pub fn to_record(&self, scene_id: &str, agent_id: &str, class: AgentClass, dt: f64) -> RolloutRecord {
        RolloutRecord {
            scene_id: scene_id.to_string(),
            agent_id: agent_id.to_string(),
            class,
            model: self.model,
            dt,
            initial: self.rollout.initial,
            raw: None,
            squashed: self.controls.clone(),
            states: self.rollout.states.clone(),
        }
    }
}

/// Closest point to `target` in the intersection of the disc of radius `r1`
/// around `c1` and the disc of radius `r2` around the origin. `c1` must lie in
/// the second disc.
fn project_two_discs(target: Vec2, c1: Vec2, r1: f64, r2: f64) -> Vec2 {
    let in1 = |p: Vec2| p.distance(c1) <= r1;
    let in2 = |p: Vec2| p.norm() <= r2;
    if in1(target) && in2(target) {
        return target;
    }
    let p1 = {
        let d = target - c1;
        let n = d.norm();
        if n > r1 { c1 + d * (r1 / n) } else { target }
    };
    if in2(p1) {
        return p1;
    }
    let p2 = {
        let n = target.norm();
        if n > r2 { target * (r2 / n) } else { target }
    };
    if in1(p2) {
        return p2;
    }
    // Optimum lies on both boundaries.
    let d = c1.norm();
    if d == 0.0 {
        return p1;
    }
    let u = c1 * (1.0 / d);
    let along = (d * d - r1 * r1 + r2 * r2) / (2.0 * d);
    let h = (r2 * r2 - along * along).max(0.0).sqrt();
    let perp = Vec2::new(-u.y, u.x);
    let a = u * along + perp * h;
    let b = u * along - perp * h;
    if a.distance(target) <= b.distance(target) {
        a
    } else {
        b
    }
}

fn unicycle_cost(s: &KinState, u: [f64; 2], target: Vec2, theta_gt: f64, dt: f64, lim: &KinematicLimits, w: f64) -> f64 {
    let (next, _) = step(KinematicModel::Unicycle, s, u, dt, lim).expect("limits checked by caller");
    let p2 = next.position() + Vec2::from_angle(next.theta) * (next.speed_along_heading() * dt);
    (p2 - target).norm_sq() + w * wrap_angle(next.theta - theta_gt).powi(2)
}

fn unicycle_exact(s: &KinState, target: Vec2, dt: f64, lim: &KinematicLimits) -> Option<[f64; 2]> {
    let [ba, bk] = lim.channel_bounds(KinematicModel::Unicycle).ok()?;
    let v = s.speed_along_heading();
    let p1 = s.position() + Vec2::from_angle(s.theta) * (v * dt);
    let w = (target - p1) * (1.0 / dt);
    let speed = w.norm();
    // Either drive forward along w or reverse against it; take the smaller turn.
    let (theta_next, v_next) = if speed == 0.0 {
        (s.theta, 0.0)
    } else {
        let fwd = wrap_angle(w.angle() - s.theta);
        let rev = wrap_angle(w.angle() + std::f64::consts::PI - s.theta);
        if fwd.abs() <= rev.abs() { (s.theta + fwd, speed) } else { (s.theta + rev, -speed) }
    };
    let dtheta = theta_next - s.theta;
    let kappa = if dtheta == 0.0 {
        0.0
    } else if v.abs() * dt > 0.0 {
        dtheta / (v * dt)
    } else {
        return None;
    };
    let a = (v_next - v) / dt;
    let u = [a, kappa];
    if !(ba.contains(a) && bk.contains(kappa)) {
        return None;
    }
    let (next, clip) = step(KinematicModel::Unicycle, s, u, dt, lim).ok()?;
    let p2 = next.position() + Vec2::from_angle(next.theta) * (next.speed_along_heading() * dt);
    (!clip.state && p2.distance(target) <= EXACT_TOL).then_some(u)
}

fn unicycle_search(s: &KinState, target: Vec2, theta_gt: f64, dt: f64, lim: &KinematicLimits, cfg: &SolverConfig) -> [f64; 2] {
    let [ba, bk] = lim.channel_bounds(KinematicModel::Unicycle).expect("limits checked by caller");
    let cost = |u: [f64; 2]| unicycle_cost(s, u, target, theta_gt, dt, lim, cfg.w_theta);
    let g = cfg.grid;
    let at = |iv: crate::kinematics::Interval, i: usize| iv.lo + (iv.hi - iv.lo) * i as f64 / (g - 1) as f64;
    let mut best = [at(ba, 0), at(bk, 0)];
    let mut best_cost = f64::INFINITY;
    for i in 0..g {
        for j in 0..g {
            let u = [at(ba, i), at(bk, j)];
            let c = cost(u);
            if c < best_cost {
                best = u;
                best_cost = c;
            }
        }
    }
    let mut h = [(ba.hi - ba.lo) / (g - 1) as f64, (bk.hi - bk.lo) / (g - 1) as f64];
    let bounds = [ba, bk];
    for _ in 0..cfg.refine_iters {
        for c in 0..2 {
            let mut improved = false;
            for sign in [1.0, -1.0] {
                let mut u = best;
                u[c] = bounds[c].clamp(u[c] + sign * h[c]);
                let cu = cost(u);
                if cu < best_cost {
                    best = u;
                    best_cost = cu;
                    improved = true;
                    break;
                }
            }
            if !improved {
                h[c] *= 0.5;
            }
        }
    }
    best
}

fn coast(model: KinematicModel, lim: &KinematicLimits) -> Result<[f64; 2], KinematicsError> {
    let [b0, b1] = lim.channel_bounds(model)?;
    Ok([b0.clamp(0.0), b1.clamp(0.0)])
}

/// Fits a feasible control sequence that greedily tracks `gt`.
///
/// The reproduced state starts at the first pose with the velocity of the
/// first position difference (its projection on the heading for the
/// unicycle), projected into the speed limits if necessary.
pub fn invert_controls(
    model: KinematicModel,
    gt: &[Pose],
    dt: f64,
    limits: &KinematicLimits,
    cfg: &SolverConfig,
) -> Result<Reproduction, ReproductionError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(ReproductionError::InvalidTimestep(dt));
    }
    if gt.len() < 2 {
        return Err(ReproductionError::TooShort(gt.len()));
    }
    if let Some(t) = gt.iter().position(|p| !(p.x.is_finite() && p.y.is_finite() && p.theta.is_finite())) {
        return Err(ReproductionError::NonFinite(t));
    }
    limits.validate()?;
    cfg.validate()?;
    let [b0, b1] = limits.channel_bounds(model)?;

    let v0 = (gt[1].position() - gt[0].position()) * (1.0 / dt);
    let raw_init = KinState { x: gt[0].x, y: gt[0].y, theta: wrap_angle(gt[0].theta), vx: v0.x, vy: v0.y };
    let (init, initial_projected) = project_initial(model, &raw_init, limits);

    let n = gt.len() - 1;
    let mut controls = Vec::with_capacity(n);
    let mut clamped = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    let mut clips = Vec::with_capacity(n);
    let mut s = init;
    let decisions = match model {
        KinematicModel::SingleIntegrator => n,
        _ => n - 1,
    };
    for t in 0..n {
        let (u, was_clamped) = if t >= decisions {
            (coast(model, limits)?, false)
        } else {
            match model {
                KinematicModel::SingleIntegrator => {
                    let req = (gt[t + 1].position() - s.position()) * (1.0 / dt);
                    let vmax = limits.speed.magnitude_bound();
                    let n = req.norm();
                    if n <= vmax {
                        ([req.x, req.y], false)
                    } else {
                        let p = req * (vmax / n);
                        ([b0.clamp(p.x), b1.clamp(p.y)], true)
                    }
                }
                KinematicModel::DoubleIntegrator => {
                    let v = s.velocity();
                    let p1 = s.position() + v * dt;
                    let w = (gt[t + 2].position() - p1) * (1.0 / dt);
                    let amax = b0.magnitude_bound();
                    let vmax = limits.speed.magnitude_bound();
                    let a = (w - v) * (1.0 / dt);
                    if a.norm() <= amax + EXACT_TOL && w.norm() <= vmax + EXACT_TOL {
                        ([a.x, a.y], false)
                    } else {
                        let v_next = project_two_discs(w, v, amax * dt, vmax);
                        let a = (v_next - v) * (1.0 / dt);
                        ([b0.clamp(a.x), b1.clamp(a.y)], true)
                    }
                }
                KinematicModel::Unicycle => {
                    let target = gt[t + 2].position();
                    match unicycle_exact(&s, target, dt, limits) {
                        Some(u) => (u, false),
                        None => (unicycle_search(&s, target, gt[t + 1].theta, dt, limits, cfg), true),
                    }
                }
            }
        };
        let (next, clip) = step(model, &s, u, dt, limits)?;
        controls.push(u);
        clamped.push(was_clamped);
        states.push(next);
        clips.push(clip);
        s = next;
    }
    Ok(Reproduction {
        model,
        controls,
        clamped,
        decisions,
        rollout: Rollout { initial: init, initial_projected, states, clips },
    })
}

/// Models to evaluate per class; the first one is used for the `all` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelMap(pub BTreeMap<AgentClass, Vec<KinematicModel>>);

impl Default for ModelMap {
    fn default() -> Self {
        ModelMap(BTreeMap::from([
            (AgentClass::Vehicle, vec![KinematicModel::Unicycle]),
            (
                AgentClass::Pedestrian,
                vec![KinematicModel::DoubleIntegrator, KinematicModel::SingleIntegrator, KinematicModel::Unicycle],
            ),
            (AgentClass::Cyclist, vec![KinematicModel::Unicycle]),
        ]))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReproductionOptions {
    /// Reproduce every track with a fully valid horizon window, not only focal agents.
    pub include_all_tracks: bool,
    pub solver: SolverConfig,
}

/// A ground-truth window selected for reproduction.
#[derive(Debug, Clone, PartialEq)]
pub struct GtWindow {
    pub scene_id: String,
    pub agent_id: String,
    pub class: AgentClass,
    pub dt: f64,
    pub poses: Vec<Pose>,
}

/// Horizon windows, starting at the reference step, of focal agents (or all
/// agents) whose states are valid throughout. Returns the windows and the
/// number of candidates skipped for gaps.
pub fn gt_windows(scenes: &[Scene], include_all_tracks: bool) -> (Vec<GtWindow>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for sc in scenes {
        let r = sc.reference_step();
        for tr in &sc.tracks {
            if !include_all_tracks && !sc.focal_ids.contains(&tr.agent_id) {
                continue;
            }
            let win = &tr.states[r..];
            if win.len() < 2 || win.iter().any(|s| !s.valid) {
                skipped += 1;
                continue;
            }
            out.push(GtWindow {
                scene_id: sc.scene_id.clone(),
                agent_id: tr.agent_id.clone(),
                class: tr.class,
                dt: sc.dt,
                poses: win.iter().map(|s| Pose { x: s.x, y: s.y, theta: s.heading }).collect(),
            });
        }
    }
    (out, skipped)
}

/// Per-trajectory reproduction error.
#[derive(Debug, Clone, PartialEq)]
pub struct ReproducedTrack {
    pub window: usize,
    pub model: KinematicModel,
    pub ade: f64,
    pub fde: f64,
    pub reproduction: Reproduction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproductionRow {
    pub class: String,
    pub model: String,
    pub traj_count: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub clamped_rate: f64,
    pub clamped_steps: usize,
    pub control_steps: usize,
    pub initial_projected: usize,
    pub max_ade: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproductionReport {
    pub rows: Vec<ReproductionRow>,
    pub skipped_windows: usize,
}

#[derive(Default)]
struct Acc {
    n: usize,
    ade: f64,
    fde: f64,
    miss: usize,
    clamped: usize,
    decisions: usize,
    projected: usize,
    max_ade: f64,
}

impl Acc {
    fn add(&mut self, r: &ReproducedTrack) {
        self.n += 1;
        self.ade += r.ade;
        self.fde += r.fde;
        self.miss += usize::from(r.fde > MISS_THRESHOLD);
        self.clamped += r.reproduction.clamped_steps();
        self.decisions += r.reproduction.decisions;
        self.projected += usize::from(r.reproduction.rollout.initial_projected);
        self.max_ade = self.max_ade.max(r.ade);
    }

    fn row(&self, class: &str, model: &str) -> ReproductionRow {
        let n = self.n.max(1) as f64;
        ReproductionRow {
            class: class.to_string(),
            model: model.to_string(),
            traj_count: self.n,
            min_ade: self.ade / n,
            min_fde: self.fde / n,
            miss_rate: self.miss as f64 / n,
            clamped_rate: if self.decisions == 0 { 0.0 } else { self.clamped as f64 / self.decisions as f64 },
            clamped_steps: self.clamped,
            control_steps: self.decisions,
            initial_projected: self.projected,
            max_ade: self.max_ade,
        }
    }
}

/// Reproduces each window under every model listed for its class.
/// Results are in window order, then model order.
pub fn reproduce_windows(
    windows: &[GtWindow],
    models: &ModelMap,
    limits: &LimitsTable,
    solver: &SolverConfig,
) -> Result<Vec<ReproducedTrack>, ReproductionError> {
    let jobs: Vec<(usize, KinematicModel)> = windows
        .iter()
        .enumerate()
        .flat_map(|(i, w)| models.0.get(&w.class).into_iter().flatten().map(move |m| (i, *m)))
        .collect();
    jobs.par_iter()
        .map(|&(i, model)| {
            let w = &windows[i];
            let rep = invert_controls(model, &w.poses, w.dt, &limits.get(w.class, model), solver)?;
            let gt: Vec<Vec2> = w.poses[1..].iter().map(|p| p.position()).collect();
            let pred: Vec<Vec2> = rep.rollout.states.iter().map(|s| s.position()).collect();
            Ok(ReproducedTrack { window: i, model, ade: ade(&pred, &gt), fde: fde(&pred, &gt), reproduction: rep })
        })
        .collect()
}

/// Aggregates reproduced tracks into class × model rows plus an `all` row that
/// uses each class's first listed model.
pub fn reproduction_report(
    windows: &[GtWindow],
    tracks: &[ReproducedTrack],
    models: &ModelMap,
    skipped_windows: usize,
) -> ReproductionReport {
    let mut rows = Vec::new();
    let mut all = Acc::default();
    for class in AgentClass::ALL {
        let Some(list) = models.0.get(&class) else { continue };
        for (mi, model) in list.iter().enumerate() {
            let mut acc = Acc::default();
            for r in tracks.iter().filter(|r| windows[r.window].class == class && r.model == *model) {
                acc.add(r);
                if mi == 0 {
                    all.add(r);
                }
            }
            if acc.n > 0 {
                rows.push(acc.row(class.as_str(), model.as_str()));
            }
        }
    }
    if all.n > 0 {
        rows.push(all.row("all", "primary"));
    }
    ReproductionReport { rows, skipped_windows }
}
