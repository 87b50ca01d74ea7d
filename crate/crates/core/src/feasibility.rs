//! Kinematic feasibility audit of position sequences.
//!
//! Derivatives are estimated by forward differences: `v_t = (p_{t+1} - p_t)/dt`,
//! acceleration from consecutive velocity estimates, and curvature from the
//! change in direction of travel divided by the arc length `|v_t| dt`.
//!
//! For classes whose limits carry a curvature bound the acceleration check uses
//! the change in speed (the lateral part of `Δv` is governed by the curvature
//! limit instead). Otherwise the full `|Δv|/dt` is compared with the bound.
//! Speed violations are counted as acceleration-column violations and also
//! reported on their own.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{wrap_angle, Vec2};
use crate::kinematics::{default_limits, KinematicLimits, KinematicModel};
use crate::scene::{AgentClass, Scene};

/// Below this speed (m/s) the direction of travel is undefined and curvature
/// is not checked.
pub const V_CURV_MIN: f64 = 0.1;
/// Absolute slack on every limit comparison.
pub const AUDIT_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum FeasibilityError {
    #[error("need at least 3 positions, got {0}")]
    TooShort(usize),
    #[error("dt must be positive, got {0}")]
    InvalidTimestep(f64),
    #[error("non-finite position at step {0}")]
    NonFinite(usize),
}

/// Finite-difference estimates for a contiguous run of `n` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivatives {
    /// `n - 1` velocity estimates.
    pub velocity: Vec<Vec2>,
    /// `n - 1` speeds.
    pub speed: Vec<f64>,
    /// `n - 2` values of `|v_{t+1} - v_t| / dt`.
    pub accel: Vec<f64>,
    /// `n - 2` values of `(|v_{t+1}| - |v_t|) / dt`.
    pub accel_long: Vec<f64>,
    /// `n - 2` curvatures; `None` where either speed is below [`V_CURV_MIN`].
    pub curvature: Vec<Option<f64>>,
}

pub fn estimate_derivatives(positions: &[Vec2], dt: f64) -> Result<Derivatives, FeasibilityError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(FeasibilityError::InvalidTimestep(dt));
    }
    if positions.len() < 3 {
        return Err(FeasibilityError::TooShort(positions.len()));
    }
    if let Some(t) = positions.iter().position(|p| !p.is_finite()) {
        return Err(FeasibilityError::NonFinite(t));
    }
    let velocity: Vec<Vec2> = positions.windows(2).map(|w| (w[1] - w[0]) * (1.0 / dt)).collect();
    let speed: Vec<f64> = velocity.iter().map(|v| v.norm()).collect();
    let mut accel = Vec::with_capacity(velocity.len() - 1);
    let mut accel_long = Vec::with_capacity(velocity.len() - 1);
    let mut curvature = Vec::with_capacity(velocity.len() - 1);
    for t in 0..velocity.len() - 1 {
        accel.push((velocity[t + 1] - velocity[t]).norm() / dt);
        accel_long.push((speed[t + 1] - speed[t]) / dt);
        curvature.push(if speed[t] < V_CURV_MIN || speed[t + 1] < V_CURV_MIN {
            None
        } else {
            let mut dtheta = wrap_angle(velocity[t + 1].angle() - velocity[t].angle());
            // A direction flip means the agent reversed through zero speed.
            if dtheta.abs() > std::f64::consts::FRAC_PI_2 {
                dtheta = wrap_angle(dtheta - std::f64::consts::PI);
            }
            Some(dtheta / (speed[t] * dt))
        });
    }
    Ok(Derivatives { velocity, speed, accel, accel_long, curvature })
}

/// Model whose limits apply to `class` when a trajectory carries no model:
/// the unicycle for vehicles and cyclists, the double integrator (acceleration
/// and speed, no curvature) for pedestrians.
pub fn default_audit_model(class: AgentClass) -> KinematicModel {
    match class {
        AgentClass::Vehicle | AgentClass::Cyclist => KinematicModel::Unicycle,
        AgentClass::Pedestrian => KinematicModel::DoubleIntegrator,
    }
}

pub fn default_audit_limits(class: AgentClass) -> KinematicLimits {
    default_limits(class, default_audit_model(class))
}

/// One trajectory to audit. `None` positions are invalid (occluded) steps and
/// split the trajectory into independently audited segments.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditTrack {
    pub class: AgentClass,
    pub limits: KinematicLimits,
    pub dt: f64,
    pub positions: Vec<Option<Vec2>>,
}

impl AuditTrack {
    pub fn from_positions(class: AgentClass, limits: KinematicLimits, dt: f64, positions: &[Vec2]) -> Self {
        AuditTrack { class, limits, dt, positions: positions.iter().copied().map(Some).collect() }
    }
}

/// Every track of every scene, audited against `limits_for(class)`.
pub fn scene_tracks(scenes: &[Scene], limits_for: impl Fn(AgentClass) -> KinematicLimits) -> Vec<AuditTrack> {
    scenes
        .iter()
        .flat_map(|s| {
            s.tracks.iter().map(|tr| AuditTrack {
                class: tr.class,
                limits: limits_for(tr.class),
                dt: s.dt,
                positions: tr.states.iter().map(|st| st.valid.then(|| st.position())).collect(),
            })
        })
        .collect::<Vec<_>>()
}

/// Counts for one trajectory or an aggregate of many.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AuditCounts {
    pub step_count: u64,
    pub curvature_step_count: u64,
    pub infeasible_accel_steps: u64,
    pub infeasible_curv_steps: u64,
    pub infeasible_any_steps: u64,
    pub infeasible_speed_steps: u64,
    pub traj_count: u64,
    pub infeasible_accel_trajs: u64,
    pub infeasible_curv_trajs: u64,
    pub infeasible_any_trajs: u64,
    pub skipped_too_short: u64,
    pub peak_accel: f64,
    pub peak_abs_curvature: f64,
    pub peak_speed: f64,
}

impl AuditCounts {
    pub fn merge(&mut self, o: &AuditCounts) {
        self.step_count += o.step_count;
        self.curvature_step_count += o.curvature_step_count;
        self.infeasible_accel_steps += o.infeasible_accel_steps;
        self.infeasible_curv_steps += o.infeasible_curv_steps;
        self.infeasible_any_steps += o.infeasible_any_steps;
        self.infeasible_speed_steps += o.infeasible_speed_steps;
        self.traj_count += o.traj_count;
        self.infeasible_accel_trajs += o.infeasible_accel_trajs;
        self.infeasible_curv_trajs += o.infeasible_curv_trajs;
        self.infeasible_any_trajs += o.infeasible_any_trajs;
        self.skipped_too_short += o.skipped_too_short;
        self.peak_accel = self.peak_accel.max(o.peak_accel);
        self.peak_abs_curvature = self.peak_abs_curvature.max(o.peak_abs_curvature);
        self.peak_speed = self.peak_speed.max(o.peak_speed);
    }
}

fn pct(count: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 / total as f64 * 100.0
    }
}

fn contiguous_segments(positions: &[Option<Vec2>]) -> Vec<Vec<Vec2>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for p in positions {
        match p {
            Some(p) => cur.push(*p),
            None if !cur.is_empty() => out.push(std::mem::take(&mut cur)),
            None => {}
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Audits one trajectory. A trajectory whose segments are all too short is
/// reported with `traj_count = 0` and counted in `skipped_too_short`.
pub fn audit_track(track: &AuditTrack) -> Result<AuditCounts, FeasibilityError> {
    if !(track.dt.is_finite() && track.dt > 0.0) {
        return Err(FeasibilityError::InvalidTimestep(track.dt));
    }
    let lim = &track.limits;
    let a_max = lim.accel.map(|iv| iv.magnitude_bound());
    let k_max = lim.curvature.map(|iv| iv.magnitude_bound());
    let v_max = lim.speed.magnitude_bound();

    let mut c = AuditCounts::default();
    let (mut acc_bad, mut curv_bad, mut any_bad) = (false, false, false);
    let mut audited = false;
    for seg in contiguous_segments(&track.positions) {
        let d = match estimate_derivatives(&seg, track.dt) {
            Ok(d) => d,
            Err(FeasibilityError::TooShort(_)) => {
                c.skipped_too_short += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        audited = true;
        for t in 0..d.accel.len() {
            let speed_peak = d.speed[t].max(d.speed[t + 1]);
            let speed_viol = speed_peak > v_max + AUDIT_TOL;
            let a = if k_max.is_some() { d.accel_long[t].abs() } else { d.accel[t] };
            let accel_viol = a_max.is_some_and(|m| a > m + AUDIT_TOL) || speed_viol;
            let curv_viol = match (d.curvature[t], k_max) {
                (Some(k), Some(m)) => {
                    c.curvature_step_count += 1;
                    c.peak_abs_curvature = c.peak_abs_curvature.max(k.abs());
                    k.abs() > m + AUDIT_TOL
                }
                _ => false,
            };
            c.step_count += 1;
            c.peak_accel = c.peak_accel.max(a);
            c.peak_speed = c.peak_speed.max(speed_peak);
            c.infeasible_speed_steps += u64::from(speed_viol);
            c.infeasible_accel_steps += u64::from(accel_viol);
            c.infeasible_curv_steps += u64::from(curv_viol);
            c.infeasible_any_steps += u64::from(accel_viol || curv_viol);
            acc_bad |= accel_viol;
            curv_bad |= curv_viol;
            any_bad |= accel_viol || curv_viol;
        }
    }
    if audited {
        c.traj_count = 1;
        c.infeasible_accel_trajs = u64::from(acc_bad);
        c.infeasible_curv_trajs = u64::from(curv_bad);
        c.infeasible_any_trajs = u64::from(any_bad);
    }
    Ok(c)
}

/// One table row: a class (or `all`) with counts and percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub class: String,
    pub accel_steps_pct: f64,
    pub curv_steps_pct: f64,
    pub any_steps_pct: f64,
    pub accel_trajs_pct: f64,
    pub curv_trajs_pct: f64,
    pub any_trajs_pct: f64,
    #[serde(flatten)]
    pub counts: AuditCounts,
}

impl AuditRow {
    fn new(class: &str, counts: AuditCounts) -> Self {
        AuditRow {
            class: class.to_string(),
            accel_steps_pct: pct(counts.infeasible_accel_steps, counts.step_count),
            curv_steps_pct: pct(counts.infeasible_curv_steps, counts.curvature_step_count),
            any_steps_pct: pct(counts.infeasible_any_steps, counts.step_count),
            accel_trajs_pct: pct(counts.infeasible_accel_trajs, counts.traj_count),
            curv_trajs_pct: pct(counts.infeasible_curv_trajs, counts.traj_count),
            any_trajs_pct: pct(counts.infeasible_any_trajs, counts.traj_count),
            counts,
        }
    }
}

/// Per-class rows in [`AgentClass::ALL`] order followed by the `all` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub rows: Vec<AuditRow>,
}

impl AuditReport {
    pub fn overall(&self) -> &AuditRow {
        self.rows.last().expect("report always has an overall row")
    }

    pub fn class(&self, class: AgentClass) -> Option<&AuditRow> {
        self.rows.iter().find(|r| r.class == class.as_str())
    }
}

/// Audits every track in parallel and reduces in input order.
pub fn audit(tracks: &[AuditTrack]) -> Result<AuditReport, FeasibilityError> {
    let per: Vec<AuditCounts> = tracks.par_iter().map(audit_track).collect::<Result<_, _>>()?;
    let mut by_class = [AuditCounts::default(); 3];
    let mut all = AuditCounts::default();
    for (tr, c) in tracks.iter().zip(&per) {
        let i = AgentClass::ALL.iter().position(|k| *k == tr.class).expect("class listed in ALL");
        by_class[i].merge(c);
        all.merge(c);
    }
    let mut rows: Vec<AuditRow> =
        AgentClass::ALL.iter().zip(by_class).map(|(k, c)| AuditRow::new(k.as_str(), c)).collect();
    rows.push(AuditRow::new("all", all));
    Ok(AuditReport { rows })
}
