//! Rule-based interaction importance scores.
//!
//! Three priors score the neighbors of a focal agent at the last observed step
//! and normalize the raw scores with a temperature softmax:
//!
//! * [`dgsfm_scores`]: directed-gradient social force model. Combines the
//!   focal agent's egg-shaped potential at each neighbor with the change of the
//!   neighbor's potential at the focal agent as both move for `n_dg` steps.
//! * [`skgacn_scores`]: a front-gated inverse-distance plus closing-speed
//!   score. This is a variant reconstructed from the behavior attributed to
//!   SKGACN, not the original formula.
//! * [`l2_scores`]: inverse Euclidean distance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec2;
use crate::scene::{AgentState, NeighborSet, Scene, SceneError};

/// Below this source speed (m/s) the egg potential falls back to isotropic.
pub const V_STRETCH_MIN: f64 = 0.1;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("invalid prior config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Dgsfm,
    Skgacn,
    L2,
}

impl PriorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorKind::Dgsfm => "dgsfm",
            PriorKind::Skgacn => "skgacn",
            PriorKind::L2 => "l2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Potential amplitude.
    pub v0: f64,
    /// Potential range (m).
    pub sigma_pot: f64,
    /// Forward stretch gain (s): the forward axis is scaled by `1 + k_stretch * speed`.
    pub k_stretch: f64,
    pub w_a: f64,
    pub w_b: f64,
    /// Look-ahead in steps for the directed gradient term.
    pub n_dg: u32,
    pub softmax_temp: f64,
    /// Distance offset (m) guarding the inverse-distance priors.
    pub eps_d: f64,
    /// Gate applied to neighbors behind the focal agent in the SKGACN variant.
    pub g_back: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            v0: 1.0,
            sigma_pot: 5.0,
            k_stretch: 0.5,
            w_a: 0.5,
            w_b: 0.5,
            n_dg: 10,
            softmax_temp: 1.0,
            eps_d: 0.1,
            g_back: 0.01,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<(), PriorError> {
        let checks = [
            (self.v0 > 0.0 && self.v0.is_finite(), "v0 must be positive"),
            (self.sigma_pot > 0.0 && self.sigma_pot.is_finite(), "sigma_pot must be positive"),
            (self.k_stretch >= 0.0 && self.k_stretch.is_finite(), "k_stretch must be non-negative"),
            (self.n_dg >= 1, "n_dg must be >= 1"),
            (self.softmax_temp > 0.0 && self.softmax_temp.is_finite(), "softmax_temp must be positive"),
            (self.w_a >= 0.0 && self.w_b >= 0.0 && self.w_a + self.w_b > 0.0, "weights must be non-negative with a positive sum"),
            (self.eps_d > 0.0 && self.eps_d.is_finite(), "eps_d must be positive"),
            ((0.0..=1.0).contains(&self.g_back), "g_back must lie in [0, 1]"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(PriorError::Config(msg.to_string())),
            None => Ok(()),
        }
    }
}

/// Normalized per-neighbor scores, aligned with the [`NeighborSet`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub focal_id: String,
    pub entries: Vec<(String, f64)>,
}

impl ScoreVector {
    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|(_, s)| *s).collect()
    }

    pub fn neighbor_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Anisotropic effective distance from `source` to `target`. The half-space
/// ahead of the source's velocity is compressed along the direction of motion
/// by `1 + k_stretch * speed`; the rear half is left circular.
pub fn egg_distance(target: Vec2, source: Vec2, source_vel: Vec2, k_stretch: f64) -> f64 {
    let d = target - source;
    let speed = source_vel.norm();
    if speed < V_STRETCH_MIN {
        return d.norm();
    }
    let dir = source_vel * (1.0 / speed);
    let along = d.dot(dir);
    let lateral = dir.cross(d);
    if along >= 0.0 {
        let stretch = 1.0 + k_stretch * speed;
        (along / stretch).hypot(lateral)
    } else {
        along.hypot(lateral)
    }
}

/// Egg-shaped repulsive potential of an agent at `source` moving with
/// `source_vel`, evaluated at `target`. Lies in `(0, v0]`.
pub fn v_egg(target: Vec2, source: Vec2, source_vel: Vec2, cfg: &PriorConfig) -> f64 {
    cfg.v0 * (-egg_distance(target, source, source_vel, cfg.k_stretch) / cfg.sigma_pot).exp()
}

/// Numerically stable softmax of `raw / temp`.
pub fn softmax(raw: &[f64], temp: f64) -> Vec<f64> {
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|r| ((r - max) / temp).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Un-normalized DG-SFM components for one neighbor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DgsfmTerms {
    pub beta_a: f64,
    pub beta_b: f64,
}

pub fn dgsfm_terms(focal: &AgentState, neighbor: &AgentState, dt: f64, cfg: &PriorConfig) -> DgsfmTerms {
    let (ri, vi) = (focal.position(), focal.velocity());
    let (rj, vj) = (neighbor.position(), neighbor.velocity());
    let horizon = cfg.n_dg as f64 * dt;
    let ri_future = ri + vi * horizon;
    let rj_future = rj + vj * horizon;
    DgsfmTerms {
        beta_a: v_egg(rj, ri, vi, cfg),
        beta_b: v_egg(ri_future, rj_future, vj, cfg) - v_egg(ri, rj, vj, cfg),
    }
}

fn resolve<'a>(scene: &'a Scene, neighbors: &NeighborSet) -> Result<(&'a AgentState, Vec<&'a AgentState>), PriorError> {
    let focal = scene.reference_state(&neighbors.focal_id)?;
    let others = neighbors
        .neighbor_ids
        .iter()
        .map(|id| scene.reference_state(id))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((focal, others))
}

fn normalize(neighbors: &NeighborSet, raw: &[f64], cfg: &PriorConfig) -> ScoreVector {
    let scores = if raw.is_empty() { Vec::new() } else { softmax(raw, cfg.softmax_temp) };
    ScoreVector {
        focal_id: neighbors.focal_id.clone(),
        entries: neighbors.neighbor_ids.iter().cloned().zip(scores).collect(),
    }
}

pub fn dgsfm_scores(scene: &Scene, neighbors: &NeighborSet, cfg: &PriorConfig) -> Result<ScoreVector, PriorError> {
    let (focal, others) = resolve(scene, neighbors)?;
    let raw: Vec<f64> = others
        .iter()
        .map(|n| {
            let t = dgsfm_terms(focal, n, scene.dt, cfg);
            cfg.w_a * t.beta_a + cfg.w_b * t.beta_b
        })
        .collect();
    Ok(normalize(neighbors, &raw, cfg))
}

/// Rate at which the distance between `a` and `b` shrinks (m/s); zero for
/// coincident agents.
pub fn closing_speed(a: &AgentState, b: &AgentState) -> f64 {
    let d = b.position() - a.position();
    let dist = d.norm();
    if dist == 0.0 {
        return 0.0;
    }
    -d.dot(b.velocity() - a.velocity()) / dist
}

pub fn skgacn_scores(scene: &Scene, neighbors: &NeighborSet, cfg: &PriorConfig) -> Result<ScoreVector, PriorError> {
    let (focal, others) = resolve(scene, neighbors)?;
    let forward = Vec2::from_angle(focal.heading);
    let raw: Vec<f64> = others
        .iter()
        .map(|n| {
            let d = n.position() - focal.position();
            let gate = if d.dot(forward) >= 0.0 { 1.0 } else { cfg.g_back };
            gate * (1.0 / (d.norm() + cfg.eps_d) + closing_speed(focal, n).max(0.0))
        })
        .collect();
    Ok(normalize(neighbors, &raw, cfg))
}

pub fn l2_scores(scene: &Scene, neighbors: &NeighborSet, cfg: &PriorConfig) -> Result<ScoreVector, PriorError> {
    let (focal, others) = resolve(scene, neighbors)?;
    let raw: Vec<f64> =
        others.iter().map(|n| 1.0 / (n.position().distance(focal.position()) + cfg.eps_d)).collect();
    Ok(normalize(neighbors, &raw, cfg))
}

pub fn prior_scores(
    kind: PriorKind,
    scene: &Scene,
    neighbors: &NeighborSet,
    cfg: &PriorConfig,
) -> Result<ScoreVector, PriorError> {
    match kind {
        PriorKind::Dgsfm => dgsfm_scores(scene, neighbors, cfg),
        PriorKind::Skgacn => skgacn_scores(scene, neighbors, cfg),
        PriorKind::L2 => l2_scores(scene, neighbors, cfg),
    }
}

// ---------------------------------------------------------------------------
// JSON Lines record

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborScore {
    pub neighbor_id: String,
    pub score: f64,
}

/// One line of a prior-score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorRecord {
    pub scene_id: String,
    pub focal_id: String,
    pub prior: PriorKind,
    pub scores: Vec<NeighborScore>,
}

impl PriorRecord {
    pub fn new(scene_id: &str, prior: PriorKind, scores: &ScoreVector) -> Self {
        PriorRecord {
            scene_id: scene_id.to_string(),
            focal_id: scores.focal_id.clone(),
            prior,
            scores: scores
                .entries
                .iter()
                .map(|(id, s)| NeighborScore { neighbor_id: id.clone(), score: *s })
                .collect(),
        }
    }

    pub fn to_score_vector(&self) -> ScoreVector {
        ScoreVector {
            focal_id: self.focal_id.clone(),
            entries: self.scores.iter().map(|s| (s.neighbor_id.clone(), s.score)).collect(),
        }
    }
}
