//! Multi-modal accuracy metrics and the attention/error correlation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec2;

pub const MISS_THRESHOLD: f64 = 2.0;
const CONFIDENCE_SLACK: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("trajectory length {got} does not match horizon {expected}")]
    HorizonMismatch { expected: usize, got: usize },
    #[error("k = {k} is invalid for {modes} modes")]
    InvalidK { k: usize, modes: usize },
    #[error("invalid confidences: {0}")]
    InvalidConfidence(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("zero variance in {0}")]
    DegenerateVariance(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mode {
    pub trajectory: Vec<Vec2>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiModalPrediction {
    pub agent_id: String,
    pub modes: Vec<Mode>,
}

impl MultiModalPrediction {
    /// Checks confidences and that every mode spans `horizon` steps.
    pub fn validate(&self, horizon: usize) -> Result<(), MetricsError> {
        let mut total = 0.0;
        for m in &self.modes {
            if m.trajectory.len() != horizon {
                return Err(MetricsError::HorizonMismatch { expected: horizon, got: m.trajectory.len() });
            }
            if !m.trajectory.iter().all(|p| p.is_finite()) {
                return Err(MetricsError::NonFinite("trajectory"));
            }
            if !(0.0..=1.0).contains(&m.confidence) {
                return Err(MetricsError::InvalidConfidence(format!("{} outside [0, 1]", m.confidence)));
            }
            total += m.confidence;
        }
        if total > 1.0 + CONFIDENCE_SLACK {
            return Err(MetricsError::InvalidConfidence(format!("sum {total} exceeds 1")));
        }
        Ok(())
    }
}

/// Mean Euclidean displacement. Both sequences must have the same length.
pub fn ade(pred: &[Vec2], gt: &[Vec2]) -> f64 {
    debug_assert_eq!(pred.len(), gt.len());
    if gt.is_empty() {
        return 0.0;
    }
    pred.iter().zip(gt).map(|(p, g)| p.distance(*g)).sum::<f64>() / gt.len() as f64
}

/// Final-step displacement.
pub fn fde(pred: &[Vec2], gt: &[Vec2]) -> f64 {
    match (pred.last(), gt.last()) {
        (Some(p), Some(g)) => p.distance(*g),
        _ => 0.0,
    }
}

/// Indices of the `k` most confident modes, ties broken by lower index.
pub fn top_k_indices(pred: &MultiModalPrediction, k: usize) -> Result<Vec<usize>, MetricsError> {
    if k == 0 || k > pred.modes.len() {
        return Err(MetricsError::InvalidK { k, modes: pred.modes.len() });
    }
    let mut idx: Vec<usize> = (0..pred.modes.len()).collect();
    idx.sort_by(|&a, &b| pred.modes[b].confidence.total_cmp(&pred.modes[a].confidence).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

fn check_gt(pred: &MultiModalPrediction, gt: &[Vec2]) -> Result<(), MetricsError> {
    if !gt.iter().all(|p| p.is_finite()) {
        return Err(MetricsError::NonFinite("ground truth"));
    }
    pred.validate(gt.len())
}

fn best_by(
    pred: &MultiModalPrediction,
    gt: &[Vec2],
    k: usize,
    err: impl Fn(&[Vec2], &[Vec2]) -> f64,
) -> Result<(usize, f64), MetricsError> {
    check_gt(pred, gt)?;
    let mut best: Option<(usize, f64)> = None;
    for i in top_k_indices(pred, k)? {
        let e = err(&pred.modes[i].trajectory, gt);
        if best.is_none_or(|(_, b)| e < b) {
            best = Some((i, e));
        }
    }
    Ok(best.expect("k >= 1"))
}

pub fn min_ade(pred: &MultiModalPrediction, gt: &[Vec2], k: usize) -> Result<f64, MetricsError> {
    best_by(pred, gt, k, ade).map(|(_, e)| e)
}

pub fn min_fde(pred: &MultiModalPrediction, gt: &[Vec2], k: usize) -> Result<f64, MetricsError> {
    best_by(pred, gt, k, fde).map(|(_, e)| e)
}

/// `minFDE_k + (1 - p̂)²` with `p̂` the confidence of the endpoint-minimizing mode.
pub fn brier_min_fde(pred: &MultiModalPrediction, gt: &[Vec2], k: usize) -> Result<f64, MetricsError> {
    let (i, e) = best_by(pred, gt, k, fde)?;
    Ok(e + (1.0 - pred.modes[i].confidence).powi(2))
}

/// Fraction of agents whose best-of-k endpoint error exceeds `threshold`.
pub fn miss_rate(
    cases: &[(&MultiModalPrediction, &[Vec2])],
    k: usize,
    threshold: f64,
) -> Result<f64, MetricsError> {
    if cases.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut misses = 0usize;
    for (pred, gt) in cases {
        if min_fde(pred, gt, k)? > threshold {
            misses += 1;
        }
    }
    Ok(misses as f64 / cases.len() as f64)
}

/// Pearson product-moment correlation (two-pass).
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(MetricsError::DegenerateVariance("fewer than two samples"));
    }
    if !xs.iter().chain(ys).all(|v| v.is_finite()) {
        return Err(MetricsError::NonFinite("correlation input"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(MetricsError::DegenerateVariance("x"));
    }
    if syy == 0.0 {
        return Err(MetricsError::DegenerateVariance("y"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    Predicted,
    Combined,
}

/// ρ for one attention variant, or why it is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub variant: AttentionVariant,
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub agent_count: usize,
    pub entries: Vec<CorrelationEntry>,
    /// Variant with the larger ρ; a positive ρ means low Δα goes with low
    /// error, which is the relation of interest.
    pub stronger: Option<AttentionVariant>,
}

/// Correlates per-agent minADE with Δα of the predicted and the combined attention.
pub fn interpretability_report(
    min_ade: &[f64],
    delta_pred: &[f64],
    delta_cmb: &[f64],
) -> Result<CorrelationReport, MetricsError> {
    for d in [delta_pred, delta_cmb] {
        if d.len() != min_ade.len() {
            return Err(MetricsError::LengthMismatch(min_ade.len(), d.len()));
        }
    }
    let entries: Vec<CorrelationEntry> = [(AttentionVariant::Predicted, delta_pred), (AttentionVariant::Combined, delta_cmb)]
        .into_iter()
        .map(|(variant, d)| match pearson(min_ade, d) {
            Ok(rho) => CorrelationEntry { variant, rho: Some(rho), error: None },
            Err(e) => CorrelationEntry { variant, rho: None, error: Some(e.to_string()) },
        })
        .collect();
    let stronger = entries
        .iter()
        .filter_map(|e| e.rho.map(|r| (e.variant, r)))
        .fold(None, |acc: Option<(AttentionVariant, f64)>, (v, r)| match acc {
            Some((_, best)) if best >= r => acc,
            _ => Some((v, r)),
        })
        .map(|(v, _)| v);
    Ok(CorrelationReport { agent_count: min_ade.len(), entries, stronger })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize, off: Vec2) -> Vec<Vec2> {
        (0..n).map(|t| Vec2::new(t as f64, 0.0) + off).collect()
    }

    fn pred(modes: Vec<(Vec<Vec2>, f64)>) -> MultiModalPrediction {
        MultiModalPrediction {
            agent_id: "a".into(),
            modes: modes.into_iter().map(|(trajectory, confidence)| Mode { trajectory, confidence }).collect(),
        }
    }

    #[test]
    fn identical_mode_is_zero() {
        let gt = line(5, Vec2::ZERO);
        let p = pred(vec![(gt.clone(), 1.0)]);
        assert_eq!(min_ade(&p, &gt, 1).unwrap(), 0.0);
        assert_eq!(brier_min_fde(&p, &gt, 1).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset() {
        let gt = line(5, Vec2::ZERO);
        let p = pred(vec![(line(5, Vec2::new(0.3, 0.4)), 1.0)]);
        assert!((min_ade(&p, &gt, 1).unwrap() - 0.5).abs() < 1e-12);
        assert!((min_fde(&p, &gt, 1).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn min_over_two_modes() {
        let gt = line(4, Vec2::ZERO);
        let p = pred(vec![(line(4, Vec2::new(0.0, 1.0)), 0.5), (line(4, Vec2::new(0.2, 0.0)), 0.5)]);
        assert!((min_ade(&p, &gt, 2).unwrap() - 0.2).abs() < 1e-12);
        // k = 1 keeps the first of the tied modes.
        assert!((min_ade(&p, &gt, 1).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn brier_hand_value() {
        let gt = line(3, Vec2::ZERO);
        let p = pred(vec![(line(3, Vec2::new(0.0, 1.5)), 0.5), (line(3, Vec2::new(0.0, 3.0)), 0.5)]);
        assert!((brier_min_fde(&p, &gt, 2).unwrap() - 1.75).abs() < 1e-12);
    }

    #[test]
    fn all_missed() {
        let gt = line(3, Vec2::ZERO);
        let p = pred(vec![(line(3, Vec2::new(2.5, 0.0)), 1.0)]);
        assert_eq!(miss_rate(&[(&p, &gt), (&p, &gt)], 1, MISS_THRESHOLD).unwrap(), 1.0);
        assert_eq!(miss_rate(&[], 1, MISS_THRESHOLD), Err(MetricsError::Empty));
    }

    #[test]
    fn validation_errors() {
        let gt = line(3, Vec2::ZERO);
        let short = pred(vec![(line(2, Vec2::ZERO), 1.0)]);
        assert_eq!(min_ade(&short, &gt, 1), Err(MetricsError::HorizonMismatch { expected: 3, got: 2 }));
        let over = pred(vec![(gt.clone(), 0.7), (gt.clone(), 0.7)]);
        assert!(matches!(min_ade(&over, &gt, 1), Err(MetricsError::InvalidConfidence(_))));
        let p = pred(vec![(gt.clone(), 1.0)]);
        assert_eq!(min_ade(&p, &gt, 2), Err(MetricsError::InvalidK { k: 2, modes: 1 }));
    }

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 3.0];
        assert!((pearson(&xs, &xs).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&xs, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&xs, &[2.0, 2.0, 5.0]).unwrap() - 0.8660254037844387).abs() < 1e-12);
        assert_eq!(pearson(&xs, &[1.0, 1.0, 1.0]), Err(MetricsError::DegenerateVariance("y")));
    }

    #[test]
    fn report_flags_degenerate_and_stronger() {
        let ade = [0.5, 1.0, 2.0, 4.0];
        let r = interpretability_report(&ade, &[0.1, 0.1, 0.1, 0.1], &[0.0, 0.1, 0.3, 0.9]).unwrap();
        assert_eq!(r.entries[0].rho, None);
        assert!(r.entries[0].error.is_some());
        assert!(r.entries[1].rho.unwrap() > 0.0);
        assert_eq!(r.stronger, Some(AttentionVariant::Combined));
    }
}
