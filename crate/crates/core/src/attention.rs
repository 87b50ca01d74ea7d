//! Prior integration into attention scores.
//!
//! * Multiply-and-renormalize: `α_cmb ∝ α_pred ⊙ β`.
//! * Gating-and-loss: a logistic gate `σ` blends `α_pred` with `β`, and a
//!   KL divergence `KL(β ‖ α_cmb) / |J|` averaged over heads pulls the
//!   combination toward the prior.
//!
//! All vectors are aligned with the neighbor ordering of the prior
//! [`ScoreVector`](crate::priors::ScoreVector).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to combined scores before the logarithm of the KL loss.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("all products of predicted attention and prior are zero")]
    DegenerateProduct,
    #[error("combined scores sum to zero")]
    DegenerateSum,
    #[error("KL loss is not finite: combined score is zero where the prior is positive")]
    NonFiniteLoss,
    #[error("attention record has no embeddings but the gate layer expects dimension {0}")]
    MissingEmbeddings(usize),
    #[error("invalid gate layer: {0}")]
    InvalidLayer(String),
}

fn check_len(a: &[f64], b: &[f64], what: &str) -> Result<(), AttentionError> {
    if a.len() != b.len() {
        return Err(AttentionError::DimensionMismatch(format!("{what}: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// Multiply-and-renormalize. Fails with [`AttentionError::DegenerateProduct`]
/// when every product is zero; see [`mnr_combine_or_prior`] for the fallback.
pub fn mnr_combine(alpha_pred: &[f64], beta: &[f64]) -> Result<Vec<f64>, AttentionError> {
    check_len(alpha_pred, beta, "alpha_pred vs beta")?;
    if alpha_pred.is_empty() {
        return Err(AttentionError::DimensionMismatch("empty score vectors".into()));
    }
    let products: Vec<f64> = alpha_pred.iter().zip(beta).map(|(a, b)| a * b).collect();
    let sum: f64 = products.iter().sum();
    if sum <= 0.0 || !sum.is_finite() {
        return Err(AttentionError::DegenerateProduct);
    }
    Ok(products.into_iter().map(|p| p / sum).collect())
}

/// [`mnr_combine`] that returns the prior itself when the product degenerates.
pub fn mnr_combine_or_prior(alpha_pred: &[f64], beta: &[f64]) -> Result<Vec<f64>, AttentionError> {
    match mnr_combine(alpha_pred, beta) {
        Err(AttentionError::DegenerateProduct) => Ok(beta.to_vec()),
        other => other,
    }
}

/// Gating-and-loss blend `σ α_pred + (1 - σ) β`, renormalized over neighbors.
pub fn gnl_combine(alpha_pred: &[f64], beta: &[f64], sigma: &[f64]) -> Result<Vec<f64>, AttentionError> {
    check_len(alpha_pred, beta, "alpha_pred vs beta")?;
    check_len(alpha_pred, sigma, "alpha_pred vs gate")?;
    let blend: Vec<f64> = alpha_pred
        .iter()
        .zip(beta)
        .zip(sigma)
        .map(|((a, b), s)| s * a + (1.0 - s) * b)
        .collect();
    let sum: f64 = blend.iter().sum();
    if sum <= 0.0 || !sum.is_finite() {
        return Err(AttentionError::DegenerateSum);
    }
    Ok(blend.into_iter().map(|v| v / sum).collect())
}

/// Element-wise mean over attention heads.
pub fn head_mean(heads: &[Vec<f64>]) -> Result<Vec<f64>, AttentionError> {
    let first = heads.first().ok_or_else(|| AttentionError::DimensionMismatch("no attention heads".into()))?;
    let mut mean = vec![0.0; first.len()];
    for h in heads {
        check_len(first, h, "attention heads")?;
        for (m, v) in mean.iter_mut().zip(h) {
            *m += v;
        }
    }
    let n = heads.len() as f64;
    Ok(mean.into_iter().map(|m| m / n).collect())
}

/// Focal and neighbor embeddings fed to the gate layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embeddings {
    pub focal: Vec<f64>,
    pub neighbors: Vec<Vec<f64>>,
}

/// Network attention for one focal agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub focal_id: String,
    /// Heads × neighbors.
    pub alpha_pred: Vec<Vec<f64>>,
    pub embeddings: Option<Embeddings>,
}

impl AttentionRecord {
    pub fn head_count(&self) -> usize {
        self.alpha_pred.len()
    }
}

/// Single affine map followed by a logistic, from
/// `concat(u_i, u_j..., mean_heads(α_pred), β)` to one gate per neighbor.
///
/// Weights are stored input-major: `w[r * cols + c]` connects input `r` to
/// output `c`, so `rows` is the input dimension and `cols` the neighbor count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateLayer {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl GateLayer {
    pub fn zeros(neighbors: usize, embedding_dim: usize) -> Self {
        let rows = (neighbors + 1) * embedding_dim + 2 * neighbors;
        GateLayer { rows, cols: neighbors, w: vec![0.0; rows * neighbors], b: vec![0.0; neighbors] }
    }

    pub fn validate(&self) -> Result<(), AttentionError> {
        if self.cols == 0 {
            return Err(AttentionError::InvalidLayer("cols must be >= 1".into()));
        }
        if self.w.len() != self.rows * self.cols {
            return Err(AttentionError::InvalidLayer(format!(
                "w has {} entries, expected rows * cols = {}",
                self.w.len(),
                self.rows * self.cols
            )));
        }
        if self.b.len() != self.cols {
            return Err(AttentionError::InvalidLayer(format!("b has {} entries, expected {}", self.b.len(), self.cols)));
        }
        self.embedding_dim().map(|_| ())
    }

    pub fn neighbor_count(&self) -> usize {
        self.cols
    }

    /// Embedding dimension implied by `rows = (n + 1) D + 2 n`.
    pub fn embedding_dim(&self) -> Result<usize, AttentionError> {
        let n = self.cols;
        let rest = self.rows.checked_sub(2 * n).ok_or_else(|| {
            AttentionError::InvalidLayer(format!("rows {} smaller than 2 * neighbors {}", self.rows, 2 * n))
        })?;
        if rest % (n + 1) != 0 {
            return Err(AttentionError::InvalidLayer(format!(
                "rows {} is not (neighbors + 1) * D + 2 * neighbors for neighbors = {n}",
                self.rows
            )));
        }
        Ok(rest / (n + 1))
    }

    fn affine(&self, input: &[f64]) -> Vec<f64> {
        let mut out = self.b.clone();
        for (r, x) in input.iter().enumerate() {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * x;
            }
        }
        out
    }
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Builds the gate input vector in the layer's layout.
pub fn gate_input(record: &AttentionRecord, beta: &[f64], layer: &GateLayer) -> Result<Vec<f64>, AttentionError> {
    layer.validate()?;
    let n = layer.neighbor_count();
    let dim = layer.embedding_dim()?;
    let alpha = head_mean(&record.alpha_pred)?;
    if alpha.len() != n || beta.len() != n {
        return Err(AttentionError::DimensionMismatch(format!(
            "gate layer built for {n} neighbors, got alpha {} and beta {}",
            alpha.len(),
            beta.len()
        )));
    }
    let mut input = Vec::with_capacity(layer.rows);
    if dim > 0 {
        let emb = record.embeddings.as_ref().ok_or(AttentionError::MissingEmbeddings(dim))?;
        if emb.focal.len() != dim || emb.neighbors.len() != n || emb.neighbors.iter().any(|u| u.len() != dim) {
            return Err(AttentionError::DimensionMismatch(format!(
                "embeddings must be 1 + {n} vectors of dimension {dim}"
            )));
        }
        input.extend_from_slice(&emb.focal);
        for u in &emb.neighbors {
            input.extend_from_slice(u);
        }
    }
    input.extend_from_slice(&alpha);
    input.extend_from_slice(beta);
    Ok(input)
}

/// Gate values in (0, 1), one per neighbor.
pub fn gate_forward(record: &AttentionRecord, beta: &[f64], layer: &GateLayer) -> Result<Vec<f64>, AttentionError> {
    let input = gate_input(record, beta, layer)?;
    Ok(layer.affine(&input).into_iter().map(logistic).collect())
}

/// Loss value and its gradient with respect to every combined score.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnLoss {
    pub loss: f64,
    /// Heads × neighbors, aligned with the input.
    pub grad: Vec<Vec<f64>>,
}

/// `mean_h (1/|J|) Σ_j β_j ln(β_j / α_hj)`.
///
/// With `smoothing` the combined scores are floored at [`KL_FLOOR`] (and the
/// gradient is zero below the floor); without it a zero combined score under a
/// positive prior is an error. Terms with `β_j = 0` contribute nothing.
pub fn attn_loss(beta: &[f64], alpha_cmb_heads: &[Vec<f64>], smoothing: bool) -> Result<AttnLoss, AttentionError> {
    if alpha_cmb_heads.is_empty() {
        return Err(AttentionError::DimensionMismatch("no attention heads".into()));
    }
    let n = beta.len();
    if n == 0 {
        return Err(AttentionError::DimensionMismatch("empty prior".into()));
    }
    let heads = alpha_cmb_heads.len() as f64;
    let scale = 1.0 / (n as f64 * heads);
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(alpha_cmb_heads.len());
    for head in alpha_cmb_heads {
        check_len(beta, head, "beta vs alpha_cmb")?;
        let mut g = vec![0.0; n];
        for (j, (&b, &a)) in beta.iter().zip(head).enumerate() {
            if b == 0.0 {
                continue;
            }
            let floored = smoothing && a < KL_FLOOR;
            let a_eff = if floored { KL_FLOOR } else { a };
            if a_eff <= 0.0 {
                return Err(AttentionError::NonFiniteLoss);
            }
            loss += scale * b * (b / a_eff).ln();
            if !floored {
                g[j] = -b * scale / a_eff;
            }
        }
        grad.push(g);
    }
    if !loss.is_finite() {
        return Err(AttentionError::NonFiniteLoss);
    }
    Ok(AttnLoss { loss, grad })
}

/// Mean absolute difference between attention and prior scores, in [0, 2].
pub fn delta_alpha(alpha: &[f64], beta: &[f64]) -> Result<f64, AttentionError> {
    check_len(alpha, beta, "alpha vs beta")?;
    if alpha.is_empty() {
        return Err(AttentionError::DimensionMismatch("empty score vectors".into()));
    }
    Ok(alpha.iter().zip(beta).map(|(a, b)| (a - b).abs()).sum::<f64>() / alpha.len() as f64)
}

/// Per-head Δα averaged over heads.
pub fn delta_alpha_heads(heads: &[Vec<f64>], beta: &[f64]) -> Result<f64, AttentionError> {
    if heads.is_empty() {
        return Err(AttentionError::DimensionMismatch("no attention heads".into()));
    }
    let mut total = 0.0;
    for h in heads {
        total += delta_alpha(h, beta)?;
    }
    Ok(total / heads.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn mnr_hand_example() {
        let out = mnr_combine(&[0.5, 0.5], &[0.8, 0.2]).unwrap();
        assert!(close(&out, &[0.8, 0.2], 1e-12));
    }

    #[test]
    fn mnr_uniform_prior_is_neutral() {
        let alpha = [0.1, 0.6, 0.3];
        let out = mnr_combine(&alpha, &[1.0 / 3.0; 3]).unwrap();
        assert!(close(&out, &alpha, 1e-12));
    }

    #[test]
    fn mnr_one_hot_prior_masks() {
        let out = mnr_combine(&[0.2, 0.3, 0.5], &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(out, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn mnr_degenerate_falls_back_to_prior() {
        assert_eq!(mnr_combine(&[1.0, 0.0], &[0.0, 1.0]), Err(AttentionError::DegenerateProduct));
        assert_eq!(mnr_combine_or_prior(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn gnl_hand_example() {
        let out = gnl_combine(&[0.6, 0.4], &[0.2, 0.8], &[0.5, 0.5]).unwrap();
        assert!(close(&out, &[0.4, 0.6], 1e-12));
    }

    #[test]
    fn gnl_endpoints() {
        let alpha = [0.2, 0.5, 0.3];
        let beta = [0.6, 0.1, 0.3];
        assert!(close(&gnl_combine(&alpha, &beta, &[1.0; 3]).unwrap(), &alpha, 1e-12));
        assert!(close(&gnl_combine(&alpha, &beta, &[0.0; 3]).unwrap(), &beta, 1e-12));
    }

    #[test]
    fn gnl_dimension_mismatch() {
        assert!(matches!(gnl_combine(&[0.5, 0.5], &[0.5, 0.5], &[0.5]), Err(AttentionError::DimensionMismatch(_))));
    }

    fn record(alpha: Vec<Vec<f64>>, emb: Option<Embeddings>) -> AttentionRecord {
        AttentionRecord { focal_id: "f".into(), alpha_pred: alpha, embeddings: emb }
    }

    #[test]
    fn zero_gate_is_half() {
        let layer = GateLayer::zeros(3, 2);
        let emb = Embeddings { focal: vec![1.0, 2.0], neighbors: vec![vec![0.5, -1.0]; 3] };
        let rec = record(vec![vec![0.2, 0.3, 0.5]], Some(emb));
        assert_eq!(gate_forward(&rec, &[0.4, 0.4, 0.2], &layer).unwrap(), vec![0.5; 3]);
    }

    #[test]
    fn saturated_bias_opens_gate() {
        let mut layer = GateLayer::zeros(2, 0);
        layer.b = vec![10.0, 10.0];
        let rec = record(vec![vec![0.5, 0.5]], None);
        for s in gate_forward(&rec, &[0.5, 0.5], &layer).unwrap() {
            assert!((s - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gate_hand_weights() {
        // Two neighbors, no embeddings: input = (ᾱ1, ᾱ2, β1, β2) = (0.75, 0.25, 0.4, 0.6)
        // where ᾱ is the mean of heads (0.9, 0.1) and (0.6, 0.4).
        let layer = GateLayer {
            rows: 4,
            cols: 2,
            w: vec![1.0, 0.0, -2.0, 0.5, 0.0, 3.0, 1.5, -1.0],
            b: vec![0.1, -0.2],
        };
        let rec = record(vec![vec![0.9, 0.1], vec![0.6, 0.4]], None);
        let s = gate_forward(&rec, &[0.4, 0.6], &layer).unwrap();
        // z1 = 0.75 - 0.5 + 0 + 0.9 + 0.1 = 1.25; z2 = 0 + 0.125 + 1.2 - 0.6 - 0.2 = 0.525
        let expected = [1.0 / (1.0 + (-1.25f64).exp()), 1.0 / (1.0 + (-0.525f64).exp())];
        assert!(close(&s, &expected, 1e-12));
    }

    #[test]
    fn gate_requires_embeddings_when_layer_does() {
        let layer = GateLayer::zeros(2, 3);
        let rec = record(vec![vec![0.5, 0.5]], None);
        assert_eq!(gate_forward(&rec, &[0.5, 0.5], &layer), Err(AttentionError::MissingEmbeddings(3)));
        let bad = GateLayer { rows: 5, cols: 2, w: vec![0.0; 10], b: vec![0.0; 2] };
        assert!(matches!(bad.validate(), Err(AttentionError::InvalidLayer(_))));
    }

    #[test]
    fn kl_zero_at_prior() {
        let beta = vec![0.2, 0.5, 0.3];
        let l = attn_loss(&beta, &[beta.clone(), beta.clone()], true).unwrap();
        assert_eq!(l.loss, 0.0);
    }

    #[test]
    fn kl_hand_example() {
        let l = attn_loss(&[0.5, 0.5], &[vec![0.9, 0.1]], true).unwrap();
        assert!((l.loss - 0.25541281188299536).abs() < 1e-12);
    }

    #[test]
    fn kl_zero_support_without_smoothing() {
        assert_eq!(attn_loss(&[0.5, 0.5], &[vec![1.0, 0.0]], false), Err(AttentionError::NonFiniteLoss));
        let l = attn_loss(&[0.5, 0.5], &[vec![1.0, 0.0]], true).unwrap();
        assert!(l.loss.is_finite() && l.loss > 0.0);
    }

    #[test]
    fn delta_alpha_examples() {
        assert_eq!(delta_alpha(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(delta_alpha(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!((delta_alpha(&[0.7, 0.3], &[0.5, 0.5]).unwrap() - 0.2).abs() < 1e-12);
    }
}
