//! Clarity regression loss, per-pixel cross-entropy and the gated
//! multi-task objective.
//!
//! The objective over a batch of `N` samples is
//!
//! ```text
//! L = 1/N * sum_k [ (y_k/10 - yhat_k)^2 + lambda * alpha_k * CE_k ]
//! alpha_k = 1 if y_k > gate_threshold else 0
//! ```
//!
//! Clarity scores live on the raw `[1, 10]` scale; the network predicts
//! `y / 10` through a sigmoid. The gate compares raw scores.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Reduction, Tape, Var, PROB_CLAMP};
use crate::tensor::{Element, Tensor, TensorError};

pub const GATE_THRESHOLD: f64 = 2.3;
pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const MIN_SCORE: f64 = 1.0;
pub const MAX_SCORE: f64 = 10.0;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("clarity score {0} outside [1, 10]")]
    ScoreOutOfRange(f64),
    #[error("normalized prediction {0} outside (0, 1)")]
    PredictionOutOfRange(f64),
    #[error("mask truth must be binary")]
    NonBinaryTruth,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("lambda must be >= 0, got {0}")]
    NegativeLambda(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Ground-truth clarity score against a normalized prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClarityPair {
    y: f64,
    y_hat_norm: f64,
}

impl ClarityPair {
    pub fn new(y: f64, y_hat_norm: f64) -> Result<Self, LossError> {
        if !(MIN_SCORE..=MAX_SCORE).contains(&y) {
            return Err(LossError::ScoreOutOfRange(y));
        }
        if !(y_hat_norm > 0.0 && y_hat_norm < 1.0) {
            return Err(LossError::PredictionOutOfRange(y_hat_norm));
        }
        Ok(ClarityPair { y, y_hat_norm })
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn y_norm(&self) -> f64 {
        self.y / MAX_SCORE
    }

    pub fn y_hat_norm(&self) -> f64 {
        self.y_hat_norm
    }
}

pub fn clarity_loss(pair: ClarityPair) -> f64 {
    (pair.y_norm() - pair.y_hat_norm).powi(2)
}

/// `d clarity_loss / d y_hat_norm`.
pub fn clarity_loss_grad(pair: ClarityPair) -> f64 {
    -2.0 * (pair.y_norm() - pair.y_hat_norm)
}

/// Binary truth mask with same-shape predicted probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    truth: Vec<u8>,
    probs: Vec<f64>,
}

impl MaskPair {
    /// `truth` holds 0/1 per pixel; `probs` are clamped into the open unit
    /// interval.
    pub fn new(truth: Vec<u8>, probs: Vec<f64>) -> Result<Self, LossError> {
        if truth.len() != probs.len() {
            return Err(LossError::Shape(format!("truth {} vs probs {}", truth.len(), probs.len())));
        }
        if truth.iter().any(|&v| v > 1) {
            return Err(LossError::NonBinaryTruth);
        }
        let probs = probs.into_iter().map(|p| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)).collect();
        Ok(MaskPair { truth, probs })
    }

    pub fn truth(&self) -> &[u8] {
        &self.truth
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

pub fn segmentation_loss(pair: &MaskPair, reduction: Reduction) -> f64 {
    let total: f64 = pair
        .truth
        .iter()
        .zip(&pair.probs)
        .map(|(&x, &p)| if x == 1 { -p.ln() } else { -(1.0 - p).ln() })
        .sum();
    match reduction {
        Reduction::Mean => total / pair.truth.len().max(1) as f64,
        Reduction::Sum => total,
    }
}

/// `alpha_k`: 1 iff the raw clarity score is strictly above the threshold.
pub fn gate_indicator(y: f64, threshold: f64) -> u8 {
    u8::from(y > threshold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub gate_threshold: f64,
    /// Multiplier on the clarity term; 0 trains segmentation alone.
    pub clarity_weight: f64,
    pub seg_reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: DEFAULT_LAMBDA,
            gate_threshold: GATE_THRESHOLD,
            clarity_weight: 1.0,
            seg_reduction: Reduction::Mean,
        }
    }
}

/// Batch-level values of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Batch mean of the (weighted) clarity loss.
    pub clarity_term: f64,
    /// Batch mean of `lambda * alpha_k * CE_k`.
    pub seg_term: f64,
    pub gated_count: usize,
}

/// Supervision for one batch.
#[derive(Clone, Debug)]
pub struct BatchTargets<T: Element = f32> {
    /// Raw clarity scores in `[1, 10]`.
    pub scores: Vec<f64>,
    /// `[N, 1, H, W]` binary masks (0/1).
    pub masks: Tensor<T>,
}

/// Records the multi-task objective on `tape` and returns its scalar node.
///
/// Terms whose weight is zero for the whole batch are not recorded, so
/// their branches receive no gradient at all. Per-sample gated terms get a
/// weight of exactly zero.
pub fn multitask_loss<T: Element>(
    tape: &mut Tape<T>,
    clarity: Var,
    mask: Var,
    targets: &BatchTargets<T>,
    config: &LossConfig,
) -> Result<(Var, LossBreakdown), LossError> {
    let n = targets.scores.len();
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    if config.lambda < 0.0 {
        return Err(LossError::NegativeLambda(config.lambda));
    }
    if let Some(&bad) = targets.scores.iter().find(|y| !(MIN_SCORE..=MAX_SCORE).contains(*y)) {
        return Err(LossError::ScoreOutOfRange(bad));
    }
    let inv_n = 1.0 / n as f64;
    let mut breakdown = LossBreakdown::default();
    let mut terms = Vec::with_capacity(2);

    if config.clarity_weight != 0.0 {
        let y_norm = targets.scores.iter().map(|y| y / MAX_SCORE).collect();
        let per_sample = tape.squared_error(clarity, y_norm)?;
        let term = tape.weighted_sum(per_sample, vec![config.clarity_weight * inv_n; n])?;
        breakdown.clarity_term = tape.value(term).data()[0].as_f64();
        terms.push(term);
    }

    let alphas: Vec<u8> = targets
        .scores
        .iter()
        .map(|&y| gate_indicator(y, config.gate_threshold))
        .collect();
    breakdown.gated_count = alphas.iter().map(|&a| a as usize).sum();
    if config.lambda != 0.0 && breakdown.gated_count > 0 {
        let per_sample = tape.binary_cross_entropy(mask, targets.masks.clone(), config.seg_reduction)?;
        let weights = alphas.iter().map(|&a| config.lambda * a as f64 * inv_n).collect();
        let term = tape.weighted_sum(per_sample, weights)?;
        breakdown.seg_term = tape.value(term).data()[0].as_f64();
        terms.push(term);
    }

    let total = match terms[..] {
        [] => tape.constant(Tensor::scalar(T::zero())),
        [single] => single,
        [a, b] => tape.add(a, b)?,
        _ => unreachable!("at most two terms"),
    };
    breakdown.total = tape.value(total).data()[0].as_f64();
    Ok((total, breakdown))
}
