//! Evaluation metrics: Pearson linear correlation, mean IoU over pixels and
//! object statistics of a binary mask.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("degenerate input: {0} vector is constant")]
    Degenerate(&'static str),
    #[error("empty sample set")]
    Empty,
    #[error("threshold {0} outside (0, 1)")]
    Threshold(f64),
}

/// Pearson linear correlation coefficient.
///
/// Uses a single-pass co-moment update, so it touches each pair once.
pub fn lcc(truth: &[f64], pred: &[f64]) -> Result<f64, MetricError> {
    if truth.len() != pred.len() {
        return Err(MetricError::LengthMismatch(truth.len(), pred.len()));
    }
    if truth.len() < 2 {
        return Err(MetricError::TooFewSamples(truth.len()));
    }
    let (mut mean_t, mut mean_p) = (0.0, 0.0);
    let (mut m2_t, mut m2_p, mut co) = (0.0, 0.0, 0.0);
    for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
        let n = (i + 1) as f64;
        let dt = t - mean_t;
        let dp = p - mean_p;
        mean_t += dt / n;
        mean_p += dp / n;
        m2_t += dt * (t - mean_t);
        m2_p += dp * (p - mean_p);
        co += dt * (p - mean_p);
    }
    if m2_t <= 0.0 {
        return Err(MetricError::Degenerate("truth"));
    }
    if m2_p <= 0.0 {
        return Err(MetricError::Degenerate("prediction"));
    }
    Ok((co / (m2_t.sqrt() * m2_p.sqrt())).clamp(-1.0, 1.0))
}

/// Foreground confusion counts over a set of pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// Counts for one mask; `truth` is 0/1, predictions at or above
    /// `threshold` are foreground.
    pub fn from_mask<P: Copy + Into<f64>>(truth: &[u8], probs: &[P], threshold: f64) -> Result<Self, MetricError> {
        if truth.len() != probs.len() {
            return Err(MetricError::LengthMismatch(truth.len(), probs.len()));
        }
        let mut c = Confusion::default();
        for (&t, &p) in truth.iter().zip(probs) {
            match (t != 0, p.into() >= threshold) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(self, other: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub miou: f64,
    /// `None` when foreground is absent from both truth and prediction.
    pub iou_fg: Option<f64>,
    pub iou_bg: Option<f64>,
}

impl IouReport {
    pub fn from_confusion(c: Confusion) -> Result<Self, MetricError> {
        let iou = |inter: u64, union: u64| (union > 0).then(|| inter as f64 / union as f64);
        let iou_fg = iou(c.tp, c.tp + c.fp + c.fn_);
        let iou_bg = iou(c.tn, c.tn + c.fp + c.fn_);
        let present: Vec<f64> = [iou_fg, iou_bg].into_iter().flatten().collect();
        if present.is_empty() {
            return Err(MetricError::Empty);
        }
        Ok(IouReport {
            miou: present.iter().sum::<f64>() / present.len() as f64,
            iou_fg,
            iou_bg,
        })
    }
}

/// Mean IoU over foreground and background from confusion counts pooled
/// across the whole set.
pub fn miou<M, P>(truths: &[M], preds: &[Vec<P>], threshold: f64) -> Result<IouReport, MetricError>
where
    M: AsRef<[u8]>,
    P: Copy + Into<f64>,
{
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MetricError::Threshold(threshold));
    }
    if truths.len() != preds.len() {
        return Err(MetricError::LengthMismatch(truths.len(), preds.len()));
    }
    let mut total = Confusion::default();
    for (t, p) in truths.iter().zip(preds) {
        total = total.merge(Confusion::from_mask(t.as_ref(), p, threshold)?);
    }
    IouReport::from_confusion(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectStats {
    pub proportion: f64,
    /// Mean foreground pixel centre as `(row, col)` divided by the extents;
    /// `None` for an empty mask.
    pub centroid: Option<(f64, f64)>,
    pub centrality: f64,
}

/// Proportion, centroid and centrality of the foreground in a row-major
/// `height x width` mask (non-zero = foreground).
pub fn object_stats(mask: &[u8], height: usize, width: usize) -> ObjectStats {
    assert_eq!(mask.len(), height * width, "mask length");
    let (mut count, mut sum_r, mut sum_c) = (0u64, 0.0f64, 0.0f64);
    for (i, &v) in mask.iter().enumerate() {
        if v != 0 {
            count += 1;
            sum_r += (i / width) as f64 + 0.5;
            sum_c += (i % width) as f64 + 0.5;
        }
    }
    if count == 0 {
        return ObjectStats {
            proportion: 0.0,
            centroid: None,
            centrality: 0.0,
        };
    }
    let row = sum_r / count as f64 / height as f64;
    let col = sum_c / count as f64 / width as f64;
    let offset = (row - 0.5).abs().max((col - 0.5).abs());
    ObjectStats {
        proportion: count as f64 / mask.len() as f64,
        centroid: Some((row, col)),
        centrality: (1.0 - 2.0 * offset).clamp(0.0, 1.0),
    }
}
