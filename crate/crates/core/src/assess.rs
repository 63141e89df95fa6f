//! Cover assessment: clarity plus object layout from one forward pass.

use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::losses::{gate_indicator, GATE_THRESHOLD, MAX_SCORE};
use crate::metrics::object_stats;
use crate::network::{MultiTaskNet, NetError, OUTPUT_STRIDE};
use crate::trainer::images_to_tensor;
use crate::dataset::{Sample, Split};

pub const HIGHLIGHT: [u8; 3] = [255, 0, 0];
pub const MASK_THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssessConfig {
    pub clarity_weight: f64,
    pub proportion_weight: f64,
    pub centrality_weight: f64,
    /// Proportion at which the proportion term saturates.
    pub proportion_ref: f64,
    pub gate_threshold: f64,
}

impl Default for AssessConfig {
    fn default() -> Self {
        AssessConfig {
            clarity_weight: 0.5,
            proportion_weight: 0.25,
            centrality_weight: 0.25,
            proportion_ref: 0.05,
            gate_threshold: GATE_THRESHOLD,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverAssessment {
    /// Network output scaled to `[0, 10]`.
    pub clarity_score: f64,
    pub object_proportion: f64,
    /// Normalized `(row, col)`; `None` (JSON `null`) for an empty mask.
    pub centroid: Option<[f64; 2]>,
    pub centroid_defined: bool,
    pub centrality: f64,
    pub composite: f64,
    pub pass_clarity_gate: bool,
}

impl CoverAssessment {
    /// Single-line JSON record.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("assessment serializes")
    }
}

/// `w_c * clarity / 10 + w_p * min(proportion / p_ref, 1) + w_x * centrality`,
/// clamped to `[0, 1]`.
pub fn composite_score(clarity_score: f64, proportion: f64, centrality: f64, config: &AssessConfig) -> f64 {
    let clarity = (clarity_score / MAX_SCORE).clamp(0.0, 1.0);
    let prop = (proportion / config.proportion_ref).min(1.0);
    (config.clarity_weight * clarity + config.proportion_weight * prop + config.centrality_weight * centrality)
        .clamp(0.0, 1.0)
}

/// Builds the record from raw outputs: normalized clarity in `[0, 1]` and a
/// row-major foreground probability map.
pub fn assessment_from_outputs(
    clarity_norm: f64,
    mask_prob: &[f32],
    height: usize,
    width: usize,
    config: &AssessConfig,
) -> CoverAssessment {
    let binary: Vec<u8> = mask_prob.iter().map(|&p| u8::from(p >= MASK_THRESHOLD)).collect();
    let stats = object_stats(&binary, height, width);
    let clarity_score = clarity_norm * MAX_SCORE;
    CoverAssessment {
        clarity_score,
        object_proportion: stats.proportion,
        centroid: stats.centroid.map(|(r, c)| [r, c]),
        centroid_defined: stats.centroid.is_some(),
        centrality: stats.centrality,
        composite: composite_score(clarity_score, stats.proportion, stats.centrality, config),
        pass_clarity_gate: gate_indicator(clarity_score, config.gate_threshold) == 1,
    }
}

/// Thresholded mask from the last assessment, 0/255.
pub fn binary_mask(mask_prob: &[f32], height: usize, width: usize) -> GrayImage {
    GrayImage::from_fn(width as u32, height as u32, |x, y| {
        image::Luma([if mask_prob[y as usize * width + x as usize] >= MASK_THRESHOLD { 255 } else { 0 }])
    })
}

/// Runs one forward pass; extents must be divisible by 16.
pub fn assess(
    net: &MultiTaskNet<f32>,
    image: &RgbImage,
    config: &AssessConfig,
) -> Result<(CoverAssessment, GrayImage), NetError> {
    let (w, h) = image.dimensions();
    let (w, h) = (w as usize, h as usize);
    if w == 0 || h == 0 || w % OUTPUT_STRIDE != 0 || h % OUTPUT_STRIDE != 0 {
        return Err(NetError::InputSize { height: h, width: w });
    }
    let wrapper = Sample {
        id: String::new(),
        scene: String::new(),
        image: image.clone(),
        mask: GrayImage::new(w as u32, h as u32),
        clarity_score: MAX_SCORE,
        blur_level: 0,
        split: Split::Test,
    };
    let (clarity, mask) = net.predict(&images_to_tensor(&[&wrapper]))?;
    let probs = mask.data();
    Ok((
        assessment_from_outputs(clarity.data()[0] as f64, probs, h, w, config),
        binary_mask(probs, h, w),
    ))
}

/// Centre crop to the largest extents divisible by 16, or `None` if the
/// image already conforms.
pub fn crop_to_stride(image: &RgbImage) -> Option<RgbImage> {
    let (w, h) = image.dimensions();
    let m = OUTPUT_STRIDE as u32;
    let (cw, ch) = (w / m * m, h / m * m);
    if (cw, ch) == (w, h) || cw == 0 || ch == 0 {
        return None;
    }
    Some(image::imageops::crop_imm(image, (w - cw) / 2, (h - ch) / 2, cw, ch).to_image())
}

/// Foreground pixels blended 50% toward the highlight colour.
pub fn overlay(image: &RgbImage, mask: &GrayImage) -> Result<RgbImage, NetError> {
    if image.dimensions() != mask.dimensions() {
        return Err(NetError::Config(format!(
            "overlay size mismatch: image {:?}, mask {:?}",
            image.dimensions(),
            mask.dimensions()
        )));
    }
    let mut out = image.clone();
    for (px, m) in out.pixels_mut().zip(mask.pixels()) {
        if m[0] != 0 {
            *px = Rgb([0, 1, 2].map(|c| ((px[c] as f64 + HIGHLIGHT[c] as f64) / 2.0).round() as u8));
        }
    }
    Ok(out)
}

pub fn render_overlay(image: &RgbImage, mask: &GrayImage, out_path: impl AsRef<Path>) -> Result<(), NetError> {
    overlay(image, mask)?
        .save(out_path.as_ref())
        .map_err(|e| NetError::Io(std::io::Error::other(format!("{}: {e}", out_path.as_ref().display()))))
}
