//! SGD with momentum under polynomial learning-rate decay, the two joint
//! training strategies, single-task baselines and the evaluation loop.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::save_checkpoint;
use crate::dataset::{center_crop_to_multiple, load_split, random_crop, DatasetError, Manifest, Sample, Split};
use crate::losses::{gate_indicator, multitask_loss, BatchTargets, LossConfig, LossError, MAX_SCORE};
use crate::metrics::{lcc, Confusion, IouReport, MetricError};
use crate::network::{GroupSet, MultiTaskNet, NetError, OUTPUT_STRIDE};
use crate::tensor::{Tensor, TensorError};
use crate::autodiff::{Reduction, Tape};

/// Per-channel input normalization: `(v / 255 - MEAN) / STD`.
pub const INPUT_MEAN: f32 = 0.5;
pub const INPUT_STD: f32 = 0.25;
const MASK_THRESHOLD: f64 = 0.5;
const EVAL_BATCH: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("evaluation split is empty")]
    EmptyEvalSplit,
    #[error(
        "non-finite value at epoch {epoch}, iteration {iteration} (samples {sample_ids:?}): {detail}"
    )]
    NonFinite {
        epoch: usize,
        iteration: usize,
        sample_ids: Vec<String>,
        detail: String,
    },
    #[error("parameter shape mismatch in optimizer step: {0:?} vs {1:?}")]
    StepShape(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "end2end")]
    EndToEnd,
    #[serde(rename = "multistage")]
    MultiStage,
    #[serde(rename = "clarity-only")]
    ClarityOnly,
    #[serde(rename = "seg-only")]
    SegmentationOnly,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::EndToEnd,
        Strategy::MultiStage,
        Strategy::ClarityOnly,
        Strategy::SegmentationOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::EndToEnd => "end2end",
            Strategy::MultiStage => "multistage",
            Strategy::ClarityOnly => "clarity-only",
            Strategy::SegmentationOnly => "seg-only",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

/// Which head a single-task baseline trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Clarity,
    Segmentation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub gate_threshold: f64,
    pub poly_power: f64,
    pub crop_size: usize,
    pub strategy: Strategy,
    pub seed: u64,
    /// Multi-stage only; `None` means `epochs / 2`.
    pub stage1_epochs: Option<usize>,
    /// Evaluate on the test split after every epoch.
    pub eval_each_epoch: bool,
    pub seg_reduction: Reduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 7e-3,
            momentum: 0.9,
            batch_size: 8,
            epochs: 30,
            lambda: 0.1,
            gate_threshold: 2.3,
            poly_power: 2.0,
            crop_size: 64,
            strategy: Strategy::EndToEnd,
            seed: 0,
            stage1_epochs: None,
            eval_each_epoch: true,
            seg_reduction: Reduction::Mean,
        }
    }
}

/// One contiguous run of epochs with a fixed objective and trainable set.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Stage {
    index: usize,
    epochs: usize,
    trainable: GroupSet,
    clarity_weight: f64,
    lambda: f64,
}

const NO_DECODER: GroupSet = GroupSet {
    encoder: true,
    context: true,
    clarity_head: true,
    decoder: false,
};
const NO_CLARITY_HEAD: GroupSet = GroupSet {
    encoder: true,
    context: true,
    clarity_head: false,
    decoder: true,
};
const CLARITY_HEAD_ONLY: GroupSet = GroupSet {
    encoder: false,
    context: false,
    clarity_head: true,
    decoder: false,
};

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.poly_power >= 0.0) {
            return bad(format!("poly_power must be >= 0, got {}", self.poly_power));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(OUTPUT_STRIDE) {
            return bad(format!("crop_size must be a positive multiple of 16, got {}", self.crop_size));
        }
        if self.strategy == Strategy::MultiStage {
            let s1 = self.resolved_stage1_epochs();
            if s1 == 0 || s1 >= self.epochs {
                return bad(format!("stage1_epochs must be in 1..{}, got {s1}", self.epochs));
            }
        }
        Ok(())
    }

    pub fn resolved_stage1_epochs(&self) -> usize {
        self.stage1_epochs.unwrap_or(self.epochs / 2)
    }

    fn stages(&self) -> Vec<Stage> {
        let full = |trainable, clarity_weight, lambda| Stage {
            index: 1,
            epochs: self.epochs,
            trainable,
            clarity_weight,
            lambda,
        };
        match self.strategy {
            Strategy::EndToEnd => vec![full(GroupSet::ALL, 1.0, self.lambda)],
            Strategy::ClarityOnly => vec![full(NO_DECODER, 1.0, 0.0)],
            Strategy::SegmentationOnly => vec![full(NO_CLARITY_HEAD, 0.0, self.lambda)],
            Strategy::MultiStage => {
                let s1 = self.resolved_stage1_epochs();
                vec![
                    Stage {
                        index: 1,
                        epochs: s1,
                        trainable: NO_CLARITY_HEAD,
                        clarity_weight: 0.0,
                        lambda: self.lambda,
                    },
                    Stage {
                        index: 2,
                        epochs: self.epochs - s1,
                        trainable: CLARITY_HEAD_ONLY,
                        clarity_weight: 1.0,
                        lambda: 0.0,
                    },
                ]
            }
        }
    }

    fn reports_clarity(&self) -> bool {
        self.strategy != Strategy::SegmentationOnly
    }

    fn reports_segmentation(&self) -> bool {
        self.strategy != Strategy::ClarityOnly
    }
}

/// `lr0 * (1 - t / T)^power`.
pub fn poly_lr(lr0: f64, t: usize, total: usize, power: f64) -> f64 {
    assert!(total >= 1 && t <= total, "poly_lr needs 0 <= t <= T, T >= 1 (t = {t}, T = {total})");
    lr0 * (1.0 - t as f64 / total as f64).powf(power)
}

/// Classic momentum: `v = momentum * v + g`, then `w -= lr * v`.
pub fn sgd_momentum_step(
    param: &mut Tensor<f32>,
    grad: &Tensor<f32>,
    velocity: &mut Tensor<f32>,
    lr: f64,
    momentum: f64,
) -> Result<(), TrainError> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        let other = if param.shape() != grad.shape() { grad } else { &*velocity };
        return Err(TrainError::StepShape(param.shape().to_vec(), other.shape().to_vec()));
    }
    let (lr, mu) = (lr as f32, momentum as f32);
    for ((w, v), &g) in param.data_mut().iter_mut().zip(velocity.data_mut()).zip(grad.data()) {
        *v = mu * *v + g;
        *w -= lr * *v;
    }
    Ok(())
}

/// Normalized `[N, 3, H, W]` input batch.
pub fn images_to_tensor(samples: &[&Sample]) -> Tensor<f32> {
    let (w, h) = samples[0].image.dimensions();
    let (w, h) = (w as usize, h as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; samples.len() * 3 * plane];
    for (b, s) in samples.iter().enumerate() {
        assert_eq!(s.image.dimensions(), (w as u32, h as u32), "batch images must share extents");
        for (i, px) in s.image.pixels().enumerate() {
            for ch in 0..3 {
                data[(b * 3 + ch) * plane + i] = (px[ch] as f32 / 255.0 - INPUT_MEAN) / INPUT_STD;
            }
        }
    }
    Tensor::new(vec![samples.len(), 3, h, w], data).expect("batch layout")
}

/// Clarity scores and `[N, 1, H, W]` 0/1 masks.
pub fn batch_targets(samples: &[&Sample]) -> BatchTargets<f32> {
    let (w, h) = samples[0].mask.dimensions();
    let data = samples
        .iter()
        .flat_map(|s| s.mask.as_raw().iter().map(|&v| if v != 0 { 1.0 } else { 0.0 }))
        .collect();
    BatchTargets {
        scores: samples.iter().map(|s| s.clarity_score).collect(),
        masks: Tensor::new(vec![samples.len(), 1, h as usize, w as usize], data).expect("mask layout"),
    }
}

/// Samples held in memory, partitioned by split.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TrainData {
    pub fn from_samples(samples: impl IntoIterator<Item = Sample>) -> Self {
        let (train, test) = samples.into_iter().partition(|s| s.split == Split::Train);
        TrainData { train, test }
    }

    pub fn from_manifest(manifest: &Manifest) -> Result<Self, TrainError> {
        Ok(TrainData {
            train: load_split(manifest, Split::Train)?,
            test: load_split(manifest, Split::Test)?,
        })
    }
}

/// Mean objective values over one epoch, weighted by batch size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub total: f64,
    /// `None` when the epoch's objective has no clarity term.
    pub clarity_term: Option<f64>,
    /// `None` when the epoch's objective has no segmentation term.
    pub seg_term: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based, counted across stages.
    pub epoch: usize,
    pub stage: usize,
    pub loss: EpochLoss,
    /// Learning rate of the epoch's first iteration.
    pub lr: f64,
    pub metrics: Option<MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// Learning rate used at every iteration, in order.
    pub lr_trace: Vec<f64>,
    pub wall_time_secs: f64,
    pub checkpoint: Option<PathBuf>,
}

pub const REPORT_HEADER: &str = "epoch,total,clarity_term,seg_term,lcc,miou_all,miou_gated,lr";

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainReport {
    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// One row per epoch; fields that do not apply are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let m = e.metrics.as_ref();
            let row = [
                e.epoch.to_string(),
                e.loss.total.to_string(),
                opt_field(e.loss.clarity_term),
                opt_field(e.loss.seg_term),
                opt_field(m.and_then(|m| m.lcc)),
                opt_field(m.and_then(|m| m.miou_all.map(|r| r.miou))),
                opt_field(m.and_then(|m| m.miou_gated.map(|r| r.miou))),
                e.lr.to_string(),
            ];
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Report CSV path for a checkpoint: `model.ckpt` -> `model.report.csv`.
pub fn report_path_for(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    checkpoint.with_file_name(format!("{stem}.report.csv"))
}

/// Writes the checkpoint and the report CSV next to it.
pub fn save_run(net: &MultiTaskNet<f32>, report: &mut TrainReport, checkpoint: &Path) -> Result<PathBuf, TrainError> {
    if let Some(dir) = checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    save_checkpoint(net, checkpoint)?;
    let csv_path = report_path_for(checkpoint);
    let mut file = fs::File::create(&csv_path).map_err(|source| TrainError::Io {
        path: csv_path.clone(),
        source,
    })?;
    file.write_all(report.to_csv().as_bytes()).map_err(|source| TrainError::Io {
        path: csv_path.clone(),
        source,
    })?;
    report.checkpoint = Some(checkpoint.to_path_buf());
    Ok(csv_path)
}

pub fn train_end_to_end(
    net: &mut MultiTaskNet<f32>,
    data: &TrainData,
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    require_strategy(config, Strategy::EndToEnd)?;
    train(net, data, config, |_| {})
}

pub fn train_multi_stage(
    net: &mut MultiTaskNet<f32>,
    data: &TrainData,
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    require_strategy(config, Strategy::MultiStage)?;
    train(net, data, config, |_| {})
}

pub fn train_single_task(
    net: &mut MultiTaskNet<f32>,
    data: &TrainData,
    config: &TrainConfig,
    task: Task,
) -> Result<TrainReport, TrainError> {
    let strategy = match task {
        Task::Clarity => Strategy::ClarityOnly,
        Task::Segmentation => Strategy::SegmentationOnly,
    };
    let config = TrainConfig {
        strategy,
        ..config.clone()
    };
    train(net, data, &config, |_| {})
}

fn require_strategy(config: &TrainConfig, expected: Strategy) -> Result<(), TrainError> {
    if config.strategy != expected {
        return Err(TrainError::Config(format!(
            "strategy is {}, expected {expected}",
            config.strategy
        )));
    }
    Ok(())
}

fn nonfinite(epoch: usize, iteration: usize, batch: &[&Sample], detail: String) -> TrainError {
    TrainError::NonFinite {
        epoch,
        iteration,
        sample_ids: batch.iter().map(|s| s.id.clone()).collect(),
        detail,
    }
}

/// Runs every stage of `config.strategy`, calling `on_epoch` after each
/// epoch.
pub fn train(
    net: &mut MultiTaskNet<f32>,
    data: &TrainData,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = data.train.len();
    let iters_per_epoch = n.div_ceil(config.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = TrainReport {
        config: config.clone(),
        epochs: Vec::new(),
        lr_trace: Vec::new(),
        wall_time_secs: 0.0,
        checkpoint: None,
    };
    let mut epoch_counter = 0;
    let mut iteration = 0;

    for stage in config.stages() {
        let mut velocity: Vec<Tensor<f32>> = net.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let loss_config = LossConfig {
            lambda: stage.lambda,
            gate_threshold: config.gate_threshold,
            clarity_weight: stage.clarity_weight,
            seg_reduction: config.seg_reduction,
        };
        let total_iters = stage.epochs * iters_per_epoch;
        let mut t = 0;

        for _ in 0..stage.epochs {
            epoch_counter += 1;
            order.shuffle(&mut rng);
            let (mut sum_total, mut sum_clarity, mut sum_seg) = (0.0, 0.0, 0.0);
            let epoch_lr = poly_lr(config.lr0, t, total_iters, config.poly_power);

            for chunk in order.chunks(config.batch_size) {
                iteration += 1;
                let crops = chunk
                    .iter()
                    .map(|&i| random_crop(&data.train[i], config.crop_size, &mut rng))
                    .collect::<Result<Vec<_>, _>>()?;
                let batch: Vec<&Sample> = crops.iter().collect();
                let lr = poly_lr(config.lr0, t, total_iters, config.poly_power);
                report.lr_trace.push(lr);

                let mut tape = Tape::new();
                let params = net.bind(&mut tape, stage.trainable);
                let x = tape.constant(images_to_tensor(&batch));
                let step = (|| -> Result<_, TrainError> {
                    let out = net.forward(&mut tape, &params, x)?;
                    let targets = batch_targets(&batch);
                    let (loss, parts) = multitask_loss(&mut tape, out.clarity, out.mask, &targets, &loss_config)?;
                    if !parts.total.is_finite() {
                        return Err(nonfinite(
                            epoch_counter,
                            iteration,
                            &batch,
                            format!(
                                "loss total {}, clarity {}, seg {}",
                                parts.total, parts.clarity_term, parts.seg_term
                            ),
                        ));
                    }
                    tape.backward(loss)?;
                    Ok(parts)
                })();
                let parts = step.map_err(|e| match e {
                    TrainError::Net(NetError::Tensor(TensorError::NonFinite { op }))
                    | TrainError::Loss(LossError::Tensor(TensorError::NonFinite { op }))
                    | TrainError::Tensor(TensorError::NonFinite { op }) => {
                        nonfinite(epoch_counter, iteration, &batch, format!("in {op}"))
                    }
                    other => other,
                })?;

                for (k, p) in net.params_mut().iter_mut().enumerate() {
                    if !stage.trainable.contains(p.group) {
                        continue;
                    }
                    let grad = tape.grad_or_zeros(params.vars()[k]);
                    sgd_momentum_step(&mut p.value, &grad, &mut velocity[k], lr, config.momentum)?;
                }

                let w = batch.len() as f64;
                sum_total += parts.total * w;
                sum_clarity += parts.clarity_term * w;
                sum_seg += parts.seg_term * w;
                t += 1;
            }

            let loss = EpochLoss {
                total: sum_total / n as f64,
                clarity_term: (stage.clarity_weight != 0.0).then(|| sum_clarity / n as f64),
                seg_term: (stage.lambda != 0.0).then(|| sum_seg / n as f64),
            };
            let metrics = if config.eval_each_epoch && !data.test.is_empty() {
                let mut m = evaluate(net, &data.test, config.gate_threshold)?.report;
                if !config.reports_clarity() {
                    m.lcc = None;
                    m.lcc_degenerate = false;
                }
                if !config.reports_segmentation() {
                    m.miou_all = None;
                    m.miou_gated = None;
                }
                Some(m)
            } else {
                None
            };
            let record = EpochRecord {
                epoch: epoch_counter,
                stage: stage.index,
                loss,
                lr: epoch_lr,
                metrics,
            };
            on_epoch(&record);
            report.epochs.push(record);
        }
    }
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

// ----------------------------------------------------------------------
// Evaluation
// ----------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub n_gated: usize,
    /// `None` when not applicable or when a score vector is constant.
    pub lcc: Option<f64>,
    pub lcc_degenerate: bool,
    pub miou_all: Option<IouReport>,
    /// Over samples with clarity score above the gate threshold.
    pub miou_gated: Option<IouReport>,
}

/// Per-sample evaluation outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePrediction {
    pub id: String,
    pub clarity_score: f64,
    /// Network output scaled to `[0, 10]`.
    pub predicted_score: f64,
    pub gated: bool,
    /// Row-major 0/1 truth and foreground probability.
    pub mask_truth: Vec<u8>,
    pub mask_prob: Vec<f32>,
    pub confusion: Confusion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<SamplePrediction>,
}

pub const PREDICTION_HEADER: &str = "id,clarity_score,predicted_score,gated,tp,fp,fn,tn";

impl Evaluation {
    /// Per-sample CSV carrying everything the report is computed from.
    pub fn predictions_csv(&self) -> String {
        let mut out = String::from(PREDICTION_HEADER);
        out.push('\n');
        for p in &self.predictions {
            let c = p.confusion;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                p.id, p.clarity_score, p.predicted_score, p.gated as u8, c.tp, c.fp, c.fn_, c.tn
            ));
        }
        out
    }
}

/// Computes the report from per-sample predictions.
pub fn metrics_from_predictions(predictions: &[SamplePrediction]) -> Result<MetricsReport, TrainError> {
    if predictions.is_empty() {
        return Err(TrainError::EmptyEvalSplit);
    }
    let truth: Vec<f64> = predictions.iter().map(|p| p.clarity_score).collect();
    let pred: Vec<f64> = predictions.iter().map(|p| p.predicted_score).collect();
    let (lcc, lcc_degenerate) = match lcc(&truth, &pred) {
        Ok(v) => (Some(v), false),
        Err(MetricError::Degenerate(_)) | Err(MetricError::TooFewSamples(_)) => (None, true),
        Err(e) => return Err(e.into()),
    };
    let pool = |gated_only: bool| {
        let counts: Vec<Confusion> = predictions
            .iter()
            .filter(|p| !gated_only || p.gated)
            .map(|p| p.confusion)
            .collect();
        if counts.is_empty() {
            return Ok(None);
        }
        let total = counts.into_iter().fold(Confusion::default(), Confusion::merge);
        IouReport::from_confusion(total).map(Some)
    };
    Ok(MetricsReport {
        n_samples: predictions.len(),
        n_gated: predictions.iter().filter(|p| p.gated).count(),
        lcc,
        lcc_degenerate,
        miou_all: pool(false)?,
        miou_gated: pool(true)?,
    })
}

/// Deterministic evaluation: centre crop to a multiple of 16, no
/// augmentation, masks thresholded at 0.5.
pub fn evaluate(net: &MultiTaskNet<f32>, samples: &[Sample], gate_threshold: f64) -> Result<Evaluation, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyEvalSplit);
    }
    let crops = samples
        .iter()
        .map(|s| center_crop_to_multiple(s, OUTPUT_STRIDE))
        .collect::<Result<Vec<_>, _>>()?;
    let mut predictions = Vec::with_capacity(samples.len());
    // Batch only runs of equal extents.
    let mut start = 0;
    while start < crops.len() {
        let dims = crops[start].image.dimensions();
        let mut end = start + 1;
        while end < crops.len() && end - start < EVAL_BATCH && crops[end].image.dimensions() == dims {
            end += 1;
        }
        let batch: Vec<&Sample> = crops[start..end].iter().collect();
        let (clarity, mask) = net.predict(&images_to_tensor(&batch))?;
        let plane = (dims.0 * dims.1) as usize;
        for (b, s) in batch.iter().enumerate() {
            let prob = mask.data()[b * plane..(b + 1) * plane].to_vec();
            let truth: Vec<u8> = s.mask.as_raw().iter().map(|&v| u8::from(v != 0)).collect();
            let confusion = Confusion::from_mask(&truth, &prob, MASK_THRESHOLD)?;
            predictions.push(SamplePrediction {
                id: s.id.clone(),
                clarity_score: s.clarity_score,
                predicted_score: clarity.data()[b] as f64 * MAX_SCORE,
                gated: gate_indicator(s.clarity_score, gate_threshold) == 1,
                mask_truth: truth,
                mask_prob: prob,
                confusion,
            });
        }
        start = end;
    }
    Ok(Evaluation {
        report: metrics_from_predictions(&predictions)?,
        predictions,
    })
}

/// Loads one split of a manifest and evaluates it.
pub fn evaluate_split(
    net: &MultiTaskNet<f32>,
    manifest: &Manifest,
    split: Split,
    gate_threshold: f64,
) -> Result<Evaluation, TrainError> {
    evaluate(net, &load_split(manifest, split)?, gate_threshold)
}
