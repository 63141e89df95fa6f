//! Central finite-difference verification of the autodiff engine.
//!
//! Checks run in `f64`; the relative error of one coordinate is
//! `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{ConvGeom, Reduction, Tape, Var};
use crate::losses::{multitask_loss, BatchTargets, LossConfig, LossError};
use crate::network::{BoundParams, MultiTaskNet, NetConfig, NetError};
use crate::tensor::{Element, Tensor, TensorError};

pub const DEFAULT_TOLERANCE: f64 = 1e-3;
const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckOptions {
    pub eps: f64,
    /// Coordinates checked per input; `None` checks all.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            eps: <f64 as Element>::FD_EPS,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub max_rel_error: f64,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, GradCheckError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    value
        .item()
        .ok_or_else(|| TensorError::NonScalar(value.shape().to_vec()).into())
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences at `inputs`. The numeric side divides by the perturbation
/// actually realized in floating point.
pub fn finite_diff_grad_check<F>(f: F, inputs: &[Tensor<f64>], options: CheckOptions) -> Result<CheckOutcome, GradCheckError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, GradCheckError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match options.max_coords_per_input {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let x = input.data()[i];
            let (hi, lo) = (x + options.eps, x - options.eps);
            work[k].data_mut()[i] = hi;
            let f_hi = evaluate(&f, &work)?;
            work[k].data_mut()[i] = lo;
            let f_lo = evaluate(&f, &work)?;
            work[k].data_mut()[i] = x;
            let numeric = (f_hi - f_lo) / (hi - lo);
            worst = worst.max(relative_error(analytic[k].data()[i], numeric));
            coordinates += 1;
        }
    }
    Ok(CheckOutcome {
        max_rel_error: worst,
        coordinates,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteRow {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
    pub tolerance: f64,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn worst(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for inputs of kinked functions.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let mag = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// Distinct values spaced well beyond the perturbation, for max-pool.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let data = order.into_iter().map(|r| r as f64 * 0.05 - 1.0).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Random projection that turns any output into a scalar with
/// non-degenerate gradients.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var, GradCheckError> {
    let n = tape.value(out).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let weights = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    Ok(tape.weighted_sum(out, weights)?)
}

/// Tiny network used for the end-to-end check: 16x16 inputs, two channels
/// per stage.
pub fn micro_net_config(seed: u64) -> NetConfig {
    NetConfig {
        base_channels: 2,
        head_channels: 2,
        decoder_channels: 2,
        low_level_channels: 2,
        context_rates: vec![1],
        input_size: 16,
        seed,
        ..NetConfig::default()
    }
}

type CheckFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, GradCheckError>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: CheckFn,
    max_coords: Option<usize>,
    eps: f64,
}

fn cases(seed: u64) -> Result<Vec<Case>, GradCheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    for (name, geom, k) in [
        ("conv2d", ConvGeom::new(1, 1, 1), 3),
        ("conv2d_strided", ConvGeom::new(2, 1, 1), 3),
        ("conv2d_dilated", ConvGeom::new(1, 2, 2), 3),
        ("conv2d_pointwise", ConvGeom::new(1, 0, 1), 1),
    ] {
        cases.push(Case {
            name,
            inputs: vec![
                uniform(&mut rng, &[2, 3, 7, 8], -1.0, 1.0),
                uniform(&mut rng, &[4, 3, k, k], -1.0, 1.0),
                uniform(&mut rng, &[4], -0.5, 0.5),
            ],
            f: Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], geom)?;
                project(t, y, seed)
            }),
            max_coords: None,
            eps: <f64 as Element>::FD_EPS,
        });
    }

    cases.push(Case {
        name: "max_pool2",
        inputs: vec![distinct(&mut rng, &[2, 3, 8, 6])],
        f: Box::new(move |t, v| {
            let y = t.max_pool2(v[0])?;
            project(t, y, seed)
        }),
        max_coords: None,
        eps: <f64 as Element>::FD_EPS,
    });
    cases.push(Case {
        name: "global_avg_pool",
        inputs: vec![uniform(&mut rng, &[2, 4, 5, 3], -1.0, 1.0)],
        f: Box::new(move |t, v| {
            let y = t.global_avg_pool(v[0])?;
            project(t, y, seed)
        }),
        max_coords: None,
        eps: <f64 as Element>::FD_EPS,
    });
    cases.push(Case {
        name: "linear",
        inputs: vec![
            uniform(&mut rng, &[3, 4], -1.0, 1.0),
            uniform(&mut rng, &[2, 4], -1.0, 1.0),
            uniform(&mut rng, &[2], -1.0, 1.0),
        ],
        f: Box::new(move |t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            project(t, y, seed)
        }),
        max_coords: None,
        eps: <f64 as Element>::FD_EPS,
    });
    cases.push(Case {
        name: "relu",
        inputs: vec![away_from_zero(&mut rng, &[2, 3, 4, 4])],
        f: Box::new(move |t, v| {
            let y = t.relu(v[0])?;
            project(t, y, seed)
        }),
        max_coords: None,
        eps: <f64 as Element>::FD_EPS,
    });
    cases.push(Case {
        name: "sigmoid",
        inputs: vec![uniform(&mut rng, &[2, 3, 4, 4], -4.0, 4.0)],
        f: Box::new(move |t, v| {
            let y = t.sigmoid(v[0])?;
            project(t, y, seed)
        }),
        max_coords: None,
        eps: <f64 as Element>::FD_EPS,
    });
    cases.push(Case {
        name: "bilinear_upsample",
        inputs: vec![uniform(&mut rng, &[2, 2, 3, 4], -1.0, 1.0)],
        f: Box::new(move |t, v| {
            let y = t.bilinear_upsample(v[0], 4)?;
            project(t, y, seed)
        }),
        max_coords: None,
        eps: <f64 as Element>::FD_EPS,
    });
    cases.push(Case {
        name: "concat_channels",
        inputs: vec![
            uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0),
            uniform(&mut rng, &[2, 1, 4, 4], -1.0, 1.0),
        ],
        f: Box::new(move |t, v| {
            let y = t.concat_channels(v[0], v[1])?;
            project(t, y, seed)
        }),
        max_coords: None,
        eps: <f64 as Element>::FD_EPS,
    });
    cases.push(Case {
        name: "shared_parameter",
        inputs: vec![uniform(&mut rng, &[1, 2, 4, 4], -1.0, 1.0), uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0), Tensor::zeros([2])],
        f: Box::new(move |t, v| {
            // The same kernel applied twice in sequence.
            let geom = ConvGeom::new(1, 1, 1);
            let a = t.conv2d(v[0], v[1], v[2], geom)?;
            let b = t.conv2d(a, v[1], v[2], geom)?;
            project(t, b, seed)
        }),
        max_coords: None,
        eps: <f64 as Element>::FD_EPS,
    });

    // Clarity loss via the sigmoid output it is applied to.
    let scores = [9.5, 1.9];
    cases.push(Case {
        name: "clarity_loss",
        inputs: vec![uniform(&mut rng, &[2, 1], -2.0, 2.0)],
        f: Box::new(move |t, v| {
            let p = t.sigmoid(v[0])?;
            let se = t.squared_error(p, scores.iter().map(|y| y / 10.0).collect())?;
            Ok(t.weighted_sum(se, vec![0.5, 0.5])?)
        }),
        max_coords: None,
        eps: <f64 as Element>::FD_EPS,
    });

    let truth = Tensor::from_fn([2, 1, 8, 8], |i| if (i * 7 + 3) % 5 < 2 { 1.0 } else { 0.0 });
    for (name, reduction) in [("segmentation_loss", Reduction::Mean), ("segmentation_loss_sum", Reduction::Sum)] {
        let truth = truth.clone();
        cases.push(Case {
            name,
            inputs: vec![uniform(&mut rng, &[2, 1, 8, 8], -3.0, 3.0)],
            f: Box::new(move |t, v| {
                let p = t.sigmoid(v[0])?;
                let ce = t.binary_cross_entropy(p, truth.clone(), reduction)?;
                Ok(t.weighted_sum(ce, vec![0.5, 0.5])?)
            }),
            max_coords: None,
            eps: <f64 as Element>::FD_EPS,
        });
    }

    // Gated objective on logits: one sample above the gate, one below.
    let targets = BatchTargets {
        scores: vec![8.2, 1.9],
        masks: truth.clone(),
    };
    cases.push(Case {
        name: "multitask_loss",
        inputs: vec![uniform(&mut rng, &[2, 1], -2.0, 2.0), uniform(&mut rng, &[2, 1, 8, 8], -3.0, 3.0)],
        f: Box::new(move |t, v| {
            let c = t.sigmoid(v[0])?;
            let m = t.sigmoid(v[1])?;
            Ok(multitask_loss(t, c, m, &targets, &LossConfig::default())?.0)
        }),
        max_coords: None,
        eps: <f64 as Element>::FD_EPS,
    });

    // Whole network: all parameters plus the input images.
    // Zero biases would put dead-unit pre-activations exactly on the relu
    // kink; shift them off it.
    let mut net: MultiTaskNet<f64> = MultiTaskNet::<f32>::build(micro_net_config(seed))?.cast();
    for p in net.params_mut().iter_mut().filter(|p| p.name.ends_with(".bias")) {
        p.value = away_from_zero(&mut rng, p.value.shape());
    }
    let size = net.config().input_size;
    let images = uniform(&mut rng, &[2, 3, size, size], -1.5, 1.5);
    let masks = Tensor::from_fn([2, 1, size, size], |i| {
        let (r, c) = ((i / size) % size, i % size);
        if (4..11).contains(&r) && (3..12).contains(&c) {
            1.0
        } else {
            0.0
        }
    });
    let targets = BatchTargets {
        scores: vec![9.1, 5.5],
        masks,
    };
    let mut inputs = vec![images];
    inputs.extend(net.params().iter().map(|p| p.value.clone()));
    cases.push(Case {
        name: "network_multitask_loss",
        inputs,
        f: Box::new(move |t, v| {
            let params = BoundParams::from_vars(v[1..].to_vec());
            let out = net.forward(t, &params, v[0])?;
            Ok(multitask_loss(t, out.clarity, out.mask, &targets, &LossConfig::default())?.0)
        }),
        max_coords: None,
        // Input gradients reach ~1e-9 through the stack; a wider step keeps
        // rounding noise in the difference quotient well below that.
        eps: 1e-4,
    });
    Ok(cases)
}

/// Runs every case; rows are in a fixed order.
pub fn run_suite(tolerance: f64, seed: u64) -> Result<SuiteReport, GradCheckError> {
    let started = Instant::now();
    let mut rows = Vec::new();
    for case in cases(seed)? {
        let options = CheckOptions {
            eps: case.eps,
            max_coords_per_input: case.max_coords,
            seed,
        };
        let outcome = finite_diff_grad_check(case.f, &case.inputs, options)?;
        rows.push(SuiteRow {
            name: case.name.to_string(),
            max_rel_error: outcome.max_rel_error,
            coordinates: outcome.coordinates,
            passed: outcome.max_rel_error < tolerance,
        });
    }
    Ok(SuiteReport {
        rows,
        tolerance,
        seconds: started.elapsed().as_secs_f64(),
    })
}
