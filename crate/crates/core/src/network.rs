//! The shared-encoder multi-task network.
//!
//! ```text
//! image ─ stem/2 ─ stage1/2 ─┬─ stage2/2 ─ stage3/2 ─ stage4 (dil 2) ─ context ─┬─ clarity head ─ score
//!                            │  (low-level tap, stride 4)                      │
//!                            └──────────────────── decoder ───────────────────┴─ mask
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{ConvGeom, Tape, Var};
use crate::tensor::{Element, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("input spatial size {height}x{width} is not divisible by 16")]
    InputSize { height: usize, width: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// Ratio between input resolution and the shared feature map.
pub const OUTPUT_STRIDE: usize = 16;
/// Stride of the encoder stage that feeds low-level features to the decoder.
pub const LOW_LEVEL_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub base_channels: usize,
    /// Width of the context block output and of the clarity head convs.
    pub head_channels: usize,
    pub decoder_channels: usize,
    /// Width of the 1x1 reduction applied to low-level features.
    pub low_level_channels: usize,
    pub context_rates: Vec<usize>,
    pub input_size: usize,
    /// Encoder stage index (0 = stem) whose output is the stride-4 tap.
    pub low_level_tap: usize,
    pub output_stride: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            base_channels: 32,
            head_channels: 64,
            decoder_channels: 32,
            low_level_channels: 16,
            context_rates: vec![1, 2, 4],
            input_size: 64,
            low_level_tap: 1,
            output_stride: OUTPUT_STRIDE,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |msg: String| Err(NetError::Config(msg));
        for (name, v) in [
            ("base_channels", self.base_channels),
            ("head_channels", self.head_channels),
            ("decoder_channels", self.decoder_channels),
            ("low_level_channels", self.low_level_channels),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.output_stride != OUTPUT_STRIDE {
            return bad(format!("output_stride must be {OUTPUT_STRIDE}, got {}", self.output_stride));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(OUTPUT_STRIDE) {
            return bad(format!("input_size {} must be a positive multiple of 16", self.input_size));
        }
        // Stem is stride 2, every later stage doubles it.
        if 1usize << (self.low_level_tap + 1) != LOW_LEVEL_STRIDE {
            return bad(format!("low_level_tap {} is not the stride-4 stage (1)", self.low_level_tap));
        }
        if self.context_rates.is_empty() {
            return bad("context_rates must be non-empty".into());
        }
        let map = self.input_size / OUTPUT_STRIDE;
        if let Some(&r) = self.context_rates.iter().find(|&&r| r == 0 || r > map) {
            return bad(format!("context rate {r} must lie in 1..={map} for input_size {}", self.input_size));
        }
        Ok(())
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Context,
    ClarityHead,
    Decoder,
}

/// Set of parameter groups, used to select what trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupSet {
    pub encoder: bool,
    pub context: bool,
    pub clarity_head: bool,
    pub decoder: bool,
}

impl GroupSet {
    pub const ALL: GroupSet = GroupSet {
        encoder: true,
        context: true,
        clarity_head: true,
        decoder: true,
    };
    pub const NONE: GroupSet = GroupSet {
        encoder: false,
        context: false,
        clarity_head: false,
        decoder: false,
    };

    pub fn contains(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Context => self.context,
            ParamGroup::ClarityHead => self.clarity_head,
            ParamGroup::Decoder => self.decoder,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Element = f32> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    weight: usize,
    bias: usize,
    geom: ConvGeom,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: [ConvLayer; 5],
    context: Vec<ConvLayer>,
    fuse: ConvLayer,
    clarity: [ConvLayer; 3],
    fc: (usize, usize),
    dec_proj: ConvLayer,
    low_proj: ConvLayer,
    refine: [ConvLayer; 2],
    classifier: ConvLayer,
}

/// Parameter shapes in manifest order, and the layer wiring over them.
fn plan(config: &NetConfig) -> (Vec<(String, ParamGroup, Vec<usize>)>, Layout) {
    let mut entries: Vec<(String, ParamGroup, Vec<usize>)> = Vec::new();
    let mut conv = |name: &str, group, cin: usize, cout: usize, k: usize, geom: ConvGeom| {
        entries.push((format!("{name}.weight"), group, vec![cout, cin, k, k]));
        entries.push((format!("{name}.bias"), group, vec![cout]));
        ConvLayer {
            weight: entries.len() - 2,
            bias: entries.len() - 1,
            geom,
        }
    };
    let b = config.base_channels;
    let h = config.head_channels;
    let d = config.decoder_channels;
    let l = config.low_level_channels;
    let down = ConvGeom::new(2, 1, 1);
    let same = ConvGeom::new(1, 1, 1);
    let pointwise = ConvGeom::new(1, 0, 1);

    use ParamGroup::*;
    let encoder = [
        conv("encoder.stem", Encoder, 3, b, 3, down),
        conv("encoder.stage1", Encoder, b, b, 3, down),
        conv("encoder.stage2", Encoder, b, 2 * b, 3, down),
        conv("encoder.stage3", Encoder, 2 * b, 2 * b, 3, down),
        conv("encoder.stage4", Encoder, 2 * b, 2 * b, 3, ConvGeom::new(1, 2, 2)),
    ];
    let context: Vec<ConvLayer> = config
        .context_rates
        .iter()
        .map(|&r| conv(&format!("context.rate{r}"), Context, 2 * b, h, 3, ConvGeom::new(1, r, r)))
        .collect();
    let fuse = conv("context.fuse", Context, h * config.context_rates.len(), h, 1, pointwise);
    let clarity = [
        conv("clarity.conv1", ClarityHead, h, h, 3, same),
        conv("clarity.conv2", ClarityHead, h, h, 3, same),
        conv("clarity.conv3", ClarityHead, h, h, 3, same),
    ];
    let dec_proj = conv("decoder.proj", Decoder, h, d, 1, pointwise);
    let low_proj = conv("decoder.low_proj", Decoder, b, l, 1, pointwise);
    let refine = [
        conv("decoder.refine1", Decoder, d + l, d, 3, same),
        conv("decoder.refine2", Decoder, d, d, 3, same),
    ];
    let classifier = conv("decoder.classifier", Decoder, d, 1, 1, pointwise);
    entries.push(("clarity.fc.weight".into(), ClarityHead, vec![1, h]));
    entries.push(("clarity.fc.bias".into(), ClarityHead, vec![1]));
    let fc = (entries.len() - 2, entries.len() - 1);
    (
        entries,
        Layout {
            encoder,
            context,
            fuse,
            clarity,
            fc,
            dec_proj,
            low_proj,
            refine,
            classifier,
        },
    )
}

/// Parameters of the multi-task network plus the config that shapes them.
#[derive(Clone, Debug)]
pub struct MultiTaskNet<T: Element = f32> {
    config: NetConfig,
    params: Vec<Param<T>>,
    layout: Layout,
}

/// Tape handles of every parameter, in manifest order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Handles supplied by the caller, one per parameter in manifest order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        BoundParams { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct NetOutputs {
    /// `[N, 1]`, normalized clarity in `(0, 1)`.
    pub clarity: Var,
    /// `[N, 1, H, W]`, per-pixel foreground probability.
    pub mask: Var,
    pub shared: Var,
    pub low_level: Var,
}

impl<T: Element> MultiTaskNet<T> {
    /// Builds a network with fan-in scaled normal weights and zero biases.
    pub fn build(config: NetConfig) -> Result<Self, NetError> {
        config.validate()?;
        let (entries, layout) = plan(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = entries
            .into_iter()
            .map(|(name, group, shape)| {
                let value = if name.ends_with(".bias") {
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    Tensor::from_fn(shape, |_| T::from_f64(normal.sample(&mut rng)))
                };
                Param { name, group, value }
            })
            .collect();
        Ok(MultiTaskNet { config, params, layout })
    }

    /// Reassembles a network from a config and tensors in manifest order.
    pub fn from_parts(config: NetConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self, NetError> {
        config.validate()?;
        let (entries, layout) = plan(&config);
        if entries.len() != tensors.len() {
            return Err(NetError::Checkpoint(format!(
                "expected {} tensors, found {}",
                entries.len(),
                tensors.len()
            )));
        }
        let params = entries
            .into_iter()
            .zip(tensors)
            .map(|((name, group, shape), (got_name, value))| {
                if name != got_name || shape != value.shape() {
                    return Err(NetError::Checkpoint(format!(
                        "tensor {got_name} {:?} does not match expected {name} {shape:?}",
                        value.shape()
                    )));
                }
                Ok(Param { name, group, value })
            })
            .collect::<Result<_, _>>()?;
        Ok(MultiTaskNet { config, params, layout })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> MultiTaskNet<U> {
        MultiTaskNet {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// SHA-256 over every parameter value (as `f64` little-endian bits).
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.name.as_bytes());
            for v in p.value.data() {
                hasher.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Registers all parameters as tape leaves; groups in `trainable`
    /// require gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: GroupSet) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), trainable.contains(p.group)))
                .collect(),
        }
    }

    fn conv(&self, tape: &mut Tape<T>, p: &BoundParams, layer: ConvLayer, x: Var) -> Result<Var, NetError> {
        Ok(tape.conv2d(x, p.vars[layer.weight], p.vars[layer.bias], layer.geom)?)
    }

    fn conv_relu(&self, tape: &mut Tape<T>, p: &BoundParams, layer: ConvLayer, x: Var) -> Result<Var, NetError> {
        let y = self.conv(tape, p, layer, x)?;
        Ok(tape.relu(y)?)
    }

    /// One encoder pass feeding both heads.
    pub fn forward(&self, tape: &mut Tape<T>, params: &BoundParams, images: Var) -> Result<NetOutputs, NetError> {
        let [_, c, h, w] = tape.value(images).dims4("forward")?;
        if c != 3 {
            return Err(TensorError::shape("forward", "3 input channels", c).into());
        }
        if h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
            return Err(NetError::InputSize { height: h, width: w });
        }
        let lay = &self.layout;

        let mut x = images;
        let mut low_level = images;
        for (stage, &layer) in lay.encoder.iter().enumerate() {
            x = self.conv_relu(tape, params, layer, x)?;
            if stage == self.config.low_level_tap {
                low_level = x;
            }
        }

        let mut branches = Vec::with_capacity(lay.context.len());
        for &layer in &lay.context {
            branches.push(self.conv_relu(tape, params, layer, x)?);
        }
        let mut stacked = branches[0];
        for &b in &branches[1..] {
            stacked = tape.concat_channels(stacked, b)?;
        }
        let shared = self.conv_relu(tape, params, lay.fuse, stacked)?;

        // Clarity head. Pooling halves the map while its extent is even;
        // maps that are already odd (e.g. 1x1) pass through unpooled.
        let mut y = shared;
        for &layer in &lay.clarity {
            y = self.conv_relu(tape, params, layer, y)?;
            let [_, _, hh, ww] = tape.value(y).dims4("clarity")?;
            if hh % 2 == 0 && ww % 2 == 0 {
                y = tape.max_pool2(y)?;
            }
        }
        let pooled = tape.global_avg_pool(y)?;
        let logit = tape.linear(pooled, params.vars[lay.fc.0], params.vars[lay.fc.1])?;
        let clarity = tape.sigmoid(logit)?;

        // Segmentation decoder.
        let proj = self.conv_relu(tape, params, lay.dec_proj, shared)?;
        let up = tape.bilinear_upsample(proj, OUTPUT_STRIDE / LOW_LEVEL_STRIDE)?;
        let low = self.conv_relu(tape, params, lay.low_proj, low_level)?;
        let mut z = tape.concat_channels(up, low)?;
        for &layer in &lay.refine {
            z = self.conv_relu(tape, params, layer, z)?;
        }
        let z = tape.bilinear_upsample(z, LOW_LEVEL_STRIDE)?;
        let logits = self.conv(tape, params, lay.classifier, z)?;
        let mask = tape.sigmoid(logits)?;

        Ok(NetOutputs {
            clarity,
            mask,
            shared,
            low_level,
        })
    }

    /// Inference without gradients: `(clarity [N,1], mask [N,1,H,W])`.
    pub fn predict(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), NetError> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, GroupSet::NONE);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &params, x)?;
        Ok((tape.value(out.clarity).clone(), tape.value(out.mask).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_images(n: usize, size: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        Tensor::from_fn([n, 3, size, size], |_| normal.sample(&mut rng))
    }

    #[test]
    fn default_config_is_valid() {
        NetConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = NetConfig::default();
        let cases = [
            NetConfig {
                input_size: 72,
                ..base.clone()
            },
            NetConfig {
                output_stride: 32,
                ..base.clone()
            },
            NetConfig {
                context_rates: vec![],
                ..base.clone()
            },
            NetConfig {
                context_rates: vec![1, 8],
                ..base.clone()
            },
            NetConfig {
                low_level_tap: 2,
                ..base.clone()
            },
            NetConfig {
                head_channels: 0,
                ..base.clone()
            },
        ];
        for cfg in cases {
            assert!(MultiTaskNet::<f32>::build(cfg.clone()).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = MultiTaskNet::<f32>::build(NetConfig::default()).unwrap();
        let b = MultiTaskNet::<f32>::build(NetConfig::default()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = MultiTaskNet::<f32>::build(NetConfig {
            seed: 1,
            ..NetConfig::default()
        })
        .unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn biases_start_at_zero() {
        let net = MultiTaskNet::<f32>::build(NetConfig::default()).unwrap();
        for p in net.params().iter().filter(|p| p.name.ends_with(".bias")) {
            assert!(p.value.data().iter().all(|&v| v == 0.0), "{}", p.name);
        }
    }

    #[test]
    fn output_shapes_for_default_config() {
        let net = MultiTaskNet::<f32>::build(NetConfig::default()).unwrap();
        let mut tape = Tape::new();
        let params = net.bind(&mut tape, GroupSet::NONE);
        let x = tape.constant(random_images(2, 64, 3));
        let out = net.forward(&mut tape, &params, x).unwrap();
        assert_eq!(tape.value(out.clarity).shape(), &[2, 1]);
        assert_eq!(tape.value(out.mask).shape(), &[2, 1, 64, 64]);
        assert_eq!(tape.value(out.shared).shape(), &[2, 64, 4, 4]);
        assert_eq!(tape.value(out.low_level).shape(), &[2, 32, 16, 16]);
        assert!(tape.value(out.clarity).data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(tape.value(out.mask).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn rejects_sizes_not_divisible_by_16() {
        let net = MultiTaskNet::<f32>::build(NetConfig::default()).unwrap();
        let err = net.predict(&Tensor::zeros([1, 3, 40, 64])).unwrap_err();
        assert!(matches!(err, NetError::InputSize { height: 40, width: 64 }));
    }

    #[test]
    fn non_square_inference_input() {
        let net = MultiTaskNet::<f32>::build(NetConfig::default()).unwrap();
        let (c, m) = net.predict(&random_images(1, 64, 1).reshape([1, 3, 32, 128]).unwrap()).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(m.shape(), &[1, 1, 32, 128]);
    }

    #[test]
    fn identical_samples_identical_outputs() {
        let net = MultiTaskNet::<f32>::build(NetConfig::default()).unwrap();
        let one = random_images(1, 64, 9);
        let mut two = one.data().to_vec();
        two.extend_from_slice(one.data());
        let (c, m) = net.predict(&Tensor::new([2, 3, 64, 64], two).unwrap()).unwrap();
        assert_eq!(c.data()[0], c.data()[1]);
        let half = m.numel() / 2;
        assert_eq!(&m.data()[..half], &m.data()[half..]);
    }

    #[test]
    fn forward_is_bitwise_reproducible() {
        let net = MultiTaskNet::<f32>::build(NetConfig::default()).unwrap();
        let x = random_images(2, 64, 4);
        let a = net.predict(&x).unwrap();
        let b = net.predict(&x).unwrap();
        assert_eq!(a, b);
    }
}
