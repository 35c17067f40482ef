//! U-shaped segmentation network with optional selective-scan and heat
//! conduction layers, its loss, and the training loop.

mod config;
mod train;

pub use config::{BottleneckPlacement, NetworkConfig, Variant};
pub use train::{train, train_with, EpochRecord, TrainConfig, TrainingReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use crate::autograd::checkpoint::Checkpoint;
use crate::autograd::{loss_terms_raw, LossTerms, NodeId, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::hco::HcoLayer;
use crate::ssm::SsmBlock;
use crate::tensor::{FeatureField, LabelField, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const RESIDUAL_BLOCKS_PER_STAGE: usize = 2;
pub const CHECKPOINT_KIND: &str = "network";

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("valid std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

#[derive(Clone, Debug)]
struct ConvNormAct {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stride: Vec<usize>,
    pad: Vec<usize>,
}

impl ConvNormAct {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: &[usize],
        stride: &[usize],
    ) -> Result<Self> {
        let mut shape = vec![cout, cin];
        shape.extend_from_slice(kernel);
        let fan_in = cin * kernel.iter().product::<usize>();
        Ok(Self {
            w: store.register(format!("{name}.w"), he_normal(rng, &shape, fan_in, 2.0))?,
            gamma: store.register(format!("{name}.norm.gamma"), Tensor::full(&[cout], 1.0))?,
            beta: store.register(format!("{name}.norm.beta"), Tensor::zeros(&[cout]))?,
            stride: stride.to_vec(),
            pad: kernel.iter().map(|k| (k - 1) / 2).collect(),
        })
    }

    fn same(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        rank: usize,
    ) -> Result<Self> {
        Self::new(store, rng, name, cin, cout, &vec![3; rank], &vec![1; rank])
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: NodeId, activate: bool) -> Result<NodeId> {
        let w = tape.param(store, self.w);
        let y = tape.conv(x, w, &self.stride, &self.pad)?;
        let (g, b) = (tape.param(store, self.gamma), tape.param(store, self.beta));
        let y = tape.instance_norm(y, g, b)?;
        Ok(if activate { tape.leaky_relu(y, LEAKY_SLOPE) } else { y })
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    first: ConvNormAct,
    second: ConvNormAct,
}

impl ResBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize, rank: usize) -> Result<Self> {
        Ok(Self {
            first: ConvNormAct::same(store, rng, &format!("{name}.conv1"), channels, channels, rank)?,
            second: ConvNormAct::same(store, rng, &format!("{name}.conv2"), channels, channels, rank)?,
        })
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let y = self.first.apply(tape, store, x, true)?;
        let y = self.second.apply(tape, store, y, false)?;
        let y = tape.add(y, x)?;
        Ok(tape.leaky_relu(y, LEAKY_SLOPE))
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    entry: ConvNormAct,
    blocks: Vec<ResBlock>,
    ssm: Option<SsmBlock>,
    hco: Option<HcoLayer>,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: ParamId,
    up_stride: Vec<usize>,
    fuse: ConvNormAct,
    block: ResBlock,
}

#[derive(Clone, Debug)]
struct Architecture {
    encoder: Vec<EncoderStage>,
    /// Heat conduction on the encoder output of a given level before the
    /// decoder reads it.
    links: Vec<Option<HcoLayer>>,
    serial: Vec<HcoLayer>,
    decoder: Vec<DecoderStage>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Per-voxel class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationOutput {
    probabilities: FeatureField,
}

impl SegmentationOutput {
    /// Checks non-negativity and per-voxel normalisation (1e-6).
    pub fn new(probabilities: FeatureField) -> Result<Self> {
        probabilities.feature_rank()?;
        let c = probabilities.channels();
        let plane = probabilities.spatial_len();
        let d = probabilities.data();
        for i in 0..plane {
            let mut s = 0.0;
            for ch in 0..c {
                let p = d[ch * plane + i];
                if !(p >= 0.0) {
                    return Err(Error::Numeric(format!("negative or NaN probability {p}")));
                }
                s += p;
            }
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Numeric(format!("probabilities at voxel {i} sum to {s}")));
            }
        }
        Ok(Self { probabilities })
    }

    /// One-hot probabilities for a label map.
    pub fn one_hot(labels: &LabelField, classes: usize) -> Result<Self> {
        labels.check_classes(classes)?;
        let plane = labels.len();
        let mut shape = vec![classes];
        shape.extend_from_slice(labels.shape());
        let mut t = Tensor::zeros(&shape);
        for (i, &l) in labels.data().iter().enumerate() {
            t.data_mut()[l as usize * plane + i] = 1.0;
        }
        Self::new(t)
    }

    pub fn probabilities(&self) -> &FeatureField {
        &self.probabilities
    }

    pub fn classes(&self) -> usize {
        self.probabilities.channels()
    }

    /// Most probable class per voxel; ties go to the lower class index.
    pub fn argmax(&self) -> LabelField {
        let c = self.classes();
        let plane = self.probabilities.spatial_len();
        let d = self.probabilities.data();
        let labels = (0..plane)
            .map(|i| {
                let mut best = 0;
                for ch in 1..c {
                    if d[ch * plane + i] > d[best * plane + i] {
                        best = ch;
                    }
                }
                best as u32
            })
            .collect();
        LabelField::new(self.probabilities.spatial_shape().to_vec(), labels).expect("consistent shape")
    }
}

/// Soft Dice plus cross-entropy of `pred` against `target`.
pub fn loss(pred: &SegmentationOutput, target: &LabelField) -> Result<f64> {
    Ok(loss_terms(pred, target)?.total())
}

/// The Dice and cross-entropy parts of [`loss`] separately.
pub fn loss_terms(pred: &SegmentationOutput, target: &LabelField) -> Result<LossTerms> {
    if pred.probabilities.spatial_shape() != target.shape() {
        return Err(Error::Contract(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.probabilities.shape(),
            target.shape()
        )));
    }
    target.check_classes(pred.classes())?;
    Ok(loss_terms_raw(pred.probabilities.data(), target.data(), pred.classes()))
}

/// A built network: configuration, parameters and layer layout.
#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    params: ParamStore,
    arch: Architecture,
    seed: u64,
}

/// Builds a network with parameters drawn from `seed`.
pub fn build(config: &NetworkConfig, seed: u64) -> Result<Network> {
    Network::build(config, seed)
}

impl Network {
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let rank = config.rank();
        let stages = config.stages;
        let variant = config.variant;

        let mut encoder = Vec::with_capacity(stages);
        for s in 0..stages {
            let cout = config.stage_channels(s);
            let entry = if s == 0 {
                ConvNormAct::same(&mut store, &mut rng, "enc.0.stem", config.in_channels, cout, rank)?
            } else {
                let stride = config.stride_into(s);
                ConvNormAct::new(
                    &mut store,
                    &mut rng,
                    &format!("enc.{s}.down"),
                    config.stage_channels(s - 1),
                    cout,
                    &stride,
                    &stride,
                )?
            };
            let blocks = (0..RESIDUAL_BLOCKS_PER_STAGE)
                .map(|b| ResBlock::new(&mut store, &mut rng, &format!("enc.{s}.block{b}"), cout, rank))
                .collect::<Result<Vec<_>>>()?;
            let upper = s + 1 < stages;
            let ssm = if upper && variant.has_encoder_ssm() {
                Some(SsmBlock::new(
                    &mut store,
                    &format!("ssm.{s}"),
                    cout,
                    config.state_dim,
                    &mut rng,
                )?)
            } else {
                None
            };
            let hco = if upper && variant.has_encoder_hco() {
                Some(HcoLayer::new(
                    &mut store,
                    &format!("hco.{s}"),
                    &config.stage_shape(s),
                    config.embed_dim,
                    &mut rng,
                )?)
            } else {
                None
            };
            encoder.push(EncoderStage {
                entry,
                blocks,
                ssm,
                hco,
            });
        }

        let mut links: Vec<Option<HcoLayer>> = vec![None; stages];
        let mut serial = Vec::new();
        if variant.has_bottleneck_hco() {
            for (i, level) in [stages - 1, stages - 2].into_iter().enumerate() {
                match config.bottleneck {
                    BottleneckPlacement::SkipLinks => {
                        let grid = config.stage_shape(level);
                        links[level] = Some(HcoLayer::new(
                            &mut store,
                            &format!("hco.{i}"),
                            &grid,
                            config.embed_dim,
                            &mut rng,
                        )?);
                    }
                    BottleneckPlacement::Serial => {
                        let grid = config.stage_shape(stages - 1);
                        serial.push(HcoLayer::new(
                            &mut store,
                            &format!("hco.{i}"),
                            &grid,
                            config.embed_dim,
                            &mut rng,
                        )?);
                    }
                }
            }
        }

        let mut decoder = Vec::with_capacity(stages - 1);
        for l in (0..stages - 1).rev() {
            let (cdeep, c) = (config.stage_channels(l + 1), config.stage_channels(l));
            let stride = config.stride_into(l + 1);
            let mut wshape = vec![cdeep, c];
            wshape.extend_from_slice(&stride);
            let up = store.register(format!("dec.{l}.up.w"), he_normal(&mut rng, &wshape, cdeep, 1.0))?;
            let fuse = ConvNormAct::same(&mut store, &mut rng, &format!("dec.{l}.fuse"), 2 * c, c, rank)?;
            let block = ResBlock::new(&mut store, &mut rng, &format!("dec.{l}.block"), c, rank)?;
            decoder.push(DecoderStage {
                up,
                up_stride: stride,
                fuse,
                block,
            });
        }

        let c0 = config.stage_channels(0);
        let mut hshape = vec![config.num_classes, c0];
        hshape.extend(vec![1; rank]);
        let head_w = store.register("head.w", he_normal(&mut rng, &hshape, c0, 1.0))?;
        let head_b = store.register("head.b", Tensor::zeros(&[config.num_classes]))?;

        Ok(Self {
            config: config.clone(),
            params: store,
            arch: Architecture {
                encoder,
                links,
                serial,
                decoder,
                head_w,
                head_b,
            },
            seed,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Every heat conduction layer, encoder ones first.
    pub fn hco_layers(&self) -> Vec<&HcoLayer> {
        let a = &self.arch;
        a.encoder
            .iter()
            .filter_map(|s| s.hco.as_ref())
            .chain(a.links.iter().rev().flatten())
            .chain(&a.serial)
            .collect()
    }

    pub fn ssm_blocks(&self) -> Vec<&SsmBlock> {
        self.arch.encoder.iter().filter_map(|s| s.ssm.as_ref()).collect()
    }

    /// Input shape `[in_channels, patch...]`.
    pub fn input_shape(&self) -> Vec<usize> {
        let mut s = vec![self.config.in_channels];
        s.extend_from_slice(&self.config.patch_size);
        s
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape != self.input_shape() {
            return Err(Error::Contract(format!(
                "network expects input {:?}, got {:?}",
                self.input_shape(),
                shape
            )));
        }
        Ok(())
    }

    /// Records the forward pass and returns the class logits.
    pub fn logits_tape(&self, tape: &mut Tape, image: NodeId) -> Result<NodeId> {
        self.check_input(tape.value(image).shape())?;
        let store = &self.params;
        let a = &self.arch;
        let mut feats = Vec::with_capacity(a.encoder.len());
        let mut x = image;
        for stage in &a.encoder {
            x = stage.entry.apply(tape, store, x, true)?;
            for block in &stage.blocks {
                x = block.apply(tape, store, x)?;
            }
            if let Some(ssm) = &stage.ssm {
                x = ssm.forward_tape(tape, store, x)?;
            }
            if let Some(hco) = &stage.hco {
                let mixed = hco.forward_tape(tape, store, x)?;
                x = tape.add(x, mixed)?;
            }
            feats.push(x);
        }
        for (level, link) in a.links.iter().enumerate() {
            if let Some(hco) = link {
                feats[level] = hco.forward_tape(tape, store, feats[level])?;
            }
        }
        let mut d = *feats.last().expect("at least one stage");
        for hco in &a.serial {
            let mixed = hco.forward_tape(tape, store, d)?;
            d = tape.add(d, mixed)?;
        }
        let levels = a.decoder.len();
        for (i, stage) in a.decoder.iter().enumerate() {
            let level = levels - 1 - i;
            let w = tape.param(store, stage.up);
            d = tape.conv_transpose(d, w, &stage.up_stride)?;
            d = tape.concat_channels(d, feats[level])?;
            d = stage.fuse.apply(tape, store, d, true)?;
            d = stage.block.apply(tape, store, d)?;
        }
        let w = tape.param(store, a.head_w);
        let rank = self.config.rank();
        let logits = tape.conv(d, w, &vec![1; rank], &vec![0; rank])?;
        let b = tape.param(store, a.head_b);
        tape.channel_bias(logits, b)
    }

    pub fn predict(&self, image: &FeatureField) -> Result<SegmentationOutput> {
        let mut tape = Tape::frozen();
        let x = tape.leaf(image.clone(), false);
        let logits = self.logits_tape(&mut tape, x)?;
        let probs = tape.softmax_channels(logits);
        SegmentationOutput::new(tape.value(probs).clone())
    }

    /// Loss and parameter gradients for a single sample.
    pub fn loss_and_grads(&self, image: &FeatureField, labels: &LabelField) -> Result<(f64, Vec<(ParamId, Tensor)>)> {
        if labels.shape() != &self.config.patch_size[..] {
            return Err(Error::Contract(format!(
                "labels {:?} do not match patch {:?}",
                labels.shape(),
                self.config.patch_size
            )));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone(), false);
        let logits = self.logits_tape(&mut tape, x)?;
        let l = tape.seg_loss(logits, labels.data())?;
        let value = tape.value(l).data()[0];
        if !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        tape.backward(l)?;
        Ok((value, tape.param_grads()))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let manifest = json!({
            "kind": CHECKPOINT_KIND,
            "seed": self.seed,
            "config": self.config,
        });
        Checkpoint::from_store(manifest, &self.params)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let kind = ckpt.manifest.get("kind").and_then(|k| k.as_str());
        if kind != Some(CHECKPOINT_KIND) {
            return Err(Error::Format(format!("checkpoint kind {kind:?} is not a network")));
        }
        let config: NetworkConfig = serde_json::from_value(ckpt.manifest["config"].clone())?;
        let seed = ckpt.manifest["seed"].as_u64().unwrap_or(0);
        let mut net = Self::build(&config, seed)?;
        ckpt.load_into(&mut net.params)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests;
