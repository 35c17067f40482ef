//! Gated selective scan used as the sequence mixer in encoder stages.
//!
//! Features are flattened row-major into a sequence of channel vectors `x_t`,
//! normalised across channels, and mixed by
//!
//! ```text
//! h_t = a ⊙ h_{t-1} + (1 - a) ⊙ silu(W_g x̃_t + b_g) ⊙ (W_in x̃_t)
//! y_t = W_out h_t + x_t
//! ```
//!
//! with `a = sigmoid(decay_logits) ∈ (0, 1)` learned per state. This is a
//! simplified stand-in for a full Mamba block: no Δ discretisation, a single
//! scan direction, but linear cost and input-dependent selection.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{NodeId, ParamId, ParamStore, Tape};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{FeatureField, Tensor};

/// Block length used by [`scan_blocked`] inside the network.
pub const SCAN_BLOCK: usize = 256;

/// Reference recurrence over `u` (`states × len`, row-major), zero initial state.
pub fn scan_sequential(u: &[f64], decay: &[f64], len: usize) -> Vec<f64> {
    let mut h = vec![0.0; u.len()];
    for (s, &a) in decay.iter().enumerate() {
        let mut state = 0.0;
        for t in 0..len {
            state = a * state + (1.0 - a) * u[s * len + t];
            h[s * len + t] = state;
        }
    }
    h
}

/// Two-pass blocked scan: independent local scans per block, then the carry
/// from the previous block is folded in with powers of `a`.
pub fn scan_blocked(u: &[f64], decay: &[f64], len: usize, block: usize) -> Vec<f64> {
    assert_eq!(u.len(), decay.len() * len);
    let block = block.max(1);
    let mut h = vec![0.0; u.len()];
    for (s, &a) in decay.iter().enumerate() {
        let row = &u[s * len..(s + 1) * len];
        let out = &mut h[s * len..(s + 1) * len];
        for (src, dst) in row.chunks(block).zip(out.chunks_mut(block)) {
            let mut state = 0.0;
            for (x, y) in src.iter().zip(dst.iter_mut()) {
                state = a * state + (1.0 - a) * x;
                *y = state;
            }
        }
        let mut carry = 0.0;
        for dst in out.chunks_mut(block) {
            let mut power = a;
            for y in dst.iter_mut() {
                *y += power * carry;
                power *= a;
            }
            carry = *dst.last().unwrap();
        }
    }
    h
}

/// A sequence of `len` feature vectors of width `dim`, stored step-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    dim: usize,
    data: Vec<f64>,
}

impl Sequence {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(shape_err!(
                "{} values do not split into vectors of width {dim}",
                data.len()
            ));
        }
        Ok(Self { dim, data })
    }

    pub fn from_steps(steps: &[Vec<f64>]) -> Result<Self> {
        let dim = steps.first().map_or(0, Vec::len);
        if steps.iter().any(|s| s.len() != dim) {
            return Err(shape_err!("ragged sequence"));
        }
        Self::new(dim, steps.concat())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Shape of the field a sequence was flattened from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpatialLayout {
    shape: Vec<usize>,
}

impl SpatialLayout {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
}

/// Row-major flattening of the spatial axes; step `t` holds all channels of
/// voxel `t`.
pub fn flatten_spatial(field: &FeatureField) -> Result<(Sequence, SpatialLayout)> {
    field.feature_rank()?;
    let (c, plane) = (field.channels(), field.spatial_len());
    let mut data = vec![0.0; field.len()];
    for ch in 0..c {
        for t in 0..plane {
            data[t * c + ch] = field.data()[ch * plane + t];
        }
    }
    Ok((
        Sequence::new(c, data)?,
        SpatialLayout {
            shape: field.shape().to_vec(),
        },
    ))
}

pub fn unflatten_spatial(seq: &Sequence, layout: &SpatialLayout) -> Result<FeatureField> {
    let c = layout.shape[0];
    let plane: usize = layout.shape[1..].iter().product();
    if seq.dim() != c || seq.len() != plane {
        return Err(shape_err!(
            "sequence {}x{} does not fit layout {:?}",
            seq.len(),
            seq.dim(),
            layout.shape
        ));
    }
    let mut data = vec![0.0; seq.data.len()];
    for t in 0..plane {
        for ch in 0..c {
            data[ch * plane + t] = seq.data[t * c + ch];
        }
    }
    Tensor::new(layout.shape.clone(), data)
}

#[derive(Clone, Debug)]
pub struct SsmBlock {
    channels: usize,
    state_dim: usize,
    norm_gamma: ParamId,
    norm_beta: ParamId,
    in_proj: ParamId,
    gate_proj: ParamId,
    gate_bias: ParamId,
    decay_logits: ParamId,
    out_proj: ParamId,
}

fn gaussian(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

impl SsmBlock {
    /// Registers parameters under `<prefix>.<tensor>`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        state_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if channels == 0 || state_dim == 0 {
            return Err(Error::Config("SSM needs positive channel and state widths".into()));
        }
        let (c, s) = (channels, state_dim);
        let logits: Vec<f64> = (0..s)
            .map(|i| {
                if s == 1 {
                    1.0
                } else {
                    -1.0 + 5.0 * i as f64 / (s - 1) as f64
                }
            })
            .collect();
        Ok(Self {
            channels,
            state_dim,
            norm_gamma: store.register(format!("{prefix}.norm.gamma"), Tensor::full(&[c], 1.0))?,
            norm_beta: store.register(format!("{prefix}.norm.beta"), Tensor::zeros(&[c]))?,
            in_proj: store.register(
                format!("{prefix}.in_proj"),
                gaussian(rng, &[s, c], 1.0 / (c as f64).sqrt()),
            )?,
            gate_proj: store.register(
                format!("{prefix}.gate_proj"),
                gaussian(rng, &[s, c], 1.0 / (c as f64).sqrt()),
            )?,
            gate_bias: store.register(format!("{prefix}.gate_bias"), Tensor::zeros(&[s]))?,
            decay_logits: store.register(format!("{prefix}.decay_logits"), Tensor::new(vec![s], logits)?)?,
            out_proj: store.register(
                format!("{prefix}.out_proj"),
                gaussian(rng, &[c, s], 1.0 / (s as f64).sqrt()),
            )?,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn param_ids(&self) -> [ParamId; 7] {
        [
            self.norm_gamma,
            self.norm_beta,
            self.in_proj,
            self.gate_proj,
            self.gate_bias,
            self.decay_logits,
            self.out_proj,
        ]
    }

    pub fn gate_proj_id(&self) -> ParamId {
        self.gate_proj
    }

    pub fn gate_bias_id(&self) -> ParamId {
        self.gate_bias
    }

    pub fn decay_logits_id(&self) -> ParamId {
        self.decay_logits
    }

    /// Recurrence coefficients `a = sigmoid(decay_logits)`.
    pub fn decay(&self, store: &ParamStore) -> Vec<f64> {
        store
            .value(self.decay_logits)
            .data()
            .iter()
            .map(|&l| 1.0 / (1.0 + (-l).exp()))
            .collect()
    }

    /// Records the block on `tape`; `x` is a `channels × spatial...` field
    /// (or already `channels × len`).
    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let shape = tape.value(x).shape().to_vec();
        if shape[0] != self.channels {
            return Err(Error::Contract(format!(
                "SSM built for {} channels, input has {}",
                self.channels, shape[0]
            )));
        }
        let len: usize = shape[1..].iter().product();
        if len == 0 {
            return Err(Error::Contract("SSM over an empty sequence".into()));
        }
        let seq = tape.reshape(x, &[self.channels, len])?;
        let gamma = tape.param(store, self.norm_gamma);
        let beta = tape.param(store, self.norm_beta);
        let normed = tape.channel_norm(seq, gamma, beta)?;
        let w_in = tape.param(store, self.in_proj);
        let proj = tape.matmul(w_in, normed)?;
        let w_g = tape.param(store, self.gate_proj);
        let b_g = tape.param(store, self.gate_bias);
        let gate_pre = tape.matmul(w_g, normed)?;
        let gate_pre = tape.channel_bias(gate_pre, b_g)?;
        let gate = tape.silu(gate_pre);
        let update = tape.mul(gate, proj)?;
        let logits = tape.param(store, self.decay_logits);
        let h = tape.scan(update, logits)?;
        let w_out = tape.param(store, self.out_proj);
        let mixed = tape.matmul(w_out, h)?;
        let mixed = tape.reshape(mixed, &shape)?;
        tape.add(mixed, x)
    }

    /// Inference on a feature field.
    pub fn forward_field(&self, store: &ParamStore, field: &FeatureField) -> Result<FeatureField> {
        let mut tape = Tape::frozen();
        let x = tape.leaf(field.clone(), false);
        let y = self.forward_tape(&mut tape, store, x)?;
        Ok(tape.value(y).clone())
    }

    /// Inference on an explicit sequence of feature vectors.
    pub fn forward_sequence(&self, store: &ParamStore, seq: &Sequence) -> Result<Sequence> {
        if seq.is_empty() {
            return Err(Error::Contract("SSM over an empty sequence".into()));
        }
        if seq.dim() != self.channels {
            return Err(Error::Contract(format!(
                "SSM built for {} channels, sequence has width {}",
                self.channels,
                seq.dim()
            )));
        }
        let (c, len) = (seq.dim(), seq.len());
        let mut cm = vec![0.0; seq.data.len()];
        for t in 0..len {
            for ch in 0..c {
                cm[ch * len + t] = seq.data[t * c + ch];
            }
        }
        let y = self.forward_field_rows(store, Tensor::new(vec![c, len], cm)?)?;
        let mut data = vec![0.0; y.len()];
        for t in 0..len {
            for ch in 0..c {
                data[t * c + ch] = y.data()[ch * len + t];
            }
        }
        Sequence::new(c, data)
    }

    fn forward_field_rows(&self, store: &ParamStore, rows: Tensor) -> Result<Tensor> {
        let mut tape = Tape::frozen();
        let x = tape.leaf(rows, false);
        let y = self.forward_tape(&mut tape, store, x)?;
        Ok(tape.value(y).clone())
    }

    /// Hidden states `h` (`states × len`) for an input sequence.
    pub fn hidden_states(&self, store: &ParamStore, seq: &Sequence) -> Result<(Tensor, Tensor)> {
        let (c, len) = (seq.dim(), seq.len());
        let mut cm = vec![0.0; seq.data.len()];
        for t in 0..len {
            for ch in 0..c {
                cm[ch * len + t] = seq.data[t * c + ch];
            }
        }
        let mut tape = Tape::frozen();
        let x = tape.leaf(Tensor::new(vec![c, len], cm)?, false);
        let gamma = tape.param(store, self.norm_gamma);
        let beta = tape.param(store, self.norm_beta);
        let normed = tape.channel_norm(x, gamma, beta)?;
        let w_in = tape.param(store, self.in_proj);
        let proj = tape.matmul(w_in, normed)?;
        let w_g = tape.param(store, self.gate_proj);
        let b_g = tape.param(store, self.gate_bias);
        let gate_pre = tape.matmul(w_g, normed)?;
        let gate_pre = tape.channel_bias(gate_pre, b_g)?;
        let gate = tape.silu(gate_pre);
        let update = tape.mul(gate, proj)?;
        let logits = tape.param(store, self.decay_logits);
        let h = tape.scan(update, logits)?;
        Ok((tape.value(update).clone(), tape.value(h).clone()))
    }
}

/// Runs `block` over `seq`.
pub fn ssm_forward(block: &SsmBlock, store: &ParamStore, seq: &Sequence) -> Result<Sequence> {
    block.forward_sequence(store, seq)
}
