//! Tape-based eager reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and enough saved state to
//! run its vector-Jacobian product. Nodes are created in topological order, so
//! [`Tape::backward`] walks the tape once in reverse.

pub mod checkpoint;
pub mod gradcheck;
mod optim;
mod params;

pub use optim::{sgd_step, Adam, AdamConfig};
pub use params::{ParamId, ParamStore, Parameter};

use crate::error::{shape_err, Error, Result};
use crate::spectral::{frequency_norms, Eigenvalues};
use crate::ssm::{scan_blocked, SCAN_BLOCK};
use crate::tensor::conv::{conv_raw, conv_transpose_raw};
use crate::tensor::linalg::gemm;
use crate::tensor::{dct_spatial, ConvGeometry, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId),
    MatMul(NodeId, NodeId),
    Reshape(NodeId),
    ChannelBias(NodeId, NodeId),
    Conv {
        x: NodeId,
        w: NodeId,
        geo: ConvGeometry,
        cols: Vec<f64>,
    },
    ConvTranspose {
        x: NodeId,
        w: NodeId,
        geo: ConvGeometry,
    },
    InstanceNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    Silu(NodeId),
    Softplus(NodeId),
    SoftmaxChannels(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Concat(NodeId, NodeId),
    Dct(NodeId),
    Idct(NodeId),
    HeatDiffuse {
        x: NodeId,
        k: NodeId,
        coeffs: Vec<f64>,
        mult: Vec<f64>,
        norms: Vec<f64>,
    },
    Scan {
        u: NodeId,
        logits: NodeId,
        decay: Vec<f64>,
    },
    SegLoss {
        logits: NodeId,
        labels: Vec<u32>,
        probs: Vec<f64>,
    },
}

/// One recorded value in the graph.
pub struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    param: Option<ParamId>,
    op: Op,
}

impl Node {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    frozen: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn accum(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        Some(g) => g.add_assign(&contribution),
        None => *slot = Some(contribution),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape for inference: parameters enter as constants.
    pub fn frozen() -> Self {
        Self {
            nodes: Vec::new(),
            frozen: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            param: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant input or a free variable when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            param: None,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Copies a parameter onto the tape; its gradient is reported by
    /// [`Tape::param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let node = self.leaf(store.value(id).clone(), !self.frozen);
        self.nodes[node.0].param = Some(id);
        node
    }

    fn same_shape(&self, a: NodeId, b: NodeId) -> Result<()> {
        self.value(a).expect_same_shape(self.value(b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, shift: f64) -> NodeId {
        let v = self.value(a).map(|x| x + shift);
        self.push(v, Op::Shift(a), &[a])
    }

    /// `(m×k) · (k×n)` for rank-2 operands.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul of {:?} and {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Adds `bias[c]` to every entry of channel `c`.
    pub fn channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.channels();
        if self.value(bias).len() != c {
            return Err(shape_err!("bias of length {} for {c} channels", self.value(bias).len()));
        }
        let plane = xv.len() / c.max(1);
        let mut v = xv.clone();
        for (chunk, b) in v.data_mut().chunks_exact_mut(plane).zip(self.value(bias).data()) {
            chunk.iter_mut().for_each(|e| *e += b);
        }
        Ok(self.push(v, Op::ChannelBias(x, bias), &[x, bias]))
    }

    /// Cross-correlation; `w` is `cout × cin × k...`.
    pub fn conv(&mut self, x: NodeId, w: NodeId, stride: &[usize], pad: &[usize]) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        let rank = xv.feature_rank()?;
        if wv.rank() != rank + 2 || wv.shape()[1] != xv.channels() {
            return Err(shape_err!(
                "kernel {:?} incompatible with input {:?}",
                wv.shape(),
                xv.shape()
            ));
        }
        let geo = ConvGeometry::new(xv.spatial_shape(), &wv.shape()[2..], stride, pad)?;
        let (cin, cout) = (xv.channels(), wv.shape()[0]);
        let (out, cols) = conv_raw(xv.data(), wv.data(), cin, cout, &geo);
        let mut shape = vec![cout];
        shape.extend(geo.output_shape());
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Conv { x, w, geo, cols }, &[x, w]))
    }

    /// Transposed convolution without padding; `w` is `cin × cout × k...`.
    pub fn conv_transpose(&mut self, x: NodeId, w: NodeId, stride: &[usize]) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        let rank = xv.feature_rank()?;
        if wv.rank() != rank + 2 || wv.shape()[0] != xv.channels() || stride.len() != rank {
            return Err(shape_err!(
                "kernel {:?} incompatible with input {:?}",
                wv.shape(),
                xv.shape()
            ));
        }
        let ksize = &wv.shape()[2..];
        let big: Vec<usize> = (0..rank)
            .map(|a| (xv.spatial_shape()[a] - 1) * stride[a] + ksize[a])
            .collect();
        let geo = ConvGeometry::new(&big, ksize, stride, &vec![0; rank])?;
        let (cin, cout) = (xv.channels(), wv.shape()[1]);
        let out = conv_transpose_raw(xv.data(), wv.data(), cin, cout, &geo);
        let mut shape = vec![cout];
        shape.extend(big);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::ConvTranspose { x, w, geo }, &[x, w]))
    }

    fn check_affine(&self, n: usize, gamma: NodeId, beta: NodeId) -> Result<()> {
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(shape_err!("affine parameters must have length {n}"));
        }
        Ok(())
    }

    /// Normalises each channel over its spatial extent, then applies a
    /// per-channel affine map.
    pub fn instance_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.channels();
        self.check_affine(c, gamma, beta)?;
        let plane = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; xv.len()];
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for ch in 0..c {
            let src = &xv.data()[ch * plane..(ch + 1) * plane];
            let mean = src.iter().sum::<f64>() / plane as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[ch] = is;
            for i in 0..plane {
                let h = (src[i] - mean) * is;
                xhat[ch * plane + i] = h;
                out[ch * plane + i] = g[ch] * h + b[ch];
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            v,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Normalises across channels at every voxel (layer norm over features).
    pub fn channel_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.channels();
        self.check_affine(c, gamma, beta)?;
        let plane = xv.len() / c;
        let d = xv.data();
        let mut mean = vec![0.0; plane];
        for ch in 0..c {
            for (m, v) in mean.iter_mut().zip(&d[ch * plane..(ch + 1) * plane]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= c as f64);
        let mut var = vec![0.0; plane];
        for ch in 0..c {
            for i in 0..plane {
                let dv = d[ch * plane + i] - mean[i];
                var[i] += dv * dv;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / c as f64 + NORM_EPS).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        for ch in 0..c {
            for i in 0..plane {
                let h = (d[ch * plane + i] - mean[i]) * inv_std[i];
                xhat[ch * plane + i] = h;
                out[ch * plane + i] = g[ch] * h + b[ch];
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            v,
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let v = self.value(x).map(|e| if e > 0.0 { e } else { slope * e });
        self.push(v, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|e| e * sigmoid(e));
        self.push(v, Op::Silu(x), &[x])
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(softplus);
        self.push(v, Op::Softplus(x), &[x])
    }

    /// Softmax over the leading (channel) axis at every voxel.
    pub fn softmax_channels(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let probs = softmax_channels_raw(xv.data(), xv.channels());
        let v = Tensor::new(xv.shape().to_vec(), probs).expect("same shape");
        self.push(v, Op::SoftmaxChannels(x), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let v = Tensor::scalar(xv.sum() / xv.len() as f64);
        self.push(v, Op::Mean(x), &[x])
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.spatial_shape() != bv.spatial_shape() {
            return Err(shape_err!("cannot concatenate {:?} and {:?}", av.shape(), bv.shape()));
        }
        let mut shape = av.shape().to_vec();
        shape[0] += bv.channels();
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Concat(a, b), &[a, b]))
    }

    pub fn dct(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        xv.feature_rank()?;
        let v = Tensor::new(xv.shape().to_vec(), dct_spatial(xv.data(), xv.shape(), false))?;
        Ok(self.push(v, Op::Dct(x), &[x]))
    }

    pub fn idct(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        xv.feature_rank()?;
        let v = Tensor::new(xv.shape().to_vec(), dct_spatial(xv.data(), xv.shape(), true))?;
        Ok(self.push(v, Op::Idct(x), &[x]))
    }

    /// `IDCT(DCT(x) · exp(-k |ω|²))` with one diffusivity grid `k` shared by
    /// every channel (diffusion time folded into `k`).
    pub fn heat_diffuse(&mut self, x: NodeId, k: NodeId, mode: Eigenvalues) -> Result<NodeId> {
        let (xv, kv) = (self.value(x), self.value(k));
        xv.feature_rank()?;
        if kv.shape() != xv.spatial_shape() {
            return Err(Error::Contract(format!(
                "diffusivity grid {:?} does not match field {:?}",
                kv.shape(),
                xv.shape()
            )));
        }
        if let Some(bad) = kv.data().iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!("diffusivity must be positive, got {bad}")));
        }
        let norms = frequency_norms(xv.spatial_shape(), mode);
        let mult: Vec<f64> = norms.iter().zip(kv.data()).map(|(n, k)| (-k * n).exp()).collect();
        let coeffs = dct_spatial(xv.data(), xv.shape(), false);
        let mut damped = coeffs.clone();
        for plane in damped.chunks_exact_mut(mult.len()) {
            plane.iter_mut().zip(&mult).for_each(|(c, m)| *c *= m);
        }
        let v = Tensor::new(xv.shape().to_vec(), dct_spatial(&damped, xv.shape(), true))?;
        Ok(self.push(
            v,
            Op::HeatDiffuse {
                x,
                k,
                coeffs,
                mult,
                norms,
            },
            &[x, k],
        ))
    }

    /// Gated linear recurrence along the sequence axis of `u` (`states × len`):
    /// `h_t = a ⊙ h_{t-1} + (1 - a) ⊙ u_t` with `a = sigmoid(logits)`.
    pub fn scan(&mut self, u: NodeId, logits: NodeId) -> Result<NodeId> {
        let (uv, lv) = (self.value(u), self.value(logits));
        if uv.rank() != 2 || lv.len() != uv.shape()[0] {
            return Err(shape_err!(
                "scan input {:?} with decay logits {:?}",
                uv.shape(),
                lv.shape()
            ));
        }
        if uv.shape()[1] == 0 {
            return Err(Error::Contract("scan over an empty sequence".into()));
        }
        let decay: Vec<f64> = lv.data().iter().map(|&l| sigmoid(l)).collect();
        let h = scan_blocked(uv.data(), &decay, uv.shape()[1], SCAN_BLOCK);
        let v = Tensor::new(uv.shape().to_vec(), h)?;
        Ok(self.push(v, Op::Scan { u, logits, decay }, &[u, logits]))
    }

    /// Soft Dice (all classes) plus cross-entropy, both means, from logits
    /// laid out `classes × spatial`.
    pub fn seg_loss(&mut self, logits: NodeId, labels: &[u32]) -> Result<NodeId> {
        let lv = self.value(logits);
        let c = lv.channels();
        let plane = lv.len() / c;
        if labels.len() != plane {
            return Err(shape_err!("{} labels for {plane} voxels", labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let probs = softmax_channels_raw(lv.data(), c);
        let terms = loss_terms_raw(&probs, labels, c);
        let v = Tensor::scalar(terms.total());
        Ok(self.push(
            v,
            Op::SegLoss {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a single-element root.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Gradients of every parameter leaf reached by the last backward pass.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.nodes
            .iter()
            .filter_map(|n| match (n.param, &n.grad) {
                (Some(id), Some(g)) => Some((id, g.clone())),
                _ => None,
            })
            .collect()
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let val = |id: NodeId| &self.nodes[id.0].value;
        let out = &self.nodes[i].value;
        let mut send = |id: NodeId, t: Tensor| {
            if self.nodes[id.0].requires_grad {
                accum(&mut grads[id.0], t);
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    send(*a, g.zip_map(val(*b), |x, y| x * y).unwrap());
                }
                if needs(*b) {
                    send(*b, g.zip_map(val(*a), |x, y| x * y).unwrap());
                }
            }
            Op::Scale(a, f) => send(*a, g.map(|v| v * f)),
            Op::Shift(a) => send(*a, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, false);
                    send(*a, Tensor::new(vec![m, k], ga).unwrap());
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, false);
                    send(*b, Tensor::new(vec![k, n], gb).unwrap());
                }
            }
            Op::Reshape(a) => send(*a, g.clone().reshape(val(*a).shape()).unwrap()),
            Op::ChannelBias(x, b) => {
                send(*x, g.clone());
                if needs(*b) {
                    let c = g.channels();
                    let plane = g.len() / c;
                    let gb = g.data().chunks_exact(plane).map(|ch| ch.iter().sum()).collect();
                    send(*b, Tensor::new(val(*b).shape().to_vec(), gb).unwrap());
                }
            }
            Op::Conv { x, w, geo, cols } => {
                let (xv, wv) = (val(*x), val(*w));
                let (cin, cout) = (xv.channels(), wv.shape()[0]);
                let kk = cin * geo.kernel_len();
                let p = geo.output_len();
                if needs(*w) {
                    let mut gw = vec![0.0; cout * kk];
                    gemm(cout, p, kk, g.data(), false, cols, true, &mut gw, false);
                    send(*w, Tensor::new(wv.shape().to_vec(), gw).unwrap());
                }
                if needs(*x) {
                    let mut gcols = vec![0.0; kk * p];
                    gemm(kk, cout, p, wv.data(), true, g.data(), false, &mut gcols, false);
                    let gx = geo.col2im(&gcols, cin);
                    send(*x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
                }
            }
            Op::ConvTranspose { x, w, geo } => {
                let (xv, wv) = (val(*x), val(*w));
                let (cin, cout) = (xv.channels(), wv.shape()[1]);
                let ck = cout * geo.kernel_len();
                let p = geo.output_len();
                let gcols = geo.im2col(g.data(), cout);
                if needs(*x) {
                    let mut gx = vec![0.0; cin * p];
                    gemm(cin, ck, p, wv.data(), false, &gcols, false, &mut gx, false);
                    send(*x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
                }
                if needs(*w) {
                    let mut gw = vec![0.0; cin * ck];
                    gemm(cin, p, ck, xv.data(), false, &gcols, true, &mut gw, false);
                    send(*w, Tensor::new(wv.shape().to_vec(), gw).unwrap());
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = out.channels();
                let plane = out.len() / c;
                let gam = val(*gamma).data();
                let mut gg = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut gx = vec![0.0; out.len()];
                for ch in 0..c {
                    let r = ch * plane..(ch + 1) * plane;
                    let (gs, hs) = (&g.data()[r.clone()], &xhat[r.clone()]);
                    let sum_g: f64 = gs.iter().sum();
                    let sum_gh: f64 = gs.iter().zip(hs).map(|(a, b)| a * b).sum();
                    gg[ch] = sum_gh;
                    gbeta[ch] = sum_g;
                    let n = plane as f64;
                    let scale = gam[ch] * inv_std[ch] / n;
                    for (j, dst) in gx[r].iter_mut().enumerate() {
                        *dst = scale * (n * gs[j] - sum_g - hs[j] * sum_gh);
                    }
                }
                send(*x, Tensor::new(out.shape().to_vec(), gx).unwrap());
                send(*gamma, Tensor::new(val(*gamma).shape().to_vec(), gg).unwrap());
                send(*beta, Tensor::new(val(*beta).shape().to_vec(), gbeta).unwrap());
            }
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = out.channels();
                let plane = out.len() / c;
                let gam = val(*gamma).data();
                let gd = g.data();
                let mut gg = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut sum_d = vec![0.0; plane];
                let mut sum_dh = vec![0.0; plane];
                for ch in 0..c {
                    for i in 0..plane {
                        let j = ch * plane + i;
                        gg[ch] += gd[j] * xhat[j];
                        gbeta[ch] += gd[j];
                        let d = gd[j] * gam[ch];
                        sum_d[i] += d;
                        sum_dh[i] += d * xhat[j];
                    }
                }
                let n = c as f64;
                let mut gx = vec![0.0; out.len()];
                for ch in 0..c {
                    for i in 0..plane {
                        let j = ch * plane + i;
                        let d = gd[j] * gam[ch];
                        gx[j] = inv_std[i] / n * (n * d - sum_d[i] - xhat[j] * sum_dh[i]);
                    }
                }
                send(*x, Tensor::new(out.shape().to_vec(), gx).unwrap());
                send(*gamma, Tensor::new(val(*gamma).shape().to_vec(), gg).unwrap());
                send(*beta, Tensor::new(val(*beta).shape().to_vec(), gbeta).unwrap());
            }
            Op::LeakyRelu(x, slope) => {
                let gx = g
                    .zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { slope * gv })
                    .unwrap();
                send(*x, gx);
            }
            Op::Sigmoid(x) => send(*x, g.zip_map(out, |gv, y| gv * y * (1.0 - y)).unwrap()),
            Op::Silu(x) => {
                let gx = g
                    .zip_map(val(*x), |gv, xv| {
                        let s = sigmoid(xv);
                        gv * (s + xv * s * (1.0 - s))
                    })
                    .unwrap();
                send(*x, gx);
            }
            Op::Softplus(x) => send(*x, g.zip_map(val(*x), |gv, xv| gv * sigmoid(xv)).unwrap()),
            Op::SoftmaxChannels(x) => {
                let c = out.channels();
                let plane = out.len() / c;
                let (y, gd) = (out.data(), g.data());
                let mut dot = vec![0.0; plane];
                for ch in 0..c {
                    for i in 0..plane {
                        dot[i] += y[ch * plane + i] * gd[ch * plane + i];
                    }
                }
                let mut gx = vec![0.0; out.len()];
                for ch in 0..c {
                    for i in 0..plane {
                        let j = ch * plane + i;
                        gx[j] = y[j] * (gd[j] - dot[i]);
                    }
                }
                send(*x, Tensor::new(out.shape().to_vec(), gx).unwrap());
            }
            Op::Sum(x) => send(*x, Tensor::full(val(*x).shape(), g.data()[0])),
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                send(*x, Tensor::full(val(*x).shape(), g.data()[0] / n));
            }
            Op::Concat(a, b) => {
                let split = val(*a).len();
                send(
                    *a,
                    Tensor::new(val(*a).shape().to_vec(), g.data()[..split].to_vec()).unwrap(),
                );
                send(
                    *b,
                    Tensor::new(val(*b).shape().to_vec(), g.data()[split..].to_vec()).unwrap(),
                );
            }
            // orthonormal: the adjoint of each transform is the other one
            Op::Dct(x) => send(
                *x,
                Tensor::new(g.shape().to_vec(), dct_spatial(g.data(), g.shape(), true)).unwrap(),
            ),
            Op::Idct(x) => send(
                *x,
                Tensor::new(g.shape().to_vec(), dct_spatial(g.data(), g.shape(), false)).unwrap(),
            ),
            Op::HeatDiffuse {
                x,
                k,
                coeffs,
                mult,
                norms,
            } => {
                let ghat = dct_spatial(g.data(), g.shape(), false);
                let grid = mult.len();
                if needs(*x) {
                    let mut damped = ghat.clone();
                    for plane in damped.chunks_exact_mut(grid) {
                        plane.iter_mut().zip(mult).for_each(|(c, m)| *c *= m);
                    }
                    send(
                        *x,
                        Tensor::new(g.shape().to_vec(), dct_spatial(&damped, g.shape(), true)).unwrap(),
                    );
                }
                if needs(*k) {
                    let mut gk = vec![0.0; grid];
                    for (gp, cp) in ghat.chunks_exact(grid).zip(coeffs.chunks_exact(grid)) {
                        for f in 0..grid {
                            gk[f] -= gp[f] * cp[f] * mult[f] * norms[f];
                        }
                    }
                    send(*k, Tensor::new(val(*k).shape().to_vec(), gk).unwrap());
                }
            }
            Op::Scan { u, logits, decay } => {
                let uv = val(*u);
                let (states, len) = (uv.shape()[0], uv.shape()[1]);
                let (h, gd, ud) = (out.data(), g.data(), uv.data());
                let mut gu = vec![0.0; uv.len()];
                let mut glog = vec![0.0; states];
                for s in 0..states {
                    let a = decay[s];
                    let row = s * len;
                    let mut lambda = 0.0;
                    let mut ga = 0.0;
                    for t in (0..len).rev() {
                        lambda = gd[row + t] + a * lambda;
                        gu[row + t] = (1.0 - a) * lambda;
                        let prev = if t > 0 { h[row + t - 1] } else { 0.0 };
                        ga += lambda * (prev - ud[row + t]);
                    }
                    glog[s] = ga * a * (1.0 - a);
                }
                send(*u, Tensor::new(uv.shape().to_vec(), gu).unwrap());
                send(*logits, Tensor::new(val(*logits).shape().to_vec(), glog).unwrap());
            }
            Op::SegLoss { logits, labels, probs } => {
                let lv = val(*logits);
                let c = lv.channels();
                let plane = lv.len() / c;
                let scale = g.data()[0];
                let gx = loss_logit_grad(probs, labels, c, plane);
                let gx = gx.into_iter().map(|v| v * scale).collect();
                send(*logits, Tensor::new(lv.shape().to_vec(), gx).unwrap());
            }
        }
    }
}

/// Channel softmax over a `classes × plane` buffer.
pub(crate) fn softmax_channels_raw(data: &[f64], c: usize) -> Vec<f64> {
    let plane = data.len() / c.max(1);
    let mut out = vec![0.0; data.len()];
    for i in 0..plane {
        let mut mx = f64::NEG_INFINITY;
        for ch in 0..c {
            mx = mx.max(data[ch * plane + i]);
        }
        let mut z = 0.0;
        for ch in 0..c {
            let e = (data[ch * plane + i] - mx).exp();
            out[ch * plane + i] = e;
            z += e;
        }
        for ch in 0..c {
            out[ch * plane + i] /= z;
        }
    }
    out
}

/// The two halves of the segmentation loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub dice: f64,
    pub cross_entropy: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.dice + self.cross_entropy
    }
}

/// Loss from class probabilities laid out `classes × plane`.
pub fn loss_terms_raw(probs: &[f64], labels: &[u32], c: usize) -> LossTerms {
    let plane = labels.len();
    let mut ce = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        ce -= probs[l as usize * plane + i].max(f64::MIN_POSITIVE).ln();
    }
    ce /= plane as f64;
    let mut dice = 0.0;
    for ch in 0..c {
        let p = &probs[ch * plane..(ch + 1) * plane];
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut tsum = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            psum += p[i];
            if l as usize == ch {
                inter += p[i];
                tsum += 1.0;
            }
        }
        dice += 1.0 - (2.0 * inter + DICE_SMOOTH) / (psum + tsum + DICE_SMOOTH);
    }
    LossTerms {
        dice: dice / c as f64,
        cross_entropy: ce,
    }
}

fn loss_logit_grad(probs: &[f64], labels: &[u32], c: usize, plane: usize) -> Vec<f64> {
    // dDice/dp, then through the softmax Jacobian; the CE part is (p - y)/P
    let mut gp = vec![0.0; probs.len()];
    for ch in 0..c {
        let p = &probs[ch * plane..(ch + 1) * plane];
        let mut inter = 0.0;
        let mut denom = DICE_SMOOTH;
        for (i, &l) in labels.iter().enumerate() {
            denom += p[i];
            if l as usize == ch {
                inter += p[i];
                denom += 1.0;
            }
        }
        let numer = 2.0 * inter + DICE_SMOOTH;
        for (i, &l) in labels.iter().enumerate() {
            let y = if l as usize == ch { 1.0 } else { 0.0 };
            gp[ch * plane + i] = -(2.0 * y * denom - numer) / (denom * denom) / c as f64;
        }
    }
    let mut gx = vec![0.0; probs.len()];
    for i in 0..plane {
        let mut dot = 0.0;
        for ch in 0..c {
            dot += probs[ch * plane + i] * gp[ch * plane + i];
        }
        for ch in 0..c {
            let j = ch * plane + i;
            let y = if labels[i] as usize == ch { 1.0 } else { 0.0 };
            gx[j] = probs[j] * (gp[j] - dot) + (probs[j] - y) / plane as f64;
        }
    }
    gx
}
