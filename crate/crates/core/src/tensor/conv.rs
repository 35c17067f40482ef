//! Zero-padded cross-correlation over 2D/3D feature fields (im2col + GEMM).

use super::linalg::gemm;
use super::{FeatureField, Tensor};
use crate::error::{shape_err, Result};

/// Geometry of one strided, zero-padded convolution. 2D problems are stored
/// as 3D with a unit leading axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    rank: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    output: [usize; 3],
}

fn lift(values: &[usize], fill: usize) -> [usize; 3] {
    let mut out = [fill; 3];
    out[3 - values.len()..].copy_from_slice(values);
    out
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: &[usize], pad: &[usize]) -> Result<Self> {
        let rank = input.len();
        if !(2..=3).contains(&rank) {
            return Err(shape_err!("convolution needs 2 or 3 spatial axes, got {rank}"));
        }
        if kernel.len() != rank || stride.len() != rank || pad.len() != rank {
            return Err(shape_err!(
                "kernel/stride/padding ranks {:?}/{:?}/{:?} do not match input rank {rank}",
                kernel,
                stride,
                pad
            ));
        }
        if stride.contains(&0) || kernel.contains(&0) {
            return Err(shape_err!("stride and kernel lengths must be positive"));
        }
        let mut output = [1; 3];
        for a in 0..rank {
            let span = (input[a] + 2 * pad[a]) as isize - kernel[a] as isize;
            if span < 0 {
                return Err(shape_err!(
                    "axis {a}: input {} with padding {} is shorter than kernel {}",
                    input[a],
                    pad[a],
                    kernel[a]
                ));
            }
            output[3 - rank + a] = span as usize / stride[a] + 1;
        }
        Ok(Self {
            rank,
            input: lift(input, 1),
            kernel: lift(kernel, 1),
            stride: lift(stride, 1),
            pad: lift(pad, 0),
            output,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output.iter().product()
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        self.kernel[3 - self.rank..].to_vec()
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.input[3 - self.rank..].to_vec()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.output[3 - self.rank..].to_vec()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }

    /// Valid output range along one axis for kernel offset `k`.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (n, s, p, out) = (
            self.input[axis] as isize,
            self.stride[axis] as isize,
            self.pad[axis] as isize,
            self.output[axis] as isize,
        );
        let k = k as isize;
        // need 0 <= o*s + k - p < n
        let lo = ((p - k).max(0) + s - 1) / s;
        let hi = if n - 1 + p - k < 0 {
            0
        } else {
            ((n - 1 + p - k) / s + 1).min(out)
        };
        (lo.min(out) as usize, hi.max(lo.min(out)) as usize)
    }

    /// Unfolds `channels` input planes into a `(channels·K) × P_out` matrix.
    pub(crate) fn im2col(&self, x: &[f64], channels: usize) -> Vec<f64> {
        let [id, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        let [sd, sh, sw] = self.stride;
        let [pd, ph, pw] = self.pad;
        let plen = od * oh * ow;
        let mut cols = vec![0.0; channels * kd * kh * kw * plen];
        if self.is_pointwise() {
            cols.copy_from_slice(&x[..channels * plen]);
            return cols;
        }
        let mut row = 0;
        for c in 0..channels {
            let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
            for a in 0..kd {
                let (d_lo, d_hi) = self.valid(0, a);
                for b in 0..kh {
                    let (h_lo, h_hi) = self.valid(1, b);
                    for e in 0..kw {
                        let (w_lo, w_hi) = self.valid(2, e);
                        let dst = &mut cols[row * plen..(row + 1) * plen];
                        for z in d_lo..d_hi {
                            let zi = z * sd + a - pd;
                            for y in h_lo..h_hi {
                                let yi = y * sh + b - ph;
                                let src_base = (zi * ih + yi) * iw;
                                let dst_base = (z * oh + y) * ow;
                                for xo in w_lo..w_hi {
                                    dst[dst_base + xo] = xc[src_base + xo * sw + e - pw];
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col`]: scatters columns back, summing overlaps.
    pub(crate) fn col2im(&self, cols: &[f64], channels: usize) -> Vec<f64> {
        let [id, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [_, oh, ow] = self.output;
        let [sd, sh, sw] = self.stride;
        let [pd, ph, pw] = self.pad;
        let plen = self.output_len();
        if self.is_pointwise() {
            return cols[..channels * plen].to_vec();
        }
        let mut x = vec![0.0; channels * id * ih * iw];
        let mut row = 0;
        for c in 0..channels {
            let xc = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
            for a in 0..kd {
                let (d_lo, d_hi) = self.valid(0, a);
                for b in 0..kh {
                    let (h_lo, h_hi) = self.valid(1, b);
                    for e in 0..kw {
                        let (w_lo, w_hi) = self.valid(2, e);
                        let src = &cols[row * plen..(row + 1) * plen];
                        for z in d_lo..d_hi {
                            let zi = z * sd + a - pd;
                            for y in h_lo..h_hi {
                                let yi = y * sh + b - ph;
                                let dst_base = (zi * ih + yi) * iw;
                                let src_base = (z * oh + y) * ow;
                                for xo in w_lo..w_hi {
                                    xc[dst_base + xo * sw + e - pw] += src[src_base + xo];
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        x
    }
}

/// Forward convolution on raw buffers: `x` is `cin × P_in`, `weight` is
/// `cout × (cin·K)`. Returns the output and the unfolded input.
pub(crate) fn conv_raw(x: &[f64], weight: &[f64], cin: usize, cout: usize, geo: &ConvGeometry) -> (Vec<f64>, Vec<f64>) {
    let cols = geo.im2col(x, cin);
    let kk = cin * geo.kernel_len();
    let p = geo.output_len();
    let mut out = vec![0.0; cout * p];
    gemm(cout, kk, p, weight, false, &cols, false, &mut out, false);
    (out, cols)
}

/// Transposed convolution on raw buffers: `x` is `cin × P_small`, `weight` is
/// `cin × (cout·K)`, and `geo` describes the forward convolution mapping the
/// large grid onto the small one.
pub(crate) fn conv_transpose_raw(x: &[f64], weight: &[f64], cin: usize, cout: usize, geo: &ConvGeometry) -> Vec<f64> {
    let ck = cout * geo.kernel_len();
    let p = geo.output_len();
    let mut cols = vec![0.0; ck * p];
    gemm(ck, cin, p, weight, true, x, false, &mut cols, false);
    geo.col2im(&cols, cout)
}

fn check_kernel(field: &Tensor, kernel: &Tensor, stride: &[usize], padding: &[usize]) -> Result<usize> {
    let rank = field.feature_rank()?;
    if kernel.rank() != rank + 2 {
        return Err(shape_err!(
            "kernel {:?} does not match field spatial rank {rank}",
            kernel.shape()
        ));
    }
    if stride.len() != rank || padding.len() != rank {
        return Err(shape_err!("stride/padding must have {rank} entries"));
    }
    Ok(rank)
}

/// Cross-correlation of `field` (`cin × spatial`) with `kernel`
/// (`cout × cin × k...`), zero padding, per-axis stride.
pub fn conv_spatial(
    field: &FeatureField,
    kernel: &Tensor,
    stride: &[usize],
    padding: &[usize],
) -> Result<FeatureField> {
    check_kernel(field, kernel, stride, padding)?;
    let (cout, cin) = (kernel.shape()[0], kernel.shape()[1]);
    if cin != field.channels() {
        return Err(shape_err!(
            "kernel expects {cin} input channels, field has {}",
            field.channels()
        ));
    }
    let geo = ConvGeometry::new(field.spatial_shape(), &kernel.shape()[2..], stride, padding)?;
    let (out, _) = conv_raw(field.data(), kernel.data(), cin, cout, &geo);
    let mut shape = vec![cout];
    shape.extend(geo.output_shape());
    Tensor::new(shape, out)
}

/// Adjoint of [`conv_spatial`] with respect to its input: `kernel` is
/// `cin × cout × k...` and each spatial axis grows to `(L-1)·s - 2p + k`.
pub fn conv_transpose_spatial(
    field: &FeatureField,
    kernel: &Tensor,
    stride: &[usize],
    padding: &[usize],
) -> Result<FeatureField> {
    let rank = check_kernel(field, kernel, stride, padding)?;
    let (cin, cout) = (kernel.shape()[0], kernel.shape()[1]);
    if cin != field.channels() {
        return Err(shape_err!(
            "kernel expects {cin} input channels, field has {}",
            field.channels()
        ));
    }
    let ksize = &kernel.shape()[2..];
    let mut big = Vec::with_capacity(rank);
    for a in 0..rank {
        let grown =
            (field.spatial_shape()[a] as isize - 1) * stride[a] as isize - 2 * padding[a] as isize + ksize[a] as isize;
        if grown <= 0 {
            return Err(shape_err!("transposed convolution output collapses on axis {a}"));
        }
        big.push(grown as usize);
    }
    let geo = ConvGeometry::new(&big, ksize, stride, padding)?;
    if geo.output_shape() != field.spatial_shape() {
        return Err(shape_err!("inconsistent transposed convolution geometry"));
    }
    let out = conv_transpose_raw(field.data(), kernel.data(), cin, cout, &geo);
    let mut shape = vec![cout];
    shape.extend(big);
    Tensor::new(shape, out)
}
