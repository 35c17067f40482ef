//! Orthonormal DCT-II / DCT-III applied separably along spatial axes.
//!
//! Each axis of length `L` is transformed by a dense `L×L` matrix product, so
//! a square 2D field of `N` voxels costs `O(N^1.5)`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use super::linalg::gemm;
use super::{FeatureField, Tensor};
use crate::error::{shape_err, Result};

/// Orthonormal DCT-II matrix, row `k` holding basis `s_k cos(pi k (2n+1) / 2L)`.
pub fn dct_matrix(len: usize) -> Vec<f64> {
    let l = len as f64;
    let mut m = vec![0.0; len * len];
    for k in 0..len {
        let scale = if k == 0 { (1.0 / l).sqrt() } else { (2.0 / l).sqrt() };
        for n in 0..len {
            m[k * len + n] = scale * (PI * k as f64 * (2 * n + 1) as f64 / (2.0 * l)).cos();
        }
    }
    m
}

thread_local! {
    static MATRICES: RefCell<HashMap<usize, Rc<Vec<f64>>>> = RefCell::new(HashMap::new());
}

fn cached_matrix(len: usize) -> Rc<Vec<f64>> {
    MATRICES.with(|cache| {
        cache
            .borrow_mut()
            .entry(len)
            .or_insert_with(|| Rc::new(dct_matrix(len)))
            .clone()
    })
}

/// Discrete angular frequencies `pi i / L` for an axis of length `L`.
pub fn frequency_axis(len: usize) -> Vec<f64> {
    (0..len).map(|i| PI * i as f64 / len as f64).collect()
}

/// Transforms `data` (row-major, `shape`) along one axis.
/// `inverse` selects DCT-III, the transpose of the forward matrix.
pub fn dct_axis(data: &[f64], shape: &[usize], axis: usize, inverse: bool) -> Vec<f64> {
    assert!(axis < shape.len(), "axis out of range");
    assert_eq!(data.len(), shape.iter().product::<usize>());
    let len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; data.len()];
    if data.is_empty() {
        return out;
    }
    let matrix = cached_matrix(len);
    if inner == 1 {
        // rows of length L: out = X · M^T (forward) or X · M (inverse)
        gemm(outer, len, len, data, false, &matrix, !inverse, &mut out, false);
    } else {
        let block = len * inner;
        for (src, dst) in data.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
            gemm(len, len, inner, &matrix, inverse, src, false, dst, false);
        }
    }
    out
}

/// Applies the transform along every axis except the leading channel axis.
pub fn dct_spatial(data: &[f64], shape: &[usize], inverse: bool) -> Vec<f64> {
    let mut cur = data.to_vec();
    for axis in 1..shape.len() {
        cur = dct_axis(&cur, shape, axis, inverse);
    }
    cur
}

/// DCT-domain counterpart of a [`FeatureField`].
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyField {
    coeffs: Tensor,
    freq_axes: Vec<Vec<f64>>,
}

impl FrequencyField {
    /// Wraps coefficients laid out like a feature field.
    pub fn from_coeffs(coeffs: Tensor) -> Result<Self> {
        coeffs.feature_rank()?;
        let freq_axes = coeffs.spatial_shape().iter().map(|&l| frequency_axis(l)).collect();
        Ok(Self { coeffs, freq_axes })
    }

    pub fn coeffs(&self) -> &Tensor {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut Tensor {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Tensor {
        self.coeffs
    }

    pub fn freq_axes(&self) -> &[Vec<f64>] {
        &self.freq_axes
    }

    pub fn shape(&self) -> &[usize] {
        self.coeffs.shape()
    }
}

fn validate(field: &Tensor, what: &str) -> Result<()> {
    field.feature_rank()?;
    if field.shape().contains(&0) {
        return Err(shape_err!("{what}: zero-length axis in {:?}", field.shape()));
    }
    field.ensure_finite(what)
}

/// Orthonormal DCT-II over the spatial axes; channels are left untouched.
pub fn dct_forward(field: &FeatureField) -> Result<FrequencyField> {
    validate(field, "dct_forward")?;
    let coeffs = Tensor::new(field.shape().to_vec(), dct_spatial(field.data(), field.shape(), false))?;
    FrequencyField::from_coeffs(coeffs)
}

/// Inverse of [`dct_forward`] (orthonormal DCT-III).
pub fn dct_inverse(freq: &FrequencyField) -> Result<FeatureField> {
    validate(&freq.coeffs, "dct_inverse")?;
    Tensor::new(
        freq.coeffs.shape().to_vec(),
        dct_spatial(freq.coeffs.data(), freq.coeffs.shape(), true),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Straight O(L^2) summation per axis, no matrices.
    fn direct_dct_1d(x: &[f64]) -> Vec<f64> {
        let l = x.len() as f64;
        (0..x.len())
            .map(|k| {
                let s = if k == 0 { (1.0 / l).sqrt() } else { (2.0 / l).sqrt() };
                s * x
                    .iter()
                    .enumerate()
                    .map(|(n, v)| v * (PI * k as f64 * (2 * n + 1) as f64 / (2.0 * l)).cos())
                    .sum::<f64>()
            })
            .collect()
    }

    #[test]
    fn constant_field_has_only_dc() {
        let f = Tensor::full(&[1, 4, 4], 1.0);
        let c = dct_forward(&f).unwrap();
        assert!((c.coeffs().data()[0] - 4.0).abs() < 1e-12);
        assert!(c.coeffs().data()[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_field_maps_to_zero() {
        let c = dct_forward(&Tensor::zeros(&[2, 3, 5])).unwrap();
        assert!(c.coeffs().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_direct_summation_on_5x7() {
        let f = random_field(&[1, 5, 7], 3);
        let fast = dct_forward(&f).unwrap();
        // rows then columns, each by direct summation
        let mut rows = vec![0.0; 35];
        for r in 0..5 {
            let out = direct_dct_1d(&f.data()[r * 7..(r + 1) * 7]);
            rows[r * 7..(r + 1) * 7].copy_from_slice(&out);
        }
        let mut want = vec![0.0; 35];
        for c in 0..7 {
            let col: Vec<f64> = (0..5).map(|r| rows[r * 7 + c]).collect();
            for (r, v) in direct_dct_1d(&col).into_iter().enumerate() {
                want[r * 7 + c] = v;
            }
        }
        for (a, b) in fast.coeffs().data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn single_dc_coefficient_inverts_to_ones() {
        let mut coeffs = Tensor::zeros(&[1, 3, 5]);
        coeffs.data_mut()[0] = 15f64.sqrt();
        let f = dct_inverse(&FrequencyField::from_coeffs(coeffs).unwrap()).unwrap();
        assert!(f.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn round_trip_2d_and_3d() {
        for (shape, seed) in [(vec![2, 8, 8], 1), (vec![1, 3, 4, 5], 2)] {
            let f = random_field(&shape, seed);
            let back = dct_inverse(&dct_forward(&f).unwrap()).unwrap();
            assert!(back.max_abs_diff(&f) < 1e-10);
        }
    }

    #[test]
    fn frequency_axes_follow_spatial_shape() {
        let c = dct_forward(&Tensor::zeros(&[1, 2, 4])).unwrap();
        assert_eq!(c.freq_axes().len(), 2);
        assert_eq!(c.freq_axes()[1].len(), 4);
        assert!((c.freq_axes()[1][2] - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_rank_and_non_finite() {
        assert!(matches!(dct_forward(&Tensor::zeros(&[4, 4])), Err(Error::Shape(_))));
        let mut f = Tensor::zeros(&[1, 2, 2]);
        f.data_mut()[3] = f64::INFINITY;
        assert!(matches!(dct_forward(&f), Err(Error::Numeric(_))));
    }

    #[test]
    fn axis_order_does_not_matter() {
        let f = random_field(&[2, 6, 9], 11);
        let a = dct_axis(&dct_axis(f.data(), f.shape(), 1, false), f.shape(), 2, false);
        let b = dct_axis(&dct_axis(f.data(), f.shape(), 2, false), f.shape(), 1, false);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn parseval_and_round_trip(
            dims in prop::collection::vec(1usize..9, 2..=3),
            channels in 1usize..3,
            seed in any::<u64>(),
        ) {
            let mut shape = vec![channels];
            shape.extend(dims);
            let f = random_field(&shape, seed);
            let c = dct_forward(&f).unwrap();
            prop_assert!((c.coeffs().norm_l2() - f.norm_l2()).abs() < 1e-10);
            let back = dct_inverse(&c).unwrap();
            prop_assert!(back.max_abs_diff(&f) < 1e-10);
        }

        #[test]
        fn linearity(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let x = random_field(&[1, 5, 6], seed);
            let y = random_field(&[1, 5, 6], seed ^ 0x55);
            let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
            let lhs = dct_forward(&mix).unwrap().into_coeffs();
            let cx = dct_forward(&x).unwrap().into_coeffs();
            let cy = dct_forward(&y).unwrap().into_coeffs();
            let rhs = cx.zip_map(&cy, |p, q| a * p + b * q).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
        }
    }
}
