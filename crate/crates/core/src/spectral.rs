//! Closed-form heat flow in the cosine domain.
//!
//! Under reflective (Neumann) boundaries the orthonormal DCT diagonalises the
//! Laplacian, so diffusing for time `t` multiplies each coefficient by
//! `exp(-k(ω) · |ω|² · t)`. Two eigenvalue conventions are offered: the
//! continuous `|ω|² = Σ ω_i²` and the exact eigenvalues of the 5/7-point
//! discrete Laplacian, `Σ (2 - 2 cos ω_i)`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{dct_spatial, frequency_axis, FeatureField, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Eigenvalues {
    /// `ω_x² + ω_y² (+ ω_z²)`.
    #[default]
    Continuous,
    /// `Σ 2 - 2 cos(ω_i)`, exact for the discrete Neumann Laplacian.
    Discrete,
}

impl Eigenvalues {
    fn of(self, omega: f64) -> f64 {
        match self {
            Eigenvalues::Continuous => omega * omega,
            Eigenvalues::Discrete => 2.0 - 2.0 * omega.cos(),
        }
    }
}

/// Squared frequency magnitude at every point of the grid spanned by `axes`.
pub fn frequency_norms_from_axes(axes: &[Vec<f64>], mode: Eigenvalues) -> Vec<f64> {
    let mut out = vec![0.0];
    for axis in axes {
        let per: Vec<f64> = axis.iter().map(|&w| mode.of(w)).collect();
        out = out
            .iter()
            .flat_map(|&base| per.iter().map(move |&p| base + p))
            .collect();
    }
    out
}

pub fn frequency_norms(spatial_shape: &[usize], mode: Eigenvalues) -> Vec<f64> {
    let axes: Vec<Vec<f64>> = spatial_shape.iter().map(|&l| frequency_axis(l)).collect();
    frequency_norms_from_axes(&axes, mode)
}

/// Per-frequency thermal diffusivity and the diffusion time it is applied for.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusivityField {
    values: Tensor,
    time: f64,
}

impl DiffusivityField {
    /// `values` has the spatial shape of the target field.
    pub fn new(values: Tensor, time: f64) -> Result<Self> {
        if !(time > 0.0 && time.is_finite()) {
            return Err(Error::Domain(format!("diffusion time must be positive, got {time}")));
        }
        if let Some(k) = values.data().iter().find(|&&k| !(k > 0.0 && k.is_finite())) {
            return Err(Error::Domain(format!(
                "diffusivity must be positive and finite, got {k}"
            )));
        }
        Ok(Self { values, time })
    }

    pub fn uniform(spatial_shape: &[usize], k: f64, time: f64) -> Result<Self> {
        Self::new(Tensor::full(spatial_shape, k), time)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    pub fn with_time(&self, time: f64) -> Result<Self> {
        Self::new(self.values.clone(), time)
    }
}

/// Multiplier `exp(-k(ω)·|ω|²·t)` over the frequency grid.
pub fn decay_filter(freq_axes: &[Vec<f64>], k: &DiffusivityField, mode: Eigenvalues) -> Result<Tensor> {
    let grid: Vec<usize> = freq_axes.iter().map(Vec::len).collect();
    if grid != k.shape() {
        return Err(shape_err!(
            "diffusivity shape {:?} does not match frequency grid {:?}",
            k.shape(),
            grid
        ));
    }
    let norms = frequency_norms_from_axes(freq_axes, mode);
    let t = k.time();
    let data = norms
        .iter()
        .zip(k.values().data())
        .map(|(&w2, &kv)| (-kv * w2 * t).exp())
        .collect();
    Tensor::new(grid, data)
}

/// Heat flow of every channel of `field` for `k.time()` using the continuous
/// eigenvalues.
pub fn diffuse(field: &FeatureField, k: &DiffusivityField) -> Result<FeatureField> {
    diffuse_with(field, k, Eigenvalues::Continuous)
}

pub fn diffuse_with(field: &FeatureField, k: &DiffusivityField, mode: Eigenvalues) -> Result<FeatureField> {
    field.feature_rank()?;
    field.ensure_finite("diffuse")?;
    let axes: Vec<Vec<f64>> = field.spatial_shape().iter().map(|&l| frequency_axis(l)).collect();
    let mult = decay_filter(&axes, k, mode)?;
    let mut coeffs = dct_spatial(field.data(), field.shape(), false);
    for plane in coeffs.chunks_exact_mut(mult.len()) {
        for (c, m) in plane.iter_mut().zip(mult.data()) {
            *c *= m;
        }
    }
    Tensor::new(field.shape().to_vec(), dct_spatial(&coeffs, field.shape(), true))
}

/// Diffuses for `t1` and then for `t2` with the same diffusivity values.
/// Equal, up to rounding, to a single diffusion for `t1 + t2`.
pub fn semigroup_compose(field: &FeatureField, k: &DiffusivityField, t1: f64, t2: f64) -> Result<FeatureField> {
    let first = diffuse(field, &k.with_time(t1)?)?;
    diffuse(&first, &k.with_time(t2)?)
}

/// Explicit Euler stepping of `u_t = k Δu` with the 5-point (7-point in 3D)
/// Laplacian and mirrored boundaries. `O(N)` per step.
pub fn explicit_heat_steps(field: &FeatureField, k: f64, dt: f64, steps: usize) -> Result<FeatureField> {
    field.feature_rank()?;
    let spatial = field.spatial_shape().to_vec();
    let mut dims = [1usize; 3];
    dims[3 - spatial.len()..].copy_from_slice(&spatial);
    let [d, h, w] = dims;
    let plane = d * h * w;
    let mut cur = field.data().to_vec();
    let mut next = vec![0.0; cur.len()];
    let rate = k * dt;
    for _ in 0..steps {
        for (src, dst) in cur.chunks_exact(plane).zip(next.chunks_exact_mut(plane)) {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let i = (z * h + y) * w + x;
                        let c = src[i];
                        let mut lap = 0.0;
                        if w > 1 {
                            lap +=
                                src[if x > 0 { i - 1 } else { i }] + src[if x + 1 < w { i + 1 } else { i }] - 2.0 * c;
                        }
                        if h > 1 {
                            lap +=
                                src[if y > 0 { i - w } else { i }] + src[if y + 1 < h { i + w } else { i }] - 2.0 * c;
                        }
                        if d > 1 {
                            let s = h * w;
                            lap +=
                                src[if z > 0 { i - s } else { i }] + src[if z + 1 < d { i + s } else { i }] - 2.0 * c;
                        }
                        dst[i] = c + rate * lap;
                    }
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Tensor::new(field.shape().to_vec(), cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dct_forward;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn random_k(shape: &[usize], seed: u64) -> DiffusivityField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DiffusivityField::new(Tensor::from_fn(shape, |_| rng.random_range(0.01..2.0)), 1.0).unwrap()
    }

    #[test]
    fn vanishing_diffusivity_is_identity() {
        let k = DiffusivityField::uniform(&[6, 5], 1e-300, 1.0).unwrap();
        let axes = vec![frequency_axis(6), frequency_axis(5)];
        let m = decay_filter(&axes, &k, Eigenvalues::Continuous).unwrap();
        assert!(m.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let x = random_field(&[2, 6, 5], 1);
        assert!(diffuse(&x, &k).unwrap().max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn dc_multiplier_is_exactly_one() {
        let k = DiffusivityField::uniform(&[4, 4], 123.0, 7.0).unwrap();
        let axes = vec![frequency_axis(4), frequency_axis(4)];
        let m = decay_filter(&axes, &k, Eigenvalues::Continuous).unwrap();
        assert_eq!(m.data()[0], 1.0);
        assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn scalar_exponent_value() {
        // omega = (pi/2, 0) sits at index 1 on a length-2 axis
        let k = DiffusivityField::uniform(&[2, 1], 1.0, 1.0).unwrap();
        let axes = vec![frequency_axis(2), frequency_axis(1)];
        let m = decay_filter(&axes, &k, Eigenvalues::Continuous).unwrap();
        let want = (-std::f64::consts::PI.powi(2) / 4.0).exp();
        assert!((m.data()[1] - want).abs() < 1e-15);
        assert!((m.data()[1] - 0.08480).abs() < 5e-6);
    }

    #[test]
    fn non_positive_diffusivity_is_a_domain_error() {
        assert!(matches!(
            DiffusivityField::uniform(&[2, 2], 0.0, 1.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            DiffusivityField::uniform(&[2, 2], -1.0, 1.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            DiffusivityField::uniform(&[2, 2], 1.0, 0.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn constant_field_is_fixed_point() {
        let x = Tensor::full(&[3, 7, 4], 2.5);
        let y = diffuse(&x, &random_k(&[7, 4], 3)).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn three_dimensional_exponent_includes_depth() {
        let k = DiffusivityField::uniform(&[3, 1, 1], 0.5, 2.0).unwrap();
        let axes = vec![frequency_axis(3), frequency_axis(1), frequency_axis(1)];
        let m = decay_filter(&axes, &k, Eigenvalues::Continuous).unwrap();
        let w = std::f64::consts::PI / 3.0;
        assert!((m.data()[1] - (-0.5 * w * w * 2.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let x = random_field(&[1, 4, 4], 0);
        let k = DiffusivityField::uniform(&[4, 5], 1.0, 1.0).unwrap();
        assert!(diffuse(&x, &k).is_err());
    }

    #[test]
    fn semigroup_splits() {
        let x = random_field(&[1, 9, 7], 5);
        let k = random_k(&[9, 7], 6);
        let whole = diffuse(&x, &k).unwrap();
        assert!(semigroup_compose(&x, &k, 0.5, 0.5).unwrap().max_abs_diff(&whole) < 1e-9);
        let tiny = semigroup_compose(&x, &k, 1.0, 1e-300).unwrap();
        assert!(tiny.max_abs_diff(&whole) < 1e-12);
        let a = diffuse(&x, &k.with_time(0.2).unwrap()).unwrap();
        let b = diffuse(&a, &k.with_time(0.3).unwrap()).unwrap();
        let c = diffuse(&b, &k.with_time(0.5).unwrap()).unwrap();
        assert!(c.max_abs_diff(&whole) < 1e-9);
    }

    #[test]
    fn explicit_stepping_tracks_discrete_spectrum() {
        let x = random_field(&[1, 6, 5], 8);
        let k = DiffusivityField::uniform(&[6, 5], 0.2, 1.0).unwrap();
        let exact = diffuse_with(&x, &k, Eigenvalues::Discrete).unwrap();
        let stepped = explicit_heat_steps(&x, 0.2, 1e-3, 1000).unwrap();
        assert!(stepped.max_abs_diff(&exact) < 1e-3);
    }

    #[test]
    fn uniform_k_damping_is_monotone_in_frequency() {
        let x = random_field(&[1, 8, 8], 12);
        let k = DiffusivityField::uniform(&[8, 8], 0.3, 1.0).unwrap();
        let cin = dct_forward(&x).unwrap().into_coeffs();
        let cout = dct_forward(&diffuse(&x, &k).unwrap()).unwrap().into_coeffs();
        let norms = frequency_norms(&[8, 8], Eigenvalues::Continuous);
        let mut pairs: Vec<(f64, f64)> = norms
            .iter()
            .zip(cin.data().iter().zip(cout.data()))
            .map(|(&w, (a, b))| (w, (b / a).abs()))
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for win in pairs.windows(2) {
            assert!(win[1].1 <= win[0].1 + 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn contraction_and_mean_preservation(seed in any::<u64>(), three_d in any::<bool>()) {
            let shape: Vec<usize> = if three_d { vec![2, 4, 5, 3] } else { vec![2, 7, 6] };
            let x = random_field(&shape, seed);
            let k = random_k(&shape[1..], seed.wrapping_add(1));
            let y = diffuse(&x, &k).unwrap();
            prop_assert!(y.norm_l2() <= x.norm_l2() + 1e-12);
            let plane = x.spatial_len();
            for c in 0..shape[0] {
                let mx: f64 = x.data()[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
                let my: f64 = y.data()[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
                prop_assert!((mx - my).abs() < 1e-10);
            }
        }

        #[test]
        fn semigroup_random_split(seed in any::<u64>(), split in 0.01f64..0.99) {
            let x = random_field(&[1, 6, 6], seed);
            let k = random_k(&[6, 6], seed ^ 7);
            let whole = diffuse(&x, &k).unwrap();
            let parts = semigroup_compose(&x, &k, split, 1.0 - split).unwrap();
            prop_assert!(parts.max_abs_diff(&whole) < 1e-9);
        }
    }
}
