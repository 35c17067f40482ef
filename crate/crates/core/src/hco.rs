//! Heat conduction operator: frequency-domain heat diffusion with a
//! diffusivity map predicted from a learned per-frequency embedding.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{NodeId, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::spectral::{diffuse_with, DiffusivityField, Eigenvalues};
use crate::tensor::{FeatureField, Tensor};

/// Lower bound added after the softplus so `k` stays strictly positive.
pub const K_FLOOR: f64 = 1e-6;
pub const DEFAULT_EMBED_DIM: usize = 8;
pub const FVE_INIT_STD: f64 = 0.02;
pub const HEAD_INIT_BIAS: f64 = -1.0;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Debug)]
pub struct HcoLayer {
    grid: Vec<usize>,
    embed_dim: usize,
    fve: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    mode: Eigenvalues,
}

impl HcoLayer {
    /// Registers `<prefix>.fve` (`grid... × E`), `<prefix>.head.w` (`E × 1`)
    /// and `<prefix>.head.b`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        grid: &[usize],
        embed_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(2..=3).contains(&grid.len()) || grid.contains(&0) {
            return Err(Error::Config(format!(
                "HCO grid {grid:?} must have 2 or 3 positive axes"
            )));
        }
        if embed_dim == 0 {
            return Err(Error::Config("HCO embedding width must be positive".into()));
        }
        let mut table_shape = grid.to_vec();
        table_shape.push(embed_dim);
        let fve_dist = Normal::new(0.0, FVE_INIT_STD).expect("valid std");
        let head_dist = Normal::new(0.0, 1.0 / (embed_dim as f64).sqrt()).expect("valid std");
        let table = Tensor::from_fn(&table_shape, |_| fve_dist.sample(rng));
        let w = Tensor::from_fn(&[embed_dim, 1], |_| head_dist.sample(rng));
        Ok(Self {
            grid: grid.to_vec(),
            embed_dim,
            fve: store.register(format!("{prefix}.fve"), table)?,
            head_w: store.register(format!("{prefix}.head.w"), w)?,
            head_b: store.register(format!("{prefix}.head.b"), Tensor::full(&[1], HEAD_INIT_BIAS))?,
            mode: Eigenvalues::Continuous,
        })
    }

    pub fn with_eigenvalues(mut self, mode: Eigenvalues) -> Self {
        self.mode = mode;
        self
    }

    pub fn grid(&self) -> &[usize] {
        &self.grid
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn eigenvalues(&self) -> Eigenvalues {
        self.mode
    }

    pub fn param_ids(&self) -> [ParamId; 3] {
        [self.fve, self.head_w, self.head_b]
    }

    pub fn param_count(&self) -> usize {
        self.grid.iter().product::<usize>() * self.embed_dim + self.embed_dim + 1
    }

    /// `k = softplus(FVE · w + b) + K_FLOOR` at every frequency.
    pub fn predict_diffusivity(&self, store: &ParamStore) -> Result<DiffusivityField> {
        let table = store.value(self.fve).data();
        let w = store.value(self.head_w).data();
        let b = store.value(self.head_b).data()[0];
        let k: Vec<f64> = table
            .chunks_exact(self.embed_dim)
            .map(|e| softplus(e.iter().zip(w).map(|(x, y)| x * y).sum::<f64>() + b) + K_FLOOR)
            .collect();
        DiffusivityField::new(Tensor::new(self.grid.clone(), k)?, 1.0)
    }

    /// Records the diffusivity prediction; result has the grid shape.
    pub fn diffusivity_tape(&self, tape: &mut Tape, store: &ParamStore) -> Result<NodeId> {
        let g: usize = self.grid.iter().product();
        let table = tape.param(store, self.fve);
        let table = tape.reshape(table, &[g, self.embed_dim])?;
        let w = tape.param(store, self.head_w);
        let z = tape.matmul(table, w)?;
        let z = tape.reshape(z, &[1, g])?;
        let b = tape.param(store, self.head_b);
        let z = tape.channel_bias(z, b)?;
        let k = tape.softplus(z);
        let k = tape.add_scalar(k, K_FLOOR);
        tape.reshape(k, &self.grid)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() < 2 || shape[1..] != self.grid[..] {
            return Err(Error::Contract(format!(
                "HCO built for spatial grid {:?}, input is {:?}",
                self.grid, shape
            )));
        }
        Ok(())
    }

    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        self.check_input(tape.value(x).shape())?;
        let k = self.diffusivity_tape(tape, store)?;
        tape.heat_diffuse(x, k, self.mode)
    }

    pub fn forward(&self, store: &ParamStore, x: &FeatureField) -> Result<FeatureField> {
        self.check_input(x.shape())?;
        diffuse_with(x, &self.predict_diffusivity(store)?, self.mode)
    }
}

/// Applies `layer` to `x` without recording gradients.
pub fn hco_forward(layer: &HcoLayer, store: &ParamStore, x: &FeatureField) -> Result<FeatureField> {
    layer.forward(store, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn layer(grid: &[usize], seed: u64) -> (ParamStore, HcoLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = HcoLayer::new(&mut store, "hco.0", grid, DEFAULT_EMBED_DIM, &mut rng).unwrap();
        (store, l)
    }

    /// Direct summation of DCT-II / diffusion / DCT-III with no shared code.
    fn golden(x: &Tensor, k: &[f64]) -> Vec<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let alpha = |i: usize, n: usize| {
            if i == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            }
        };
        let basis = |i: usize, p: usize, n: usize| alpha(i, n) * (PI * (p as f64 + 0.5) * i as f64 / n as f64).cos();
        let mut out = vec![0.0; x.len()];
        for ch in 0..c {
            let src = &x.data()[ch * h * w..(ch + 1) * h * w];
            for u in 0..h {
                for v in 0..w {
                    let mut coeff = 0.0;
                    for p in 0..h {
                        for q in 0..w {
                            coeff += src[p * w + q] * basis(u, p, h) * basis(v, q, w);
                        }
                    }
                    let wu = PI * u as f64 / h as f64;
                    let wv = PI * v as f64 / w as f64;
                    let damped = coeff * (-k[u * w + v] * (wu * wu + wv * wv)).exp();
                    for p in 0..h {
                        for q in 0..w {
                            out[ch * h * w + p * w + q] += damped * basis(u, p, h) * basis(v, q, w);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_golden_oracle() {
        let (store, l) = layer(&[6, 5], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(&[2, 6, 5], |_| rng.random_range(-1.0..1.0));
        let k = l.predict_diffusivity(&store).unwrap();
        let want = golden(&x, k.values().data());
        let got = l.forward(&store, &x).unwrap();
        let err = got
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn tape_and_direct_paths_agree() {
        let (store, l) = layer(&[4, 3, 5], 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::from_fn(&[3, 4, 3, 5], |_| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone(), false);
        let y = l.forward_tape(&mut tape, &store, xi).unwrap();
        assert!(tape.value(y).max_abs_diff(&l.forward(&store, &x).unwrap()) < 1e-13);
    }

    #[test]
    fn diffusivity_is_positive_even_for_extreme_parameters() {
        let (mut store, l) = layer(&[4, 4], 1);
        store.value_mut(l.param_ids()[2]).fill(-800.0);
        let k = l.predict_diffusivity(&store).unwrap();
        assert!(k.values().data().iter().all(|&v| v >= K_FLOOR));
    }

    #[test]
    fn parameter_names_and_count() {
        let (store, l) = layer(&[8, 6], 0);
        assert_eq!(
            store.names().collect::<Vec<_>>(),
            ["hco.0.fve", "hco.0.head.w", "hco.0.head.b"]
        );
        assert_eq!(l.param_count(), 8 * 6 * 8 + 8 + 1);
        assert_eq!(store.scalar_count(), l.param_count());
    }

    #[test]
    fn grid_mismatch_is_a_contract_error() {
        let (store, l) = layer(&[4, 4], 0);
        let x = Tensor::zeros(&[1, 4, 5]);
        assert!(matches!(l.forward(&store, &x), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_field_passes_through() {
        let (store, l) = layer(&[5, 7], 2);
        let x = Tensor::full(&[2, 5, 7], 0.75);
        let y = l.forward(&store, &x).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-13);
    }
}
