//! Fixtures shared by the criterion benches.

use heatseg::autograd::ParamStore;
use heatseg::hco::DEFAULT_EMBED_DIM;
use heatseg::{HcoLayer, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_field(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// An initialised heat conduction layer over `grid` with its parameters.
pub fn hco_fixture(grid: &[usize], seed: u64) -> (HcoLayer, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = HcoLayer::new(&mut store, "hco", grid, DEFAULT_EMBED_DIM, &mut rng).expect("valid grid");
    (layer, store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_deterministic() {
        assert_eq!(random_field(&[2, 8, 8], 3), random_field(&[2, 8, 8], 3));
        let (layer, store) = hco_fixture(&[8, 8], 1);
        let x = random_field(&[2, 8, 8], 0);
        assert_eq!(layer.forward(&store, &x).unwrap().shape(), x.shape());
    }
}
