//! Fast self-checks of operator properties, run by `heatseg check`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::gradcheck::check_params;
use crate::autograd::ParamStore;
use crate::data::{dsc, nsd};
use crate::hco::HcoLayer;
use crate::spectral::{diffuse, semigroup_compose, DiffusivityField};
use crate::ssm::{scan_blocked, scan_sequential, SCAN_BLOCK};
use crate::tensor::{dct_forward, dct_inverse, LabelField, Tensor};
use crate::Result;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
}

impl CheckOutcome {
    fn below(name: &'static str, value: f64, threshold: f64) -> Self {
        Self {
            name,
            passed: value < threshold,
            value,
            threshold,
        }
    }
}

fn random_field(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn random_k(rng: &mut ChaCha8Rng, spatial: &[usize], time: f64) -> Result<DiffusivityField> {
    DiffusivityField::new(Tensor::from_fn(spatial, |_| rng.random_range(0.05..2.0)), time)
}

fn square(shape: &[usize], lo: usize, hi: usize) -> LabelField {
    let mut l = LabelField::zeros(shape);
    let w = shape[1];
    for (i, v) in l.data_mut().iter_mut().enumerate() {
        let (y, x) = (i / w, i % w);
        if (lo..hi).contains(&y) && (lo..hi).contains(&x) {
            *v = 1;
        }
    }
    l
}

pub fn run_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let x = random_field(&mut rng, &[2, 12, 9]);
    let f = dct_forward(&x)?;
    out.push(CheckOutcome::below(
        "dct_round_trip",
        dct_inverse(&f)?.max_abs_diff(&x),
        1e-10,
    ));
    out.push(CheckOutcome::below(
        "dct_parseval",
        (f.coeffs().norm_l2() - x.norm_l2()).abs(),
        1e-10,
    ));

    let k = random_k(&mut rng, &[12, 9], 0.7)?;
    let y = diffuse(&x, &k)?;
    out.push(CheckOutcome::below(
        "heat_contraction",
        (y.norm_l2() - x.norm_l2()).max(0.0),
        1e-12,
    ));
    let mean_gap = x
        .data()
        .chunks(108)
        .zip(y.data().chunks(108))
        .map(|(a, b)| (a.iter().sum::<f64>() - b.iter().sum::<f64>()).abs() / 108.0)
        .fold(0.0, f64::max);
    out.push(CheckOutcome::below("heat_mean_preservation", mean_gap, 1e-10));
    let two = semigroup_compose(&x, &k, 0.3, 0.4)?;
    out.push(CheckOutcome::below("heat_semigroup", two.max_abs_diff(&y), 1e-9));
    let c = Tensor::full(&[1, 12, 9], 0.37);
    out.push(CheckOutcome::below(
        "heat_constant_fixed_point",
        diffuse(&c, &k)?.max_abs_diff(&c),
        1e-10,
    ));

    let len = 3 * SCAN_BLOCK + 17;
    let u: Vec<f64> = (0..len * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
    let gap = scan_blocked(&u, &a, len, SCAN_BLOCK)
        .iter()
        .zip(scan_sequential(&u, &a, len))
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max);
    out.push(CheckOutcome::below("scan_blocked_equals_sequential", gap, 1e-12));

    let mut store = ParamStore::new();
    let layer = HcoLayer::new(&mut store, "hco", &[6, 5], 4, &mut rng)?;
    let input = random_field(&mut rng, &[2, 6, 5]);
    let weights = random_field(&mut rng, &[2, 6, 5]);
    let gc = check_params(&store, 1e-5, |tape, s| {
        let xi = tape.leaf(input.clone(), false);
        let w = tape.leaf(weights.clone(), false);
        let y = layer.forward_tape(tape, s, xi)?;
        let p = tape.mul(y, w)?;
        Ok(tape.sum(p))
    })?;
    out.push(CheckOutcome::below("hco_gradient", gc.max_rel_error(), 1e-6));

    let t = square(&[16, 16], 4, 10);
    let p = square(&[16, 16], 5, 11);
    out.push(CheckOutcome::below(
        "dsc_identity",
        (1.0 - dsc(&t, &t, 1)?).abs(),
        1e-15,
    ));
    let d = dsc(&p, &t, 1)?;
    out.push(CheckOutcome::below(
        "dsc_shifted_square",
        (d - 50.0 / 72.0).abs(),
        1e-12,
    ));
    let n0 = nsd(&p, &t, 1, 0.0)?;
    let n1 = nsd(&p, &t, 1, 1.0)?;
    let n2 = nsd(&p, &t, 1, 2.0)?;
    out.push(CheckOutcome::below(
        "nsd_monotone_in_tolerance",
        ((n0 - n1).max(0.0) + (n1 - n2).max(0.0)) + (1.0 - n2).abs(),
        1e-15,
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_checks(3).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }
}
