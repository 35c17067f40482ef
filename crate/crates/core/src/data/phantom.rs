use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{strides, FeatureField, LabelField, Tensor};

pub const MIN_AXIS: usize = 8;
pub const NOISE_STD: f64 = 0.05;
pub const BACKGROUND_LEVEL: f64 = 0.05;
const BAND_LOW: f64 = 0.4;
const BAND_HIGH: f64 = 0.85;
const BAND_JITTER: f64 = 0.03;
const EDGE_WIDTH: f64 = 0.08;
const MAX_ATTEMPTS: usize = 100;

/// How a phantom was generated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub index: usize,
    pub shape: Vec<usize>,
    pub classes: usize,
}

/// A synthetic labelled image.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    /// One channel, intensities in `[0, 1]`.
    pub image: FeatureField,
    pub labels: LabelField,
    pub provenance: Provenance,
}

impl Phantom {
    pub fn id(&self) -> String {
        format!("{:04}", self.provenance.index)
    }
}

/// Mean intensity level of class `c` before jitter.
pub fn class_band(class: usize, classes: usize) -> f64 {
    if class == 0 {
        return BACKGROUND_LEVEL;
    }
    if classes <= 2 {
        return BAND_LOW;
    }
    BAND_LOW + (BAND_HIGH - BAND_LOW) * (class - 1) as f64 / (classes - 2) as f64
}

struct Ellipsoid {
    center: Vec<f64>,
    semi: Vec<f64>,
    /// Rotation angle in the plane of the last two axes.
    angle: f64,
}

impl Ellipsoid {
    fn draw(rng: &mut ChaCha8Rng, shape: &[usize]) -> Self {
        Self {
            center: shape
                .iter()
                .map(|&l| rng.random_range(0.25..=0.75) * l as f64)
                .collect(),
            semi: shape
                .iter()
                .map(|&l| rng.random_range(0.12..=0.25) * l as f64)
                .collect(),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        }
    }

    /// Normalised radius: `< 1` inside, `1` on the surface.
    fn radius(&self, point: &[f64]) -> f64 {
        let n = point.len();
        let mut d: Vec<f64> = point.iter().zip(&self.center).map(|(p, c)| p - c).collect();
        let (s, c) = self.angle.sin_cos();
        let (a, b) = (d[n - 2], d[n - 1]);
        d[n - 2] = c * a + s * b;
        d[n - 1] = -s * a + c * b;
        d.iter()
            .zip(&self.semi)
            .map(|(x, r)| (x / r) * (x / r))
            .sum::<f64>()
            .sqrt()
    }
}

fn draw_phantom(rng: &mut ChaCha8Rng, shape: &[usize], classes: usize) -> (Tensor, LabelField) {
    let n: usize = shape.iter().product();
    let st = strides(shape);
    let points: Vec<Vec<f64>> = (0..n)
        .map(|i| st.iter().zip(shape).map(|(s, l)| ((i / s) % l) as f64 + 0.5).collect())
        .collect();
    let mut image = vec![BACKGROUND_LEVEL; n];
    let mut labels = vec![0u32; n];
    for class in 1..classes {
        let shape_ = Ellipsoid::draw(rng, shape);
        let level = class_band(class, classes) + rng.random_range(-BAND_JITTER..=BAND_JITTER);
        for (i, p) in points.iter().enumerate() {
            let r = shape_.radius(p);
            let w = 1.0 / (1.0 + ((r - 1.0) / EDGE_WIDTH).exp());
            image[i] = image[i] * (1.0 - w) + level * w;
            if r <= 1.0 {
                labels[i] = class as u32;
            }
        }
    }
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    for v in &mut image {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    let mut img_shape = vec![1];
    img_shape.extend_from_slice(shape);
    (
        Tensor::new(img_shape, image).expect("consistent shape"),
        LabelField::new(shape.to_vec(), labels).expect("consistent shape"),
    )
}

/// Draws `count` phantoms; case `i` depends only on `(seed, i)`.
pub fn generate_phantoms(count: usize, shape: &[usize], classes: usize, seed: u64) -> Result<Vec<Phantom>> {
    if classes < 2 {
        return Err(Error::Generation(format!("need at least 2 classes, got {classes}")));
    }
    if !(2..=3).contains(&shape.len()) {
        return Err(Error::Generation(format!("phantoms are 2D or 3D, got shape {shape:?}")));
    }
    if let Some(small) = shape.iter().find(|&&l| l < MIN_AXIS) {
        return Err(Error::Generation(format!(
            "axis of length {small} is too small to hold structures (minimum {MIN_AXIS})"
        )));
    }
    (0..count)
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            for _ in 0..MAX_ATTEMPTS {
                let (image, labels) = draw_phantom(&mut rng, shape, classes);
                if labels.histogram(classes)[1..].iter().all(|&c| c > 0) {
                    return Ok(Phantom {
                        image,
                        labels,
                        provenance: Provenance {
                            seed,
                            index,
                            shape: shape.to_vec(),
                            classes,
                        },
                    });
                }
            }
            Err(Error::Generation(format!(
                "could not place {} visible classes in shape {shape:?}",
                classes - 1
            )))
        })
        .collect()
}
