//! Timing harness for the operator complexity sweep.

use std::fmt;
use std::hint::black_box;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::hco::{HcoLayer, DEFAULT_EMBED_DIM};
use crate::spectral::explicit_heat_steps;
use crate::tensor::{dct_matrix, FeatureField, Tensor};

pub const MIN_REPS: usize = 5;
pub const MIN_SIZES: usize = 4;
/// Uniform diffusivity shared by the quadratic mixer and the spatial oracle.
pub const BENCH_K: f64 = 0.5;
const ORACLE_DT: f64 = 0.1;
const ORACLE_STEPS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SeparableMatmul,
    SpatialOracle,
    QuadraticMixer,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::SeparableMatmul, Method::SpatialOracle, Method::QuadraticMixer];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::SeparableMatmul => "separable-matmul",
            Method::SpatialOracle => "spatial-oracle",
            Method::QuadraticMixer => "quadratic-mixer",
        }
    }

    pub fn op(self) -> &'static str {
        match self {
            Method::SeparableMatmul => "hco_forward",
            Method::SpatialOracle => "explicit_heat_steps",
            Method::QuadraticMixer => "dense_heat_kernel",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown bench method {s:?}")))
    }
}

/// One timed configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub op: String,
    /// Total spatial voxels.
    pub n: usize,
    /// Median wall time in seconds.
    pub seconds: f64,
    pub method: Method,
}

pub fn write_records(path: &Path, records: &[BenchRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<BenchRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<BenchRecord>, _>>()?)
}

/// Median over `reps` timed calls, after one warm-up call.
pub fn median_seconds(reps: usize, mut f: impl FnMut()) -> f64 {
    f();
    let mut times: Vec<f64> = (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let m = times.len() / 2;
    if times.len() % 2 == 1 {
        times[m]
    } else {
        0.5 * (times[m - 1] + times[m])
    }
}

/// Least-squares line through `(ln n, ln t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_loglog(n: &[f64], t: &[f64]) -> Result<LogLogFit> {
    if n.len() != t.len() || n.len() < 2 {
        return Err(Error::Contract("log-log fit needs at least two paired points".into()));
    }
    if n.iter().chain(t).any(|&v| !(v > 0.0)) {
        return Err(Error::Domain("log-log fit needs positive values".into()));
    }
    let x: Vec<f64> = n.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = t.iter().map(|v| v.ln()).collect();
    let len = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / len, y.iter().sum::<f64>() / len);
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("log-log fit needs distinct sizes".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let ss_res: f64 = x.iter().zip(&y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LogLogFit { slope, intercept, r2 })
}

/// Fits every method present in `records`.
pub fn fit_records(records: &[BenchRecord]) -> Result<Vec<(Method, LogLogFit)>> {
    let mut out = Vec::new();
    for m in Method::ALL {
        let (n, t): (Vec<f64>, Vec<f64>) = records
            .iter()
            .filter(|r| r.method == m)
            .map(|r| (r.n as f64, r.seconds))
            .unzip();
        if !n.is_empty() {
            out.push((m, fit_loglog(&n, &t)?));
        }
    }
    Ok(out)
}

/// Heat kernel with uniform diffusivity evaluated as a dense `N × N` mixing
/// matrix: every output voxel is a weighted sum over every input voxel.
#[derive(Clone, Debug)]
pub struct QuadraticMixer {
    h: usize,
    w: usize,
    ky: Vec<f64>,
    kx: Vec<f64>,
}

fn axis_kernel(len: usize, k: f64) -> Vec<f64> {
    let c = dct_matrix(len);
    let decay: Vec<f64> = (0..len)
        .map(|u| {
            let om = std::f64::consts::PI * u as f64 / len as f64;
            (-k * om * om).exp()
        })
        .collect();
    let mut out = vec![0.0; len * len];
    for i in 0..len {
        for j in 0..len {
            out[i * len + j] = (0..len).map(|u| c[u * len + i] * decay[u] * c[u * len + j]).sum();
        }
    }
    out
}

impl QuadraticMixer {
    pub fn new(h: usize, w: usize, k: f64) -> Self {
        Self {
            h,
            w,
            ky: axis_kernel(h, k),
            kx: axis_kernel(w, k),
        }
    }

    /// Kernel weight between output voxel `(yi, xi)` and input voxel `(yj, xj)`.
    pub fn weight(&self, yi: usize, xi: usize, yj: usize, xj: usize) -> f64 {
        self.ky[yi * self.h + yj] * self.kx[xi * self.w + xj]
    }

    pub fn apply(&self, x: &FeatureField) -> Result<FeatureField> {
        if x.spatial_shape() != [self.h, self.w] {
            return Err(Error::Contract(format!(
                "mixer built for {}x{}, input is {:?}",
                self.h,
                self.w,
                x.shape()
            )));
        }
        let (h, w) = (self.h, self.w);
        let plane = h * w;
        let mut out = vec![0.0; x.len()];
        for (src, dst) in x.data().chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
            for yi in 0..h {
                for xi in 0..w {
                    let kx = &self.kx[xi * w..(xi + 1) * w];
                    let mut acc = 0.0;
                    for yj in 0..h {
                        acc += self.ky[yi * h + yj] * dot(kx, &src[yj * w..(yj + 1) * w]);
                    }
                    dst[yi * w + xi] = acc;
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    /// Square grid side lengths.
    pub sizes: Vec<usize>,
    pub methods: Vec<Method>,
    pub reps: usize,
    /// Feature channels for the HCO and the spatial oracle.
    pub channels: usize,
    /// Channels for the quadratic mixer, whose cost is linear in this.
    pub mixer_channels: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sizes: vec![64, 128, 256, 512],
            methods: Method::ALL.to_vec(),
            reps: MIN_REPS,
            channels: 8,
            mixer_channels: 1,
            seed: 0,
        }
    }
}

/// Times one method on a `channels × side × side` random field.
pub fn time_method(method: Method, side: usize, channels: usize, reps: usize, seed: u64) -> Result<BenchRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(&[channels, side, side], |_| rng.random_range(-1.0..1.0));
    let seconds = match method {
        Method::SeparableMatmul => {
            let mut store = ParamStore::new();
            let layer = HcoLayer::new(&mut store, "hco.0", &[side, side], DEFAULT_EMBED_DIM, &mut rng)?;
            layer.forward(&store, &x)?;
            median_seconds(reps, || {
                black_box(layer.forward(&store, black_box(&x)).expect("validated above"));
            })
        }
        Method::SpatialOracle => {
            explicit_heat_steps(&x, BENCH_K, ORACLE_DT, 1)?;
            median_seconds(reps, || {
                black_box(
                    explicit_heat_steps(black_box(&x), BENCH_K, ORACLE_DT, ORACLE_STEPS).expect("validated above"),
                );
            })
        }
        Method::QuadraticMixer => {
            let mixer = QuadraticMixer::new(side, side, BENCH_K);
            median_seconds(reps, || {
                black_box(mixer.apply(black_box(&x)).expect("shape fixed"));
            })
        }
    };
    Ok(BenchRecord {
        op: method.op().into(),
        n: side * side,
        seconds,
        method,
    })
}

/// Runs every method over every size, smallest size first.
pub fn sweep(cfg: &SweepConfig, mut on_record: impl FnMut(&BenchRecord)) -> Result<Vec<BenchRecord>> {
    if cfg.sizes.len() < MIN_SIZES {
        return Err(Error::Config(format!(
            "benchmark needs at least {MIN_SIZES} sizes, got {}",
            cfg.sizes.len()
        )));
    }
    if cfg.sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("benchmark sizes must be strictly increasing".into()));
    }
    let mut out = Vec::new();
    for &m in &cfg.methods {
        for &side in &cfg.sizes {
            let channels = if m == Method::QuadraticMixer {
                cfg.mixer_channels
            } else {
                cfg.channels
            };
            let r = time_method(m, side, channels, cfg.reps.max(MIN_REPS), cfg.seed)?;
            on_record(&r);
            out.push(r);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{diffuse, DiffusivityField};

    #[test]
    fn fit_recovers_exact_power_law() {
        let n = [4.0, 16.0, 64.0, 256.0];
        let t: Vec<f64> = n.iter().map(|v: &f64| 3e-6 * v.powf(1.5)).collect();
        let f = fit_loglog(&n, &t).unwrap();
        assert!((f.slope - 1.5).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert!((f.intercept - 3e-6f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn fit_rejects_degenerate_input() {
        assert!(fit_loglog(&[1.0], &[1.0]).is_err());
        assert!(fit_loglog(&[1.0, 2.0], &[0.0, 1.0]).is_err());
        assert!(fit_loglog(&[2.0, 2.0], &[1.0, 3.0]).is_err());
    }

    #[test]
    fn mixer_equals_uniform_heat_diffusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[2, 6, 9], |_| rng.random_range(-1.0..1.0));
        let mixer = QuadraticMixer::new(6, 9, BENCH_K);
        let want = diffuse(&x, &DiffusivityField::uniform(&[6, 9], BENCH_K, 1.0).unwrap()).unwrap();
        assert!(mixer.apply(&x).unwrap().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn median_of_odd_and_even_counts() {
        let mut calls = 0;
        let m = median_seconds(5, || calls += 1);
        assert_eq!(calls, 6);
        assert!(m >= 0.0);
    }

    #[test]
    fn sweep_validates_sizes() {
        let cfg = SweepConfig {
            sizes: vec![8, 16, 32],
            ..SweepConfig::default()
        };
        assert!(matches!(sweep(&cfg, |_| {}), Err(Error::Config(_))));
        let cfg = SweepConfig {
            sizes: vec![8, 16, 16, 32],
            ..SweepConfig::default()
        };
        assert!(sweep(&cfg, |_| {}).is_err());
    }

    #[test]
    fn small_sweep_produces_positive_times_and_round_trips() {
        let cfg = SweepConfig {
            sizes: vec![8, 12, 16, 20],
            ..SweepConfig::default()
        };
        let recs = sweep(&cfg, |_| {}).unwrap();
        assert_eq!(recs.len(), 12);
        assert!(recs.iter().all(|r| r.seconds > 0.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.csv");
        write_records(&path, &recs).unwrap();
        assert_eq!(read_records(&path).unwrap(), recs);
        assert_eq!(fit_records(&recs).unwrap().len(), 3);
    }
}
