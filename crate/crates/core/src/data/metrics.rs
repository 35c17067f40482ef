use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{strides, LabelField};

pub const DEFAULT_TOLERANCE: f64 = 1.0;

const INF: i64 = i64::MAX;

fn check_pair(pred: &LabelField, target: &LabelField) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Contract(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Dice similarity of one class; 1 when the class is absent from both.
pub fn dsc(pred: &LabelField, target: &LabelField, class: u32) -> Result<f64> {
    check_pair(pred, target)?;
    let (mut p, mut t, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(target.data()) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        t += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + t) as f64)
}

/// Mean DSC over classes `1..classes`.
pub fn mean_foreground_dsc(pred: &LabelField, target: &LabelField, classes: usize) -> Result<f64> {
    let mut total = 0.0;
    for c in 1..classes {
        total += dsc(pred, target, c as u32)?;
    }
    Ok(total / (classes - 1).max(1) as f64)
}

/// Mask voxels with at least one face neighbour outside the mask; the grid
/// exterior counts as outside.
pub fn boundary(mask: &[bool], shape: &[usize]) -> Vec<bool> {
    let st = strides(shape);
    mask.iter()
        .enumerate()
        .map(|(i, &inside)| {
            inside
                && st.iter().zip(shape).any(|(&s, &len)| {
                    let coord = (i / s) % len;
                    coord == 0 || coord + 1 == len || !mask[i - s] || !mask[i + s]
                })
        })
        .collect()
}

/// Lower envelope of parabolas over one line; `f` holds `INF` where no site
/// is reachable. Breakpoints are compared as exact fractions.
fn edt_line(f: &[i64], out: &mut [i64], v: &mut Vec<usize>, z: &mut Vec<(i128, i128)>) {
    v.clear();
    z.clear();
    let key = |q: usize| f[q] as i128 + (q * q) as i128;
    for q in 0..f.len() {
        if f[q] == INF {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                // left boundary −∞ for the first parabola
                z.push((i128::MIN, 1));
                break;
            };
            let num = key(q) - key(p);
            let den = 2 * (q - p) as i128;
            let (zn, zd) = *z.last().unwrap();
            if zn != i128::MIN && num * zd <= zn * den {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push((num, den));
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(INF);
        return;
    }
    let mut k = 0;
    for (x, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1].0 < x as i128 * z[k + 1].1 {
            k += 1;
        }
        let d = x as i64 - v[k] as i64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest `true`
/// site, in voxel units; `None` when there are no sites.
pub fn squared_distance_transform(sites: &[bool], shape: &[usize]) -> Vec<Option<u64>> {
    let mut dist: Vec<i64> = sites.iter().map(|&s| if s { 0 } else { INF }).collect();
    let st = strides(shape);
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for (axis, &len) in shape.iter().enumerate() {
        let s = st[axis];
        let mut line = vec![0; len];
        let mut out = vec![0; len];
        for start in 0..dist.len() {
            if !(start / s).is_multiple_of(len) {
                continue;
            }
            for (j, l) in line.iter_mut().enumerate() {
                *l = dist[start + j * s];
            }
            edt_line(&line, &mut out, &mut v, &mut z);
            for (j, o) in out.iter().enumerate() {
                dist[start + j * s] = *o;
            }
        }
    }
    dist.into_iter().map(|d| (d != INF).then_some(d as u64)).collect()
}

fn within(from: &[bool], to_dist: &[Option<u64>], tol_sq: f64) -> usize {
    from.iter()
        .zip(to_dist)
        .filter(|(&b, d)| b && d.is_some_and(|d| d as f64 <= tol_sq))
        .count()
}

/// Normalised surface distance of one class at `tolerance` voxels.
///
/// Counts boundary voxels of each mask lying within `tolerance` of the other
/// mask's boundary, divided by the total number of boundary voxels.
pub fn nsd(pred: &LabelField, target: &LabelField, class: u32, tolerance: f64) -> Result<f64> {
    check_pair(pred, target)?;
    if !(tolerance >= 0.0) || !tolerance.is_finite() {
        return Err(Error::Domain(format!(
            "NSD tolerance must be finite and non-negative, got {tolerance}"
        )));
    }
    let shape = pred.shape();
    let bp = boundary(&pred.mask(class), shape);
    let bt = boundary(&target.mask(class), shape);
    let (np, nt) = (bp.iter().filter(|&&b| b).count(), bt.iter().filter(|&&b| b).count());
    match (np, nt) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let tol_sq = tolerance * tolerance;
    let dp = squared_distance_transform(&bp, shape);
    let dt = squared_distance_transform(&bt, shape);
    let hits = within(&bp, &dt, tol_sq) + within(&bt, &dp, tol_sq);
    Ok(hits as f64 / (np + nt) as f64)
}

/// Metrics of one case; vectors are indexed by class, background included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: String,
    pub dsc: Vec<f64>,
    pub nsd: Vec<f64>,
}

impl CaseMetrics {
    pub fn compute(case: &str, pred: &LabelField, target: &LabelField, classes: usize, tolerance: f64) -> Result<Self> {
        let mut dscs = Vec::with_capacity(classes);
        let mut nsds = Vec::with_capacity(classes);
        for c in 0..classes as u32 {
            dscs.push(dsc(pred, target, c)?);
            nsds.push(nsd(pred, target, c, tolerance)?);
        }
        Ok(Self {
            case: case.to_string(),
            dsc: dscs,
            nsd: nsds,
        })
    }

    pub fn foreground_dsc(&self) -> f64 {
        mean(&self.dsc[1..])
    }

    pub fn foreground_nsd(&self) -> f64 {
        mean(&self.nsd[1..])
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    mean(&v.iter().map(|x| (x - m) * (x - m)).collect::<Vec<_>>()).sqrt()
}

/// Aggregated evaluation. Means and standard deviations are over cases of
/// the per-case foreground mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tolerance: f64,
    pub classes: usize,
    pub cases: Vec<CaseMetrics>,
    pub class_dsc: Vec<f64>,
    pub class_nsd: Vec<f64>,
    pub mean_dsc: f64,
    pub mean_nsd: f64,
    pub std_dsc: f64,
    pub std_nsd: f64,
}

/// One CSV row: a case/class pair, or the `mean` summary rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub case: String,
    pub class: usize,
    pub dsc: f64,
    pub nsd: f64,
}

impl MetricReport {
    pub fn from_cases(cases: Vec<CaseMetrics>, classes: usize, tolerance: f64) -> Self {
        let per_class = |pick: fn(&CaseMetrics) -> &Vec<f64>| -> Vec<f64> {
            (0..classes)
                .map(|c| mean(&cases.iter().map(|m| pick(m)[c]).collect::<Vec<_>>()))
                .collect()
        };
        let class_dsc = per_class(|m| &m.dsc);
        let class_nsd = per_class(|m| &m.nsd);
        let fg_dsc: Vec<f64> = cases.iter().map(CaseMetrics::foreground_dsc).collect();
        let fg_nsd: Vec<f64> = cases.iter().map(CaseMetrics::foreground_nsd).collect();
        Self {
            tolerance,
            classes,
            mean_dsc: mean(&fg_dsc),
            mean_nsd: mean(&fg_nsd),
            std_dsc: std_dev(&fg_dsc),
            std_nsd: std_dev(&fg_nsd),
            class_dsc,
            class_nsd,
            cases,
        }
    }

    pub fn rows(&self) -> Vec<MetricRow> {
        let mut rows = Vec::new();
        for m in &self.cases {
            for c in 0..self.classes {
                rows.push(MetricRow {
                    case: m.case.clone(),
                    class: c,
                    dsc: m.dsc[c],
                    nsd: m.nsd[c],
                });
            }
        }
        for c in 0..self.classes {
            rows.push(MetricRow {
                case: "mean".into(),
                class: c,
                dsc: self.class_dsc[c],
                nsd: self.class_nsd[c],
            });
        }
        rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in self.rows() {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<MetricRow>> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(r.deserialize().collect::<std::result::Result<Vec<MetricRow>, _>>()?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field(shape: &[usize], f: impl Fn(&[usize]) -> bool) -> LabelField {
        let st = strides(shape);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| {
                let c: Vec<usize> = st.iter().zip(shape).map(|(s, l)| (i / s) % l).collect();
                f(&c) as u32
            })
            .collect();
        LabelField::new(shape.to_vec(), data).unwrap()
    }

    fn square(lo: usize, hi: usize) -> impl Fn(&[usize]) -> bool {
        move |c: &[usize]| c.iter().all(|&x| (lo..hi).contains(&x))
    }

    /// All-pairs boundary distances.
    fn nsd_brute(p: &LabelField, t: &LabelField, tol: f64) -> f64 {
        let shape = p.shape();
        let st = strides(shape);
        let coords = |i: usize| -> Vec<i64> { st.iter().zip(shape).map(|(s, l)| ((i / s) % l) as i64).collect() };
        let bp: Vec<usize> = boundary(&p.mask(1), shape)
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect();
        let bt: Vec<usize> = boundary(&t.mask(1), shape)
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect();
        if bp.is_empty() && bt.is_empty() {
            return 1.0;
        }
        if bp.is_empty() || bt.is_empty() {
            return 0.0;
        }
        let close = |a: &[usize], b: &[usize]| {
            a.iter()
                .filter(|&&i| {
                    let ci = coords(i);
                    b.iter().any(|&j| {
                        let d2: i64 = ci.iter().zip(coords(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                        d2 as f64 <= tol * tol
                    })
                })
                .count()
        };
        (close(&bp, &bt) + close(&bt, &bp)) as f64 / (bp.len() + bt.len()) as f64
    }

    #[test]
    fn dsc_definitional_examples() {
        let a = field(&[4, 4], |c| c[0] < 2);
        assert_eq!(dsc(&a, &a, 1).unwrap(), 1.0);
        let b = field(&[4, 4], |c| c[0] >= 2);
        assert_eq!(dsc(&a, &b, 1).unwrap(), 0.0);
        // 8 voxels each, overlapping in 4
        let c = field(&[4, 4], |c| c[0] >= 1 && c[0] < 3);
        assert_eq!(dsc(&a, &c, 1).unwrap(), 0.5);
        let empty = LabelField::zeros(&[4, 4]);
        assert_eq!(dsc(&empty, &empty, 1).unwrap(), 1.0);
        assert!(matches!(
            dsc(&a, &LabelField::zeros(&[4, 5]), 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn nsd_definitional_examples() {
        let sq = field(&[12, 12], square(3, 7));
        assert_eq!(nsd(&sq, &sq, 1, 0.0).unwrap(), 1.0);
        // dilation by the radius-1 ball, i.e. the face-neighbour cross
        let dilated = field(&[12, 12], |c| {
            (3..7).contains(&c[0]) && (2..8).contains(&c[1]) || (2..8).contains(&c[0]) && (3..7).contains(&c[1])
        });
        assert_eq!(nsd(&sq, &dilated, 1, 1.0).unwrap(), 1.0);
        assert_eq!(nsd(&sq, &dilated, 1, 1.0).unwrap(), nsd_brute(&sq, &dilated, 1.0));
        // box dilation adds corners at distance √2
        let boxed = field(&[12, 12], square(2, 8));
        assert_eq!(nsd(&sq, &boxed, 1, 1.0).unwrap(), 28.0 / 32.0);
        let shifted = field(&[16, 16], |c| (3..5).contains(&c[0]) && (3..5).contains(&c[1]));
        let far = field(&[16, 16], |c| (3..5).contains(&c[0]) && (8..10).contains(&c[1]));
        assert_eq!(nsd(&shifted, &far, 1, 1.0).unwrap(), nsd_brute(&shifted, &far, 1.0));
        assert_eq!(nsd(&shifted, &far, 1, 1.0).unwrap(), 0.0);
        let empty = LabelField::zeros(&[12, 12]);
        assert_eq!(nsd(&empty, &empty, 1, 1.0).unwrap(), 1.0);
        assert_eq!(nsd(&empty, &sq, 1, 1.0).unwrap(), 0.0);
        assert!(matches!(nsd(&sq, &sq, 1, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn boundary_counts_grid_edge_as_outside() {
        let full = LabelField::new(vec![3, 3], vec![1; 9]).unwrap();
        let b = boundary(&full.mask(1), full.shape());
        assert_eq!(b.iter().filter(|&&x| x).count(), 8);
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let shape = [5, 7, 6];
        let sites: Vec<bool> = (0..210).map(|i| i % 37 == 3 || i == 100).collect();
        let d = squared_distance_transform(&sites, &shape);
        let st = strides(&shape);
        let coords = |i: usize| -> Vec<i64> { st.iter().zip(&shape).map(|(s, l)| ((i / s) % l) as i64).collect() };
        for (i, got) in d.iter().enumerate() {
            let want = (0..210)
                .filter(|&j| sites[j])
                .map(|j| {
                    coords(i)
                        .iter()
                        .zip(coords(j))
                        .map(|(a, b)| ((a - b) * (a - b)) as u64)
                        .sum::<u64>()
                })
                .min();
            assert_eq!(*got, want);
        }
        assert!(squared_distance_transform(&[false; 4], &[2, 2])
            .iter()
            .all(Option::is_none));
    }

    #[test]
    fn report_aggregates_foreground_classes() {
        let t = field(&[8, 8], square(2, 6));
        let p = LabelField::zeros(&[8, 8]);
        let perfect = CaseMetrics::compute("a", &t, &t, 2, 1.0).unwrap();
        let blank = CaseMetrics::compute("b", &p, &t, 2, 1.0).unwrap();
        let r = MetricReport::from_cases(vec![perfect, blank], 2, 1.0);
        assert_eq!(r.mean_dsc, 0.5);
        assert_eq!(r.std_dsc, 0.5);
        assert_eq!(r.rows().len(), 6);
    }

    proptest! {
        #[test]
        fn fast_nsd_equals_brute_force(
            dims in prop::collection::vec(2usize..10, 2..=3),
            seed in any::<u64>(),
            tol in 0.0f64..4.0,
        ) {
            let n: usize = dims.iter().product();
            let mut s = seed;
            let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (s >> 33) % 3 == 0 };
            let p = LabelField::new(dims.clone(), (0..n).map(|_| next() as u32).collect()).unwrap();
            let t = LabelField::new(dims.clone(), (0..n).map(|_| next() as u32).collect()).unwrap();
            prop_assert_eq!(nsd(&p, &t, 1, tol).unwrap(), nsd_brute(&p, &t, tol));
        }

        #[test]
        fn dsc_is_symmetric_and_bounded(seed in any::<u64>()) {
            let mut s = seed;
            let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1); ((s >> 40) % 3) as u32 };
            let p = LabelField::new(vec![6, 6], (0..36).map(|_| next()).collect()).unwrap();
            let t = LabelField::new(vec![6, 6], (0..36).map(|_| next()).collect()).unwrap();
            for c in 0..3 {
                let d = dsc(&p, &t, c).unwrap();
                prop_assert_eq!(d, dsc(&t, &p, c).unwrap());
                prop_assert!((0.0..=1.0).contains(&d));
            }
        }

        #[test]
        fn nsd_is_monotone_in_tolerance(seed in any::<u64>(), a in 0.0f64..3.0, b in 0.0f64..3.0) {
            let mut s = seed;
            let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(7); ((s >> 40) % 2) as u32 };
            let p = LabelField::new(vec![7, 9], (0..63).map(|_| next()).collect()).unwrap();
            let t = LabelField::new(vec![7, 9], (0..63).map(|_| next()).collect()).unwrap();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(nsd(&p, &t, 1, lo).unwrap() <= nsd(&p, &t, 1, hi).unwrap());
        }
    }
}
