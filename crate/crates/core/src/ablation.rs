//! Trains every network variant under one budget and tabulates DSC and NSD.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{evaluate, Phantom, DEFAULT_TOLERANCE};
use crate::error::{Error, Result};
use crate::network::{train, Network, NetworkConfig, TrainConfig, Variant};

/// Full-scale reference results (3D abdominal CT), `(variant, DSC mean, DSC
/// std, NSD mean, NSD std)`. Quoted for comparison only.
pub const PUBLISHED: [(Variant, f64, f64, f64, f64); 5] = [
    (Variant::Baseline, 0.8615, 0.0790, 0.8972, 0.0824),
    (Variant::MambaEnc, 0.8638, 0.0908, 0.8980, 0.0921),
    (Variant::HcoBot, 0.8618, 0.0941, 0.8965, 0.0978),
    (Variant::HcoEnc, 0.8575, 0.0854, 0.8895, 0.0857),
    (Variant::Umh, 0.8719, 0.0628, 0.9037, 0.0516),
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    /// Variant field is overridden per row.
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub init_seed: u64,
    pub tolerance: f64,
    /// One case in `eval_every` is held out for evaluation.
    pub eval_every: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::desk_2d(),
            train: TrainConfig::default(),
            init_seed: 7,
            tolerance: DEFAULT_TOLERANCE,
            eval_every: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub network: String,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub nsd_mean: f64,
    pub nsd_std: f64,
    pub params: usize,
    pub train_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub train_cases: usize,
    pub eval_cases: usize,
    pub epochs: usize,
    pub tolerance: f64,
}

/// Splits cases 4:1 (with the default `eval_every = 5`): every fifth case is
/// held out.
pub fn split_cases(cases: &[Phantom], eval_every: usize) -> (Vec<Phantom>, Vec<Phantom>) {
    let every = eval_every.max(2);
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (i, c) in cases.iter().enumerate() {
        if i % every == every - 1 {
            eval.push(c.clone());
        } else {
            train.push(c.clone());
        }
    }
    (train, eval)
}

pub fn run_ablation(
    cases: &[Phantom],
    cfg: &AblationConfig,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    let (train_set, eval_set) = split_cases(cases, cfg.eval_every);
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::Data(format!(
            "{} cases are too few for a train/eval split",
            cases.len()
        )));
    }
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let net_cfg = cfg.network.clone().with_variant(variant);
        let mut net = Network::build(&net_cfg, cfg.init_seed)?;
        let t = Instant::now();
        train(&mut net, &train_set, &cfg.train)?;
        let train_seconds = t.elapsed().as_secs_f64();
        let report = evaluate(&net, &eval_set, cfg.tolerance)?;
        let row = AblationRow {
            variant,
            network: variant.display_name().into(),
            dsc_mean: report.mean_dsc,
            dsc_std: report.std_dsc,
            nsd_mean: report.mean_nsd,
            nsd_std: report.std_nsd,
            params: net.param_count(),
            train_seconds,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(AblationTable {
        rows,
        train_cases: train_set.len(),
        eval_cases: eval_set.len(),
        epochs: cfg.train.epochs,
        tolerance: cfg.tolerance,
    })
}

impl AblationTable {
    /// Markdown table followed by the published full-scale figures.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "Desk-scale ablation: {} train / {} eval phantoms, {} epochs, NSD tolerance {} voxel(s)\n",
            self.train_cases, self.eval_cases, self.epochs, self.tolerance
        );
        let _ = writeln!(s, "| Networks | DSC | NSD |");
        let _ = writeln!(s, "|---|---|---|");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {:.4}±{:.4} | {:.4}±{:.4} |",
                r.network, r.dsc_mean, r.dsc_std, r.nsd_mean, r.nsd_std
            );
        }
        let _ = writeln!(
            s,
            "\nPublished full-scale values (3D abdominal CT, 1000 epochs); NOT reproduced here:\n"
        );
        let _ = writeln!(s, "| Networks | DSC | NSD |");
        let _ = writeln!(s, "|---|---|---|");
        for (v, dm, ds, nm, ns) in PUBLISHED {
            let _ = writeln!(s, "| {} | {dm:.4}±{ds:.4} | {nm:.4}±{ns:.4} |", v.display_name());
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<AblationRow>> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(r.deserialize().collect::<std::result::Result<Vec<AblationRow>, _>>()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_phantoms;

    #[test]
    fn split_is_four_to_one() {
        let cases = generate_phantoms(20, &[16, 16], 2, 0).unwrap();
        let (t, e) = split_cases(&cases, 5);
        assert_eq!((t.len(), e.len()), (16, 4));
        assert_eq!(e[0].provenance.index, 4);
    }

    #[test]
    fn tiny_ablation_has_five_rows_and_reference_footer() {
        let cases = generate_phantoms(5, &[16, 16], 2, 1).unwrap();
        let cfg = AblationConfig {
            network: NetworkConfig {
                patch_size: vec![16, 16],
                stages: 3,
                pooling: vec![2, 2],
                base_channels: 4,
                num_classes: 2,
                state_dim: 4,
                ..NetworkConfig::desk_2d()
            },
            train: TrainConfig {
                epochs: 1,
                threads: 1,
                ..TrainConfig::default()
            },
            ..AblationConfig::default()
        };
        let table = run_ablation(&cases, &cfg, |_| {}).unwrap();
        assert_eq!(table.rows.len(), 5);
        let names: Vec<&str> = table.rows.iter().map(|r| r.network.as_str()).collect();
        assert_eq!(names, ["nnUNet", "U-Mamba_Enc", "U-HCO_Bot", "U-HCO_Enc", "UMH"]);
        let text = table.render();
        assert!(text.contains("| UMH | 0.8719±0.0628 | 0.9037±0.0516 |"));
        assert!(text.contains("NOT reproduced"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ablation.csv");
        table.write_csv(&path).unwrap();
        assert_eq!(AblationTable::read_csv(&path).unwrap(), table.rows);
    }
}
