use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::phantom::{Phantom, Provenance};
use crate::error::{Error, Result};
use crate::tensor::{hsf, LabelField, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGE_FILE: &str = "image.hsf";
pub const LABELS_FILE: &str = "labels.hsf";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub shape: Vec<usize>,
    pub classes: usize,
    /// Case directory names, relative to the dataset root.
    pub cases: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub cases: Vec<Phantom>,
}

fn case_dir(p: &Phantom) -> String {
    format!("case_{}", p.id())
}

/// Writes `case_<id>/image.hsf`, `case_<id>/labels.hsf` and the manifest.
pub fn write_dataset(dir: &Path, phantoms: &[Phantom]) -> Result<DatasetManifest> {
    let first = phantoms
        .first()
        .ok_or_else(|| Error::Data("refusing to write an empty dataset".into()))?;
    fs::create_dir_all(dir)?;
    let mut cases = Vec::with_capacity(phantoms.len());
    for p in phantoms {
        let name = case_dir(p);
        let cdir = dir.join(&name);
        fs::create_dir_all(&cdir)?;
        hsf::write(&cdir.join(IMAGE_FILE), &p.image)?;
        let labels = Tensor::new(
            p.labels.shape().to_vec(),
            p.labels.data().iter().map(|&l| l as f64).collect(),
        )?;
        hsf::write(&cdir.join(LABELS_FILE), &labels)?;
        cases.push(name);
    }
    let manifest = DatasetManifest {
        seed: first.provenance.seed,
        shape: first.provenance.shape.clone(),
        classes: first.provenance.classes,
        cases,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn to_labels(t: Tensor, classes: usize) -> Result<LabelField> {
    let data = t
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < classes {
                Ok(v as u32)
            } else {
                Err(Error::Data(format!("label value {v} is not a class in 0..{classes}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LabelField::new(t.shape().to_vec(), data)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("bad manifest: {e}")))?;
    let mut cases = Vec::with_capacity(manifest.cases.len());
    for (index, name) in manifest.cases.iter().enumerate() {
        let cdir = dir.join(name);
        let image = hsf::read(&cdir.join(IMAGE_FILE))?;
        let labels = to_labels(hsf::read(&cdir.join(LABELS_FILE))?, manifest.classes)?;
        if image.spatial_shape() != labels.shape() || labels.shape() != &manifest.shape[..] {
            return Err(Error::Data(format!("case {name} has mismatched image/label shapes")));
        }
        let index = name.strip_prefix("case_").and_then(|s| s.parse().ok()).unwrap_or(index);
        cases.push(Phantom {
            image,
            labels,
            provenance: Provenance {
                seed: manifest.seed,
                index,
                shape: manifest.shape.clone(),
                classes: manifest.classes,
            },
        });
    }
    Ok(Dataset { manifest, cases })
}
