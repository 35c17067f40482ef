//! Synthetic phantoms, dataset files, segmentation metrics and evaluation.

mod io;
mod metrics;
mod phantom;

pub use io::{read_dataset, write_dataset, Dataset, DatasetManifest};
pub use metrics::{
    boundary, dsc, mean_foreground_dsc, nsd, squared_distance_transform, CaseMetrics, MetricReport, MetricRow,
    DEFAULT_TOLERANCE,
};
pub use phantom::{class_band, generate_phantoms, Phantom, Provenance, BACKGROUND_LEVEL, MIN_AXIS, NOISE_STD};

use std::path::Path;

use serde_json::json;

use crate::autograd::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::network::{Network, SegmentationOutput, CHECKPOINT_KIND};
use crate::parallel::{map_ordered, thread_limit};

pub const LABEL_ORACLE_KIND: &str = "label_oracle";

/// Anything that maps a case to class probabilities.
pub trait Segmenter: Sync {
    fn classes(&self) -> usize;
    fn segment(&self, case: &Phantom) -> Result<SegmentationOutput>;
}

impl Segmenter for Network {
    fn classes(&self) -> usize {
        self.config().num_classes
    }

    fn segment(&self, case: &Phantom) -> Result<SegmentationOutput> {
        self.predict(&case.image)
    }
}

/// Reads the answer off the case labels; a fixture for evaluation plumbing.
#[derive(Clone, Copy, Debug)]
pub struct LabelOracle {
    pub classes: usize,
}

impl LabelOracle {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            manifest: json!({ "kind": LABEL_ORACLE_KIND, "classes": self.classes }),
            params: Vec::new(),
        }
    }
}

impl Segmenter for LabelOracle {
    fn classes(&self) -> usize {
        self.classes
    }

    fn segment(&self, case: &Phantom) -> Result<SegmentationOutput> {
        SegmentationOutput::one_hot(&case.labels, self.classes)
    }
}

/// Predicts one class everywhere.
#[derive(Clone, Copy, Debug)]
pub struct ConstantSegmenter {
    pub class: u32,
    pub classes: usize,
}

impl Segmenter for ConstantSegmenter {
    fn classes(&self) -> usize {
        self.classes
    }

    fn segment(&self, case: &Phantom) -> Result<SegmentationOutput> {
        let mut labels = case.labels.clone();
        labels.data_mut().fill(self.class);
        SegmentationOutput::one_hot(&labels, self.classes)
    }
}

/// Loads a network or label-oracle checkpoint.
pub fn load_segmenter(path: &Path) -> Result<Box<dyn Segmenter>> {
    let ckpt = Checkpoint::read(path)?;
    match ckpt.manifest.get("kind").and_then(|k| k.as_str()) {
        Some(LABEL_ORACLE_KIND) => {
            let classes = ckpt.manifest["classes"]
                .as_u64()
                .ok_or_else(|| Error::Format("label oracle checkpoint without classes".into()))?;
            Ok(Box::new(LabelOracle {
                classes: classes as usize,
            }))
        }
        Some(CHECKPOINT_KIND) => Ok(Box::new(Network::from_checkpoint(&ckpt)?)),
        other => Err(Error::Format(format!("unknown checkpoint kind {other:?}"))),
    }
}

/// Argmax segmentation of every case, scored per class.
pub fn evaluate(model: &dyn Segmenter, cases: &[Phantom], tolerance: f64) -> Result<MetricReport> {
    let classes = model.classes();
    let per_case = map_ordered(cases, thread_limit(), |case| {
        let pred = model.segment(case)?.argmax();
        CaseMetrics::compute(&case.id(), &pred, &case.labels, classes, tolerance)
    });
    let cases = per_case.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_cases(cases, classes, tolerance))
}
