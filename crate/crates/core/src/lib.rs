//! Segmentation networks mixing convolution with two global operators: a
//! spectral heat conduction layer and a linear-time selective scan.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ablation;
pub mod autograd;
pub mod bench;
pub mod checks;
pub mod data;
pub mod error;
pub mod hco;
pub mod network;
pub mod parallel;
pub mod spectral;
pub mod ssm;
pub mod tensor;

pub use data::{dsc, evaluate, generate_phantoms, nsd, MetricReport, Phantom, Segmenter};
pub use error::{Error, Result};
pub use hco::{hco_forward, HcoLayer};
pub use network::{Network, NetworkConfig, SegmentationOutput, Variant};
pub use spectral::{DiffusivityField, Eigenvalues};
pub use ssm::{ssm_forward, Sequence, SsmBlock};
pub use tensor::{dct_forward, dct_inverse, FeatureField, FrequencyField, LabelField, Tensor};
