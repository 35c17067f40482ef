use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which global operators are inserted into the convolutional backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain residual U-Net.
    Baseline,
    /// Selective scan after the encoder stages.
    MambaEnc,
    /// Heat conduction on the two deepest encoder→decoder links.
    HcoBot,
    /// Heat conduction after the encoder stages.
    HcoEnc,
    /// Selective scan in the encoder plus heat conduction on the deepest links.
    Umh,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::MambaEnc,
        Variant::HcoBot,
        Variant::HcoEnc,
        Variant::Umh,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::MambaEnc => "mamba_enc",
            Variant::HcoBot => "hco_bot",
            Variant::HcoEnc => "hco_enc",
            Variant::Umh => "umh",
        }
    }

    /// Row label used in ablation tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Baseline => "nnUNet",
            Variant::MambaEnc => "U-Mamba_Enc",
            Variant::HcoBot => "U-HCO_Bot",
            Variant::HcoEnc => "U-HCO_Enc",
            Variant::Umh => "UMH",
        }
    }

    pub fn has_encoder_ssm(self) -> bool {
        matches!(self, Variant::MambaEnc | Variant::Umh)
    }

    pub fn has_encoder_hco(self) -> bool {
        self == Variant::HcoEnc
    }

    pub fn has_bottleneck_hco(self) -> bool {
        matches!(self, Variant::HcoBot | Variant::Umh)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown variant {s:?}; expected one of baseline, mamba_enc, hco_bot, hco_enc, umh"
            ))
        })
    }
}

/// Where bottleneck heat conduction layers sit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottleneckPlacement {
    /// Each of the two deepest encoder outputs is diffused before the decoder
    /// consumes it.
    #[default]
    SkipLinks,
    /// Two residual heat conduction layers in series on the deepest feature
    /// map. Not exercised by the acceptance suite.
    Serial,
}

fn default_in_channels() -> usize {
    1
}

fn default_embed_dim() -> usize {
    crate::hco::DEFAULT_EMBED_DIM
}

fn default_state_dim() -> usize {
    16
}

/// Network hyper-parameters; serialised as the JSON preset format.
///
/// Reference configurations of the full-scale model (batch size first, then
/// the patch):
///
/// | dataset  | patch              | stages | pooling   |
/// |----------|--------------------|--------|-----------|
/// | CT (3D)  | 2 × 40 × 224 × 192 | 6      | (3, 5, 5) |
/// | MR (3D)  | 2 × 48 × 160 × 224 | 6      | (3, 5, 5) |
/// | MR (2D)  | 30 × 320 × 320     | 7      | (6, 6)    |
///
/// The desk presets in `presets/` shrink these to 64×64 (4 stages) and
/// 16×32×32 (3 stages).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Spatial patch extent per axis.
    pub patch_size: Vec<usize>,
    pub stages: usize,
    /// Number of 2× downsamplings applied to each axis.
    pub pooling: Vec<usize>,
    pub base_channels: usize,
    pub num_classes: usize,
    pub variant: Variant,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_state_dim")]
    pub state_dim: usize,
    #[serde(default)]
    pub bottleneck: BottleneckPlacement,
}

impl NetworkConfig {
    pub fn desk_2d() -> Self {
        Self {
            patch_size: vec![64, 64],
            stages: 4,
            pooling: vec![3, 3],
            base_channels: 8,
            num_classes: 3,
            variant: Variant::Umh,
            in_channels: 1,
            embed_dim: default_embed_dim(),
            state_dim: default_state_dim(),
            bottleneck: BottleneckPlacement::SkipLinks,
        }
    }

    pub fn desk_3d() -> Self {
        Self {
            patch_size: vec![16, 32, 32],
            stages: 3,
            pooling: vec![2, 2, 2],
            ..Self::desk_2d()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn rank(&self) -> usize {
        self.patch_size.len()
    }

    pub fn validate(&self) -> Result<()> {
        let rank = self.rank();
        if !(2..=3).contains(&rank) {
            return Err(Error::Config(format!("patch_size must have 2 or 3 axes, got {rank}")));
        }
        if self.pooling.len() != rank {
            return Err(Error::Config(format!(
                "pooling has {} entries for a {rank}-axis patch",
                self.pooling.len()
            )));
        }
        if self.stages < 3 {
            return Err(Error::Config(format!("stages must be at least 3, got {}", self.stages)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.embed_dim == 0 || self.state_dim == 0 {
            return Err(Error::Config(
                "channel, embedding and state widths must be positive".into(),
            ));
        }
        for (axis, (&len, &pool)) in self.patch_size.iter().zip(&self.pooling).enumerate() {
            if pool >= self.stages {
                return Err(Error::Config(format!(
                    "axis {axis} pooled {pool} times but only {} transitions exist",
                    self.stages - 1
                )));
            }
            if len == 0 || len % (1 << pool) != 0 {
                return Err(Error::Config(format!(
                    "axis {axis} length {len} is not divisible by 2^{pool}"
                )));
            }
        }
        Ok(())
    }

    /// Per-axis stride of the transition into `stage` (`stage ≥ 1`).
    pub fn stride_into(&self, stage: usize) -> Vec<usize> {
        self.pooling.iter().map(|&p| if stage <= p { 2 } else { 1 }).collect()
    }

    /// Spatial shape of encoder stage `stage`.
    pub fn stage_shape(&self, stage: usize) -> Vec<usize> {
        let mut shape = self.patch_size.clone();
        for s in 1..=stage {
            for (len, stride) in shape.iter_mut().zip(self.stride_into(s)) {
                *len /= stride;
            }
        }
        shape
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
