//! Unpaired multi-modal segmentation workbench.
//!
//! A compact network shares every convolution kernel between two imaging
//! modalities and keeps only its internal normalization layers
//! modality-specific. Training aligns the per-class prediction distributions
//! of the two modalities with a symmetric KL term on top of the usual
//! segmentation losses.

pub mod error;
pub mod labels;
pub mod tensor;

pub use error::{Error, Result};
pub use labels::LabelMap;
pub use tensor::{Fill, Tape, Tensor, Var};

pub mod distill;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod norm;
pub mod synth;
pub mod trainer;

use serde::{Deserialize, Serialize};

/// One of the two imaging sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    A,
    B,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::A, Modality::B];

    pub fn scope(self) -> ScopeTag {
        match self {
            Modality::A => ScopeTag::A,
            Modality::B => ScopeTag::B,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::A => "A",
            Modality::B => "B",
        })
    }
}

/// Which parameter copy a layer reads: the shared one or a modality's own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScopeTag {
    Shared,
    A,
    B,
}

impl ScopeTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ScopeTag::Shared => "shared",
            ScopeTag::A => "A",
            ScopeTag::B => "B",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "shared" => Some(ScopeTag::Shared),
            "A" => Some(ScopeTag::A),
            "B" => Some(ScopeTag::B),
            _ => None,
        }
    }
}

/// Forward-pass mode. Only batch normalization behaves differently.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
