//! Cascaded chest x-ray screening.
//!
//! Stage 1 segments the lungs and masks everything else out, stage 2 separates
//! normal radiographs from pneumonia and produces a class activation map, and
//! stage 3 tells COVID-19 apart from other pneumonia on the heatmap-attenuated
//! image. Training, attribution, evaluation and orchestration all live here;
//! the HTTP service and the command line front end are separate crates.

pub mod cascade;
pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod explain;
pub mod grid;
pub mod nn;
pub mod par;
pub mod pilot;
pub mod segmenter;
pub mod stage2;
pub mod stage3;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::Grid;

/// Side length of a canonical input image.
pub const CANONICAL_SIZE: usize = 512;

/// Position of a model in the cascade.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Stage {
    /// Lung segmentation.
    Segmentation = 1,
    /// Normal vs pneumonia.
    Pneumonia = 2,
    /// COVID-19 vs other pneumonia.
    Covid = 3,
}

impl Stage {
    pub fn number(self) -> u8 {
        self as u8
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s as u8
    }
}

impl TryFrom<u8> for Stage {
    type Error = Error;

    fn try_from(v: u8) -> Result<Stage> {
        match v {
            1 => Ok(Stage::Segmentation),
            2 => Ok(Stage::Pneumonia),
            3 => Ok(Stage::Covid),
            other => Err(Error::InvalidConfig(format!("stage must be 1, 2 or 3, got {other}"))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.number())
    }
}
