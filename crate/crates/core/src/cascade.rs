//! End-to-end screening: segment, mask, stage 2, and stage 3 for positives.

use serde::{Deserialize, Serialize};

use crate::classifier::StageModel;
use crate::data::image::preprocess_to;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::segmenter::SegmenterModel;
use crate::stage2::{screen_stage2, Stage2Output};
use crate::stage3::{make_stage3_input, screen_stage3, MaskedInput, Stage3Output};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FinalClass {
    Normal,
    Covid,
    NonCovidPneumonia,
}

impl FinalClass {
    pub const ALL: [FinalClass; 3] = [FinalClass::Normal, FinalClass::Covid, FinalClass::NonCovidPneumonia];

    pub fn as_str(self) -> &'static str {
        match self {
            FinalClass::Normal => "NORMAL",
            FinalClass::Covid => "COVID",
            FinalClass::NonCovidPneumonia => "NON_COVID_PNEUMONIA",
        }
    }
}

impl std::str::FromStr for FinalClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FinalClass::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownLabel(s.to_string()))
    }
}

impl std::fmt::Display for FinalClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub stage2: f64,
    pub stage3: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            stage2: crate::stage2::DEFAULT_THRESHOLD,
            stage3: crate::stage3::DEFAULT_THRESHOLD,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for t in [self.stage2, self.stage3] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidConfig(format!("threshold {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Final class from the two stage probabilities. `stage3` is consulted only
/// when stage 2 is positive, and must then be present.
pub fn gate(stage2: f64, stage3: Option<f64>, thresholds: &Thresholds) -> Result<FinalClass> {
    if stage2 < thresholds.stage2 {
        return Ok(FinalClass::Normal);
    }
    let p3 = stage3.ok_or_else(|| Error::InvalidInput("stage 2 is positive but stage 3 did not run".into()))?;
    Ok(if p3 >= thresholds.stage3 {
        FinalClass::Covid
    } else {
        FinalClass::NonCovidPneumonia
    })
}

/// The three trained stages.
#[derive(Clone, Debug)]
pub struct ModelSet {
    pub segmenter: SegmenterModel,
    pub stage2: StageModel,
    pub stage3: StageModel,
}

impl ModelSet {
    pub fn input_size(&self) -> usize {
        self.stage2.config.input_size
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.input_size();
        if self.stage3.config.input_size != n {
            return Err(Error::InvalidConfig(format!(
                "stage 2 expects {n} px input but stage 3 expects {}",
                self.stage3.config.input_size
            )));
        }
        if !n.is_multiple_of(self.segmenter.config.size_multiple()) {
            return Err(Error::InvalidConfig(format!("segmenter cannot take {n} px input")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadePrediction {
    pub final_class: FinalClass,
    /// Canonical image fed to the cascade.
    pub image: Grid,
    pub stage2: Stage2Output,
    pub stage3_input: Option<MaskedInput>,
    pub stage3: Option<Stage3Output>,
    /// `empty_mask`, `flat_attribution`, `constant_input`.
    pub flags: Vec<String>,
}

impl CascadePrediction {
    /// Gating invariants a stored prediction must satisfy.
    pub fn is_consistent(&self, thresholds: &Thresholds) -> bool {
        let p3 = self.stage3.as_ref().map(|s| s.prob_covid);
        self.stage3.is_some() == self.stage2.decision
            && (self.final_class == FinalClass::Normal) == !self.stage2.decision
            && gate(self.stage2.prob_pneumonia, p3, thresholds).ok() == Some(self.final_class)
    }
}

/// Runs the cascade on a raw image of any size.
pub fn run_cascade(raw: &Grid, models: &ModelSet, thresholds: &Thresholds) -> Result<CascadePrediction> {
    thresholds.validate()?;
    let pre = preprocess_to(raw, models.input_size())?;
    let mut flags = Vec::new();
    if pre.constant_input {
        flags.push("constant_input".to_string());
    }
    let image = pre.pixels;
    let s2 = screen_stage2(&image, &models.segmenter, &models.stage2, thresholds.stage2)?;
    if s2.mask.empty_mask {
        flags.push("empty_mask".to_string());
    }
    let mut flat = s2.heatmap.flat;
    let (stage3_input, s3) = if s2.decision {
        let x = make_stage3_input(&s2.masked_image, "", &s2.heatmap)?;
        let s3 = screen_stage3(&x, &models.stage3, thresholds.stage3)?;
        flat |= s3.gradcam.flat;
        (Some(x), Some(s3))
    } else {
        (None, None)
    };
    if flat {
        flags.push("flat_attribution".to_string());
    }
    let final_class = gate(s2.prob_pneumonia, s3.as_ref().map(|s| s.prob_covid), thresholds)?;
    Ok(CascadePrediction {
        final_class,
        image,
        stage2: s2,
        stage3_input,
        stage3: s3,
        flags,
    })
}
