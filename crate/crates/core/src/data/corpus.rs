use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::image::{preprocess_to, read_image, CxrImage};
use crate::error::{Error, Result};
use crate::segmenter::LungMask;
use crate::CANONICAL_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Label {
    Normal = 0,
    Covid = 1,
    NonCovidPneumonia = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Normal, Label::Covid, Label::NonCovidPneumonia];

    pub fn code(self) -> u8 {
        self as u8
    }

    /// Manifest spelling.
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Covid => "covid",
            Label::NonCovidPneumonia => "pneumonia",
        }
    }

    /// Partition a sample of this label falls into when none is given.
    pub fn default_partition(self) -> Partition {
        match self {
            Label::Covid => Partition::CovidAdded,
            _ => Partition::Original,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" => Ok(Label::Normal),
            "covid" => Ok(Label::Covid),
            "pneumonia" => Ok(Label::NonCovidPneumonia),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

/// `Original` is the large pre-training collection, `CovidAdded` the data
/// introduced later for incremental training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Original,
    CovidAdded,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Original => "original",
            Partition::CovidAdded => "covid_added",
        }
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "original" => Ok(Partition::Original),
            "covid_added" => Ok(Partition::CovidAdded),
            other => Err(Error::InvalidInput(format!("unknown partition `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image: CxrImage,
    pub label: Label,
    pub partition: Partition,
    /// Ground-truth lung mask, when known.
    pub mask: Option<LungMask>,
    pub case_id: Option<String>,
    pub symptom_onset_date: Option<NaiveDate>,
    pub rtpcr_confirm_date: Option<NaiveDate>,
}

impl LabeledSample {
    pub fn new(image: CxrImage, label: Label, partition: Partition) -> Result<Self> {
        check_partition(label, partition)?;
        Ok(LabeledSample {
            image,
            label,
            partition,
            mask: None,
            case_id: None,
            symptom_onset_date: None,
            rtpcr_confirm_date: None,
        })
    }

    pub fn source_id(&self) -> &str {
        &self.image.source_id
    }
}

fn check_partition(label: Label, partition: Partition) -> Result<()> {
    if label == Label::Covid && partition != Partition::CovidAdded {
        return Err(Error::InvalidInput(
            "COVID samples must belong to the covid_added partition".into(),
        ));
    }
    Ok(())
}

/// All samples, each in exactly one partition.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingCorpus {
    pub samples: Vec<LabeledSample>,
}

impl TrainingCorpus {
    pub fn new(samples: Vec<LabeledSample>) -> Self {
        TrainingCorpus { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count_partition(&self, partition: Partition) -> usize {
        self.samples.iter().filter(|s| s.partition == partition).count()
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    /// Samples at the given indices, in index order.
    pub fn select(&self, ids: &[usize]) -> Vec<&LabeledSample> {
        ids.iter().map(|&i| &self.samples[i]).collect()
    }

    /// Indices grouped by label, in ascending index order.
    pub fn indices_by_label(&self, label: Label) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].label == label)
            .collect()
    }
}

pub const MANIFEST_COLUMNS: [&str; 7] = [
    "source_id",
    "path",
    "label",
    "partition",
    "capture_date",
    "symptom_onset_date",
    "rtpcr_confirm_date",
];

/// One row of the CSV manifest. `mask_path` and `case_id` are optional
/// trailing columns.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub source_id: String,
    pub path: String,
    pub label: String,
    #[serde(default)]
    pub partition: String,
    #[serde(default)]
    pub capture_date: String,
    #[serde(default)]
    pub symptom_onset_date: String,
    #[serde(default)]
    pub rtpcr_confirm_date: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestIssue {
    /// Line number in the CSV file (the header is line 1).
    pub row: usize,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct ManifestLoad {
    pub corpus: TrainingCorpus,
    /// Rows skipped because their image could not be read.
    pub issues: Vec<ManifestIssue>,
}

fn parse_date(field: &str, row: usize, column: &str) -> Result<Option<NaiveDate>> {
    let f = field.trim();
    if f.is_empty() {
        return Ok(None);
    }
    NaiveDate::parse_from_str(f, "%Y-%m-%d")
        .map(Some)
        .map_err(|e| Error::Manifest {
            row,
            message: format!("{column} `{f}`: {e}"),
        })
}

pub fn read_manifest_rows(path: &Path) -> Result<Vec<(usize, ManifestRow)>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let found: Vec<&str> = headers.iter().collect();
    if found.len() < MANIFEST_COLUMNS.len() || found[..MANIFEST_COLUMNS.len()] != MANIFEST_COLUMNS {
        return Err(Error::Manifest {
            row: 1,
            message: format!("expected header `{}`", MANIFEST_COLUMNS.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in reader.deserialize::<ManifestRow>() {
        let rec = rec?;
        rows.push((rows.len() + 2, rec));
    }
    Ok(rows)
}

/// Loads a manifest at the canonical resolution.
pub fn load_manifest(path: &Path) -> Result<ManifestLoad> {
    load_manifest_at(path, CANONICAL_SIZE)
}

/// Loads a manifest, preprocessing every image to `size x size`.
///
/// Unknown labels, malformed dates and duplicate source ids abort the load.
/// Missing or undecodable images are skipped and reported with their row.
pub fn load_manifest_at(path: &Path, size: usize) -> Result<ManifestLoad> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    let mut issues = Vec::new();
    for (row, rec) in read_manifest_rows(path)? {
        let label: Label = rec.label.parse().map_err(|e: Error| Error::Manifest {
            row,
            message: e.to_string(),
        })?;
        let partition = if rec.partition.trim().is_empty() {
            label.default_partition()
        } else {
            rec.partition.parse().map_err(|e: Error| Error::Manifest {
                row,
                message: e.to_string(),
            })?
        };
        check_partition(label, partition).map_err(|e| Error::Manifest {
            row,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.source_id.clone()) {
            return Err(Error::Manifest {
                row,
                message: format!("duplicate source_id `{}`", rec.source_id),
            });
        }
        let capture_date = parse_date(&rec.capture_date, row, "capture_date")?;
        let symptom_onset_date = parse_date(&rec.symptom_onset_date, row, "symptom_onset_date")?;
        let rtpcr_confirm_date = parse_date(&rec.rtpcr_confirm_date, row, "rtpcr_confirm_date")?;

        let image_path = resolve(&base, &rec.path);
        let raw = match read_image(&image_path) {
            Ok(g) => g,
            Err(e) => {
                issues.push(ManifestIssue {
                    row,
                    message: format!("{}: {e}", image_path.display()),
                });
                continue;
            }
        };
        let pixels = preprocess_to(&raw, size)?.pixels;
        let mask = match rec.mask_path.as_deref().map(str::trim).filter(|p| !p.is_empty()) {
            None => None,
            Some(p) => {
                let mpath = resolve(&base, p);
                match read_image(&mpath) {
                    Ok(m) => Some(LungMask::from_soft(&m.pad_to_square().resize_nearest(size, size))),
                    Err(e) => {
                        issues.push(ManifestIssue {
                            row,
                            message: format!("{}: {e}", mpath.display()),
                        });
                        continue;
                    }
                }
            }
        };
        samples.push(LabeledSample {
            image: CxrImage {
                pixels,
                source_id: rec.source_id,
                capture_date,
            },
            label,
            partition,
            mask,
            case_id: rec.case_id.filter(|c| !c.trim().is_empty()),
            symptom_onset_date,
            rtpcr_confirm_date,
        });
    }
    for issue in &issues {
        log::warn!("manifest row {}: {}", issue.row, issue.message);
    }
    Ok(ManifestLoad {
        corpus: TrainingCorpus::new(samples),
        issues,
    })
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let with_mask = rows.iter().any(|r| r.mask_path.is_some());
    let with_case = rows.iter().any(|r| r.case_id.is_some());
    let mut header: Vec<&str> = MANIFEST_COLUMNS.to_vec();
    if with_mask {
        header.push("mask_path");
    }
    if with_case {
        header.push("case_id");
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.source_id.clone(),
            r.path.clone(),
            r.label.clone(),
            r.partition.clone(),
            r.capture_date.clone(),
            r.symptom_onset_date.clone(),
            r.rtpcr_confirm_date.clone(),
        ];
        if with_mask {
            rec.push(r.mask_path.clone().unwrap_or_default());
        }
        if with_case {
            rec.push(r.case_id.clone().unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
