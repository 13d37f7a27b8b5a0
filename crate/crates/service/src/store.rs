//! Append-only screening store: one JSON line per record in
//! `records.jsonl`, artifacts under `screenings/{id}/`, and an in-memory
//! index rebuilt on open.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use chrono::{DateTime, NaiveDate, Utc};
use cxr_core::cascade::{CascadePrediction, FinalClass, Thresholds};
use cxr_core::data::image::encode_png8;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const DEFAULT_PAGE_SIZE: usize = 20;
pub const MAX_PAGE_SIZE: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapKind {
    Stage2Cam,
    Stage3Gradcam,
    Guided,
}

impl HeatmapKind {
    pub const ALL: [HeatmapKind; 3] = [HeatmapKind::Stage2Cam, HeatmapKind::Stage3Gradcam, HeatmapKind::Guided];

    pub fn as_str(self) -> &'static str {
        match self {
            HeatmapKind::Stage2Cam => "stage2_cam",
            HeatmapKind::Stage3Gradcam => "stage3_gradcam",
            HeatmapKind::Guided => "guided",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.png", self.as_str())
    }
}

impl FromStr for HeatmapKind {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        HeatmapKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or(())
    }
}

pub fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub prob: f64,
    pub decision: bool,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreeningRecord {
    pub id: u64,
    pub created_at: DateTime<Utc>,
    pub final_class: FinalClass,
    pub stage2: StageResult,
    pub stage3: Option<StageResult>,
    #[serde(default)]
    pub flags: Vec<String>,
    #[serde(default)]
    pub model_versions: BTreeMap<String, String>,
    /// Heatmaps stored for this record.
    pub heatmaps: Vec<HeatmapKind>,
    #[serde(default)]
    pub file_name: Option<String>,
}

impl ScreeningRecord {
    /// Gating invariants: stage 3 ran iff stage 2 was positive, and the final
    /// class follows the two decisions.
    pub fn is_consistent(&self) -> bool {
        let expected = match (&self.stage3, self.stage2.decision) {
            (None, false) => Some(FinalClass::Normal),
            (Some(s3), true) if s3.decision => Some(FinalClass::Covid),
            (Some(_), true) => Some(FinalClass::NonCovidPneumonia),
            _ => None,
        };
        expected == Some(self.final_class)
    }
}

/// A screening not yet assigned an id.
#[derive(Clone, Debug)]
pub struct NewScreening {
    pub created_at: DateTime<Utc>,
    pub final_class: FinalClass,
    pub stage2: StageResult,
    pub stage3: Option<StageResult>,
    pub flags: Vec<String>,
    pub model_versions: BTreeMap<String, String>,
    pub file_name: Option<String>,
    /// PNG bytes: the canonical input and each available heatmap.
    pub original_png: Vec<u8>,
    pub heatmaps: Vec<(HeatmapKind, Vec<u8>)>,
}

impl NewScreening {
    pub fn from_prediction(
        pred: &CascadePrediction,
        thresholds: &Thresholds,
        model_versions: BTreeMap<String, String>,
        file_name: Option<String>,
        created_at: DateTime<Utc>,
    ) -> Result<Self> {
        let mut heatmaps = vec![(HeatmapKind::Stage2Cam, pred.stage2.heatmap.to_png()?)];
        if let Some(s3) = &pred.stage3 {
            heatmaps.push((HeatmapKind::Stage3Gradcam, s3.gradcam.to_png()?));
            heatmaps.push((HeatmapKind::Guided, s3.guided.to_png()?));
        }
        Ok(NewScreening {
            created_at,
            final_class: pred.final_class,
            stage2: StageResult {
                prob: round6(pred.stage2.prob_pneumonia),
                decision: pred.stage2.decision,
                threshold: thresholds.stage2,
            },
            stage3: pred.stage3.as_ref().map(|s| StageResult {
                prob: round6(s.prob_covid),
                decision: s.decision,
                threshold: thresholds.stage3,
            }),
            flags: pred.flags.clone(),
            model_versions,
            file_name,
            original_png: encode_png8(&pred.image)?,
            heatmaps,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
pub struct ListQuery {
    pub class: Option<String>,
    /// Inclusive lower bound on the creation date (UTC).
    pub from: Option<String>,
    /// Inclusive upper bound on the creation date (UTC).
    pub to: Option<String>,
    pub page: Option<usize>,
    pub page_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Page<T> {
    pub items: Vec<T>,
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub pages: usize,
}

fn parse_date(field: &str, v: &str) -> Result<NaiveDate> {
    if let Ok(d) = NaiveDate::from_str(v) {
        return Ok(d);
    }
    DateTime::parse_from_rfc3339(v)
        .map(|t| t.with_timezone(&Utc).date_naive())
        .map_err(|_| ServiceError::Store(format!("`{field}` must be a date (YYYY-MM-DD), got `{v}`")))
}

struct Inner {
    records: Vec<ScreeningRecord>,
    log: File,
}

pub struct Store {
    dir: PathBuf,
    inner: Mutex<Inner>,
}

impl Store {
    /// Opens or creates a store under `dir`. A torn final line (crash during
    /// append) is dropped with a warning.
    pub fn open(dir: &Path) -> Result<Store> {
        fs::create_dir_all(dir.join("screenings"))?;
        let path = dir.join(RECORDS_FILE);
        let mut records = Vec::new();
        if path.exists() {
            let lines: Vec<String> = BufReader::new(File::open(&path)?)
                .lines()
                .collect::<std::io::Result<_>>()?;
            let n = lines.len();
            for (i, line) in lines.into_iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<ScreeningRecord>(&line) {
                    Ok(r) => records.push(r),
                    Err(e) if i + 1 == n => log::warn!("dropping torn last record: {e}"),
                    Err(e) => return Err(ServiceError::Store(format!("line {}: {e}", i + 1))),
                }
            }
        }
        records.sort_by_key(|r| r.id);
        let log = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Store {
            dir: dir.to_path_buf(),
            inner: Mutex::new(Inner { records, log }),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn record_dir(&self, id: u64) -> PathBuf {
        self.dir.join("screenings").join(id.to_string())
    }

    /// Assigns the next id, writes artifacts, then appends the record.
    pub fn insert(&self, new: NewScreening) -> Result<ScreeningRecord> {
        let mut inner = self.inner.lock().expect("store lock");
        let id = inner.records.last().map_or(1, |r| r.id + 1);
        let rdir = self.record_dir(id);
        fs::create_dir_all(&rdir)?;
        fs::write(rdir.join("original.png"), &new.original_png)?;
        for (kind, png) in &new.heatmaps {
            fs::write(rdir.join(kind.file_name()), png)?;
        }
        let record = ScreeningRecord {
            id,
            created_at: new.created_at,
            final_class: new.final_class,
            stage2: new.stage2,
            stage3: new.stage3,
            flags: new.flags,
            model_versions: new.model_versions,
            heatmaps: new.heatmaps.iter().map(|(k, _)| *k).collect(),
            file_name: new.file_name,
        };
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        inner.log.write_all(line.as_bytes())?;
        inner.log.flush()?;
        inner.records.push(record.clone());
        Ok(record)
    }

    pub fn get(&self, id: u64) -> Option<ScreeningRecord> {
        let inner = self.inner.lock().expect("store lock");
        inner
            .records
            .binary_search_by_key(&id, |r| r.id)
            .ok()
            .map(|i| inner.records[i].clone())
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("store lock").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn heatmap_path(&self, id: u64, kind: HeatmapKind) -> Option<PathBuf> {
        let r = self.get(id)?;
        r.heatmaps
            .contains(&kind)
            .then(|| self.record_dir(id).join(kind.file_name()))
    }

    pub fn original_path(&self, id: u64) -> Option<PathBuf> {
        self.get(id).map(|_| self.record_dir(id).join("original.png"))
    }

    /// Newest first, filtered, paginated (pages start at 1).
    pub fn list(&self, q: &ListQuery) -> Result<Page<ScreeningRecord>> {
        let class = match q.class.as_deref().filter(|s| !s.is_empty()) {
            Some(c) => Some(FinalClass::from_str(c).map_err(|_| ServiceError::Store(format!("unknown class `{c}`")))?),
            None => None,
        };
        let from = q
            .from
            .as_deref()
            .filter(|s| !s.is_empty())
            .map(|v| parse_date("from", v))
            .transpose()?;
        let to =
            q.to.as_deref()
                .filter(|s| !s.is_empty())
                .map(|v| parse_date("to", v))
                .transpose()?;
        let page_size = q.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
        if page_size == 0 || page_size > MAX_PAGE_SIZE {
            return Err(ServiceError::Store(format!("page_size must be in 1..={MAX_PAGE_SIZE}")));
        }
        let page = q.page.unwrap_or(1);
        if page == 0 {
            return Err(ServiceError::Store("page starts at 1".into()));
        }
        let inner = self.inner.lock().expect("store lock");
        let matching: Vec<&ScreeningRecord> = inner
            .records
            .iter()
            .rev()
            .filter(|r| class.is_none_or(|c| r.final_class == c))
            .filter(|r| from.is_none_or(|d| r.created_at.date_naive() >= d))
            .filter(|r| to.is_none_or(|d| r.created_at.date_naive() <= d))
            .collect();
        let total = matching.len();
        let items = matching
            .into_iter()
            .skip((page - 1) * page_size)
            .take(page_size)
            .cloned()
            .collect();
        Ok(Page {
            items,
            page,
            page_size,
            total,
            pages: total.div_ceil(page_size),
        })
    }

    /// Ids of stored records that break the gating invariants.
    pub fn audit(&self) -> Vec<u64> {
        let inner = self.inner.lock().expect("store lock");
        inner
            .records
            .iter()
            .filter(|r| !r.is_consistent())
            .map(|r| r.id)
            .collect()
    }
}
