//! Checkpoint bundles: a directory holding `params.bin`, an optional
//! `teacher.bin` and `manifest.json`.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{BackboneConfig, StageModel};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::segmenter::{SegmenterConfig, SegmenterModel};
use crate::trainer::{EpochRecord, TrainConfig};
use crate::Stage;

const MAGIC: &[u8; 8] = b"CXRPRM01";
pub const PARAMS_FILE: &str = "params.bin";
pub const TEACHER_FILE: &str = "teacher.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Segmenter(SegmenterConfig),
    Classifier(BackboneConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub stage: Stage,
    pub model: ModelConfig,
    pub seed: u64,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub history: Vec<EpochRecord>,
    /// Stage 2 only: whether the model was trained on lung-masked images.
    #[serde(default = "yes")]
    pub lung_mask: bool,
    pub params_file: String,
    #[serde(default)]
    pub teacher_file: Option<String>,
    pub params_sha256: String,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointBundle {
    pub manifest: CheckpointManifest,
    pub params: ParamSet,
    /// Frozen snapshot of the teacher used for distillation.
    pub teacher: Option<ParamSet>,
}

impl CheckpointBundle {
    pub fn for_segmenter(model: &SegmenterModel, history: Vec<EpochRecord>, seed: u64) -> Self {
        CheckpointBundle {
            manifest: CheckpointManifest {
                stage: Stage::Segmentation,
                model: ModelConfig::Segmenter(model.config.clone()),
                seed,
                train: None,
                history,
                lung_mask: true,
                params_file: PARAMS_FILE.into(),
                teacher_file: None,
                params_sha256: model.params.checksum(),
            },
            params: model.params.clone(),
            teacher: None,
        }
    }

    pub fn for_classifier(
        model: &StageModel,
        train: &TrainConfig,
        history: Vec<EpochRecord>,
        teacher: Option<&StageModel>,
    ) -> Self {
        CheckpointBundle {
            manifest: CheckpointManifest {
                stage: train.stage,
                model: ModelConfig::Classifier(model.config.clone()),
                seed: train.seed,
                train: Some(train.clone()),
                history,
                lung_mask: true,
                params_file: PARAMS_FILE.into(),
                teacher_file: teacher.map(|_| TEACHER_FILE.into()),
                params_sha256: model.params.checksum(),
            },
            params: model.params.clone(),
            teacher: teacher.map(|t| t.params.clone()),
        }
    }

    pub fn stage(&self) -> Stage {
        self.manifest.stage
    }

    pub fn segmenter(&self) -> Result<SegmenterModel> {
        match &self.manifest.model {
            ModelConfig::Segmenter(c) => SegmenterModel::from_params(c.clone(), &self.params),
            ModelConfig::Classifier(_) => Err(Error::Checkpoint(format!(
                "stage {} checkpoint holds a classifier, not a segmenter",
                self.stage()
            ))),
        }
    }

    pub fn classifier(&self) -> Result<StageModel> {
        match &self.manifest.model {
            ModelConfig::Classifier(c) => StageModel::from_params(c.clone(), &self.params),
            ModelConfig::Segmenter(_) => Err(Error::Checkpoint(format!(
                "stage {} checkpoint holds a segmenter, not a classifier",
                self.stage()
            ))),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_params(&dir.join(&self.manifest.params_file), &self.params)?;
        if let (Some(t), Some(name)) = (&self.teacher, &self.manifest.teacher_file) {
            write_params(&dir.join(name), t)?;
        }
        let mut manifest = self.manifest.clone();
        manifest.params_sha256 = self.params.checksum();
        let f = BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
        serde_json::to_writer_pretty(f, &manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let f = fs::File::open(&manifest_path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", manifest_path.display())))?;
        let manifest: CheckpointManifest = serde_json::from_reader(BufReader::new(f))?;
        let params = read_params(&dir.join(&manifest.params_file))?;
        if params.checksum() != manifest.params_sha256 {
            return Err(Error::Checkpoint(format!(
                "parameter checksum mismatch in {}",
                dir.display()
            )));
        }
        let teacher = match &manifest.teacher_file {
            Some(name) => Some(read_params(&dir.join(name))?),
            None => None,
        };
        Ok(CheckpointBundle {
            manifest,
            params,
            teacher,
        })
    }
}

pub fn write_params(path: &Path, params: &ParamSet) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params.params() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.shape.len() as u64).to_le_bytes())?;
        for &d in &p.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&(p.values.len() as u64).to_le_bytes())?;
        for v in &p.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<ParamSet> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let mut r = ByteReader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    let count = r.u64()?;
    let mut set = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u64()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.corrupt("bad name"))?;
        let dims = r.u64()? as usize;
        let shape = (0..dims)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = r.u64()? as usize;
        if shape.iter().product::<usize>() != n {
            return Err(r.corrupt("shape does not match value count"));
        }
        let raw = r.take(n.checked_mul(8).ok_or_else(|| r.corrupt("length overflow"))?)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        set.push(name, shape, values);
    }
    if r.pos != bytes.len() {
        return Err(r.corrupt("trailing bytes"));
    }
    Ok(set)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.corrupt("truncated")),
        }
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn corrupt(&self, what: &str) -> Error {
        Error::Checkpoint(format!("{}: {what}", self.path.display()))
    }
}
