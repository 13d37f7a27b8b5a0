//! Checkpoint registry: exactly one active checkpoint per stage, loaded into
//! an immutable snapshot that requests share.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use cxr_core::cascade::ModelSet;
use cxr_core::checkpoint::{CheckpointBundle, MANIFEST_FILE};
use cxr_core::Stage;
use serde::Serialize;

use crate::config::RegistryEntry;
use crate::error::{Result, ServiceError};

const STAGES: [Stage; 3] = [Stage::Segmentation, Stage::Pneumonia, Stage::Covid];

pub fn validate_entries(entries: &[RegistryEntry]) -> Result<()> {
    for stage in STAGES {
        let active = entries.iter().filter(|e| e.stage == stage && e.active).count();
        if active != 1 {
            return Err(ServiceError::Registry(format!(
                "stage {stage} needs exactly one active checkpoint, found {active}"
            )));
        }
    }
    let mut seen = std::collections::HashSet::new();
    for e in entries {
        if !seen.insert((e.stage, e.version.as_str())) {
            return Err(ServiceError::Registry(format!(
                "duplicate version `{}` for stage {}",
                e.version, e.stage
            )));
        }
    }
    Ok(())
}

pub fn active_entry(entries: &[RegistryEntry], stage: Stage) -> Result<&RegistryEntry> {
    entries
        .iter()
        .find(|e| e.stage == stage && e.active)
        .ok_or_else(|| ServiceError::Registry(format!("no active checkpoint for stage {stage}")))
}

/// Fails fast when an active checkpoint directory has no manifest.
pub fn check_checkpoints_exist(entries: &[RegistryEntry]) -> Result<()> {
    for stage in STAGES {
        let e = active_entry(entries, stage)?;
        if !e.path.join(MANIFEST_FILE).is_file() {
            return Err(ServiceError::MissingCheckpoint {
                stage: stage.number(),
                version: e.version.clone(),
                path: e.path.display().to_string(),
            });
        }
    }
    Ok(())
}

/// Loaded models plus the version of each.
#[derive(Debug)]
pub struct ModelSnapshot {
    pub models: ModelSet,
    /// Keyed `stage1`, `stage2`, `stage3`.
    pub versions: BTreeMap<String, String>,
}

fn load_bundle(e: &RegistryEntry) -> Result<CheckpointBundle> {
    let b = CheckpointBundle::load(&e.path)?;
    if b.stage() != e.stage {
        return Err(ServiceError::Registry(format!(
            "{} holds a stage {} checkpoint but is registered for stage {}",
            e.path.display(),
            b.stage(),
            e.stage
        )));
    }
    Ok(b)
}

pub fn load_snapshot(entries: &[RegistryEntry]) -> Result<ModelSnapshot> {
    validate_entries(entries)?;
    let seg = active_entry(entries, Stage::Segmentation)?;
    let s2 = active_entry(entries, Stage::Pneumonia)?;
    let s3 = active_entry(entries, Stage::Covid)?;
    let models = ModelSet {
        segmenter: load_bundle(seg)?.segmenter()?,
        stage2: load_bundle(s2)?.classifier()?,
        stage3: load_bundle(s3)?.classifier()?,
    };
    models.validate()?;
    let versions = [("stage1", seg), ("stage2", s2), ("stage3", s3)]
        .into_iter()
        .map(|(k, e)| (k.to_string(), e.version.clone()))
        .collect();
    Ok(ModelSnapshot { models, versions })
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelInfo {
    pub stage: Stage,
    pub version: String,
    pub path: String,
    pub active: bool,
    pub loaded: bool,
}

/// Registry entries plus the currently installed snapshot. Installing a new
/// snapshot swaps one `Arc`; requests holding the old one finish on it.
#[derive(Debug, Default)]
pub struct ModelRegistry {
    entries: RwLock<Vec<RegistryEntry>>,
    current: RwLock<Option<Arc<ModelSnapshot>>>,
}

impl ModelRegistry {
    pub fn new(entries: Vec<RegistryEntry>) -> Result<Self> {
        validate_entries(&entries)?;
        Ok(ModelRegistry {
            entries: RwLock::new(entries),
            current: RwLock::new(None),
        })
    }

    pub fn entries(&self) -> Vec<RegistryEntry> {
        self.entries.read().expect("registry lock").clone()
    }

    pub fn snapshot(&self) -> Option<Arc<ModelSnapshot>> {
        self.current.read().expect("registry lock").clone()
    }

    pub fn is_loaded(&self) -> bool {
        self.snapshot().is_some()
    }

    pub fn install(&self, snapshot: ModelSnapshot) {
        *self.current.write().expect("registry lock") = Some(Arc::new(snapshot));
    }

    /// Loads the active checkpoints and installs them.
    pub fn load_active(&self) -> Result<()> {
        let snap = load_snapshot(&self.entries())?;
        self.install(snap);
        Ok(())
    }

    /// Makes `version` the active checkpoint of `stage` and reloads.
    pub fn activate(&self, stage: Stage, version: &str) -> Result<()> {
        let mut next = self.entries();
        if !next.iter().any(|e| e.stage == stage && e.version == version) {
            return Err(ServiceError::Registry(format!(
                "unknown version `{version}` for stage {stage}"
            )));
        }
        for e in next.iter_mut().filter(|e| e.stage == stage) {
            e.active = e.version == version;
        }
        let snap = load_snapshot(&next)?;
        *self.entries.write().expect("registry lock") = next;
        self.install(snap);
        Ok(())
    }

    pub fn describe(&self) -> Vec<ModelInfo> {
        let snap = self.snapshot();
        self.entries()
            .into_iter()
            .map(|e| {
                let key = format!("stage{}", e.stage.number());
                let loaded = snap
                    .as_ref()
                    .is_some_and(|s| e.active && s.versions.get(&key) == Some(&e.version));
                ModelInfo {
                    stage: e.stage,
                    version: e.version,
                    path: e.path.display().to_string(),
                    active: e.active,
                    loaded,
                }
            })
            .collect()
    }
}
