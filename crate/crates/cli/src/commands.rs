use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use chrono::Utc;
use cxr_core::cascade::{run_cascade, FinalClass, ModelSet, Thresholds};
use cxr_core::checkpoint::CheckpointBundle;
use cxr_core::classifier::StageModel;
use cxr_core::data::corpus::{load_manifest_at, read_manifest_rows, Label, LabeledSample, Partition, TrainingCorpus};
use cxr_core::data::image::read_image;
use cxr_core::data::synth::{generate_synthetic_corpus_with, write_corpus};
use cxr_core::evaluator::{
    cohort_lead_report, evaluate, write_ablation_csv, write_report_csv, youden_threshold, AblationRow, Capture,
    CaseTimeline, ReportRow,
};
use cxr_core::par::{self, Execution};
use cxr_core::pilot::{pilot_split, PilotConfig};
use cxr_core::segmenter::{train_segmenter_with, SegmenterModel};
use cxr_core::stage2::{relabel_binary, stage2_scores, train_stage2_with};
use cxr_core::stage3::{stage3_scores, train_stage3_with};
use cxr_core::trainer::TrainConfig;
use cxr_core::Stage;
use cxr_service::store::{NewScreening, Store};
use cxr_service::{RegistryEntry, ScreeningResponse, ServiceConfig};
use serde_json::json;

use crate::error::{CliError, Result};
use crate::run_manifest::{hash_inputs, RunManifest};
use crate::{Command, Common, Preset, SplitName, ThresholdArgs};

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData {
            common,
            normal,
            covid,
            pneumonia,
            size,
        } => synth_data(&common, normal, covid, pneumonia, size),
        Command::Train {
            common,
            stage,
            data,
            models,
            teacher,
            lambda,
            temperature,
            epochs,
            batch_size,
            original_only,
            no_mask,
        } => {
            let opts = TrainOpts {
                models: models.unwrap_or_else(|| common.out.clone()),
                teacher,
                lambda,
                temperature,
                epochs,
                batch_size,
                original_only,
                no_mask,
            };
            train(&common, stage, &data, &opts)
        }
        Command::Eval {
            common,
            split,
            data,
            models,
            ablate_mask,
            thresholds,
        } => {
            let models = models.unwrap_or_else(|| common.out.clone());
            eval(&common, split, &data, &models, ablate_mask, &thresholds)
        }
        Command::Infer {
            common,
            image,
            models,
            thresholds,
        } => {
            let models = models.unwrap_or_else(|| common.out.clone());
            infer(&common, &image, &models, &thresholds)
        }
        Command::LeadReport {
            common,
            manifest,
            models,
            thresholds,
        } => {
            let models = models.unwrap_or_else(|| common.out.clone());
            lead_report(&common, &manifest, &models, &thresholds)
        }
        Command::Serve {
            out,
            config,
            models,
            bind,
            port,
            thresholds,
        } => serve(out, config, models, bind, port, &thresholds),
    }
}

fn pilot_config(common: &Common) -> PilotConfig {
    let mut p = match common.preset {
        Preset::Reference => PilotConfig::reference(),
        Preset::Miniature => PilotConfig::miniature(),
    };
    if let Some(seed) = common.seed {
        p.synthetic.seed = seed;
        p.split_seed = seed;
        p.segmenter.seed = seed;
        p.backbone.seed = seed;
        for t in [
            &mut p.segmenter_train,
            &mut p.stage2_pretrain,
            &mut p.stage2_incremental,
            &mut p.stage3_train,
        ] {
            t.seed = seed;
        }
    }
    p
}

fn execution(common: &Common) -> Execution {
    if common.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

/// Config file, then `CASCADE_*` environment, then flags.
fn service_config(path: Option<&Path>, flags: &ThresholdArgs) -> Result<ServiceConfig> {
    let mut cfg = match path {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(t) = flags.stage2_threshold {
        cfg.thresholds.stage2 = t;
    }
    if let Some(t) = flags.stage3_threshold {
        cfg.thresholds.stage3 = t;
    }
    cfg.thresholds.validate()?;
    Ok(cfg)
}

fn thresholds(common: &Common, flags: &ThresholdArgs) -> Result<Thresholds> {
    Ok(service_config(common.config.as_deref(), flags)?.thresholds)
}

fn stage_dir(models: &Path, name: &str) -> PathBuf {
    models.join(name)
}

fn load_bundle(dir: &Path, stage: Stage) -> Result<CheckpointBundle> {
    if !dir.join(cxr_core::checkpoint::MANIFEST_FILE).is_file() {
        return Err(CliError::user(format!("no checkpoint at {}", dir.display())));
    }
    let b = CheckpointBundle::load(dir)?;
    if b.stage() != stage {
        return Err(CliError::user(format!(
            "{} holds a stage {} checkpoint, expected stage {stage}",
            dir.display(),
            b.stage()
        )));
    }
    Ok(b)
}

fn load_segmenter(models: &Path) -> Result<SegmenterModel> {
    Ok(load_bundle(&stage_dir(models, "stage1"), Stage::Segmentation)?.segmenter()?)
}

fn load_classifier(dir: &Path, stage: Stage) -> Result<StageModel> {
    Ok(load_bundle(dir, stage)?.classifier()?)
}

fn load_models(models: &Path) -> Result<(ModelSet, BTreeMap<String, String>)> {
    let mut versions = BTreeMap::new();
    for n in 1..=3 {
        let b = load_bundle(&stage_dir(models, &format!("stage{n}")), Stage::try_from(n)?)?;
        versions.insert(format!("stage{n}"), b.manifest.params_sha256[..12].to_string());
    }
    let set = ModelSet {
        segmenter: load_segmenter(models)?,
        stage2: load_classifier(&stage_dir(models, "stage2"), Stage::Pneumonia)?,
        stage3: load_classifier(&stage_dir(models, "stage3"), Stage::Covid)?,
    };
    set.validate()?;
    Ok((set, versions))
}

/// The manifest plus every image and mask it references.
fn corpus_files(manifest: &Path) -> Result<Vec<PathBuf>> {
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut files = vec![manifest.to_path_buf()];
    for (_, row) in read_manifest_rows(manifest)? {
        for p in std::iter::once(row.path.as_str()).chain(row.mask_path.as_deref()) {
            let p = base.join(p);
            if p.is_file() {
                files.push(p);
            }
        }
    }
    Ok(files)
}

fn load_corpus(manifest: &Path, size: usize) -> Result<TrainingCorpus> {
    let load = load_manifest_at(manifest, size)?;
    if load.corpus.is_empty() {
        return Err(CliError::user(format!(
            "{} has no readable samples",
            manifest.display()
        )));
    }
    Ok(load.corpus)
}

fn record_run(
    out: &Path,
    name: &str,
    command: &str,
    config: serde_json::Value,
    seed: u64,
    inputs: &[PathBuf],
    outputs: Vec<String>,
) -> Result<()> {
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    RunManifest {
        command: command.to_string(),
        config,
        seed,
        input_hash: hash_inputs(&refs)?,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs,
        created_at: Utc::now(),
    }
    .write(out, name)?;
    Ok(())
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn synth_data(
    common: &Common,
    normal: Option<usize>,
    covid: Option<usize>,
    pneumonia: Option<usize>,
    size: Option<usize>,
) -> Result<()> {
    let mut spec = pilot_config(common).synthetic;
    spec.counts.normal = normal.unwrap_or(spec.counts.normal);
    spec.counts.covid = covid.unwrap_or(spec.counts.covid);
    spec.counts.pneumonia = pneumonia.unwrap_or(spec.counts.pneumonia);
    spec.image_size = size.unwrap_or(spec.image_size);
    let corpus = generate_synthetic_corpus_with(&spec, execution(common))?;
    write_corpus(&corpus, &common.out)?;
    record_run(
        &common.out,
        "synth-data",
        "synth-data",
        serde_json::to_value(&spec)?,
        spec.seed,
        &[],
        vec!["manifest.csv".into(), "images/".into(), "masks/".into()],
    )?;
    print_json(&json!({
        "samples": corpus.len(),
        "normal": corpus.count_label(Label::Normal),
        "covid": corpus.count_label(Label::Covid),
        "pneumonia": corpus.count_label(Label::NonCovidPneumonia),
        "manifest": common.out.join("manifest.csv"),
    }))
}

struct TrainOpts {
    models: PathBuf,
    teacher: Option<PathBuf>,
    lambda: Option<f64>,
    temperature: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    original_only: bool,
    no_mask: bool,
}

impl TrainOpts {
    fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.epochs = self.epochs.unwrap_or(c.epochs);
        c.batch_size = self.batch_size.unwrap_or(c.batch_size);
        c.lambda = self.lambda.unwrap_or(if self.teacher.is_some() { 1.0 } else { 0.0 });
        c.temperature = self.temperature.unwrap_or(c.temperature);
        c
    }
}

fn train(common: &Common, stage: u8, data: &Path, opts: &TrainOpts) -> Result<()> {
    let stage = Stage::try_from(stage)?;
    let pilot = pilot_config(common);
    let exec = execution(common);
    if stage != Stage::Pneumonia && (opts.original_only || opts.no_mask) {
        return Err(CliError::user("--original-only and --no-mask only apply to stage 2"));
    }
    if stage == Stage::Segmentation && opts.teacher.is_some() {
        return Err(CliError::user("stage 1 takes no teacher"));
    }
    let corpus = load_corpus(data, pilot.backbone.input_size)?;
    let split = pilot_split(&corpus, pilot.split_seed)?;
    let mut train = corpus.select(&split.train);
    let mut val = corpus.select(&split.val);
    let mut inputs = corpus_files(data)?;

    let (name, bundle, config) = match stage {
        Stage::Segmentation => {
            let tc = opts.apply(&pilot.segmenter_train);
            let out = train_segmenter_with(&train, &val, &pilot.segmenter, &tc, exec)?;
            let bundle = CheckpointBundle::for_segmenter(&out.model, out.history, tc.seed);
            let cfg = json!({"segmenter": pilot.segmenter, "train": tc});
            ("stage1".to_string(), bundle, cfg)
        }
        Stage::Pneumonia => {
            let segmenter = if opts.no_mask {
                None
            } else {
                inputs.push(stage_dir(&opts.models, "stage1"));
                Some(load_segmenter(&opts.models)?)
            };
            let teacher = match &opts.teacher {
                Some(p) => {
                    inputs.push(p.clone());
                    Some(load_classifier(p, Stage::Pneumonia)?)
                }
                None => None,
            };
            if opts.original_only {
                let original = |s: &&LabeledSample| s.partition == Partition::Original;
                train.retain(original);
                val.retain(original);
            }
            let base = if teacher.is_some() {
                &pilot.stage2_incremental
            } else {
                &pilot.stage2_pretrain
            };
            let tc = opts.apply(base);
            let out = train_stage2_with(
                &train,
                &val,
                segmenter.as_ref(),
                &pilot.backbone,
                &tc,
                teacher.as_ref(),
                exec,
            )?;
            let name = if opts.no_mask {
                "stage2-nomask"
            } else if opts.original_only {
                "stage2-teacher"
            } else {
                "stage2"
            };
            let cfg = json!({"backbone": pilot.backbone, "train": tc, "lung_mask": !opts.no_mask});
            (name.to_string(), out.bundle, cfg)
        }
        Stage::Covid => {
            inputs.push(stage_dir(&opts.models, "stage1"));
            inputs.push(stage_dir(&opts.models, "stage2"));
            let segmenter = load_segmenter(&opts.models)?;
            let stage2 = load_classifier(&stage_dir(&opts.models, "stage2"), Stage::Pneumonia)?;
            let teacher = match &opts.teacher {
                Some(p) => {
                    inputs.push(p.clone());
                    Some(load_classifier(p, Stage::Covid)?)
                }
                None => None,
            };
            let pneumonia = |s: &&LabeledSample| s.label != Label::Normal;
            train.retain(pneumonia);
            val.retain(pneumonia);
            let tc = opts.apply(&pilot.stage3_train);
            let out = train_stage3_with(
                &train,
                &val,
                &segmenter,
                &stage2,
                &pilot.backbone,
                &tc,
                teacher.as_ref(),
                exec,
            )?;
            let cfg = json!({"backbone": pilot.backbone, "train": tc});
            ("stage3".to_string(), out.bundle, cfg)
        }
    };
    let dir = common.out.join(&name);
    bundle.save(&dir)?;
    record_run(
        &common.out,
        &format!("train-{name}"),
        "train",
        config,
        pilot.split_seed,
        &inputs,
        vec![format!("{name}/")],
    )?;
    print_json(&json!({
        "stage": stage,
        "checkpoint": dir,
        "train_samples": train.len(),
        "last_epoch": bundle.manifest.history.last(),
    }))
}

/// Teacher on the original partition, then a distilled student on
/// everything; the same recipe as the masked model, for the ablation arm.
fn train_unmasked_stage2(
    train: &[&LabeledSample],
    val: &[&LabeledSample],
    pilot: &PilotConfig,
    exec: Execution,
) -> Result<CheckpointBundle> {
    let original = |s: &&&LabeledSample| s.partition == Partition::Original;
    let train_o: Vec<&LabeledSample> = train.iter().filter(original).copied().collect();
    let val_o: Vec<&LabeledSample> = val.iter().filter(original).copied().collect();
    let teacher = train_stage2_with(
        &train_o,
        &val_o,
        None,
        &pilot.backbone,
        &pilot.stage2_pretrain,
        None,
        exec,
    )?;
    let student = train_stage2_with(
        train,
        val,
        None,
        &pilot.backbone,
        &pilot.stage2_incremental,
        Some(&teacher.model),
        exec,
    )?;
    Ok(student.bundle)
}

fn pneumonia_only<'a>(v: &[&'a LabeledSample]) -> Vec<&'a LabeledSample> {
    v.iter().copied().filter(|s| s.label != Label::Normal).collect()
}

fn binary_labels(samples: &[&LabeledSample]) -> Vec<bool> {
    samples.iter().map(|s| relabel_binary(s.label) == 1).collect()
}

fn eval(
    common: &Common,
    split_name: SplitName,
    data: &Path,
    models_dir: &Path,
    ablate_mask: bool,
    flags: &ThresholdArgs,
) -> Result<()> {
    let pilot = pilot_config(common);
    let exec = execution(common);
    let thresholds = thresholds(common, flags)?;
    let (models, _) = load_models(models_dir)?;
    let corpus = load_corpus(data, models.input_size())?;
    let split = pilot_split(&corpus, pilot.split_seed)?;
    let part = |name: SplitName| match name {
        SplitName::Val => corpus.select(&split.val),
        SplitName::Test => corpus.select(&split.test),
    };
    let val = part(SplitName::Val);
    let target = part(split_name);

    let s2_val = stage2_scores(&val, Some(&models.segmenter), &models.stage2, exec)?;
    let s2 = stage2_scores(&target, Some(&models.segmenter), &models.stage2, exec)?;
    let y2 = binary_labels(&target);
    let t2 = youden_threshold(&s2_val, &binary_labels(&val))?;

    let val_p = pneumonia_only(&val);
    let target_p = pneumonia_only(&target);
    let s3_val = stage3_scores(&val_p, &models.segmenter, &models.stage2, &models.stage3, exec)?;
    let s3 = stage3_scores(&target_p, &models.segmenter, &models.stage2, &models.stage3, exec)?;
    let covid = |v: &[&LabeledSample]| -> Vec<bool> { v.iter().map(|s| s.label == Label::Covid).collect() };
    let y3 = covid(&target_p);
    let t3 = youden_threshold(&s3_val, &covid(&val_p))?;

    let row = |model: &str, rule: &str, scores: &[f64], labels: &[bool], t: f64| -> Result<ReportRow> {
        Ok(ReportRow {
            split: split_name.as_str().to_string(),
            model: model.to_string(),
            rule: rule.to_string(),
            report: evaluate(scores, labels, t)?,
        })
    };
    let rows = vec![
        row("stage2", "fixed", &s2, &y2, thresholds.stage2)?,
        row("stage2", "youden", &s2, &y2, t2)?,
        row("stage3", "fixed", &s3, &y3, thresholds.stage3)?,
        row("stage3", "youden", &s3, &y3, t3)?,
    ];
    std::fs::create_dir_all(&common.out)?;
    let report_name = format!("eval-{}.csv", split_name.as_str());
    write_report_csv(&rows, BufWriter::new(File::create(common.out.join(&report_name))?))?;
    let mut outputs = vec![report_name];
    let mut inputs = corpus_files(data)?;
    inputs.extend((1..=3).map(|n| stage_dir(models_dir, &format!("stage{n}"))));

    let mut ablation = Vec::new();
    if ablate_mask {
        let nomask_dir = stage_dir(models_dir, "stage2-nomask");
        let unmasked = if nomask_dir.join(cxr_core::checkpoint::MANIFEST_FILE).is_file() {
            inputs.push(nomask_dir.clone());
            load_classifier(&nomask_dir, Stage::Pneumonia)?
        } else {
            log::info!("no unmasked stage-2 checkpoint; training one");
            let bundle = train_unmasked_stage2(&corpus.select(&split.train), &val, &pilot, exec)?;
            bundle.save(&common.out.join("stage2-nomask"))?;
            outputs.push("stage2-nomask/".into());
            bundle.classifier()?
        };
        for name in [SplitName::Val, SplitName::Test] {
            let samples = part(name);
            let labels = binary_labels(&samples);
            for (lung_mask, seg, model) in [
                (true, Some(&models.segmenter), &models.stage2),
                (false, None, &unmasked),
            ] {
                let scores = stage2_scores(&samples, seg, model, exec)?;
                ablation.push(AblationRow {
                    split: name.as_str().to_string(),
                    lung_mask,
                    report: evaluate(&scores, &labels, thresholds.stage2)?,
                });
            }
        }
        write_ablation_csv(
            &ablation,
            BufWriter::new(File::create(common.out.join("ablation.csv"))?),
        )?;
        outputs.push("ablation.csv".into());
    }
    record_run(
        &common.out,
        &format!("eval-{}", split_name.as_str()),
        "eval",
        json!({"split": split_name.as_str(), "ablate_mask": ablate_mask, "thresholds": thresholds}),
        pilot.split_seed,
        &inputs,
        outputs,
    )?;
    print_json(&json!({"report": rows, "ablation": ablation}))
}

fn infer(common: &Common, image: &Path, models_dir: &Path, flags: &ThresholdArgs) -> Result<()> {
    let thresholds = thresholds(common, flags)?;
    let (models, versions) = load_models(models_dir)?;
    let raw = read_image(image).map_err(|e| CliError::user(format!("{}: {e}", image.display())))?;
    let pred = run_cascade(&raw, &models, &thresholds)?;
    let file_name = image.file_name().map(|n| n.to_string_lossy().into_owned());
    let store = Store::open(&common.out)?;
    let record = store.insert(NewScreening::from_prediction(
        &pred,
        &thresholds,
        versions,
        file_name,
        Utc::now(),
    )?)?;
    let response = ScreeningResponse::from_record(&record, |kind| {
        let path = match kind {
            Some(k) => store.heatmap_path(record.id, k),
            None => store.original_path(record.id),
        };
        path.map(|p| p.display().to_string()).unwrap_or_default()
    });
    let mut inputs = vec![image.to_path_buf()];
    inputs.extend((1..=3).map(|n| stage_dir(models_dir, &format!("stage{n}"))));
    record_run(
        &common.out,
        &format!("infer-{}", record.id),
        "infer",
        json!({"thresholds": thresholds}),
        0,
        &inputs,
        vec![
            format!("screenings/{}/", record.id),
            cxr_service::store::RECORDS_FILE.into(),
        ],
    )?;
    print_json(&response)
}

/// Symptom onset, RT-PCR confirmation and the captures of one case.
type CaseDates = (Option<chrono::NaiveDate>, Option<chrono::NaiveDate>, Vec<Capture>);

fn lead_report(common: &Common, manifest: &Path, models_dir: &Path, flags: &ThresholdArgs) -> Result<()> {
    let thresholds = thresholds(common, flags)?;
    let (models, _) = load_models(models_dir)?;
    let corpus = load_corpus(manifest, models.input_size())?;
    let dated: Vec<&LabeledSample> = corpus
        .samples
        .iter()
        .filter(|s| s.case_id.is_some() && s.image.capture_date.is_some())
        .collect();
    let calls = par::map_slice(execution(common), &dated, |s| {
        run_cascade(&s.image.pixels, &models, &thresholds).map(|p| p.final_class == FinalClass::Covid)
    });
    let mut cases: BTreeMap<String, CaseDates> = BTreeMap::new();
    for (s, positive) in dated.iter().zip(calls) {
        let entry = cases.entry(s.case_id.clone().expect("filtered")).or_default();
        entry.0 = entry.0.or(s.symptom_onset_date);
        entry.1 = entry.1.or(s.rtpcr_confirm_date);
        entry.2.push(Capture {
            date: s.image.capture_date.expect("filtered"),
            positive: positive?,
        });
    }
    let timelines: Vec<CaseTimeline> = cases
        .into_iter()
        .map(|(id, (onset, confirm, captures))| CaseTimeline::new(id, onset, confirm, captures))
        .collect();
    let report = cohort_lead_report(&timelines);
    std::fs::create_dir_all(&common.out)?;
    report.write_csv(BufWriter::new(File::create(common.out.join("lead-report.csv"))?))?;
    let mut inputs = corpus_files(manifest)?;
    inputs.extend((1..=3).map(|n| stage_dir(models_dir, &format!("stage{n}"))));
    record_run(
        &common.out,
        "lead-report",
        "lead-report",
        json!({"thresholds": thresholds}),
        0,
        &inputs,
        vec!["lead-report.csv".into()],
    )?;
    print_json(&json!({
        "cases": timelines.len(),
        "defined": report.defined,
        "at_least_2_days": report.at_least_2_days,
        "at_least_5_days": report.at_least_5_days,
    }))
}

fn serve(
    out: Option<PathBuf>,
    config: Option<PathBuf>,
    models: Option<PathBuf>,
    bind: Option<String>,
    port: Option<u16>,
    flags: &ThresholdArgs,
) -> Result<()> {
    let mut cfg = service_config(config.as_deref(), flags)?;
    if let Some(d) = out {
        cfg.data_dir = d;
    }
    if let Some(b) = bind {
        cfg.bind = b;
    }
    if let Some(p) = port {
        cfg.port = p;
    }
    if cfg.registry.is_empty() {
        let Some(dir) = models else {
            return Err(CliError::user("no registry in the config; pass --models DIR"));
        };
        cfg.registry = (1..=3u8)
            .map(|n| -> Result<RegistryEntry> {
                Ok(RegistryEntry {
                    stage: Stage::try_from(n)?,
                    version: "local".into(),
                    path: dir.join(format!("stage{n}")),
                    active: true,
                })
            })
            .collect::<Result<_>>()?;
    }
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    rt.block_on(cxr_service::serve(cfg))?;
    Ok(())
}
