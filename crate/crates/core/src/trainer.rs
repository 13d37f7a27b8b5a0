//! Optimization loops and the incremental loss.
//!
//! The incremental objective over a batch `B` is
//! `(1/|B|) (Σ CE + λ T² Σ_{original} KL(teacher ‖ student))`, where the KL
//! sum only runs over samples from the original partition.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classifier::{log_softmax, softmax, Backbone, StageModel};
use crate::data::batch::BalancedBatcher;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Grads, ParamSet, ReluBackward, Tensor};
use crate::par::{self, Execution};
use crate::Stage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Weight of the distillation term; 0 disables it.
    #[serde(default)]
    pub lambda: f64,
    /// Softmax temperature for distillation. The KL term is scaled by `T²`.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub seed: u64,
}

fn default_temperature() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn new(stage: Stage, epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            stage,
            epochs,
            batch_size,
            adam: AdamConfig::default(),
            lambda: 0.0,
            temperature: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if self.adam.learning_rate <= 0.0 || self.adam.learning_rate.is_nan() {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Zero-based.
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    #[serde(default)]
    pub validation: BTreeMap<String, f64>,
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::TargetOutOfRange {
            target,
            classes: logits.len(),
        });
    }
    Ok(-log_softmax(logits)[target])
}

/// Gradient of [`cross_entropy`] with respect to the logits.
pub fn cross_entropy_grad(logits: &[f64], target: usize) -> Vec<f64> {
    let mut g = softmax(logits);
    g[target] -= 1.0;
    g
}

/// `KL(softmax(teacher/T) ‖ softmax(student/T))`, clamped at zero against
/// rounding.
pub fn distillation_loss(student: &[f64], teacher: &[f64], temperature: f64) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(Error::TeacherArity {
            teacher: teacher.len(),
            student: student.len(),
        });
    }
    if student == teacher {
        return Ok(0.0);
    }
    let ls = log_softmax(&scaled(student, temperature));
    let lt = log_softmax(&scaled(teacher, temperature));
    let kl: f64 = lt.iter().zip(&ls).map(|(&t, &s)| t.exp() * (t - s)).sum();
    Ok(kl.max(0.0))
}

/// Gradient of [`distillation_loss`] with respect to the student logits.
pub fn distillation_grad(student: &[f64], teacher: &[f64], temperature: f64) -> Vec<f64> {
    let ps = softmax(&scaled(student, temperature));
    let pt = softmax(&scaled(teacher, temperature));
    ps.iter().zip(&pt).map(|(s, t)| (s - t) / temperature).collect()
}

fn scaled(z: &[f64], t: f64) -> Vec<f64> {
    z.iter().map(|v| v / t).collect()
}

/// One sample's contribution to the incremental loss.
#[derive(Clone, Debug)]
pub struct LossTerm<'a> {
    pub logits: &'a [f64],
    pub target: usize,
    /// Whether the sample belongs to the original partition.
    pub original: bool,
    pub teacher_logits: Option<&'a [f64]>,
}

/// Per-sample loss and logit gradient, before division by the batch size.
pub fn sample_loss(term: &LossTerm<'_>, lambda: f64, temperature: f64) -> Result<(f64, Vec<f64>)> {
    let mut loss = cross_entropy(term.logits, term.target)?;
    let mut grad = cross_entropy_grad(term.logits, term.target);
    if lambda > 0.0 && term.original {
        let teacher = term.teacher_logits.ok_or(Error::TeacherRequired(lambda))?;
        let t2 = temperature * temperature;
        loss += lambda * t2 * distillation_loss(term.logits, teacher, temperature)?;
        for (g, d) in grad
            .iter_mut()
            .zip(distillation_grad(term.logits, teacher, temperature))
        {
            *g += lambda * t2 * d;
        }
    }
    Ok((loss, grad))
}

/// Batch estimate of the incremental loss.
pub fn combined_loss(batch: &[LossTerm<'_>], lambda: f64, temperature: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if !(lambda >= 0.0 && temperature > 0.0) {
        return Err(Error::InvalidConfig("need lambda >= 0 and temperature > 0".into()));
    }
    if lambda > 0.0 && batch.iter().any(|t| t.original && t.teacher_logits.is_none()) {
        return Err(Error::TeacherRequired(lambda));
    }
    let mut total = 0.0;
    for term in batch {
        total += sample_loss(term, lambda, temperature)?.0;
    }
    Ok(total / batch.len() as f64)
}

/// Training diverged; parameters from the last completed epoch.
#[derive(Debug)]
pub(crate) struct Diverged {
    pub epoch: usize,
    pub last_finite: ParamSet,
    pub history: Vec<EpochRecord>,
}

/// Mini-batch Adam loop. `sample_grad` returns one sample's loss and
/// parameter gradient; per-sample work is spread over threads and summed in
/// batch order. `validate` runs after every epoch.
pub(crate) fn optimize<G, V>(
    params: &mut ParamSet,
    batcher: &BalancedBatcher,
    config: &TrainConfig,
    exec: Execution,
    sample_grad: G,
    mut validate: V,
) -> std::result::Result<Vec<EpochRecord>, Diverged>
where
    G: Fn(&ParamSet, usize) -> (f64, Grads) + Sync,
    V: FnMut(&ParamSet) -> BTreeMap<String, f64>,
{
    let mut adam = Adam::new(config.adam.clone(), params);
    let mut history = Vec::with_capacity(config.epochs);
    let mut last_finite = params.clone();
    for epoch in 0..config.epochs {
        let batches = batcher.epoch(epoch);
        let mut loss_sum = 0.0;
        for batch in &batches {
            let current: &ParamSet = params;
            let results = par::map(exec, batch.len(), |j| sample_grad(current, batch[j]));
            let mut grads = params.zero_grads();
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                grads.add_assign(g);
            }
            let n = batch.len() as f64;
            loss /= n;
            grads.scale(1.0 / n);
            if !loss.is_finite() || !grads.is_finite() {
                log::error!("loss became non-finite in epoch {epoch}");
                *params = last_finite.clone();
                return Err(Diverged {
                    epoch,
                    last_finite,
                    history,
                });
            }
            adam.step(params, &mut grads);
            loss_sum += loss;
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len().max(1) as f64,
            validation: validate(params),
        };
        log::info!(
            "stage {} epoch {epoch}: loss {:.5} {:?}",
            config.stage,
            record.train_loss,
            record.validation
        );
        history.push(record);
        last_finite.clone_from(params);
    }
    Ok(history)
}

/// One classifier training example with its preprocessed input.
#[derive(Clone, Debug)]
pub struct Example {
    pub source_id: String,
    pub input: Tensor,
    pub target: usize,
    /// Balancing group.
    pub group: usize,
    pub original: bool,
}

/// Teacher logits for every example, computed once.
pub fn teacher_logits(teacher: &StageModel, examples: &[Example], exec: Execution) -> Vec<Vec<f64>> {
    par::map_slice(exec, examples, |e| {
        teacher.net.forward(&teacher.params, &e.input).logits
    })
}

pub(crate) fn classifier_sample_grad(
    net: &Backbone,
    params: &ParamSet,
    example: &Example,
    teacher: Option<&[f64]>,
    lambda: f64,
    temperature: f64,
) -> Result<(f64, Grads)> {
    let record = net.forward(params, &example.input);
    let term = LossTerm {
        logits: &record.logits,
        target: example.target,
        original: example.original,
        teacher_logits: teacher,
    };
    let (loss, dlogits) = sample_loss(&term, lambda, temperature)?;
    let mut grads = params.zero_grads();
    net.backward(
        params,
        &record,
        &dlogits,
        ReluBackward::Standard,
        Some(&mut grads),
        false,
    );
    Ok((loss, grads))
}

/// Exact corpus-level loss over all examples (slow; for auditing).
pub fn corpus_loss(
    model: &StageModel,
    examples: &[Example],
    teacher: Option<&StageModel>,
    lambda: f64,
    temperature: f64,
    exec: Execution,
) -> Result<f64> {
    if lambda > 0.0 && teacher.is_none() {
        return Err(Error::TeacherRequired(lambda));
    }
    let student = par::map_slice(exec, examples, |e| model.net.forward(&model.params, &e.input).logits);
    let teacher_out = teacher.map(|t| teacher_logits(t, examples, exec));
    let terms: Vec<LossTerm<'_>> = examples
        .iter()
        .enumerate()
        .map(|(i, e)| LossTerm {
            logits: &student[i],
            target: e.target,
            original: e.original,
            teacher_logits: teacher_out.as_ref().map(|t| t[i].as_slice()),
        })
        .collect();
    combined_loss(&terms, lambda, temperature)
}

/// Outcome of [`fit`].
#[derive(Clone, Debug)]
pub struct FitOutput {
    pub model: StageModel,
    pub history: Vec<EpochRecord>,
}

/// Trains `model` in place of a copy. When `teacher` is given its logits are
/// precomputed and the distillation term applies to original-partition
/// examples; the teacher itself is only read.
pub fn fit<V>(
    model: &StageModel,
    examples: &[Example],
    group_names: &[String],
    config: &TrainConfig,
    teacher: Option<&StageModel>,
    exec: Execution,
    validate: V,
) -> Result<FitOutput>
where
    V: FnMut(&StageModel) -> BTreeMap<String, f64>,
{
    config.validate()?;
    if config.lambda > 0.0 && teacher.is_none() {
        return Err(Error::TeacherRequired(config.lambda));
    }
    if let Some(t) = teacher {
        if t.num_classes() != model.num_classes() {
            return Err(Error::TeacherArity {
                teacher: t.num_classes(),
                student: model.num_classes(),
            });
        }
    }
    let mut student = model.clone();
    if config.epochs == 0 {
        return Ok(FitOutput {
            model: student,
            history: Vec::new(),
        });
    }
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    for e in examples {
        student.check_target(e.target)?;
    }
    let groups = group_names
        .iter()
        .enumerate()
        .map(|(g, name)| {
            crate::data::batch::Group::new(
                name.clone(),
                examples
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| e.group == g)
                    .map(|(i, _)| i)
                    .collect(),
            )
        })
        .collect();
    let batcher = BalancedBatcher::new(groups, config.batch_size, config.seed)?;
    let targets = match teacher {
        Some(t) if config.lambda > 0.0 => Some(teacher_logits(t, examples, exec)),
        _ => None,
    };
    let net = student.net.clone();
    let (lambda, temperature) = (config.lambda, config.temperature);
    let sample_grad = |params: &ParamSet, i: usize| {
        classifier_sample_grad(
            &net,
            params,
            &examples[i],
            targets.as_ref().map(|t| t[i].as_slice()),
            lambda,
            temperature,
        )
        .expect("targets checked before training")
    };
    let mut validate = validate;
    let model_config = student.config.clone();
    let wrap = |params: &ParamSet| {
        let candidate = StageModel {
            config: model_config.clone(),
            params: params.clone(),
            net: net.clone(),
        };
        validate(&candidate)
    };
    match optimize(&mut student.params, &batcher, config, exec, sample_grad, wrap) {
        Ok(history) => Ok(FitOutput {
            model: student,
            history,
        }),
        Err(d) => {
            let last = StageModel::from_params(student.config.clone(), &d.last_finite)?;
            Err(Error::Diverged {
                epoch: d.epoch,
                last_finite: Box::new(crate::checkpoint::CheckpointBundle::for_classifier(
                    &last, config, d.history, teacher,
                )),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cross_entropy_hand_values() {
        assert_abs_diff_eq!(cross_entropy(&[0.3, 0.3], 0).unwrap(), 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(
            cross_entropy(&[0.0, 3f64.ln()], 1).unwrap(),
            -(0.75f64).ln(),
            epsilon = 1e-12
        );
        assert!(cross_entropy(&[0.0, 1.0], 2).is_err());
        assert!(cross_entropy(&[1000.0, -1000.0], 1).unwrap().is_finite());
    }

    #[test]
    fn distillation_hand_value() {
        let kl = distillation_loss(&[0.0, 3f64.ln()], &[0.0, 0.0], 1.0).unwrap();
        let oracle = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert_abs_diff_eq!(kl, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(kl, 0.143841, epsilon = 1e-6);
    }

    #[test]
    fn lambda_without_teacher_is_an_error() {
        let l = [0.1, 0.2];
        let batch = [LossTerm {
            logits: &l,
            target: 0,
            original: true,
            teacher_logits: None,
        }];
        assert!(matches!(
            combined_loss(&batch, 1.0, 1.0),
            Err(Error::TeacherRequired(_))
        ));
        assert!(combined_loss(&batch, 0.0, 1.0).is_ok());
    }

    #[test]
    fn mixed_batch_assembles_by_hand() {
        let (s1, t1, s2) = ([0.0, 3f64.ln()], [0.0, 0.0], [1.0, -0.5]);
        let a = cross_entropy(&s1, 1).unwrap();
        let b = distillation_loss(&s1, &t1, 1.0).unwrap();
        let c = cross_entropy(&s2, 0).unwrap();
        let batch = [
            LossTerm {
                logits: &s1,
                target: 1,
                original: true,
                teacher_logits: Some(&t1),
            },
            LossTerm {
                logits: &s2,
                target: 0,
                original: false,
                teacher_logits: Some(&t1),
            },
        ];
        assert_abs_diff_eq!(
            combined_loss(&batch, 2.0, 1.0).unwrap(),
            (a + c + 2.0 * b) / 2.0,
            epsilon = 1e-12
        );
    }
}
