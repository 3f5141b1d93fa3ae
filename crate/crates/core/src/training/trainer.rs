use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{check_temperature, cross_entropy_hard, cross_entropy_hard_tape, distill_loss_tape};
use super::metrics::macro_accuracy;
use super::optim::{adam_step, AdamState, OptimizerConfig};
use super::TrainError;
use crate::models::{ModelInput, ModelInstance};
use crate::tensor::{Real, Tape};

/// How several teachers' outputs become targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    /// Each sample is repeated once per teacher with that teacher's labels.
    #[default]
    Augmented,
    /// One instance per sample labelled with the teachers' mean.
    Average,
}

impl std::str::FromStr for Combine {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "augmented" => Ok(Self::Augmented),
            "average" => Ok(Self::Average),
            other => Err(format!("unknown teacher combination `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub distill_temperature: f64,
    pub teacher_combine: Combine,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 30,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            distill_temperature: 1.0,
            teacher_combine: Combine::Augmented,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        check_temperature(self.distill_temperature)?;
        self.optimizer.validate()
    }
}

/// Frozen teachers whose outputs supervise a student.
#[derive(Debug, Clone)]
pub struct TeacherEnsemble {
    pub teachers: Vec<ModelInstance<f32>>,
    pub combine: Combine,
}

impl TeacherEnsemble {
    pub fn new(teachers: Vec<ModelInstance<f32>>, combine: Combine) -> Result<Self, TrainError> {
        if !(1..=3).contains(&teachers.len()) {
            return Err(TrainError::Config(format!(
                "an ensemble holds 1 to 3 teachers, got {}",
                teachers.len()
            )));
        }
        let first = &teachers[0];
        if let Some(t) = teachers.iter().find(|t| t.classes != first.classes) {
            return Err(TrainError::Config(format!(
                "teacher classes {:?} differ from {:?}",
                t.classes, first.classes
            )));
        }
        Ok(Self { teachers, combine })
    }

    pub fn n_classes(&self) -> usize {
        self.teachers[0].classes.len()
    }

    pub fn classes(&self) -> &[String] {
        &self.teachers[0].classes
    }

    /// Target instances each sample contributes per epoch.
    pub fn expansion(&self) -> usize {
        match self.combine {
            Combine::Augmented => self.teachers.len(),
            Combine::Average => 1,
        }
    }
}

fn softmax_t(logits: &[f32], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&v| f64::from(v) / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Teacher probabilities at `temperature` for one sample: one vector per
/// teacher in augmented mode, their mean in average mode.
pub fn teacher_soft_labels(
    ensemble: &TeacherEnsemble,
    input: &ModelInput<f32>,
    temperature: f64,
) -> Result<Vec<Vec<f64>>, TrainError> {
    check_temperature(temperature)?;
    let per_teacher = ensemble
        .teachers
        .iter()
        .map(|t| Ok(softmax_t(t.logits(input)?.data(), temperature)))
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(match ensemble.combine {
        Combine::Augmented => per_teacher,
        Combine::Average => {
            let n = per_teacher.len() as f64;
            let k = per_teacher[0].len();
            vec![(0..k)
                .map(|i| per_teacher.iter().map(|q| q[i]).sum::<f64>() / n)
                .collect()]
        }
    })
}

/// A labelled clip ready for the model.
#[derive(Debug, Clone)]
pub struct Sample<F> {
    pub input: ModelInput<F>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

/// One row of the per-epoch CSV log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub macro_accuracy: f64,
    pub lr: f64,
    /// Instances seen: training samples times the teacher expansion.
    pub samples: usize,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,split,loss,macro_accuracy,lr,samples";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.split, self.loss, self.macro_accuracy, self.lr, self.samples
        )
    }
}

enum Target<F> {
    Hard(usize),
    Soft(Vec<F>),
}

struct Instance<F> {
    sample: usize,
    target: Target<F>,
}

fn argmax<F: Real>(v: &[F]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, F::neg_infinity()), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Inference over `samples`: mean hard-label loss, predictions, labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
}

impl Evaluation {
    pub fn macro_accuracy(&self) -> Result<f64, TrainError> {
        macro_accuracy(&self.predictions, &self.labels)
    }
}

pub fn evaluate<F: Real>(model: &ModelInstance<F>, samples: &[Sample<F>]) -> Result<Evaluation, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Data("no samples to evaluate".into()));
    }
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(samples.len());
    let mut probabilities = Vec::with_capacity(samples.len());
    for s in samples {
        let logits = model.logits(&s.input)?;
        let l = cross_entropy_hard(logits.data(), s.label)?;
        loss += l.to_f64().unwrap_or(f64::NAN);
        predictions.push(argmax(logits.data()));
        probabilities.push(softmax_t(
            &logits.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect::<Vec<_>>(),
            1.0,
        ));
    }
    let loss = loss / samples.len() as f64;
    if !loss.is_finite() {
        return Err(TrainError::NonFinite("evaluation loss".into()));
    }
    Ok(Evaluation {
        loss,
        predictions,
        labels: samples.iter().map(|s| s.label).collect(),
        probabilities,
    })
}

/// Trains `model` in place.
///
/// Without an ensemble the loss is hard-label cross-entropy; with one it
/// is the distillation loss against teacher soft labels, computed once up
/// front since teachers are frozen. `teacher_inputs` supplies each
/// sample's input in the teachers' precision when distilling.
/// `on_epoch` sees every log row as it is produced.
pub fn train<F: Real>(
    model: &mut ModelInstance<F>,
    train_set: &[Sample<F>],
    eval_set: Option<&[Sample<F>]>,
    config: &TrainingConfig,
    teachers: Option<(&TeacherEnsemble, &[ModelInput<f32>])>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Data("empty training set".into()));
    }
    let n_classes = model.spec.n_classes;
    if let Some(s) = train_set.iter().find(|s| s.label >= n_classes) {
        return Err(TrainError::InvalidLabel {
            label: s.label,
            n_classes,
        });
    }
    let mut instances = Vec::new();
    match teachers {
        None => instances.extend(train_set.iter().enumerate().map(|(i, s)| Instance {
            sample: i,
            target: Target::Hard(s.label),
        })),
        Some((ensemble, inputs)) => {
            if ensemble.n_classes() != n_classes {
                return Err(TrainError::Config(format!(
                    "teachers predict {} classes, student {}",
                    ensemble.n_classes(),
                    n_classes
                )));
            }
            if inputs.len() != train_set.len() {
                return Err(TrainError::Data("one teacher input per training sample".into()));
            }
            for (i, input) in inputs.iter().enumerate() {
                for q in teacher_soft_labels(ensemble, input, config.distill_temperature)? {
                    instances.push(Instance {
                        sample: i,
                        target: Target::Soft(q.into_iter().map(F::lit).collect()),
                    });
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::<F>::new();
    let model_d = model.spec.effective_d_model();
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut log = Vec::new();
    let mut lr = config.optimizer.lr_at(1, model_d)?;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut preds = Vec::with_capacity(order.len());
        let mut labels = Vec::with_capacity(order.len());
        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let mut total = None;
            for &idx in batch {
                let inst = &instances[idx];
                let sample = &train_set[inst.sample];
                let out = model.forward(&mut tape, &bound, &sample.input, true, &mut rng)?;
                preds.push(argmax(tape.value(out.logits).data()));
                labels.push(sample.label);
                let l = match &inst.target {
                    Target::Hard(label) => cross_entropy_hard_tape(&mut tape, out.logits, *label)?,
                    Target::Soft(q) => distill_loss_tape(&mut tape, out.logits, q, config.distill_temperature)?,
                };
                total = Some(match total {
                    None => l,
                    Some(acc) => tape.add(acc, l)?,
                });
            }
            let total = total.expect("batches are non-empty");
            let batch_loss = tape.scale(total, F::lit(1.0 / batch.len() as f64))?;
            let value = tape.value(batch_loss).item().to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(TrainError::NonFinite(format!("training loss in epoch {epoch}")));
            }
            loss_sum += value * batch.len() as f64;
            let mut grads = tape.backward(batch_loss)?;
            let mut named = BTreeMap::new();
            for (name, &var) in bound.iter() {
                if model.is_trainable(name) {
                    if let Some(g) = grads.take(var) {
                        named.insert(name.clone(), g);
                    }
                }
            }
            lr = config.optimizer.lr_at(adam.step + 1, model_d)?;
            adam_step(&mut model.params, &named, &mut adam, lr)?;
        }
        let record = EpochRecord {
            epoch,
            split: Split::Train,
            loss: loss_sum / order.len() as f64,
            macro_accuracy: macro_accuracy(&preds, &labels)?,
            lr,
            samples: order.len(),
        };
        on_epoch(&record);
        log.push(record);
        if let Some(eval) = eval_set {
            let ev = evaluate(model, eval)?;
            let record = EpochRecord {
                epoch,
                split: Split::Eval,
                loss: ev.loss,
                macro_accuracy: ev.macro_accuracy()?,
                lr,
                samples: eval.len(),
            };
            on_epoch(&record);
            log.push(record);
        }
    }
    Ok(log)
}
