//! Training loops, optimizer and the method registry.
//!
//! Ten method configurations cover the compared imbalance-handling setups:
//! plain training, random over-sampling, inverse-frequency loss weighting,
//! class-balanced batches on the primary task, synthetic-data augmentation,
//! their combinations, and the multi-task variants where a class-balanced
//! auxiliary task (optionally fed synthetic data) regularizes the shared
//! extractor while the primary task keeps the natural data distribution.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{
    balanced_class_weights, EncodedUtterance, Model, ModelConfig, ParamStore, Task, Vocabularies,
};
use crate::sampler::{cbg_epoch, oversample, random_epoch, Batch, Regime, SamplerConfig, TaskTag};
use crate::seeding::{mix, mix_all};
use crate::tape::Gradients;
use crate::tensor::Tensor;

const TAG_INIT: u64 = 0x11;
const TAG_OVERSAMPLE: u64 = 0x22;
const TAG_EPOCH_PRIMARY: u64 = 0x33;
const TAG_EPOCH_AUXILIARY: u64 = 0x44;
const TAG_DROPOUT: u64 = 0x55;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum LrSchedule {
    Constant,
    Noam {
        warmup_steps: usize,
        model_dim: usize,
    },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Constant
    }
}

/// Multiplier applied to the base learning rate at a 1-based step index.
pub fn schedule_factor(schedule: &LrSchedule, step: u64) -> f64 {
    match schedule {
        LrSchedule::Constant => 1.0,
        LrSchedule::Noam {
            warmup_steps,
            model_dim,
        } => {
            let step = step.max(1) as f64;
            let warmup = (*warmup_steps).max(1) as f64;
            (*model_dim as f64).powf(-0.5) * (step.powf(-0.5)).min(step * warmup.powf(-1.5))
        }
    }
}

fn default_learning_rate() -> f64 {
    1e-3
}
fn default_max_epochs() -> usize {
    8
}
fn default_patience() -> usize {
    2
}
fn default_task_ratio() -> (f64, f64) {
    (1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_task_ratio")]
    pub task_ratio: (f64, f64),
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            optimizer: Optimizer::Adam,
            learning_rate: default_learning_rate(),
            lr_schedule: LrSchedule::Constant,
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            task_ratio: default_task_ratio(),
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.task_ratio != (1.0, 1.0) {
            return Err(Error::Config(
                "only a 1.0:1.0 task ratio is supported; alternation is strict".into(),
            ));
        }
        Ok(())
    }
}

/// Names of the ten method configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodName {
    Baseline,
    OverSampling,
    BalancedLoss,
    #[serde(rename = "CBG")]
    Cbg,
    #[serde(rename = "MulCBG")]
    MulCbg,
    DataAug,
    DataAugOverSampling,
    DataAugBalancedLoss,
    #[serde(rename = "DataAugCBG")]
    DataAugCbg,
    #[serde(rename = "MulCBGDataAug")]
    MulCbgDataAug,
}

impl MethodName {
    pub const ALL: [MethodName; 10] = [
        MethodName::Baseline,
        MethodName::OverSampling,
        MethodName::BalancedLoss,
        MethodName::Cbg,
        MethodName::MulCbg,
        MethodName::DataAug,
        MethodName::DataAugOverSampling,
        MethodName::DataAugBalancedLoss,
        MethodName::DataAugCbg,
        MethodName::MulCbgDataAug,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MethodName::Baseline => "Baseline",
            MethodName::OverSampling => "OverSampling",
            MethodName::BalancedLoss => "BalancedLoss",
            MethodName::Cbg => "CBG",
            MethodName::MulCbg => "MulCBG",
            MethodName::DataAug => "DataAug",
            MethodName::DataAugOverSampling => "DataAugOverSampling",
            MethodName::DataAugBalancedLoss => "DataAugBalancedLoss",
            MethodName::DataAugCbg => "DataAugCBG",
            MethodName::MulCbgDataAug => "MulCBGDataAug",
        }
    }
}

impl std::fmt::Display for MethodName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.as_str())
    }
}

impl std::str::FromStr for MethodName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodName::ALL
            .iter()
            .find(|m| m.as_str() == s)
            .copied()
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method `{s}`; expected one of {}",
                    MethodName::ALL
                        .iter()
                        .map(|m| m.as_str())
                        .collect::<Vec<_>>()
                        .join(", ")
                ))
            })
    }
}

/// How a method routes data, sampling and loss weighting.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: MethodName,
    pub primary_sampler: Regime,
    pub primary_uses_synthetic: bool,
    pub primary_class_weights: bool,
    pub multitask: bool,
    pub auxiliary_uses_synthetic: bool,
}

impl MethodSpec {
    pub fn of(name: MethodName) -> MethodSpec {
        use MethodName::*;
        let (primary_sampler, primary_uses_synthetic, primary_class_weights, multitask, auxiliary_uses_synthetic) =
            match name {
                Baseline => (Regime::Random, false, false, false, false),
                OverSampling => (Regime::OverSampled, false, false, false, false),
                BalancedLoss => (Regime::Random, false, true, false, false),
                Cbg => (Regime::ClassBalanced, false, false, false, false),
                MulCbg => (Regime::Random, false, false, true, false),
                DataAug => (Regime::Random, true, false, false, false),
                DataAugOverSampling => (Regime::OverSampled, true, false, false, false),
                DataAugBalancedLoss => (Regime::Random, true, true, false, false),
                DataAugCbg => (Regime::ClassBalanced, true, false, false, false),
                MulCbgDataAug => (Regime::Random, false, false, true, true),
            };
        MethodSpec {
            name,
            primary_sampler,
            primary_uses_synthetic,
            primary_class_weights,
            multitask,
            auxiliary_uses_synthetic,
        }
    }

    pub fn registry() -> Vec<MethodSpec> {
        MethodName::ALL.iter().map(|&n| MethodSpec::of(n)).collect()
    }

    pub fn requires_synthetic(&self) -> bool {
        self.primary_uses_synthetic || self.auxiliary_uses_synthetic
    }
}

/// Per-slot Adam state. A slot's moments and step count advance only when a
/// step carries a gradient for it, so tasks never drag each other's decoder
/// parameters around via stale momentum.
#[derive(Clone, Debug)]
pub struct AdamState {
    slots: Vec<Option<SlotState>>,
}

#[derive(Clone, Debug)]
struct SlotState {
    m: Tensor,
    v: Tensor,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        AdamState {
            slots: (0..num_params).map(|_| None).collect(),
        }
    }
}

/// One Adam update at a 1-based global step index. Only parameters present
/// in the gradients move. Non-finite gradients abort with a diagnostic.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    step_index: u64,
    cfg: &TrainerConfig,
) -> Result<()> {
    debug_assert!(grads.rows.is_empty(), "gradients must be densified");
    let lr = cfg.learning_rate * schedule_factor(&cfg.lr_schedule, step_index);
    for (id, grad) in grads.dense.iter().enumerate() {
        let grad = match grad {
            Some(g) => g,
            None => continue,
        };
        if !grad.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient for parameter `{}` at step {step_index}",
                params.name(id)
            )));
        }
        let slot = state.slots[id].get_or_insert_with(|| SlotState {
            m: Tensor::zeros(grad.rows, grad.cols),
            v: Tensor::zeros(grad.rows, grad.cols),
            t: 0,
        });
        slot.t += 1;
        let bias1 = 1.0 - ADAM_BETA1.powi(slot.t as i32);
        let bias2 = 1.0 - ADAM_BETA2.powi(slot.t as i32);
        let tensor = params.tensor_mut(id);
        for k in 0..grad.data.len() {
            let g = grad.data[k];
            slot.m.data[k] = ADAM_BETA1 * slot.m.data[k] + (1.0 - ADAM_BETA1) * g;
            slot.v.data[k] = ADAM_BETA2 * slot.v.data[k] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = slot.m.data[k] / bias1;
            let v_hat = slot.v.data[k] / bias2;
            tensor.data[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Strict 1:1 interleaving starting with the primary task; when one stream's
/// epoch ends first the other's remaining batches run consecutively.
pub fn interleave_tasks(primary_batches: usize, auxiliary_batches: usize) -> Vec<TaskTag> {
    let mut order = Vec::with_capacity(primary_batches + auxiliary_batches);
    let paired = primary_batches.min(auxiliary_batches);
    for _ in 0..paired {
        order.push(TaskTag::Primary);
        order.push(TaskTag::Auxiliary);
    }
    for _ in paired..primary_batches {
        order.push(TaskTag::Primary);
    }
    for _ in paired..auxiliary_batches {
        order.push(TaskTag::Auxiliary);
    }
    order
}

/// Early stopping on validation SemER: strict improvement resets the
/// counter; training stops once the consecutive-non-improving count exceeds
/// the patience.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    non_improving: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            non_improving: 0,
        }
    }

    /// Returns (improved, stop_now).
    pub fn observe(&mut self, val_semer: f64) -> (bool, bool) {
        let improved = match self.best {
            None => true,
            Some(best) => val_semer < best,
        };
        if improved {
            self.best = Some(val_semer);
            self.non_improving = 0;
        } else {
            self.non_improving += 1;
        }
        (improved, self.non_improving > self.patience)
    }
}

/// One history line per epoch in the line-delimited record format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss_primary: f64,
    pub train_loss_auxiliary: Option<f64>,
    pub val_semer: f64,
    pub val_intent_accuracy: f64,
    pub val_slot_f1: f64,
    /// Processed batch sequence, e.g. "PAPAPP".
    pub batch_tasks: String,
    pub primary_regime: String,
}

pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut writer = BufWriter::new(file);
    for record in history {
        let line = serde_json::to_string(record).expect("record serializes");
        writer
            .write_all(line.as_bytes())
            .and_then(|_| writer.write_all(b"\n"))
            .map_err(|source| Error::Io {
                path: path.to_path_buf(),
                source,
            })?;
    }
    writer.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map(|l| !l.trim().is_empty()).unwrap_or(true))
        .map(|(lineno, line)| {
            let line = line.map_err(|source| Error::Io {
                path: path.to_path_buf(),
                source,
            })?;
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// A finished run: the best-validation-epoch model plus the epoch history.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_semer: f64,
}

fn intent_weight_vector(model: &Model, corpus: &Corpus) -> Result<Vec<f64>> {
    let weights = balanced_class_weights(&corpus.class_histogram())?;
    Ok(model
        .vocabs
        .intents
        .iter()
        .map(|intent| weights.get(intent).copied().unwrap_or(1.0))
        .collect())
}

fn validation_record(
    model: &Model,
    validation: &Corpus,
    epoch: usize,
    train_loss_primary: f64,
    train_loss_auxiliary: Option<f64>,
    batch_tasks: String,
    primary_regime: Regime,
) -> Result<EpochRecord> {
    let report = metrics::evaluate(model, validation, &BTreeMap::new())?;
    Ok(EpochRecord {
        epoch,
        train_loss_primary,
        train_loss_auxiliary,
        val_semer: report.overall_semer,
        val_intent_accuracy: report.intent_accuracy,
        val_slot_f1: report.slot_f1,
        batch_tasks,
        primary_regime: primary_regime.to_string(),
    })
}

fn batch_refs<'a>(encoded: &'a [EncodedUtterance], batch: &Batch) -> Vec<&'a EncodedUtterance> {
    batch.indices.iter().map(|&i| &encoded[i]).collect()
}

/// Train the primary task alone under the method's sampling regime and
/// optional class weighting. Returns the snapshot of the best validation
/// epoch.
pub fn train_single_task(
    mut model: Model,
    corpus: &Corpus,
    validation: &Corpus,
    method: &MethodSpec,
    cfg: &TrainerConfig,
    batch_size: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if method.multitask {
        return Err(Error::Config(format!(
            "method {} is multi-task; use train_multitask",
            method.name
        )));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyInput("training corpus"));
    }

    let sampling_corpus = match method.primary_sampler {
        Regime::OverSampled => oversample(corpus, mix(cfg.seed, TAG_OVERSAMPLE))?,
        _ => corpus.clone(),
    };
    let weights = if method.primary_class_weights {
        Some(intent_weight_vector(&model, &sampling_corpus)?)
    } else {
        None
    };
    let encoded = model.encode_corpus(&sampling_corpus)?;

    let mut adam = AdamState::new(model.num_params());
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut global_step: u64 = 0;

    for epoch in 1..=cfg.max_epochs {
        let sampler_cfg = SamplerConfig {
            batch_size,
            seed: mix_all(cfg.seed, &[TAG_EPOCH_PRIMARY, epoch as u64]),
            regime: method.primary_sampler,
        };
        let batches = match method.primary_sampler {
            Regime::ClassBalanced => cbg_epoch(&sampling_corpus, &sampler_cfg, TaskTag::Primary)?,
            _ => random_epoch(&sampling_corpus, &sampler_cfg, TaskTag::Primary)?,
        };
        let mut loss_sum = 0.0;
        let mut batch_tasks = String::with_capacity(batches.len());
        for batch in &batches {
            global_step += 1;
            let refs = batch_refs(&encoded, batch);
            let (loss, grads) = model.joint_loss(
                Task::Primary,
                &refs,
                weights.as_deref(),
                true,
                mix_all(cfg.seed, &[TAG_DROPOUT, global_step]),
            )?;
            adam_step(model.params_mut(), &grads, &mut adam, global_step, cfg)?;
            loss_sum += loss;
            batch_tasks.push('P');
        }
        let record = validation_record(
            &model,
            validation,
            epoch,
            loss_sum / batches.len() as f64,
            None,
            batch_tasks,
            method.primary_sampler,
        )?;
        let (improved, stop) = stopper.observe(record.val_semer);
        if improved {
            best = Some((epoch, record.val_semer, model.params().clone()));
        }
        history.push(record);
        if stop {
            break;
        }
    }

    let (best_epoch, best_val_semer, params) = best.expect("at least one epoch ran");
    *model.params_mut() = params;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_semer,
    })
}

/// Multi-task training: within an epoch, one random-sampled primary batch
/// strictly alternates with one class-balanced auxiliary batch until the
/// shorter stream's epoch ends, then the longer stream drains. Primary
/// batches update the shared extractor and primary decoders; auxiliary
/// batches the shared extractor and auxiliary decoders. Validation and model
/// selection use the primary decoders only.
pub fn train_multitask(
    mut model: Model,
    primary_corpus: &Corpus,
    auxiliary_corpus: &Corpus,
    validation: &Corpus,
    method: &MethodSpec,
    cfg: &TrainerConfig,
    batch_size: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !method.multitask {
        return Err(Error::Config(format!(
            "method {} is single-task; use train_single_task",
            method.name
        )));
    }
    if primary_corpus.is_empty() {
        return Err(Error::EmptyInput("primary training corpus"));
    }
    if auxiliary_corpus.is_empty() {
        return Err(Error::EmptyInput("auxiliary training corpus"));
    }

    let weights = if method.primary_class_weights {
        Some(intent_weight_vector(&model, primary_corpus)?)
    } else {
        None
    };
    let primary_encoded = model.encode_corpus(primary_corpus)?;
    let auxiliary_encoded = model.encode_corpus(auxiliary_corpus)?;

    let mut adam = AdamState::new(model.num_params());
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut global_step: u64 = 0;

    for epoch in 1..=cfg.max_epochs {
        let primary_cfg = SamplerConfig {
            batch_size,
            seed: mix_all(cfg.seed, &[TAG_EPOCH_PRIMARY, epoch as u64]),
            regime: method.primary_sampler,
        };
        let auxiliary_cfg = SamplerConfig {
            batch_size,
            seed: mix_all(cfg.seed, &[TAG_EPOCH_AUXILIARY, epoch as u64]),
            regime: Regime::ClassBalanced,
        };
        let primary_batches = random_epoch(primary_corpus, &primary_cfg, TaskTag::Primary)?;
        let auxiliary_batches = cbg_epoch(auxiliary_corpus, &auxiliary_cfg, TaskTag::Auxiliary)?;
        let order = interleave_tasks(primary_batches.len(), auxiliary_batches.len());

        let (mut pi, mut ai) = (0usize, 0usize);
        let mut primary_loss = 0.0;
        let mut auxiliary_loss = 0.0;
        let mut batch_tasks = String::with_capacity(order.len());
        for task in order {
            global_step += 1;
            let dropout_seed = mix_all(cfg.seed, &[TAG_DROPOUT, global_step]);
            match task {
                TaskTag::Primary => {
                    let refs = batch_refs(&primary_encoded, &primary_batches[pi]);
                    pi += 1;
                    let (loss, grads) = model.joint_loss(
                        Task::Primary,
                        &refs,
                        weights.as_deref(),
                        true,
                        dropout_seed,
                    )?;
                    adam_step(model.params_mut(), &grads, &mut adam, global_step, cfg)?;
                    primary_loss += loss;
                    batch_tasks.push('P');
                }
                TaskTag::Auxiliary => {
                    let refs = batch_refs(&auxiliary_encoded, &auxiliary_batches[ai]);
                    ai += 1;
                    let (loss, grads) =
                        model.joint_loss(Task::Auxiliary, &refs, None, true, dropout_seed)?;
                    adam_step(model.params_mut(), &grads, &mut adam, global_step, cfg)?;
                    auxiliary_loss += loss;
                    batch_tasks.push('A');
                }
            }
        }
        let record = validation_record(
            &model,
            validation,
            epoch,
            primary_loss / primary_batches.len() as f64,
            Some(auxiliary_loss / auxiliary_batches.len() as f64),
            batch_tasks,
            method.primary_sampler,
        )?;
        let (improved, stop) = stopper.observe(record.val_semer);
        if improved {
            best = Some((epoch, record.val_semer, model.params().clone()));
        }
        history.push(record);
        if stop {
            break;
        }
    }

    let (best_epoch, best_val_semer, params) = best.expect("at least one epoch ran");
    *model.params_mut() = params;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_semer,
    })
}

/// Corpora available to a run. The trainer routes them per the method: the
/// primary task sees the training data (augmented with synthetic data only
/// for the DataAug family), the auxiliary task sees the training data plus
/// synthetic data when the method sends it there.
#[derive(Clone, Copy, Debug)]
pub struct RunData<'a> {
    pub train: &'a Corpus,
    pub validation: &'a Corpus,
    pub synthetic: Option<&'a Corpus>,
}

/// Build vocabularies and a fresh model for the method's routed corpora,
/// then train it. The single entry point the CLI uses per (method, seed).
pub fn train_method(
    method: &MethodSpec,
    data: &RunData,
    model_cfg: &ModelConfig,
    cfg: &TrainerConfig,
    batch_size: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptyInput("training corpus"));
    }
    if method.requires_synthetic() && data.synthetic.is_none() {
        return Err(Error::Config(format!(
            "method {} requires a synthetic corpus",
            method.name
        )));
    }

    let primary = if method.primary_uses_synthetic {
        data.train.merge(data.synthetic.expect("checked above"))
    } else {
        data.train.clone()
    };
    let auxiliary = if method.multitask {
        Some(if method.auxiliary_uses_synthetic {
            data.train.merge(data.synthetic.expect("checked above"))
        } else {
            data.train.clone()
        })
    } else {
        None
    };

    let mut vocab_sources: Vec<&Corpus> = vec![&primary];
    if let Some(aux) = &auxiliary {
        vocab_sources.push(aux);
    }
    let vocabs = Vocabularies::build(&vocab_sources);
    let model = Model::new(model_cfg.clone(), vocabs, mix(cfg.seed, TAG_INIT))?;

    match &auxiliary {
        None => train_single_task(model, &primary, data.validation, method, cfg, batch_size),
        Some(aux) => train_multitask(model, &primary, aux, data.validation, method, cfg, batch_size),
    }
}
