//! Step-recognition training: plain SGD with one video per step, relevance
//! dropping as augmentation, and best-validation model selection.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{check_width, FeatureSequence};
use crate::error::{Error, Result};
use crate::experiments::metrics::pooled_accuracy;
use crate::models::{ArchKind, ModelConfig, StepModel, HEAD_PREFIX};
use crate::numerics::{ParamStore, Tape, Tensor};
use crate::rng::{stream, stream_id, Mode, SeedRng};
use crate::seso::{strip_to_backbone, SesoModel, SESO_HEAD_PREFIX};

pub const CONV_LR: f64 = 1e-3;
pub const RECURRENT_LR: f64 = 1e-2;

const TRAIN_STREAM: u64 = 0x7a1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `None` picks the per-architecture default ([`CONV_LR`] or [`RECURRENT_LR`]).
    pub lr: Option<f64>,
    pub relevance_drop_prob: f64,
    pub seed: u64,
    pub select_best_on_val: bool,
    /// Rescale gradients to this global L2 norm when exceeded. Off by default.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: None,
            relevance_drop_prob: 0.5,
            seed: 0,
            select_best_on_val: true,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if let Some(lr) = self.lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("lr must be non-negative, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.relevance_drop_prob) {
            return Err(Error::Config(format!(
                "relevance_drop_prob must be in [0, 1), got {}",
                self.relevance_drop_prob
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn lr_for(&self, kind: ArchKind) -> f64 {
        self.lr.unwrap_or(if kind.is_conv() { CONV_LR } else { RECURRENT_LR })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch whose snapshot was returned, when selecting on validation.
    pub best_epoch: Option<usize>,
}

impl History {
    pub fn best_val_accuracy(&self) -> Option<f64> {
        self.records
            .iter()
            .filter_map(|r| r.val_accuracy)
            .fold(None, |m, a| Some(m.map_or(a, |m: f64| m.max(a))))
    }

    /// First epoch whose validation accuracy reaches `threshold`.
    pub fn epochs_to_reach(&self, threshold: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.val_accuracy.is_some_and(|a| a >= threshold))
            .map(|r| r.epoch)
    }
}

/// Drops each irrelevant second independently with probability `p`, keeping
/// features, labels and relevance aligned. Relevant seconds always survive;
/// sequences without a relevance mask are returned unchanged.
pub fn relevance_augment(seq: &FeatureSequence, p: f64, rng: &mut SeedRng) -> Result<FeatureSequence> {
    let Some(rel) = &seq.relevance else {
        return Ok(seq.clone());
    };
    let keep: Vec<usize> = (0..seq.len()).filter(|&t| rel[t] || rng.random::<f64>() >= p).collect();
    if keep.len() == seq.len() {
        return Ok(seq.clone());
    }
    if keep.is_empty() {
        return Err(Error::TooShort { len: 0, min: 1 });
    }
    let n = seq.width();
    let mut data = Vec::with_capacity(keep.len() * n);
    for &t in &keep {
        data.extend_from_slice(seq.features.row(t));
    }
    FeatureSequence::new(
        seq.id.clone(),
        Tensor::new(vec![keep.len(), n], data)?,
        seq.labels.as_ref().map(|l| keep.iter().map(|&t| l[t]).collect()),
        Some(keep.iter().map(|&t| rel[t]).collect()),
    )
}

/// `value ← value − lr·grad` for every parameter, then zeroes the gradients.
pub fn sgd_update(store: &mut ParamStore, lr: f64) {
    for p in store.iter_mut() {
        let (value, grad) = (p.value.data_mut(), p.grad.data_mut());
        for (v, g) in value.iter_mut().zip(grad.iter_mut()) {
            *v -= lr * *g;
            *g = 0.0;
        }
    }
}

/// Scales all gradients down so their global L2 norm is at most `max_norm`.
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) {
    let norm = store.grad_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
}

/// How a step model's parameters start.
#[derive(Clone, Copy, Debug)]
pub enum Init<'a> {
    /// Fresh initialization from `TrainConfig::seed`.
    Random,
    /// Copy these tensors over a fresh model. Every backbone parameter must
    /// be present; a step head is copied if present and drawn fresh otherwise.
    Pretrained(&'a ParamStore),
}

impl StepModel {
    /// Builds a model from `seed` and overwrites it with `params` as
    /// described for [`Init::Pretrained`].
    pub fn from_pretrained(config: &ModelConfig, params: &ParamStore, seed: u64) -> Result<Self> {
        let mut model = StepModel::build(config, seed)?;
        let head = format!("{HEAD_PREFIX}.");
        for p in model.store.iter() {
            if !p.name.starts_with(&head) && params.by_name(&p.name).is_none() {
                return Err(Error::Incompatible(format!(
                    "pretrained parameters lack {:?} required by a {} model",
                    p.name,
                    config.label()
                )));
            }
        }
        for p in params.iter() {
            if p.name.starts_with(&format!("{SESO_HEAD_PREFIX}.")) {
                return Err(Error::Incompatible(format!(
                    "{:?} belongs to a puzzle head; strip it first",
                    p.name
                )));
            }
            match model.store.set_value(&p.name, p.value.clone()) {
                Ok(()) => {}
                Err(Error::UnknownParameter(name)) => {
                    return Err(Error::Incompatible(format!(
                        "a {} model has no parameter {name:?}",
                        config.label()
                    )))
                }
                Err(Error::ParameterShape { name, expected, found }) => {
                    return Err(Error::Incompatible(format!(
                        "{name:?} has shape {found:?}, the model expects {expected:?}"
                    )))
                }
                Err(e) => return Err(e),
            }
        }
        Ok(model)
    }
}

/// Mean NLL of one sequence under `model` with its current parameters.
fn step_loss(
    model: &StepModel,
    tape: &mut Tape,
    seq: &FeatureSequence,
    mode: &mut Mode<'_>,
) -> Result<crate::numerics::Var> {
    let x = tape.constant(seq.features.clone());
    let lp = model.step_log_probs(tape, x, mode)?;
    tape.nll_loss(lp, seq.labels()?)
}

/// Trains a step model. Each epoch shuffles the videos, and for each one
/// applies relevance dropping, a dropout forward pass, mean NLL over its
/// seconds, backward and one SGD step. Validation accuracy is pooled
/// per-second argmax accuracy without dropout or augmentation.
pub fn train_step_model(
    train: &[FeatureSequence],
    val: &[FeatureSequence],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    init: Init<'_>,
) -> Result<(StepModel, History)> {
    train_config.validate()?;
    model_config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if val.is_empty() && train_config.select_best_on_val {
        return Err(Error::Config(
            "best-validation selection needs validation sequences".into(),
        ));
    }
    check_width(train, model_config.input_dim)?;
    check_width(val, model_config.input_dim)?;
    for s in train.iter().chain(val) {
        s.validate()?;
        s.labels()?;
    }

    let mut model = match init {
        Init::Random => StepModel::build(model_config, train_config.seed)?,
        Init::Pretrained(params) => StepModel::from_pretrained(model_config, params, train_config.seed)?,
    };
    let lr = train_config.lr_for(model_config.kind);
    let mut history = History::default();
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 1..=train_config.epochs {
        let started = Instant::now();
        let mut rng = stream(train_config.seed, stream_id(TRAIN_STREAM, epoch as u64));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for &i in &order {
            let seq = match relevance_augment(&train[i], train_config.relevance_drop_prob, &mut rng) {
                Ok(seq) => seq,
                // Every second was irrelevant and dropped: nothing to learn from.
                Err(Error::TooShort { .. }) => continue,
                Err(e) => return Err(e),
            };
            let mut tape = Tape::new();
            let loss = step_loss(&model, &mut tape, &seq, &mut Mode::Train(&mut rng))?;
            loss_sum += tape.value(loss).item();
            steps += 1;
            tape.backward(loss, &mut model.store)?;
            drop(tape);
            if let Some(max) = train_config.clip_norm {
                clip_gradients(&mut model.store, max);
            }
            sgd_update(&mut model.store, lr);
        }
        let val_accuracy = if val.is_empty() {
            None
        } else {
            Some(pooled_accuracy(&model, val)?)
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / steps.max(1) as f64,
            val_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::debug!(
            "{} epoch {epoch}: loss {:.4} val {:?}",
            model_config.label(),
            record.train_loss,
            record.val_accuracy
        );
        if let Some(acc) = val_accuracy {
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, model.store.clone()));
                history.best_epoch = Some(epoch);
            }
        }
        history.records.push(record);
    }
    if train_config.select_best_on_val {
        if let Some((_, store)) = best {
            model.store = store;
        }
    } else {
        history.best_epoch = None;
    }
    Ok((model, history))
}

/// Drops the puzzle head of a pretrained sequence-sorting model, attaches a
/// fresh step head and trains every parameter on the step task.
pub fn finetune_from_seso(
    seso: &SesoModel,
    train: &[FeatureSequence],
    val: &[FeatureSequence],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(StepModel, History)> {
    if !seso.config.same_backbone(model_config) {
        return Err(Error::Incompatible(format!(
            "pretrained {} backbone cannot initialize a {} model",
            seso.config.label(),
            model_config.label()
        )));
    }
    let backbone = strip_to_backbone(&seso.store)?;
    train_step_model(train, val, model_config, train_config, Init::Pretrained(&backbone))
}
