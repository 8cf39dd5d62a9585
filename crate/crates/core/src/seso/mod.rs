//! Sequence sorting: a self-supervised pretext task. A sequence is cut into
//! nine segments, shuffled by one permutation from a fixed codebook, and the
//! model classifies which permutation was applied. The trained backbone then
//! initializes step recognition.

use std::collections::HashSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::layers::DenseParams;
use crate::models::{Backbone, ModelConfig};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::rng::{seeded, stream, stream_id, Mode, SeedRng};
use crate::training::{clip_gradients, sgd_update, EpochRecord, History, TrainConfig};

pub const SEGMENTS: usize = 9;
/// 9!
pub const MAX_PERMUTATIONS: usize = 362_880;
pub const DEFAULT_PERMUTATIONS: usize = 64;
/// Codebook size used for the desk-scale benchmark.
pub const DESK_PERMUTATIONS: usize = 24;
/// Random candidates scored for each new codebook entry.
pub const CANDIDATES: usize = 100;
/// Name prefix of the puzzle classifier parameters.
pub const SESO_HEAD_PREFIX: &str = "seso_head";

const TRAIN_STREAM: u64 = 0x5e50;
const VAL_STREAM: u64 = 0x5e51;

pub type Permutation = [usize; SEGMENTS];

pub fn hamming(a: &Permutation, b: &Permutation) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// The classification targets: P distinct permutations of the nine segments,
/// starting with the identity and spread out in Hamming distance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationTable {
    perms: Vec<Permutation>,
    seed: u64,
}

impl PermutationTable {
    /// Greedy max-min construction: each new entry is the one of
    /// [`CANDIDATES`] random permutations whose minimum Hamming distance to
    /// the entries chosen so far is largest (first candidate wins ties).
    /// Candidates already in the table are never chosen.
    pub fn build(p: usize, seed: u64) -> Result<Self> {
        if p == 0 || p > MAX_PERMUTATIONS {
            return Err(Error::ImpossiblePermutationCount {
                requested: p,
                max: MAX_PERMUTATIONS,
            });
        }
        let mut rng = seeded(seed);
        let identity: Permutation = std::array::from_fn(|i| i);
        let mut perms = vec![identity];
        let mut seen: HashSet<Permutation> = perms.iter().copied().collect();
        while perms.len() < p {
            let mut best: Option<(usize, Permutation)> = None;
            for _ in 0..CANDIDATES {
                let mut cand = identity;
                cand.shuffle(&mut rng);
                if seen.contains(&cand) {
                    continue;
                }
                let d = perms.iter().map(|q| hamming(q, &cand)).min().unwrap_or(SEGMENTS);
                if best.is_none_or(|(bd, _)| d > bd) {
                    best = Some((d, cand));
                }
            }
            // With every candidate a duplicate (only plausible for P near 9!)
            // draw another round.
            if let Some((_, cand)) = best {
                seen.insert(cand);
                perms.push(cand);
            }
        }
        Ok(Self { perms, seed })
    }

    pub fn len(&self) -> usize {
        self.perms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perms.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn perms(&self) -> &[Permutation] {
        &self.perms
    }

    pub fn perm(&self, class: usize) -> &Permutation {
        &self.perms[class]
    }

    pub fn min_pairwise_hamming(&self) -> usize {
        let mut min = SEGMENTS;
        for (i, a) in self.perms.iter().enumerate() {
            for b in &self.perms[i + 1..] {
                min = min.min(hamming(a, b));
            }
        }
        min
    }
}

/// Lengths of the nine segments of an L-row sequence: ⌊L/9⌋ each, plus one
/// for the first L mod 9.
pub fn segment_lengths(l: usize) -> Result<[usize; SEGMENTS]> {
    if l < SEGMENTS {
        return Err(Error::TooShort { len: l, min: SEGMENTS });
    }
    let (base, extra) = (l / SEGMENTS, l % SEGMENTS);
    Ok(std::array::from_fn(|i| base + usize::from(i < extra)))
}

pub fn split_nine(x: &Tensor) -> Result<Vec<Tensor>> {
    let lengths = segment_lengths(x.rows())?;
    let mut start = 0;
    lengths
        .iter()
        .map(|&len| {
            let seg = x.slice_rows(start, len);
            start += len;
            seg
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SortingExample {
    /// The nine segments in shuffled order.
    pub segments: Vec<Tensor>,
    pub target_class: usize,
}

impl SortingExample {
    /// Puts the segments back in order: segment i came from position perm[i].
    pub fn unshuffle(&self, table: &PermutationTable) -> Result<Tensor> {
        let perm = table.perm(self.target_class);
        let mut ordered = vec![None; SEGMENTS];
        for (seg, &pos) in self.segments.iter().zip(perm) {
            ordered[pos] = Some(seg.clone());
        }
        Tensor::concat_rows(&ordered.into_iter().flatten().collect::<Vec<_>>())
    }
}

/// segments[i] = split_nine(x)[perm[i]] with perm the table entry of `class`.
pub fn sorting_example_for_class(x: &Tensor, table: &PermutationTable, class: usize) -> Result<SortingExample> {
    if class >= table.len() {
        return Err(Error::Config(format!(
            "puzzle class {class} outside table of {}",
            table.len()
        )));
    }
    let parts = split_nine(x)?;
    let segments = table.perm(class).iter().map(|&p| parts[p].clone()).collect();
    Ok(SortingExample {
        segments,
        target_class: class,
    })
}

/// A puzzle with a uniformly drawn permutation class.
pub fn make_sorting_example(x: &Tensor, table: &PermutationTable, rng: &mut SeedRng) -> Result<SortingExample> {
    let class = rng.random_range(0..table.len());
    sorting_example_for_class(x, table, class)
}

/// Backbone plus puzzle head (9·D_rep → P).
#[derive(Clone, Debug, PartialEq)]
pub struct SesoModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub head: DenseParams,
    pub table: PermutationTable,
}

impl SesoModel {
    /// Draws the backbone exactly as [`crate::models::StepModel::build`] does
    /// for the same seed, then the puzzle head.
    pub fn build(config: &ModelConfig, table: PermutationTable, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::init(config, &mut store, &mut rng)?;
        let head = DenseParams::init(
            &mut store,
            SESO_HEAD_PREFIX,
            SEGMENTS * config.rep_width(),
            table.len(),
            &mut rng,
        )?;
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            head,
            table,
        })
    }

    /// Rebuilds a model around stored parameters (e.g. from a checkpoint).
    pub fn from_params(config: &ModelConfig, table: PermutationTable, params: &ParamStore) -> Result<Self> {
        let mut model = Self::build(config, table, 0)?;
        copy_exact(&mut model.store, params)?;
        Ok(model)
    }

    /// 1×P log-probabilities. Each segment runs through the backbone on its
    /// own (fresh recurrent state) and is summarized by its temporal mean.
    pub fn seso_log_probs(&self, tape: &mut Tape, ex: &SortingExample, mode: &mut Mode<'_>) -> Result<Var> {
        if ex.segments.len() != SEGMENTS {
            return Err(Error::Config(format!(
                "expected {SEGMENTS} segments, got {}",
                ex.segments.len()
            )));
        }
        let d = self.config.rep_width();
        let mut summaries = Vec::with_capacity(SEGMENTS);
        for seg in &ex.segments {
            let x = tape.constant(seg.clone());
            let rep = self.backbone.forward(&self.config, &self.store, tape, x, mode)?;
            let mean = tape.mean_over_time(rep)?;
            summaries.push(tape.reshape(mean, vec![1, d])?);
        }
        let joined = tape.concat_last_axis(&summaries)?;
        let logits = self.head.forward(tape, &self.store, joined)?;
        tape.log_softmax_rows(logits)
    }

    pub fn predict(&self, ex: &SortingExample) -> Result<usize> {
        let mut tape = Tape::new();
        let lp = self.seso_log_probs(&mut tape, ex, &mut Mode::Eval)?;
        Ok(crate::models::argmax_rows(tape.value(lp))[0])
    }

    /// Fraction of puzzles whose permutation is recovered exactly.
    pub fn sorting_accuracy(&self, puzzles: &[SortingExample]) -> Result<f64> {
        if puzzles.is_empty() {
            return Err(Error::Config("no puzzles to evaluate".into()));
        }
        let mut correct = 0;
        for ex in puzzles {
            correct += usize::from(self.predict(ex)? == ex.target_class);
        }
        Ok(correct as f64 / puzzles.len() as f64)
    }

    pub fn mean_loss(&self, puzzles: &[SortingExample]) -> Result<f64> {
        let mut total = 0.0;
        for ex in puzzles {
            let mut tape = Tape::new();
            let lp = self.seso_log_probs(&mut tape, ex, &mut Mode::Eval)?;
            total -= tape.value(lp).data()[ex.target_class];
        }
        Ok(total / puzzles.len() as f64)
    }
}

/// Copies every tensor of `src` into `dst`; both must hold the same names
/// and shapes.
fn copy_exact(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    for p in dst.iter() {
        if src.by_name(&p.name).is_none() {
            return Err(Error::Incompatible(format!("missing parameter {:?}", p.name)));
        }
    }
    for p in src.iter() {
        dst.set_value(&p.name, p.value.clone())?;
    }
    Ok(())
}

/// Backbone parameters of a pretrained puzzle model, without the puzzle head.
pub fn strip_to_backbone(params: &ParamStore) -> Result<ParamStore> {
    let head = format!("{SESO_HEAD_PREFIX}.");
    if !params.iter().any(|p| p.name.starts_with(&head)) {
        return Err(Error::Malformed("parameters contain no puzzle head to strip".into()));
    }
    let mut out = ParamStore::new();
    for p in params.iter().filter(|p| !p.name.starts_with(&head)) {
        out.add(p.name.clone(), p.value.clone())?;
    }
    Ok(out)
}

/// Knobs of the puzzle task itself (the optimizer comes from [`TrainConfig`]).
#[derive(Clone, Debug, PartialEq)]
pub struct SesoConfig {
    pub permutations: usize,
    pub table_seed: u64,
    /// Fixed puzzles drawn per validation video.
    pub val_puzzles_per_video: usize,
    /// Reuse one fixed puzzle per video every epoch instead of drawing fresh
    /// ones (an optimization sanity mode; off for real pretraining).
    pub fixed_train_puzzles: bool,
}

impl Default for SesoConfig {
    fn default() -> Self {
        Self {
            permutations: DEFAULT_PERMUTATIONS,
            table_seed: 0,
            val_puzzles_per_video: 4,
            fixed_train_puzzles: false,
        }
    }
}

/// Long-enough sequences, warning about the rest.
fn usable(seqs: &[FeatureSequence]) -> Vec<&FeatureSequence> {
    seqs.iter()
        .filter(|s| {
            let ok = s.len() >= SEGMENTS;
            if !ok {
                log::warn!(
                    "skipping {}: {} rows is shorter than {SEGMENTS} segments",
                    s.id,
                    s.len()
                );
            }
            ok
        })
        .collect()
}

/// Fixed validation puzzles, independent of training randomness.
pub fn validation_puzzles(
    seqs: &[FeatureSequence],
    table: &PermutationTable,
    per_video: usize,
    seed: u64,
) -> Result<Vec<SortingExample>> {
    let mut rng = stream(seed, stream_id(VAL_STREAM, 0));
    let mut out = Vec::new();
    for s in usable(seqs) {
        for _ in 0..per_video {
            out.push(make_sorting_example(&s.features, table, &mut rng)?);
        }
    }
    Ok(out)
}

/// Trains backbone and puzzle head by SGD, one puzzle per video per epoch
/// (batch = one puzzle). Labels are not used. Records validation sorting
/// accuracy per epoch and, if `train.select_best_on_val`, returns the
/// snapshot of the best epoch (earliest on ties).
pub fn pretrain_seso(
    train: &[FeatureSequence],
    val: &[FeatureSequence],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    seso: &SesoConfig,
) -> Result<(SesoModel, History)> {
    train_config.validate()?;
    let table = PermutationTable::build(seso.permutations, seso.table_seed)?;
    let videos = usable(train);
    if videos.is_empty() {
        return Err(Error::Config(
            "no training sequence is long enough to split into nine".into(),
        ));
    }
    crate::data::check_width(train, model_config.input_dim)?;
    crate::data::check_width(val, model_config.input_dim)?;
    let val_set = validation_puzzles(val, &table, seso.val_puzzles_per_video, train_config.seed)?;
    if val_set.is_empty() && train_config.select_best_on_val {
        return Err(Error::Config(
            "best-validation selection needs validation sequences".into(),
        ));
    }

    let mut model = SesoModel::build(model_config, table, train_config.seed)?;
    let lr = train_config.lr_for(model_config.kind);
    let mut history = History::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let fixed = if seso.fixed_train_puzzles {
        let mut rng = stream(train_config.seed, stream_id(TRAIN_STREAM, 0));
        videos
            .iter()
            .map(|v| make_sorting_example(&v.features, &model.table, &mut rng))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    for epoch in 1..=train_config.epochs {
        let started = Instant::now();
        let mut rng = stream(train_config.seed, stream_id(TRAIN_STREAM, epoch as u64));
        let mut order: Vec<usize> = (0..videos.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &i in &order {
            let ex = if seso.fixed_train_puzzles {
                fixed[i].clone()
            } else {
                make_sorting_example(&videos[i].features, &model.table, &mut rng)?
            };
            let mut tape = Tape::new();
            let lp = model.seso_log_probs(&mut tape, &ex, &mut Mode::Train(&mut rng))?;
            let loss = tape.nll_loss(lp, &[ex.target_class])?;
            loss_sum += tape.value(loss).item();
            tape.backward(loss, &mut model.store)?;
            drop(tape);
            if let Some(max) = train_config.clip_norm {
                clip_gradients(&mut model.store, max);
            }
            sgd_update(&mut model.store, lr);
        }
        let val_accuracy = if val_set.is_empty() {
            None
        } else {
            Some(model.sorting_accuracy(&val_set)?)
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / videos.len() as f64,
            val_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::debug!(
            "seso epoch {epoch}: loss {:.4} val {:?}",
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
    model.store.zero_grad();
    Ok((model, history))
}

#[cfg(test)]
mod tests;
