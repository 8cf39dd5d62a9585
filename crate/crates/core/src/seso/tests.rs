use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use super::*;
use crate::models::{ArchKind, StepModel};
use crate::numerics::{grad_check, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::training::{Init, TrainConfig};

fn random(shape: &[usize], rng: &mut SeedRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn toy(kind: ArchKind, n: usize, h: usize) -> ModelConfig {
    let mut c = ModelConfig::new(kind, n);
    c.hidden = h;
    c.dropout_rate = 0.0;
    if kind != ArchKind::Conv1d {
        c.kernel_sizes = vec![1, 3, 5];
    }
    c
}

fn sequences(count: usize, l: usize, n: usize, seed: u64) -> Vec<FeatureSequence> {
    let mut rng = seeded(seed);
    (0..count)
        .map(|i| FeatureSequence::new(format!("v{i}"), random(&[l, n], &mut rng), None, None).unwrap())
        .collect()
}

#[test]
fn table_of_one_is_identity() {
    let t = PermutationTable::build(1, 5).unwrap();
    assert_eq!(t.perms(), &[[0, 1, 2, 3, 4, 5, 6, 7, 8]]);
}

#[test]
fn second_entry_replays_the_candidate_draw() {
    for seed in 0..5 {
        let t = PermutationTable::build(2, seed).unwrap();
        let chosen = t.perm(1);
        assert_eq!(hamming(t.perm(0), chosen), 9, "not a derangement");
        // Independent replay of the 100 candidates: the pick is the first
        // one at the maximum distance from the identity.
        let mut rng = seeded(seed);
        let identity: Permutation = std::array::from_fn(|i| i);
        let candidates: Vec<Permutation> = (0..CANDIDATES)
            .map(|_| {
                let mut c = identity;
                c.shuffle(&mut rng);
                c
            })
            .collect();
        let best = candidates.iter().map(|c| hamming(&identity, c)).max().unwrap();
        let first = candidates.iter().find(|c| hamming(&identity, c) == best).unwrap();
        assert_eq!(chosen, first);
    }
}

#[test]
fn table_of_64_is_distinct_and_spread() {
    let t = PermutationTable::build(64, 0).unwrap();
    assert_eq!(t.len(), 64);
    assert_eq!(t.perm(0), &[0, 1, 2, 3, 4, 5, 6, 7, 8]);
    for p in t.perms() {
        let mut sorted = *p;
        sorted.sort_unstable();
        assert_eq!(sorted, [0, 1, 2, 3, 4, 5, 6, 7, 8]);
    }
    let mut min = usize::MAX;
    for i in 0..64 {
        for j in 0..64 {
            if i != j {
                min = min.min(hamming(t.perm(i), t.perm(j)));
            }
        }
    }
    assert!(min >= 2, "min pairwise Hamming {min}");
    assert_eq!(min, t.min_pairwise_hamming());
    assert_eq!(t, PermutationTable::build(64, 0).unwrap());
    assert_ne!(t, PermutationTable::build(64, 1).unwrap());
}

#[test]
fn impossible_table_sizes() {
    assert!(matches!(
        PermutationTable::build(MAX_PERMUTATIONS + 1, 0),
        Err(Error::ImpossiblePermutationCount { .. })
    ));
    assert!(PermutationTable::build(0, 0).is_err());
}

#[test]
fn split_examples() {
    assert_eq!(segment_lengths(9).unwrap(), [1; 9]);
    assert_eq!(segment_lengths(18).unwrap(), [2; 9]);
    assert_eq!(segment_lengths(100).unwrap(), [12, 11, 11, 11, 11, 11, 11, 11, 11]);
    assert!(matches!(
        split_nine(&Tensor::zeros(&[8, 2])),
        Err(Error::TooShort { len: 8, min: 9 })
    ));
}

#[test]
fn class_zero_keeps_original_order() {
    let x = random(&[30, 3], &mut seeded(1));
    let t = PermutationTable::build(8, 0).unwrap();
    let ex = sorting_example_for_class(&x, &t, 0).unwrap();
    assert_eq!(Tensor::concat_rows(&ex.segments).unwrap(), x);
    assert!(sorting_example_for_class(&x, &t, 8).is_err());
}

#[test]
fn puzzle_classes_are_uniform() {
    let p = 24;
    let t = PermutationTable::build(p, 0).unwrap();
    let x = Tensor::zeros(&[9, 1]);
    let mut rng = seeded(77);
    let draws = 10_000;
    let mut hist = vec![0usize; p];
    for _ in 0..draws {
        hist[make_sorting_example(&x, &t, &mut rng).unwrap().target_class] += 1;
    }
    let q = 1.0 / p as f64;
    let sigma = (draws as f64 * q * (1.0 - q)).sqrt();
    for (class, &count) in hist.iter().enumerate() {
        assert!(
            (count as f64 - draws as f64 * q).abs() <= 3.0 * sigma,
            "class {class}: {count}"
        );
    }
}

proptest! {
    #[test]
    fn split_is_a_partition(l in 9usize..300, n in 1usize..4, seed in any::<u64>()) {
        let x = random(&[l, n], &mut seeded(seed));
        let parts = split_nine(&x).unwrap();
        prop_assert_eq!(parts.len(), 9);
        prop_assert_eq!(Tensor::concat_rows(&parts).unwrap(), x);
    }

    #[test]
    fn unshuffling_reconstructs_input(l in 9usize..120, seed in any::<u64>()) {
        let x = random(&[l, 2], &mut seeded(seed));
        let t = PermutationTable::build(12, seed % 7).unwrap();
        let ex = make_sorting_example(&x, &t, &mut seeded(seed ^ 1)).unwrap();
        prop_assert_eq!(ex.segments.iter().map(Tensor::rows).sum::<usize>(), l);
        prop_assert_eq!(ex.unshuffle(&t).unwrap(), x);
    }
}

#[test]
fn log_probs_normalize_and_depend_on_order() {
    let t = PermutationTable::build(6, 0).unwrap();
    let model = SesoModel::build(&toy(ArchKind::Tsan, 4, 3), t.clone(), 2).unwrap();
    let x = random(&[40, 4], &mut seeded(3));
    let ex = sorting_example_for_class(&x, &t, 0).unwrap();
    let mut tape = Tape::new();
    let lp = model.seso_log_probs(&mut tape, &ex, &mut Mode::Eval).unwrap();
    let lp = tape.value(lp).clone();
    assert_eq!(lp.shape(), &[1, 6]);
    assert!((lp.data().iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);

    let mut swapped = ex.clone();
    swapped.segments.swap(0, 4);
    let mut tape = Tape::new();
    let lp2 = model.seso_log_probs(&mut tape, &swapped, &mut Mode::Eval).unwrap();
    assert!(tape.value(lp2).max_abs_diff(&lp) > 1e-6);
}

#[test]
fn zero_model_is_uniform_over_permutations() {
    let t = PermutationTable::build(5, 0).unwrap();
    let mut model = SesoModel::build(&toy(ArchKind::Lstm, 3, 2), t.clone(), 0).unwrap();
    for p in model.store.iter_mut() {
        p.value.data_mut().fill(0.0);
    }
    let ex = make_sorting_example(&random(&[20, 3], &mut seeded(0)), &t, &mut seeded(1)).unwrap();
    let mut tape = Tape::new();
    let lp = model.seso_log_probs(&mut tape, &ex, &mut Mode::Eval).unwrap();
    for v in tape.value(lp).data() {
        assert!((v - (1.0f64 / 5.0).ln()).abs() < 1e-15);
    }
}

#[test]
fn pointwise_backbone_summaries_ignore_time_stretch() {
    let t = PermutationTable::build(6, 0).unwrap();
    let mut cfg = toy(ArchKind::ConvEnsemble, 4, 3);
    cfg.kernel_sizes = vec![1, 1, 1];
    let model = SesoModel::build(&cfg, t.clone(), 4).unwrap();
    let ex = make_sorting_example(&random(&[31, 4], &mut seeded(5)), &t, &mut seeded(6)).unwrap();
    let stretched = SortingExample {
        segments: ex
            .segments
            .iter()
            .map(|s| {
                let rows: Vec<Vec<f64>> = (0..s.rows())
                    .flat_map(|r| [s.row(r).to_vec(), s.row(r).to_vec()])
                    .collect();
                Tensor::from_rows(&rows).unwrap()
            })
            .collect(),
        target_class: ex.target_class,
    };
    let eval = |ex: &SortingExample| {
        let mut tape = Tape::new();
        let lp = model.seso_log_probs(&mut tape, ex, &mut Mode::Eval).unwrap();
        tape.value(lp).clone()
    };
    assert!(eval(&ex).max_abs_diff(&eval(&stretched)) < 1e-12);
}

#[test]
fn seso_gradients_match_finite_differences() {
    let t = PermutationTable::build(4, 0).unwrap();
    let mut model = SesoModel::build(&toy(ArchKind::Tsan, 3, 2), t.clone(), 8).unwrap();
    let ex = make_sorting_example(&random(&[20, 3], &mut seeded(9)), &t, &mut seeded(10)).unwrap();
    let probe = model.clone();
    let report = grad_check(&mut model.store, DEFAULT_STEP, |tape, store| {
        let m = SesoModel {
            store: store.clone(),
            ..probe.clone()
        };
        let lp = m.seso_log_probs(tape, &ex, &mut Mode::Eval)?;
        tape.nll_loss(lp, &[ex.target_class])
    })
    .unwrap();
    assert!(report.passes(DEFAULT_TOLERANCE), "{report:?}");
}

fn quick_train(epochs: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: Some(lr),
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn constant_sequences_stay_at_chance() {
    let mk = |count: usize, offset: usize| -> Vec<FeatureSequence> {
        (0..count)
            .map(|i| FeatureSequence::new(format!("c{}", i + offset), Tensor::full(&[27, 3], 0.5), None, None).unwrap())
            .collect()
    };
    let seso = SesoConfig {
        permutations: 4,
        val_puzzles_per_video: 10,
        ..SesoConfig::default()
    };
    let (_, history) = pretrain_seso(
        &mk(4, 0),
        &mk(20, 100),
        &toy(ArchKind::Lstm, 3, 2),
        &quick_train(3, 0.05, 1),
        &seso,
    )
    .unwrap();
    let n = 200.0;
    let q: f64 = 0.25;
    let sigma = (q * (1.0 - q) / n).sqrt();
    for r in &history.records {
        let acc = r.val_accuracy.unwrap();
        assert!((acc - q).abs() <= 3.0 * sigma, "epoch {}: {acc}", r.epoch);
    }
}

#[test]
fn pretraining_is_deterministic_and_skips_short_sequences() {
    let mut train = sequences(3, 30, 3, 1);
    train.push(FeatureSequence::new("short", Tensor::zeros(&[5, 3]), None, None).unwrap());
    let val = sequences(2, 20, 3, 2);
    let seso = SesoConfig {
        permutations: 6,
        ..SesoConfig::default()
    };
    let cfg = toy(ArchKind::Tsan, 3, 2);
    let run = || {
        let (m, h) = pretrain_seso(&train, &val, &cfg, &quick_train(2, 0.01, 3), &seso).unwrap();
        let bytes = crate::experiments::checkpoint::Checkpoint::from_seso(&m)
            .encode()
            .unwrap();
        (
            bytes,
            h.records
                .iter()
                .map(|r| (r.train_loss, r.val_accuracy))
                .collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
    assert!(pretrain_seso(&train[3..], &val, &cfg, &quick_train(1, 0.01, 3), &seso).is_err());
}

#[test]
fn fixed_puzzle_loss_does_not_increase() {
    let train = sequences(5, 36, 3, 4);
    let val = sequences(2, 18, 3, 5);
    let seso = SesoConfig {
        permutations: 6,
        fixed_train_puzzles: true,
        ..SesoConfig::default()
    };
    let (_, history) = pretrain_seso(
        &train,
        &val,
        &toy(ArchKind::Lstm, 3, 3),
        &quick_train(8, 1e-2, 0),
        &seso,
    )
    .unwrap();
    let losses: Vec<f64> = history.records.iter().map(|r| r.train_loss).collect();
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{losses:?}");
    }
}

#[test]
fn best_validation_snapshot_is_returned() {
    let train = sequences(4, 27, 3, 6);
    let val = sequences(3, 27, 3, 7);
    let seso = SesoConfig {
        permutations: 4,
        ..SesoConfig::default()
    };
    let (model, history) = pretrain_seso(
        &train,
        &val,
        &toy(ArchKind::Tsan, 3, 2),
        &quick_train(4, 0.05, 2),
        &seso,
    )
    .unwrap();
    let puzzles = validation_puzzles(&val, &model.table, seso.val_puzzles_per_video, 2).unwrap();
    assert_eq!(
        Some(model.sorting_accuracy(&puzzles).unwrap()),
        history.best_val_accuracy()
    );
    let best = history.best_epoch.unwrap();
    let first_max = history
        .records
        .iter()
        .find(|r| r.val_accuracy == history.best_val_accuracy())
        .unwrap();
    assert_eq!(best, first_max.epoch);
}

#[test]
fn stripping_keeps_backbone_outputs() {
    let t = PermutationTable::build(4, 0).unwrap();
    let seso = SesoModel::build(&toy(ArchKind::Tsan, 3, 2), t, 1).unwrap();
    let stripped = strip_to_backbone(&seso.store).unwrap();
    assert!(stripped.iter().all(|p| !p.name.starts_with("seso_head.")));
    assert_eq!(stripped.len(), seso.store.len() - 2);
    assert!(strip_to_backbone(&stripped).is_err());

    let step = StepModel::from_pretrained(&seso.config, &stripped, 99).unwrap();
    let x = random(&[15, 3], &mut seeded(2));
    let rep = |store: &ParamStore, backbone: &Backbone| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let r = backbone
            .forward(&seso.config, store, &mut tape, xv, &mut Mode::Eval)
            .unwrap();
        tape.value(r).clone()
    };
    assert_eq!(rep(&seso.store, &seso.backbone), rep(&step.store, &step.backbone));
    let _ = Init::Pretrained(&stripped);
}
