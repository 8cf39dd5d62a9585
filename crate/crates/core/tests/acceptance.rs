//! One PASS/FAIL line per acceptance criterion. A5–A7 run the full
//! experiments and take hours; they are ignored by default:
//!
//! ```text
//! cargo test --release --test acceptance -- --include-ignored --nocapture
//! ```
//!
//! Lines are also written to `<target tmp>/acceptance/results/`.

mod common;

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;

use rand::Rng;

use tsan_lab::data::{
    decode_sequence, encode_sequence, generate_benchmark, generate_video, Benchmark, BenchmarkSpec, FeatureSequence,
};
use tsan_lab::experiments::checkpoint::Checkpoint;
use tsan_lab::experiments::harness::{
    size_sweep, sweep_medians, table2_harness, table3_harness, GridRow, HarnessConfig, PretrainSource, SubsetSize,
};
use tsan_lab::layers::{BiLstmParams, Conv1dParams, DenseParams, LstmParams};
use tsan_lab::models::{ArchKind, ModelConfig, StepModel};
use tsan_lab::numerics::{grad_check, Direction, ParamStore, Tape, Tensor, DEFAULT_STEP, DEFAULT_TOLERANCE};
use tsan_lab::rng::{seeded, Mode, SeedRng};
use tsan_lab::seso::{make_sorting_example, pretrain_seso, split_nine, PermutationTable, SesoConfig, SesoModel};
use tsan_lab::training::{train_step_model, Init, TrainConfig, RECURRENT_LR};

fn work_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn report(id: &str, pass: bool, detail: &str) {
    let line = format!("{id} {} {detail}", if pass { "PASS" } else { "FAIL" });
    // Straight to the handle: libtest captures `println!` of passing tests.
    let _ = writeln!(std::io::stdout(), "{line}");
    let dir = work_dir().join("results");
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join(format!("{id}.txt")), format!("{line}\n")).unwrap();
    assert!(pass, "{line}");
}

/// The default benchmark, generated once per test process.
fn default_bench() -> &'static Benchmark {
    static BENCH: OnceLock<Benchmark> = OnceLock::new();
    BENCH.get_or_init(|| {
        let dir = work_dir().join("bench");
        generate_benchmark(&BenchmarkSpec::default(), &dir).unwrap();
        Benchmark::load(&dir).unwrap()
    })
}

fn random(shape: &[usize], rng: &mut SeedRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn toy_config(kind: ArchKind, n: usize, h: usize) -> ModelConfig {
    let mut c = ModelConfig::new(kind, n);
    c.hidden = h;
    c.kernel_sizes = if kind == ArchKind::Conv1d {
        vec![5]
    } else {
        vec![1, 3, 5]
    };
    c
}

#[test]
fn a1_gradient_correctness() {
    let mut rng = seeded(1);
    let (l, n, h) = (12, 4, 3);
    let x = random(&[l, n], &mut rng);
    let labels: Vec<usize> = (0..l).map(|t| t % 7).collect();
    let mut results: Vec<(&str, f64)> = Vec::new();

    // Weighted sums give every output coordinate a distinct gradient.
    let probe = |out_shape: &[usize], seed: u64| random(out_shape, &mut seeded(seed));

    let mut store = ParamStore::new();
    let conv = Conv1dParams::init(&mut store, "c", n, h, 5, &mut rng).unwrap();
    let r = probe(&[l, h], 10);
    let g = grad_check(&mut store, DEFAULT_STEP, |tape, s| {
        let xv = tape.constant(x.clone());
        let y = conv.forward(tape, s, xv)?;
        let y = tape.mul_const(y, r.clone())?;
        Ok(tape.sum(y))
    })
    .unwrap();
    results.push(("conv1d_same", g.max_rel_error));

    for dir in [Direction::Forward, Direction::Backward] {
        let mut store = ParamStore::new();
        let lstm = LstmParams::init(&mut store, "l", n, h, &mut rng).unwrap();
        let r = probe(&[l, h], 11);
        let g = grad_check(&mut store, DEFAULT_STEP, |tape, s| {
            let xv = tape.constant(x.clone());
            let y = lstm.forward(tape, s, xv, dir)?;
            let y = tape.mul_const(y, r.clone())?;
            Ok(tape.sum(y))
        })
        .unwrap();
        results.push(("lstm_forward", g.max_rel_error));
    }

    let mut store = ParamStore::new();
    let bi = BiLstmParams::init(&mut store, "b", n, h, &mut rng).unwrap();
    let r = probe(&[l, 2 * h], 12);
    let g = grad_check(&mut store, DEFAULT_STEP, |tape, s| {
        let xv = tape.constant(x.clone());
        let y = bi.apply(tape, s, xv)?;
        let y = tape.mul_const(y, r.clone())?;
        Ok(tape.sum(y))
    })
    .unwrap();
    results.push(("bilstm_forward", g.max_rel_error));

    let mut store = ParamStore::new();
    let dense = DenseParams::init(&mut store, "d", n, 7, &mut rng).unwrap();
    let r = probe(&[l, 7], 13);
    let g = grad_check(&mut store, DEFAULT_STEP, |tape, s| {
        let xv = tape.constant(x.clone());
        let y = dense.forward(tape, s, xv)?;
        let y = tape.mul_const(y, r.clone())?;
        Ok(tape.sum(y))
    })
    .unwrap();
    results.push(("dense_forward", g.max_rel_error));

    let mut store = ParamStore::new();
    let logits = store.add("logits", random(&[l, 7], &mut rng)).unwrap();
    let g = grad_check(&mut store, DEFAULT_STEP, |tape, s| {
        let z = tape.param(s, logits);
        let lp = tape.log_softmax_rows(z)?;
        tape.nll_loss(lp, &labels)
    })
    .unwrap();
    results.push(("log_softmax+nll", g.max_rel_error));

    let model = StepModel::build(&toy_config(ArchKind::Tsan, n, h), 3).unwrap();
    let mut store = model.store.clone();
    let xl = random(&[20, n], &mut rng);
    let yl: Vec<usize> = (0..20).map(|t| (t / 3) % 7).collect();
    let g = grad_check(&mut store, DEFAULT_STEP, |tape, s| {
        let m = StepModel {
            store: s.clone(),
            ..model.clone()
        };
        let xv = tape.constant(xl.clone());
        let lp = m.step_log_probs(tape, xv, &mut Mode::Eval)?;
        tape.nll_loss(lp, &yl)
    })
    .unwrap();
    results.push(("tsan_forward", g.max_rel_error));

    let table = PermutationTable::build(6, 0).unwrap();
    let seso = SesoModel::build(&toy_config(ArchKind::Tsan, n, h), table.clone(), 4).unwrap();
    let ex = make_sorting_example(&xl, &table, &mut seeded(5)).unwrap();
    let mut store = seso.store.clone();
    let g = grad_check(&mut store, DEFAULT_STEP, |tape, s| {
        let m = SesoModel {
            store: s.clone(),
            ..seso.clone()
        };
        let lp = m.seso_log_probs(tape, &ex, &mut Mode::Eval)?;
        tape.nll_loss(lp, &[ex.target_class])
    })
    .unwrap();
    results.push(("seso_log_probs", g.max_rel_error));

    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail: Vec<String> = results.iter().map(|(k, e)| format!("{k}={e:.1e}")).collect();
    report(
        "A1",
        worst <= DEFAULT_TOLERANCE,
        &format!("max rel error {worst:.2e} <= 1e-4 ({})", detail.join(" ")),
    );
}

#[test]
fn a2_shape_and_normalization_suite() {
    let mut rng = seeded(2);
    let mut failures: Vec<String> = Vec::new();
    let mut checks = 0;
    let mut check = |ok: bool, what: String| {
        checks += 1;
        if !ok {
            failures.push(what);
        }
    };

    for trial in 0..20 {
        let z = random(&[15, 7], &mut rng).map(|v| 30.0 * v);
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let lp = tape.log_softmax_rows(zv).unwrap();
        let lp = tape.value(lp);
        for r in 0..15 {
            let s: f64 = lp.row(r).iter().map(|v| v.exp()).sum();
            check((s - 1.0).abs() < 1e-12, format!("softmax row sum {s} (trial {trial})"));
        }
    }

    for k in [1, 5, 25, 39] {
        for l in [1, 7, 20, 60] {
            let mut store = ParamStore::new();
            let conv = Conv1dParams::init(&mut store, "c", 3, 4, k, &mut rng).unwrap();
            let mut tape = Tape::new();
            let xv = tape.constant(random(&[l, 3], &mut rng));
            let y = conv.forward(&mut tape, &store, xv).unwrap();
            check(tape.value(y).shape() == [l, 4], format!("conv K={k} L={l}"));
        }
    }

    for trial in 0..5 {
        let h = 4;
        let mut s1 = ParamStore::new();
        let bi = BiLstmParams::init(&mut s1, "bi", 3, h, &mut rng).unwrap();
        let mut s2 = s1.clone();
        for field in ["w_input", "w_hidden", "bias"] {
            let f = s1.by_name(&format!("bi.fwd.{field}")).unwrap().value.clone();
            let b = s1.by_name(&format!("bi.bwd.{field}")).unwrap().value.clone();
            s2.set_value(&format!("bi.fwd.{field}"), b).unwrap();
            s2.set_value(&format!("bi.bwd.{field}"), f).unwrap();
        }
        let x = random(&[13, 3], &mut rng);
        let run = |x: &Tensor, s: &ParamStore| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = bi.apply(&mut tape, s, xv).unwrap();
            tape.value(y).clone()
        };
        let y = run(&x, &s1);
        let yr = run(&x.reverse_time(), &s2).reverse_time();
        let mut err: f64 = 0.0;
        for t in 0..13 {
            let (a, b) = y.row(t).split_at(h);
            let (ra, rb) = yr.row(t).split_at(h);
            for j in 0..h {
                err = err.max((a[j] - rb[j]).abs()).max((b[j] - ra[j]).abs());
            }
        }
        check(err < 1e-12, format!("bilstm reversal error {err} (trial {trial})"));
    }

    for l in 9..80 {
        let x = random(&[l, 2], &mut rng);
        let parts = split_nine(&x).unwrap();
        let sizes: Vec<usize> = parts.iter().map(Tensor::rows).collect();
        let spread = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();
        check(
            parts.len() == 9 && spread <= 1 && Tensor::concat_rows(&parts).unwrap() == x,
            format!("split_nine L={l}"),
        );
    }

    let table = PermutationTable::build(64, 0).unwrap();
    for trial in 0..50 {
        let x = random(&[9 + trial * 3, 3], &mut rng);
        let ex = make_sorting_example(&x, &table, &mut rng).unwrap();
        check(ex.unshuffle(&table).unwrap() == x, format!("unshuffle trial {trial}"));
    }

    for trial in 0..10 {
        let l = 1 + trial * 7;
        let seq = FeatureSequence::new(
            format!("v{trial}"),
            random(&[l, 5], &mut rng).map(|v| v as f32 as f64),
            Some((0..l).map(|t| t % 7).collect()),
            Some((0..l).map(|t| t % 3 != 0).collect()),
        )
        .unwrap();
        let back = decode_sequence(&encode_sequence(&seq).unwrap(), &seq.id).unwrap();
        check(back == seq, format!("sfm round trip L={l}"));
    }

    for (i, kind) in [ArchKind::Conv1d, ArchKind::ConvEnsemble, ArchKind::Lstm, ArchKind::Tsan]
        .into_iter()
        .enumerate()
    {
        let model = StepModel::build(&toy_config(kind, 4, 3), i as u64).unwrap();
        let ck = Checkpoint::from_step(&model);
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        let bit_exact = back.params.iter().zip(model.store.iter()).all(|(a, b)| {
            a.name == b.name
                && a.value
                    .data()
                    .iter()
                    .zip(b.value.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        });
        check(back == ck && bit_exact, format!("checkpoint round trip {kind}"));
    }

    let ok = failures.is_empty();
    report(
        "A2",
        ok,
        &format!(
            "{} of {checks} shape/normalization checks hold {failures:?}",
            checks - failures.len()
        ),
    );
}

#[test]
fn a3_overfit_one_video() {
    let spec = BenchmarkSpec {
        feature_dim: 16,
        min_length: 300,
        max_length: 300,
        ..BenchmarkSpec::default()
    };
    let videos = [generate_video(&spec, &spec.emission(0).unwrap(), 0, 0).unwrap()];
    let mut config = ModelConfig::new(ArchKind::Tsan, 16);
    config.hidden = 32;
    config.dropout_rate = 0.0;
    // One video means one SGD step per epoch, 200 in total; at the default
    // recurrent rate the fit is still climbing at the end, so the sanity run
    // uses a larger step and reports the default-rate result alongside.
    let run = |lr: f64| {
        let train = TrainConfig {
            epochs: 200,
            lr: Some(lr),
            relevance_drop_prob: 0.0,
            seed: 0,
            ..TrainConfig::default()
        };
        train_step_model(&videos, &videos, &config, &train, Init::Random)
            .unwrap()
            .1
    };
    let history = run(0.1);
    let default_rate = run(RECURRENT_LR).best_val_accuracy().unwrap();
    let reached = history.epochs_to_reach(0.99);
    report(
        "A3",
        reached.is_some(),
        &format!(
            "toy TSAN (N=16, H=32), one {}-second video, lr 0.1: best training accuracy {:.4}, >= 99% at epoch {reached:?} (limit 200); lr {RECURRENT_LR} reaches {default_rate:.4}",
            videos[0].len(),
            history.best_val_accuracy().unwrap()
        ),
    );
}

#[test]
fn a4_seso_learnability() {
    let bench = default_bench();
    let harness = HarnessConfig::default();
    let mut config = ModelConfig::new(ArchKind::Tsan, bench.spec.feature_dim);
    config.hidden = harness.hidden;
    let train = TrainConfig {
        epochs: 50,
        seed: 0,
        ..TrainConfig::default()
    };
    let seso = SesoConfig {
        permutations: 24,
        ..SesoConfig::default()
    };
    let (_, history) = pretrain_seso(&bench.source.train, &bench.source.val, &config, &train, &seso).unwrap();
    let chance = 5.0 / 24.0;
    let reached = history.epochs_to_reach(chance + 1e-12);
    let best = history.best_val_accuracy().unwrap();
    report(
        "A4",
        best > chance,
        &format!("P=24 sorting val accuracy {best:.4} > 5/P = {chance:.4}; first above at epoch {reached:?} (limit 50, TSAN H={})", harness.hidden),
    );
}

/// The slow criteria only run with `--ignored`; echo what the last such run
/// recorded so every criterion has a line in a plain `cargo test`.
#[test]
fn recorded_slow_criteria() {
    for id in ["A5", "A6", "A7"] {
        let line = match fs::read_to_string(work_dir().join("results").join(format!("{id}.txt"))) {
            Ok(text) => format!("{} (recorded by the last --ignored run)", text.trim()),
            Err(_) => format!("{id} NOT RUN (ignored; run with --release -- --ignored)"),
        };
        let _ = writeln!(std::io::stdout(), "{line}");
    }
}

#[test]
#[ignore = "slow: runs the architecture grid on the default benchmark"]
fn a5_seso_transfer_benefit() {
    let bench = default_bench();
    let rows: Vec<GridRow> = ["tsan:seso:transfer", "tsan:random:transfer", "lstm_l1:random:transfer"]
        .iter()
        .map(|r| r.parse().unwrap())
        .collect();
    let config = HarnessConfig {
        rows: rows.clone(),
        ..HarnessConfig::default()
    };
    let results = table2_harness(bench, &config, &work_dir().join("table2")).unwrap();
    let avg = |r: &GridRow| results.median_avg(r).unwrap();
    let (seso, random, lstm) = (avg(&rows[0]), avg(&rows[1]), avg(&rows[2]));
    let pass = seso - random >= 0.01 && seso - lstm >= 0.01;
    report(
        "A5",
        pass,
        &format!(
            "3-seed median AVG: tsan+seso {:.2}, tsan random {:.2} (margin {:+.2}), lstm_l1 {:.2} (margin {:+.2}); need both >= +1.00",
            100.0 * seso,
            100.0 * random,
            100.0 * (seso - random),
            100.0 * lstm,
            100.0 * (seso - lstm)
        ),
    );
}

#[test]
#[ignore = "slow: runs the training-set size sweep on the default benchmark"]
fn a6_size_sweep_shape() {
    let bench = default_bench();
    let config = HarnessConfig {
        sweep_archs: vec!["tsan".into()],
        ..HarnessConfig::default()
    };
    let points = size_sweep(bench, &config, &work_dir().join("sweep")).unwrap();
    let medians = sweep_medians(&points);
    let mut pass = true;
    let mut detail = Vec::new();
    for t in &bench.targets {
        let curve: Vec<(SubsetSize, f64)> = medians
            .iter()
            .filter(|(target, _, _, _)| *target == t.name)
            .map(|(_, _, s, m)| (*s, *m))
            .collect();
        let gain = curve.last().unwrap().1 - curve[0].1;
        let monotone = curve.windows(2).all(|w| w[1].1 >= w[0].1 - 0.02);
        pass &= gain >= 0.05 && monotone;
        let shape: Vec<String> = curve.iter().map(|(s, m)| format!("{s}:{:.2}", 100.0 * m)).collect();
        detail.push(format!(
            "{} [{}] gain {:+.2} monotone={monotone}",
            t.name,
            shape.join(" "),
            100.0 * gain
        ));
    }
    report(
        "A6",
        pass,
        &format!("need gain >= +5.00 and steps >= -2.00: {}", detail.join("; ")),
    );
}

#[test]
#[ignore = "slow: runs source-vs-target puzzle pretraining on the default benchmark"]
fn a7_seso_source_versus_target() {
    let bench = default_bench();
    let config = HarnessConfig::default();
    let results = table3_harness(bench, &config, &work_dir().join("table3")).unwrap();
    let smallest = bench
        .targets
        .iter()
        .min_by_key(|d| d.train.len() + d.val.len())
        .unwrap();
    let src_epochs = results.median_epochs_to(&bench.source.name, 0.5);
    let tgt_epochs = results.median_epochs_to(&smallest.name, 0.5);
    let mut pass = src_epochs < tgt_epochs;
    let mut gaps = Vec::new();
    for t in &bench.targets {
        let gap = results.median_accuracy(&t.name, PretrainSource::Source)
            - results.median_accuracy(&t.name, PretrainSource::Target);
        pass &= gap.abs() <= 0.02;
        gaps.push(format!("{} {:+.2}", t.name, 100.0 * gap));
    }
    report(
        "A7",
        pass,
        &format!(
            "median epochs to 50% sorting accuracy: source {src_epochs}, {} {tgt_epochs}; step accuracy source-minus-target: {}",
            smallest.name,
            gaps.join(", ")
        ),
    );
}

#[test]
fn a8_cli_determinism() {
    let dir = work_dir().join("determinism");
    let _ = fs::remove_dir_all(&dir);
    let first = common::run_all_commands(&dir.join("a"));
    let second = common::run_all_commands(&dir.join("b"));
    let csvs = first
        .iter()
        .filter(|f| f.extension().is_some_and(|e| e == "csv"))
        .count();
    let diff = common::differing(&dir.join("a"), &dir.join("b"), &first);
    report(
        "A8",
        first == second && diff.is_empty() && csvs > 0,
        &format!(
            "{} output files ({csvs} CSV) from every command, {} differ between reruns",
            first.len(),
            diff.len()
        ),
    );
}
