use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tsan_lab::data::{generate_benchmark, Benchmark, BenchmarkSpec, Split};
use tsan_lab::experiments::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use tsan_lab::experiments::config::RunConfig;
use tsan_lab::experiments::harness::{
    size_sweep, table2_harness, table3_harness, HarnessConfig, RunManifest, SubsetSize,
};
use tsan_lab::experiments::metrics::{evaluate, history_rows, metrics_csv, report_rows, write_atomic, MetricRow};
use tsan_lab::keyvalue::parse_list;
use tsan_lab::models::ArchKind;
use tsan_lab::seso::{pretrain_seso, strip_to_backbone};
use tsan_lab::training::{train_step_model, Init};
use tsan_lab::{Error, Result};

#[derive(Parser)]
#[command(
    name = "tsan-lab",
    version,
    about = "Surgical step recognition on per-second feature sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain benchmark.
    GenData {
        /// Benchmark spec file; the built-in default when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sequence-sorting pretraining on one domain's train and val videos.
    PretrainSeso {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV; defaults to the checkpoint path with `.metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Train a step-recognition model.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Overrides the config's `arch`.
        #[arg(long)]
        arch: Option<ArchKind>,
        /// `random`, or a checkpoint to start from (puzzle heads are dropped).
        #[arg(long, default_value = "random")]
        init: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split of one domain.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics CSV; the confusion matrix goes next to it.
        #[arg(long)]
        report: PathBuf,
        /// Defaults to the benchmark's source domain.
        #[arg(long)]
        domain: Option<String>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Architecture grid over all target domains.
    Table2 {
        #[arg(long)]
        benchmark: PathBuf,
        /// Run seeds 0..N.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy against the number of target training videos.
    Sweep {
        #[arg(long)]
        benchmark: PathBuf,
        /// Comma-separated counts, `all` for the full split.
        #[arg(long)]
        sizes: Option<String>,
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Puzzle pretraining on the source versus on each target.
    Table3 {
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rerun an experiment from its run manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        /// Write somewhere other than the recorded output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::parse(&read_text(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn harness_config(path: Option<&Path>, seeds: Option<u64>) -> Result<HarnessConfig> {
    let mut config = match path {
        Some(p) => HarnessConfig::parse(&read_text(p)?)?,
        None => HarnessConfig::default(),
    };
    if let Some(n) = seeds {
        config.seeds = (0..n).collect();
        config.validate()?;
    }
    Ok(config)
}

fn metrics_path(explicit: Option<PathBuf>, ckpt: &Path) -> PathBuf {
    explicit.unwrap_or_else(|| ckpt.with_extension("metrics.csv"))
}

fn run_id(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
}

fn template(run_id: String, domain: &str, arch: String, init: &str, seed: u64) -> MetricRow {
    MetricRow {
        run_id,
        domain: domain.into(),
        arch,
        init: init.into(),
        seed,
        epoch: None,
        split: String::new(),
        metric: String::new(),
        value: 0.0,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out } => {
            let spec = match spec {
                Some(p) => BenchmarkSpec::parse(&read_text(&p)?)?,
                None => BenchmarkSpec::default(),
            };
            let entries = generate_benchmark(&spec, &out)?;
            log::info!("wrote {} videos to {}", entries.len(), out.display());
        }
        Command::PretrainSeso {
            data,
            config,
            out,
            metrics,
        } => {
            let rc = run_config(config.as_deref())?;
            let bench = Benchmark::load(&data)?;
            let domain = bench.domain(rc.domain.as_deref().unwrap_or(&bench.source.name))?;
            let mc = rc.model_config(bench.spec.feature_dim)?;
            let (model, history) = pretrain_seso(&domain.train, &domain.val, &mc, &rc.train, &rc.seso)?;
            save_checkpoint(&out, &Checkpoint::from_seso(&model))?;
            let t = template(run_id(&out), &domain.name, mc.label(), "random", rc.train.seed);
            write_atomic(
                &metrics_path(metrics, &out),
                &metrics_csv(&history_rows(&t, &history, "sorting_accuracy")),
            )?;
        }
        Command::Train {
            data,
            arch,
            init,
            config,
            out,
            metrics,
        } => {
            let mut rc = run_config(config.as_deref())?;
            if let Some(a) = arch {
                rc.arch = a;
            }
            let bench = Benchmark::load(&data)?;
            let domain = bench.domain(rc.domain.as_deref().unwrap_or(&bench.source.name))?;
            let mc = rc.model_config(bench.spec.feature_dim)?;
            let start = match init.as_str() {
                "random" => None,
                path => {
                    let ckpt = load_checkpoint(Path::new(path))?;
                    ckpt.expect_backbone(&mc)?;
                    Some(if ckpt.table.is_some() {
                        strip_to_backbone(&ckpt.params)?
                    } else {
                        ckpt.params
                    })
                }
            };
            let init_label = if start.is_some() { "pretrained" } else { "random" };
            let (model, history) = train_step_model(
                &domain.train,
                &domain.val,
                &mc,
                &rc.train,
                start.as_ref().map_or(Init::Random, Init::Pretrained),
            )?;
            save_checkpoint(&out, &Checkpoint::from_step(&model))?;
            let t = template(run_id(&out), &domain.name, mc.label(), init_label, rc.train.seed);
            write_atomic(
                &metrics_path(metrics, &out),
                &metrics_csv(&history_rows(&t, &history, "accuracy")),
            )?;
        }
        Command::Eval {
            ckpt,
            data,
            report,
            domain,
            split,
        } => {
            let model = load_checkpoint(&ckpt)?.step_model()?;
            let bench = Benchmark::load(&data)?;
            let domain = bench.domain(domain.as_deref().unwrap_or(&bench.source.name))?;
            let result = evaluate(&model, domain.split(split))?;
            let t = MetricRow {
                split: split.to_string(),
                ..template(run_id(&ckpt), &domain.name, model.config.label(), "checkpoint", 0)
            };
            write_atomic(&report, &metrics_csv(&report_rows(&t, &result)))?;
            write_atomic(
                &report.with_extension("confusion.csv"),
                &result.confusion.to_csv_block(),
            )?;
            println!("{} {split} accuracy {:.4}", domain.name, result.pooled_accuracy);
        }
        Command::Table2 {
            benchmark,
            seeds,
            config,
            out,
        } => {
            let hc = harness_config(config.as_deref(), seeds)?;
            table2_harness(&Benchmark::load(&benchmark)?, &hc, &out)?;
            print!("{}", read_text(&out.join("results.txt"))?);
        }
        Command::Sweep {
            benchmark,
            sizes,
            seeds,
            config,
            out,
        } => {
            let mut hc = harness_config(config.as_deref(), seeds)?;
            if let Some(s) = sizes {
                hc.sizes = parse_list::<SubsetSize>(&s).map_err(|e| Error::Config(format!("--sizes: {e}")))?;
                hc.validate()?;
            }
            size_sweep(&Benchmark::load(&benchmark)?, &hc, &out)?;
            print!("{}", read_text(&out.join("results.txt"))?);
        }
        Command::Table3 {
            benchmark,
            seeds,
            config,
            out,
        } => {
            let hc = harness_config(config.as_deref(), seeds)?;
            table3_harness(&Benchmark::load(&benchmark)?, &hc, &out)?;
            print!("{}", read_text(&out.join("results.txt"))?);
        }
        Command::Rerun { manifest, out } => {
            let mut m = RunManifest::read(&manifest)?;
            if let Some(o) = out {
                m.out = o;
            }
            m.run()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else if e.is_data_format() {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
