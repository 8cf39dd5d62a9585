//! The three benchmark experiments: the architecture grid, the training-set
//! size sweep and the source-versus-target puzzle pretraining study.
//!
//! Every experiment is a few stages of independent cells (architecture ×
//! domain × seed). Cells of a stage run on a rayon pool capped by
//! `TSAN_LAB_THREADS`; each writes its metrics atomically under `cells/` and
//! the driver merges them in job order, so outputs do not depend on
//! scheduling.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::metrics::{evaluate, history_rows, metrics_csv, report_rows, write_atomic, ConfusionMatrix, MetricRow};
use crate::data::{Benchmark, FeatureSequence, Split};
use crate::error::{Error, Result};
use crate::keyvalue::{format_list, KeyValues};
use crate::models::{ArchKind, ModelConfig, NUM_STEPS};
use crate::numerics::ParamStore;
use crate::rng::{stream, stream_id};
use crate::seso::{pretrain_seso, strip_to_backbone, SesoConfig, DESK_PERMUTATIONS};
use crate::training::{train_step_model, History, Init, TrainConfig};


pub const THREADS_ENV: &str = "TSAN_LAB_THREADS";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PATHS_FILE: &str = "paths.tsv";

const SUBSET_STREAM: u64 = 0x5b5;

/// Builds a model config from a row label such as `conv1d_k25`,
/// `conv_ensemble`, `lstm_l2` or `tsan`. Convolution channels equal `hidden`.
pub fn arch_config(label: &str, input_dim: usize, hidden: usize, dropout: f64) -> Result<ModelConfig> {
    let bad = || Error::Config(format!("unknown architecture {label:?}"));
    let mut c = if let Some(k) = label.strip_prefix("conv1d_k") {
        let mut c = ModelConfig::new(ArchKind::Conv1d, input_dim);
        c.kernel_sizes = vec![k.parse().map_err(|_| bad())?];
        c
    } else if let Some(l) = label.strip_prefix("lstm_l") {
        let mut c = ModelConfig::new(ArchKind::Lstm, input_dim);
        c.lstm_layers = l.parse().map_err(|_| bad())?;
        c
    } else {
        match label {
            "conv_ensemble" => ModelConfig::new(ArchKind::ConvEnsemble, input_dim),
            "tsan" => ModelConfig::new(ArchKind::Tsan, input_dim),
            _ => return Err(bad()),
        }
    };
    c.hidden = hidden;
    c.num_classes = NUM_STEPS;
    c.dropout_rate = dropout;
    c.validate()?;
    if c.label() != label {
        return Err(bad());
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InitKind {
    Random,
    /// Backbone from sequence-sorting pretraining.
    Seso,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Protocol {
    /// Train on the target alone. Puzzle pretraining, if any, also uses only
    /// the target's videos.
    Baseline,
    /// Train on the source domain's step labels, then finetune every
    /// parameter on the target.
    Transfer,
}

/// One line of the architecture grid, written `arch:init:protocol`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GridRow {
    pub arch: String,
    pub init: InitKind,
    pub protocol: Protocol,
}

impl GridRow {
    pub fn new(arch: &str, init: InitKind, protocol: Protocol) -> Self {
        Self {
            arch: arch.into(),
            init,
            protocol,
        }
    }

    fn init_str(&self) -> &'static str {
        match self.init {
            InitKind::Random => "random",
            InitKind::Seso => "seso",
        }
    }
}

impl fmt::Display for GridRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let protocol = match self.protocol {
            Protocol::Baseline => "baseline",
            Protocol::Transfer => "transfer",
        };
        write!(f, "{}:{}:{protocol}", self.arch, self.init_str())
    }
}

impl FromStr for GridRow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("grid rows are arch:init:protocol, got {s:?}"));
        let mut parts = s.split(':');
        let (Some(arch), Some(init), Some(protocol), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        let init = match init {
            "random" => InitKind::Random,
            "seso" => InitKind::Seso,
            _ => return Err(bad()),
        };
        let protocol = match protocol {
            "baseline" => Protocol::Baseline,
            "transfer" => Protocol::Transfer,
            _ => return Err(bad()),
        };
        arch_config(arch, 1, 1, 0.0)?;
        Ok(Self::new(arch, init, protocol))
    }
}

/// The default grid: a target-only LSTM, the convolutional baselines, and
/// the recurrent models with and without puzzle pretraining.
pub fn default_grid() -> Vec<GridRow> {
    use InitKind::*;
    use Protocol::*;
    vec![
        GridRow::new("lstm_l1", Random, Baseline),
        GridRow::new("conv1d_k5", Random, Transfer),
        GridRow::new("conv1d_k25", Random, Transfer),
        GridRow::new("conv1d_k39", Random, Transfer),
        GridRow::new("conv_ensemble", Random, Transfer),
        GridRow::new("lstm_l1", Random, Transfer),
        GridRow::new("lstm_l1", Seso, Transfer),
        GridRow::new("lstm_l2", Random, Transfer),
        GridRow::new("lstm_l2", Seso, Transfer),
        GridRow::new("tsan", Random, Transfer),
        GridRow::new("tsan", Seso, Transfer),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SubsetSize {
    Count(usize),
    All,
}

impl fmt::Display for SubsetSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Count(n) => write!(f, "{n}"),
            Self::All => f.write_str("all"),
        }
    }
}

impl FromStr for SubsetSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            _ => match s.parse() {
                Ok(0) | Err(_) => Err(Error::Config(format!(
                    "subset sizes are positive counts or `all`, got {s:?}"
                ))),
                Ok(n) => Ok(Self::Count(n)),
            },
        }
    }
}

/// Video indices for each requested size. One seeded shuffle orders the
/// `available` videos and every subset is a prefix of it, so each subset
/// extends the previous one. With `clamp`, counts above `available` become
/// the full set; otherwise they are an error.
pub fn nested_subsets(available: usize, sizes: &[SubsetSize], seed: u64, clamp: bool) -> Result<Vec<Vec<usize>>> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "subset sizes must be strictly ascending, got {}",
            format_list(sizes)
        )));
    }
    let mut order: Vec<usize> = (0..available).collect();
    order.shuffle(&mut stream(seed, stream_id(SUBSET_STREAM, 0)));
    sizes
        .iter()
        .map(|&s| {
            let n = match s {
                SubsetSize::All => available,
                SubsetSize::Count(n) if n <= available => n,
                SubsetSize::Count(_) if clamp => available,
                SubsetSize::Count(n) => {
                    return Err(Error::Config(format!(
                        "subset size {n} exceeds the {available} training videos"
                    )))
                }
            };
            Ok(order[..n].to_vec())
        })
        .collect()
}

/// Median of a non-empty slice; the mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Scale knobs shared by all experiments.
#[derive(Clone, Debug, PartialEq)]
pub struct HarnessConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub seso_epochs: usize,
    pub permutations: usize,
    pub table_seed: u64,
    pub val_puzzles_per_video: usize,
    pub seeds: Vec<u64>,
    pub lr: Option<f64>,
    pub clip_norm: Option<f64>,
    pub dropout: f64,
    pub relevance_drop_prob: f64,
    pub rows: Vec<GridRow>,
    pub sizes: Vec<SubsetSize>,
    pub clamp_sizes: bool,
    pub sweep_archs: Vec<String>,
    pub table3_arch: String,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            epochs: 30,
            seso_epochs: 30,
            permutations: DESK_PERMUTATIONS,
            table_seed: 0,
            val_puzzles_per_video: 4,
            seeds: vec![0, 1, 2],
            lr: None,
            clip_norm: None,
            dropout: 0.5,
            relevance_drop_prob: 0.5,
            rows: default_grid(),
            sizes: vec![
                SubsetSize::Count(5),
                SubsetSize::Count(10),
                SubsetSize::Count(50),
                SubsetSize::All,
            ],
            clamp_sizes: true,
            sweep_archs: vec!["lstm_l1".into(), "tsan".into()],
            table3_arch: "tsan".into(),
        }
    }
}

impl HarnessConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let c = Self::take(&mut kv)?;
        kv.finish()?;
        Ok(c)
    }

    /// Takes every harness key present in `kv`, defaulting the rest.
    pub fn take(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            hidden: kv.take_or("hidden", d.hidden)?,
            epochs: kv.take_or("epochs", d.epochs)?,
            seso_epochs: kv.take_or("seso_epochs", d.seso_epochs)?,
            permutations: kv.take_or("permutations", d.permutations)?,
            table_seed: kv.take_or("table_seed", d.table_seed)?,
            val_puzzles_per_video: kv.take_or("val_puzzles_per_video", d.val_puzzles_per_video)?,
            seeds: kv.take_list("seeds")?.unwrap_or(d.seeds),
            lr: kv.take("lr")?,
            clip_norm: kv.take("clip_norm")?,
            dropout: kv.take_or("dropout", d.dropout)?,
            relevance_drop_prob: kv.take_or("relevance_drop_prob", d.relevance_drop_prob)?,
            rows: kv.take_list("rows")?.unwrap_or(d.rows),
            sizes: kv.take_list("sizes")?.unwrap_or(d.sizes),
            clamp_sizes: kv.take_or("clamp_sizes", d.clamp_sizes)?,
            sweep_archs: kv.take_list("sweep_archs")?.unwrap_or(d.sweep_archs),
            table3_arch: kv.take_or("table3_arch", d.table3_arch)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let nonempty = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must not be empty")))
            }
        };
        nonempty(!self.seeds.is_empty(), "seeds")?;
        nonempty(!self.rows.is_empty(), "rows")?;
        nonempty(!self.sizes.is_empty(), "sizes")?;
        nonempty(!self.sweep_archs.is_empty(), "sweep_archs")?;
        let mut seen = std::collections::BTreeSet::new();
        if !self.seeds.iter().all(|s| seen.insert(*s)) {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(row) = self.rows.iter().find(|r| !seen.insert(*r)) {
            return Err(Error::Config(format!("grid row {row} appears twice")));
        }
        for arch in self.sweep_archs.iter().chain([&self.table3_arch]) {
            arch_config(arch, 1, self.hidden, self.dropout)?;
        }
        for row in &self.rows {
            arch_config(&row.arch, 1, self.hidden, self.dropout)?;
        }
        nested_subsets(0, &self.sizes, 0, true)?;
        self.train_config(0, self.epochs).validate()?;
        self.train_config(0, self.seso_epochs).validate()?;
        crate::seso::PermutationTable::build(self.permutations, self.table_seed).map(|_| ())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "hidden = {}", self.hidden);
        let _ = writeln!(out, "epochs = {}", self.epochs);
        let _ = writeln!(out, "seso_epochs = {}", self.seso_epochs);
        let _ = writeln!(out, "permutations = {}", self.permutations);
        let _ = writeln!(out, "table_seed = {}", self.table_seed);
        let _ = writeln!(out, "val_puzzles_per_video = {}", self.val_puzzles_per_video);
        let _ = writeln!(out, "seeds = {}", format_list(&self.seeds));
        if let Some(lr) = self.lr {
            let _ = writeln!(out, "lr = {lr}");
        }
        if let Some(c) = self.clip_norm {
            let _ = writeln!(out, "clip_norm = {c}");
        }
        let _ = writeln!(out, "dropout = {}", self.dropout);
        let _ = writeln!(out, "relevance_drop_prob = {}", self.relevance_drop_prob);
        let _ = writeln!(out, "rows = {}", format_list(&self.rows));
        let _ = writeln!(out, "sizes = {}", format_list(&self.sizes));
        let _ = writeln!(out, "clamp_sizes = {}", self.clamp_sizes);
        let _ = writeln!(out, "sweep_archs = {}", format_list(&self.sweep_archs));
        let _ = writeln!(out, "table3_arch = {}", self.table3_arch);
        out
    }

    fn train_config(&self, seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            lr: self.lr,
            relevance_drop_prob: self.relevance_drop_prob,
            seed,
            select_best_on_val: true,
            clip_norm: self.clip_norm,
        }
    }

    fn seso_config(&self) -> SesoConfig {
        SesoConfig {
            permutations: self.permutations,
            table_seed: self.table_seed,
            val_puzzles_per_video: self.val_puzzles_per_video,
            fixed_train_puzzles: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    Table2,
    Sweep,
    Table3,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Table2 => "table2",
            Self::Sweep => "sweep",
            Self::Table3 => "table3",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table2" => Ok(Self::Table2),
            "sweep" => Ok(Self::Sweep),
            "table3" => Ok(Self::Table3),
            _ => Err(Error::Config(format!("unknown experiment {s:?}"))),
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything needed to rerun an experiment. Seeds live in `config`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub kind: ExperimentKind,
    pub benchmark: PathBuf,
    pub out: PathBuf,
    pub config: HarnessConfig,
}

impl RunManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let missing = |key: &str| Error::Config(format!("run manifest lacks {key:?}"));
        let kind: String = kv.take("kind")?.ok_or_else(|| missing("kind"))?;
        let benchmark: String = kv.take("benchmark")?.ok_or_else(|| missing("benchmark"))?;
        let out: String = kv.take("out")?.ok_or_else(|| missing("out"))?;
        let config = HarnessConfig::take(&mut kv)?;
        kv.finish()?;
        Ok(Self {
            kind: kind.parse()?,
            benchmark: benchmark.into(),
            out: out.into(),
            config,
        })
    }

    pub fn to_text(&self) -> String {
        format!(
            "kind = {}\nbenchmark = {}\nout = {}\n{}",
            self.kind,
            self.benchmark.display(),
            self.out.display(),
            self.config.to_text()
        )
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Loads the benchmark and runs the experiment into `self.out`.
    pub fn run(&self) -> Result<()> {
        let bench = Benchmark::load(&self.benchmark)?;
        match self.kind {
            ExperimentKind::Table2 => table2_harness(&bench, &self.config, &self.out).map(|_| ()),
            ExperimentKind::Sweep => size_sweep(&bench, &self.config, &self.out).map(|_| ()),
            ExperimentKind::Table3 => table3_harness(&bench, &self.config, &self.out).map(|_| ()),
        }
    }
}

/// A rayon pool with `TSAN_LAB_THREADS` workers, or one per core.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                return Err(Error::Config(format!(
                    "{THREADS_ENV} must be a positive integer, got {v:?}"
                )))
            }
        },
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} workers: {e}")))
}

/// Metrics of one cell plus the data files it (and everything upstream of
/// it) read.
#[derive(Clone, Debug, Default)]
struct Cell {
    run_id: String,
    rows: Vec<MetricRow>,
    confusion: Option<ConfusionMatrix>,
    paths: Vec<String>,
}

/// Trained parameters handed to a later stage, with their data lineage.
#[derive(Clone, Debug)]
struct Upstream {
    params: ParamStore,
    paths: Vec<String>,
}

struct Runner<'a> {
    bench: &'a Benchmark,
    config: &'a HarnessConfig,
    pool: rayon::ThreadPool,
    out: PathBuf,
    cells: Vec<Cell>,
}

fn merge_paths(parts: &[&[String]]) -> Vec<String> {
    let mut all: Vec<String> = parts.iter().flat_map(|p| p.iter().cloned()).collect();
    all.sort();
    all.dedup();
    all
}

impl<'a> Runner<'a> {
    fn new(bench: &'a Benchmark, config: &'a HarnessConfig, out: &Path, kind: ExperimentKind) -> Result<Self> {
        config.validate()?;
        let manifest = RunManifest {
            kind,
            benchmark: bench.root.clone(),
            out: out.to_path_buf(),
            config: config.clone(),
        };
        write_atomic(&out.join(RUN_MANIFEST_FILE), &manifest.to_text())?;
        Ok(Self {
            bench,
            config,
            pool: worker_pool()?,
            out: out.to_path_buf(),
            cells: Vec::new(),
        })
    }

    fn model_config(&self, arch: &str) -> Result<ModelConfig> {
        arch_config(
            arch,
            self.bench.spec.feature_dim,
            self.config.hidden,
            self.config.dropout,
        )
    }

    fn paths(&self, domain: &str, splits: &[Split]) -> Vec<String> {
        self.bench
            .manifest
            .iter()
            .filter(|e| e.domain == domain && splits.contains(&e.split))
            .map(|e| e.path.clone())
            .collect()
    }

    fn template(&self, run_id: &str, domain: &str, arch: &str, init: &str, seed: u64) -> MetricRow {
        MetricRow {
            run_id: run_id.into(),
            domain: domain.into(),
            arch: arch.into(),
            init: init.into(),
            seed,
            epoch: None,
            split: String::new(),
            metric: String::new(),
            value: 0.0,
        }
    }

    /// Runs `f` over `jobs` on the pool, persisting each cell as it finishes.
    fn stage<J, R, F>(&mut self, jobs: &[J], f: F) -> Result<Vec<R>>
    where
        J: Sync,
        R: Send,
        F: Fn(&Self, &J) -> Result<(R, Cell)> + Sync,
    {
        let this = &*self;
        let results: Vec<(R, Cell)> = this.pool.install(|| {
            jobs.par_iter()
                .map(|job| {
                    let (r, cell) = f(this, job)?;
                    this.persist(&cell)?;
                    log::info!("finished {}", cell.run_id);
                    Ok((r, cell))
                })
                .collect::<Result<_>>()
        })?;
        let mut out = Vec::with_capacity(results.len());
        for (r, cell) in results {
            self.cells.push(cell);
            out.push(r);
        }
        Ok(out)
    }

    fn persist(&self, cell: &Cell) -> Result<()> {
        write_atomic(
            &self.out.join("cells").join(format!("{}.csv", cell.run_id)),
            &metrics_csv(&cell.rows),
        )?;
        if let Some(c) = &cell.confusion {
            write_atomic(
                &self.out.join("confusion").join(format!("{}.csv", cell.run_id)),
                &c.to_csv_block(),
            )?;
        }
        Ok(())
    }

    /// Merged metrics and data-lineage files, in job order.
    fn finish(&self) -> Result<()> {
        let rows: Vec<MetricRow> = self.cells.iter().flat_map(|c| c.rows.iter().cloned()).collect();
        write_atomic(&self.out.join(METRICS_FILE), &metrics_csv(&rows))?;
        let mut paths = String::from("run_id\tpath\n");
        for c in &self.cells {
            for p in &c.paths {
                let _ = writeln!(paths, "{}\t{p}", c.run_id);
            }
        }
        write_atomic(&self.out.join(PATHS_FILE), &paths)
    }

    /// Puzzle pretraining of `arch` on `domain`'s train and val videos.
    fn pretrain(&self, job: &SesoJob) -> Result<((Upstream, History), Cell)> {
        let domain = self.bench.domain(&job.domain)?;
        let cfg = self.model_config(&job.arch)?;
        let train = self.config.train_config(job.seed, self.config.seso_epochs);
        let (model, history) = pretrain_seso(&domain.train, &domain.val, &cfg, &train, &self.config.seso_config())?;
        let run_id = format!("seso-{}-{}-s{}", job.arch, job.domain, job.seed);
        let template = self.template(&run_id, &job.domain, &job.arch, "random", job.seed);
        let paths = self.paths(&job.domain, &[Split::Train, Split::Val]);
        let upstream = Upstream {
            params: strip_to_backbone(&model.store)?,
            paths: paths.clone(),
        };
        let cell = Cell {
            rows: history_rows(&template, &history, "sorting_accuracy"),
            run_id,
            confusion: None,
            paths,
        };
        Ok(((upstream, history), cell))
    }

    /// Step training on `train` with `val` for model selection, then a test
    /// evaluation if `test` is given.
    #[allow(clippy::too_many_arguments)]
    fn train_cell(
        &self,
        run_id: String,
        domain: &str,
        arch: &str,
        init_label: &str,
        seed: u64,
        train: &[FeatureSequence],
        val: &[FeatureSequence],
        test: Option<&[FeatureSequence]>,
        init: Option<&Upstream>,
        own_paths: Vec<String>,
    ) -> Result<(Upstream, Cell)> {
        let cfg = self.model_config(arch)?;
        let tc = self.config.train_config(seed, self.config.epochs);
        let (model, history) = train_step_model(
            train,
            val,
            &cfg,
            &tc,
            init.map_or(Init::Random, |u| Init::Pretrained(&u.params)),
        )?;
        let template = self.template(&run_id, domain, arch, init_label, seed);
        let mut rows = history_rows(&template, &history, "accuracy");
        let mut confusion = None;
        if let Some(test) = test {
            let report = evaluate(&model, test)?;
            let test_template = MetricRow {
                split: "test".into(),
                ..template
            };
            rows.extend(report_rows(&test_template, &report));
            confusion = Some(report.confusion);
        }
        let paths = merge_paths(&[&own_paths, init.map_or(&[][..], |u| &u.paths[..])]);
        let upstream = Upstream {
            params: model.store,
            paths: paths.clone(),
        };
        Ok((
            upstream,
            Cell {
                run_id,
                rows,
                confusion,
                paths,
            },
        ))
    }

    /// Source-domain step training; the source test split is not touched.
    fn source_train(
        &self,
        arch: &str,
        init_label: &str,
        seed: u64,
        init: Option<&Upstream>,
        tag: &str,
    ) -> Result<(Upstream, Cell)> {
        let src = &self.bench.source;
        self.train_cell(
            format!("src-{arch}-{tag}-s{seed}"),
            &src.name,
            arch,
            init_label,
            seed,
            &src.train,
            &src.val,
            None,
            init,
            self.paths(&src.name, &[Split::Train, Split::Val]),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct SesoJob {
    arch: String,
    domain: String,
    seed: u64,
}

fn accuracy_of(cell: &Cell) -> f64 {
    cell.rows
        .iter()
        .find(|r| r.split == "test" && r.metric == "accuracy")
        .map_or(f64::NAN, |r| r.value)
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Left-aligned first column, right-aligned numbers.
fn aligned(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let width: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for line in std::iter::once(header).chain(rows.iter().map(Vec::as_slice)) {
        for (c, cell) in line.iter().enumerate() {
            if c == 0 {
                let _ = write!(out, "{cell:<w$}", w = width[c]);
            } else {
                let _ = write!(out, "  {cell:>w$}", w = width[c]);
            }
        }
        out.push('\n');
    }
    out
}

fn csv(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out += &r.join(",");
        out.push('\n');
    }
    out
}

/// Accuracy of one grid row for one seed on every target, plus their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct Table2Entry {
    pub row: GridRow,
    pub seed: u64,
    /// In benchmark target order.
    pub accuracies: Vec<f64>,
    pub avg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table2Results {
    pub targets: Vec<String>,
    pub entries: Vec<Table2Entry>,
}

impl Table2Results {
    /// Per row: median accuracy over seeds on each target, and the median
    /// over seeds of the per-seed average.
    pub fn medians(&self) -> Vec<(GridRow, Vec<f64>, f64)> {
        let mut rows: Vec<GridRow> = Vec::new();
        for e in &self.entries {
            if !rows.contains(&e.row) {
                rows.push(e.row.clone());
            }
        }
        rows.into_iter()
            .map(|row| {
                let entries: Vec<&Table2Entry> = self.entries.iter().filter(|e| e.row == row).collect();
                let per_target = (0..self.targets.len())
                    .map(|t| median(&entries.iter().map(|e| e.accuracies[t]).collect::<Vec<_>>()))
                    .collect();
                let avg = median(&entries.iter().map(|e| e.avg).collect::<Vec<_>>());
                (row, per_target, avg)
            })
            .collect()
    }

    pub fn median_avg(&self, row: &GridRow) -> Option<f64> {
        self.medians()
            .into_iter()
            .find(|(r, _, _)| r == row)
            .map(|(_, _, avg)| avg)
    }

    fn write(&self, out: &Path) -> Result<()> {
        let mut header = vec!["row".to_string(), "seed".into()];
        header.extend(self.targets.iter().cloned());
        header.push("avg".into());
        let per_seed: Vec<Vec<String>> = self
            .entries
            .iter()
            .map(|e| {
                let mut r = vec![e.row.to_string(), e.seed.to_string()];
                r.extend(e.accuracies.iter().map(f64::to_string));
                r.push(e.avg.to_string());
                r
            })
            .collect();
        write_atomic(&out.join("results.csv"), &csv(&header, &per_seed))?;

        let medians = self.medians();
        let mut header = vec!["row".to_string()];
        header.extend(self.targets.iter().cloned());
        header.push("avg".into());
        let raw: Vec<Vec<String>> = medians
            .iter()
            .map(|(row, acc, avg)| {
                let mut r = vec![row.to_string()];
                r.extend(acc.iter().map(f64::to_string));
                r.push(avg.to_string());
                r
            })
            .collect();
        write_atomic(&out.join("summary.csv"), &csv(&header, &raw))?;
        let text: Vec<Vec<String>> = medians
            .iter()
            .map(|(row, acc, avg)| {
                let mut r = vec![row.to_string()];
                r.extend(acc.iter().map(|&a| pct(a)));
                r.push(pct(*avg));
                r
            })
            .collect();
        write_atomic(&out.join("results.txt"), &aligned(&header, &text))
    }
}

/// Runs every grid row for every seed and target. Transfer rows train on
/// the source's step labels first and then finetune on the target; puzzle
/// pretraining for transfer rows uses the source, for baseline rows the
/// target. Every cell is evaluated on the target's test split.
pub fn table2_harness(bench: &Benchmark, config: &HarnessConfig, out: &Path) -> Result<Table2Results> {
    let mut runner = Runner::new(bench, config, out, ExperimentKind::Table2)?;
    let source = bench.source.name.clone();
    let targets: Vec<String> = bench.targets.iter().map(|d| d.name.clone()).collect();

    let seso_domain = |row: &GridRow, target: &str| match row.protocol {
        Protocol::Transfer => source.clone(),
        Protocol::Baseline => target.to_string(),
    };
    let mut seso_jobs = Vec::new();
    for row in config.rows.iter().filter(|r| r.init == InitKind::Seso) {
        for &seed in &config.seeds {
            for t in &targets {
                let job = SesoJob {
                    arch: row.arch.clone(),
                    domain: seso_domain(row, t),
                    seed,
                };
                if !seso_jobs.contains(&job) {
                    seso_jobs.push(job);
                }
            }
        }
    }
    let pretrained: BTreeMap<SesoJob, Upstream> = seso_jobs
        .iter()
        .cloned()
        .zip(
            runner
                .stage(&seso_jobs, |r, job| r.pretrain(job))?
                .into_iter()
                .map(|(u, _)| u),
        )
        .collect();

    let source_jobs: Vec<(GridRow, u64)> = config
        .rows
        .iter()
        .filter(|r| r.protocol == Protocol::Transfer)
        .flat_map(|r| config.seeds.iter().map(move |&s| (r.clone(), s)))
        .collect();
    let source_trained: BTreeMap<(GridRow, u64), Upstream> = source_jobs
        .iter()
        .cloned()
        .zip(runner.stage(&source_jobs, |r, (row, seed)| {
            let init = (row.init == InitKind::Seso).then(|| {
                &pretrained[&SesoJob {
                    arch: row.arch.clone(),
                    domain: source.clone(),
                    seed: *seed,
                }]
            });
            r.source_train(&row.arch, row.init_str(), *seed, init, row.init_str())
        })?)
        .collect();

    let target_jobs: Vec<(GridRow, u64, String)> = config
        .rows
        .iter()
        .flat_map(|r| {
            let targets = &targets;
            config
                .seeds
                .iter()
                .flat_map(move |&s| targets.iter().map(move |t| (r.clone(), s, t.clone())))
        })
        .collect();
    let cells = runner.stage(&target_jobs, |r, (row, seed, target)| {
        let domain = r.bench.domain(target)?;
        let init = match (row.protocol, row.init) {
            (Protocol::Transfer, _) => Some(&source_trained[&(row.clone(), *seed)]),
            (Protocol::Baseline, InitKind::Seso) => Some(
                &pretrained[&SesoJob {
                    arch: row.arch.clone(),
                    domain: target.clone(),
                    seed: *seed,
                }],
            ),
            (Protocol::Baseline, InitKind::Random) => None,
        };
        let protocol = match row.protocol {
            Protocol::Baseline => "baseline",
            Protocol::Transfer => "transfer",
        };
        let (_, cell) = r.train_cell(
            format!("t2-{}-{}-{protocol}-{target}-s{seed}", row.arch, row.init_str()),
            target,
            &row.arch,
            row.init_str(),
            *seed,
            &domain.train,
            &domain.val,
            Some(&domain.test),
            init,
            r.paths(target, &Split::ALL),
        )?;
        Ok((cell.clone(), cell))
    })?;
    runner.finish()?;

    let mut entries = Vec::new();
    let mut it = cells.iter();
    for row in &config.rows {
        for &seed in &config.seeds {
            let accuracies: Vec<f64> = targets
                .iter()
                .map(|_| accuracy_of(it.next().expect("one cell per job")))
                .collect();
            let avg = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
            entries.push(Table2Entry {
                row: row.clone(),
                seed,
                accuracies,
                avg,
            });
        }
    }
    let results = Table2Results { targets, entries };
    results.write(out)?;
    Ok(results)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub target: String,
    pub arch: String,
    pub seed: u64,
    pub size: SubsetSize,
    /// Videos actually used after clamping.
    pub videos: usize,
    pub accuracy: f64,
}

/// Per (target, arch, size): the median accuracy over seeds, in sweep order.
pub fn sweep_medians(points: &[SweepPoint]) -> Vec<(String, String, SubsetSize, f64)> {
    let mut keys: Vec<(String, String, SubsetSize)> = Vec::new();
    for p in points {
        let k = (p.target.clone(), p.arch.clone(), p.size);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(t, a, s)| {
            let acc: Vec<f64> = points
                .iter()
                .filter(|p| p.target == t && p.arch == a && p.size == s)
                .map(|p| p.accuracy)
                .collect();
            let m = median(&acc);
            (t, a, s, m)
        })
        .collect()
}

/// Puzzle pretraining on the source, source step training, then finetuning
/// on nested subsets of each target's training videos. Validation and test
/// splits stay fixed across sizes.
pub fn size_sweep(bench: &Benchmark, config: &HarnessConfig, out: &Path) -> Result<Vec<SweepPoint>> {
    let mut runner = Runner::new(bench, config, out, ExperimentKind::Sweep)?;
    let source = bench.source.name.clone();

    // Checked up front so a bad size fails before any training.
    let mut subsets = BTreeMap::new();
    for d in &bench.targets {
        for &seed in &config.seeds {
            subsets.insert(
                (d.name.clone(), seed),
                nested_subsets(d.train.len(), &config.sizes, seed, config.clamp_sizes)?,
            );
        }
    }

    let seso_jobs: Vec<SesoJob> = config
        .sweep_archs
        .iter()
        .flat_map(|a| {
            config.seeds.iter().map(|&seed| SesoJob {
                arch: a.clone(),
                domain: source.clone(),
                seed,
            })
        })
        .collect();
    let pretrained: Vec<(Upstream, History)> = runner.stage(&seso_jobs, |r, job| r.pretrain(job))?;
    let indices: Vec<usize> = (0..seso_jobs.len()).collect();
    let source_trained = runner.stage(&indices, |r, &i| {
        let job = &seso_jobs[i];
        r.source_train(&job.arch, "seso", job.seed, Some(&pretrained[i].0), "seso")
    })?;

    let mut jobs = Vec::new();
    for d in &bench.targets {
        for i in 0..seso_jobs.len() {
            for (s, &size) in config.sizes.iter().enumerate() {
                jobs.push((d.name.clone(), i, s, size));
            }
        }
    }
    let points = runner.stage(&jobs, |r, (target, i, s, size)| {
        let job = &seso_jobs[*i];
        let domain = r.bench.domain(target)?;
        let subset = &subsets[&(target.clone(), job.seed)][*s];
        let train: Vec<FeatureSequence> = subset.iter().map(|&v| domain.train[v].clone()).collect();
        let own_paths: Vec<String> = {
            let mut p: Vec<String> = train
                .iter()
                .map(|seq| {
                    r.bench
                        .manifest
                        .iter()
                        .find(|e| e.id == seq.id)
                        .map(|e| e.path.clone())
                        .unwrap_or_default()
                })
                .collect();
            p.extend(r.paths(target, &[Split::Val, Split::Test]));
            p
        };
        let (_, cell) = r.train_cell(
            format!("sweep-{}-{target}-n{size}-s{}", job.arch, job.seed),
            target,
            &job.arch,
            "seso",
            job.seed,
            &train,
            &domain.val,
            Some(&domain.test),
            Some(&source_trained[*i]),
            own_paths,
        )?;
        let point = SweepPoint {
            target: target.clone(),
            arch: job.arch.clone(),
            seed: job.seed,
            size: *size,
            videos: train.len(),
            accuracy: accuracy_of(&cell),
        };
        Ok((point, cell))
    })?;
    runner.finish()?;

    let header: Vec<String> = ["target", "arch", "seed", "size", "videos", "accuracy"]
        .map(String::from)
        .to_vec();
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![
                p.target.clone(),
                p.arch.clone(),
                p.seed.to_string(),
                p.size.to_string(),
                p.videos.to_string(),
                p.accuracy.to_string(),
            ]
        })
        .collect();
    write_atomic(&out.join("sweep.csv"), &csv(&header, &rows))?;
    let medians = sweep_medians(&points);
    let header: Vec<String> = ["target", "arch", "size", "accuracy"].map(String::from).to_vec();
    let raw: Vec<Vec<String>> = medians
        .iter()
        .map(|(t, a, s, m)| vec![t.clone(), a.clone(), s.to_string(), m.to_string()])
        .collect();
    write_atomic(&out.join("summary.csv"), &csv(&header, &raw))?;
    let text: Vec<Vec<String>> = medians
        .iter()
        .map(|(t, a, s, m)| vec![t.clone(), a.clone(), s.to_string(), pct(*m)])
        .collect();
    write_atomic(&out.join("results.txt"), &aligned(&header, &text))?;
    Ok(points)
}

/// Where the puzzle pretraining of a table-3 variant drew its videos from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PretrainSource {
    Source,
    Target,
}

impl PretrainSource {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Source => "source",
            Self::Target => "target",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table3Entry {
    pub target: String,
    pub variant: PretrainSource,
    pub seed: u64,
    pub accuracy: f64,
}

/// Validation sorting accuracy per epoch of one pretraining run.
#[derive(Clone, Debug, PartialEq)]
pub struct SesoCurve {
    pub domain: String,
    pub seed: u64,
    pub accuracies: Vec<f64>,
}

impl SesoCurve {
    /// First epoch (1-based) at or above `threshold`.
    pub fn epochs_to_reach(&self, threshold: f64) -> Option<usize> {
        self.accuracies.iter().position(|&a| a >= threshold).map(|i| i + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table3Results {
    pub entries: Vec<Table3Entry>,
    pub curves: Vec<SesoCurve>,
}

impl Table3Results {
    /// Median over seeds of the epochs `domain`'s pretraining needed to
    /// reach `threshold`; runs that never got there count as infinite.
    pub fn median_epochs_to(&self, domain: &str, threshold: f64) -> f64 {
        let epochs: Vec<f64> = self
            .curves
            .iter()
            .filter(|c| c.domain == domain)
            .map(|c| c.epochs_to_reach(threshold).map_or(f64::INFINITY, |e| e as f64))
            .collect();
        median(&epochs)
    }

    pub fn median_accuracy(&self, target: &str, variant: PretrainSource) -> f64 {
        let acc: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.target == target && e.variant == variant)
            .map(|e| e.accuracy)
            .collect();
        median(&acc)
    }
}

/// For each target, puzzle pretraining on (a) the source and (b) the target
/// itself, each followed by the same source step training and target
/// finetuning, evaluated on the target's test split. Also records every
/// pretraining run's validation sorting curve.
pub fn table3_harness(bench: &Benchmark, config: &HarnessConfig, out: &Path) -> Result<Table3Results> {
    let mut runner = Runner::new(bench, config, out, ExperimentKind::Table3)?;
    let arch = config.table3_arch.clone();
    let domains: Vec<String> = std::iter::once(&bench.source)
        .chain(&bench.targets)
        .map(|d| d.name.clone())
        .collect();

    let seso_jobs: Vec<SesoJob> = domains
        .iter()
        .flat_map(|d| {
            config.seeds.iter().map(|&seed| SesoJob {
                arch: arch.clone(),
                domain: d.clone(),
                seed,
            })
        })
        .collect();
    let pretrained: Vec<(Upstream, History)> = runner.stage(&seso_jobs, |r, job| r.pretrain(job))?;
    let indices: Vec<usize> = (0..seso_jobs.len()).collect();
    let source_trained = runner.stage(&indices, |r, &i| {
        let job = &seso_jobs[i];
        r.source_train(
            &arch,
            "seso",
            job.seed,
            Some(&pretrained[i].0),
            &format!("seso_{}", job.domain),
        )
    })?;

    let mut jobs = Vec::new();
    for t in &bench.targets {
        for variant in [PretrainSource::Source, PretrainSource::Target] {
            for &seed in &config.seeds {
                let domain = match variant {
                    PretrainSource::Source => bench.source.name.clone(),
                    PretrainSource::Target => t.name.clone(),
                };
                let i = seso_jobs
                    .iter()
                    .position(|j| j.domain == domain && j.seed == seed)
                    .expect("job listed");
                jobs.push((t.name.clone(), variant, seed, i));
            }
        }
    }
    let entries = runner.stage(&jobs, |r, (target, variant, seed, i)| {
        let domain = r.bench.domain(target)?;
        let (_, cell) = r.train_cell(
            format!("t3-{target}-seso_{}-s{seed}", variant.as_str()),
            target,
            &arch,
            &format!("seso_{}", variant.as_str()),
            *seed,
            &domain.train,
            &domain.val,
            Some(&domain.test),
            Some(&source_trained[*i]),
            r.paths(target, &Split::ALL),
        )?;
        let entry = Table3Entry {
            target: target.clone(),
            variant: *variant,
            seed: *seed,
            accuracy: accuracy_of(&cell),
        };
        Ok((entry, cell))
    })?;
    runner.finish()?;

    let curves: Vec<SesoCurve> = seso_jobs
        .iter()
        .zip(&pretrained)
        .map(|(job, (_, h))| SesoCurve {
            domain: job.domain.clone(),
            seed: job.seed,
            accuracies: h.records.iter().map(|r| r.val_accuracy.unwrap_or(f64::NAN)).collect(),
        })
        .collect();
    let results = Table3Results { entries, curves };

    let header: Vec<String> = ["target", "pretrained_on", "seed", "accuracy"]
        .map(String::from)
        .to_vec();
    let rows: Vec<Vec<String>> = results
        .entries
        .iter()
        .map(|e| {
            vec![
                e.target.clone(),
                e.variant.as_str().into(),
                e.seed.to_string(),
                e.accuracy.to_string(),
            ]
        })
        .collect();
    write_atomic(&out.join("results.csv"), &csv(&header, &rows))?;
    let mut text_rows = Vec::new();
    for t in &bench.targets {
        for v in [PretrainSource::Source, PretrainSource::Target] {
            text_rows.push(vec![
                t.name.clone(),
                v.as_str().into(),
                pct(results.median_accuracy(&t.name, v)),
            ]);
        }
    }
    let header3: Vec<String> = ["target", "pretrained_on", "accuracy"].map(String::from).to_vec();
    let mut text = aligned(&header3, &text_rows);
    text.push('\n');
    let curve_rows: Vec<Vec<String>> = domains
        .iter()
        .map(|d| {
            let e = results.median_epochs_to(d, 0.5);
            vec![d.clone(), if e.is_finite() { e.to_string() } else { "never".into() }]
        })
        .collect();
    text += &aligned(&["pretraining_domain".into(), "epochs_to_50pct".into()], &curve_rows);
    write_atomic(&out.join("results.txt"), &text)?;

    let mut curves_csv = String::from("domain,seed,epoch,sorting_accuracy\n");
    for c in &results.curves {
        for (e, a) in c.accuracies.iter().enumerate() {
            let _ = writeln!(curves_csv, "{},{},{},{a}", c.domain, c.seed, e + 1);
        }
    }
    write_atomic(&out.join("curves.csv"), &curves_csv)?;
    Ok(results)
}
