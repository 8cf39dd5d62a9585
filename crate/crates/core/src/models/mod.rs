//! Backbones (single Conv1D, Conv1D ensemble, stacked BiLSTM, TSAN) and the
//! per-second step classifier built on top of them.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{dropout, BiLstmParams, Conv1dParams, DenseParams};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::rng::{seeded, Mode, SeedRng};

pub const NUM_STEPS: usize = 7;
pub const DEFAULT_HIDDEN: usize = 128;
pub const TSAN_KERNELS: [usize; 3] = [5, 25, 39];
/// Upper bound on any single dimension of a config, so that shape
/// arithmetic cannot overflow.
pub const MAX_WIDTH: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchKind {
    Conv1d,
    ConvEnsemble,
    Lstm,
    Tsan,
}

impl ArchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchKind::Conv1d => "conv1d",
            ArchKind::ConvEnsemble => "conv_ensemble",
            ArchKind::Lstm => "lstm",
            ArchKind::Tsan => "tsan",
        }
    }

    pub fn is_conv(self) -> bool {
        matches!(self, ArchKind::Conv1d | ArchKind::ConvEnsemble)
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv1d" => Ok(ArchKind::Conv1d),
            "conv_ensemble" => Ok(ArchKind::ConvEnsemble),
            "lstm" => Ok(ArchKind::Lstm),
            "tsan" => Ok(ArchKind::Tsan),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Architecture descriptor. Convolution branches emit `hidden` channels and
/// each LSTM direction has `hidden` units, so a BiLSTM emits `2·hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ArchKind,
    pub input_dim: usize,
    pub hidden: usize,
    pub kernel_sizes: Vec<usize>,
    pub lstm_layers: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
}

impl ModelConfig {
    pub fn new(kind: ArchKind, input_dim: usize) -> Self {
        let kernel_sizes = match kind {
            ArchKind::Conv1d => vec![TSAN_KERNELS[0]],
            _ => TSAN_KERNELS.to_vec(),
        };
        Self {
            kind,
            input_dim,
            hidden: DEFAULT_HIDDEN,
            kernel_sizes,
            lstm_layers: 1,
            num_classes: NUM_STEPS,
            dropout_rate: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_dim == 0 || self.hidden == 0 || self.num_classes == 0 {
            return bad("input_dim, hidden and num_classes must be positive".into());
        }
        if self.input_dim > MAX_WIDTH || self.hidden > MAX_WIDTH || self.num_classes > MAX_WIDTH {
            return bad(format!("widths above {MAX_WIDTH} are not supported"));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k > MAX_WIDTH) {
            return bad(format!("kernel size {k} above {MAX_WIDTH}"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k % 2 == 0) {
            return bad(format!("kernel sizes must be odd, got {k}"));
        }
        match self.kind {
            ArchKind::Conv1d if self.kernel_sizes.len() != 1 => bad(format!(
                "conv1d takes exactly one kernel size, got {:?}",
                self.kernel_sizes
            )),
            ArchKind::ConvEnsemble if self.kernel_sizes.len() < 2 => bad(format!(
                "conv_ensemble takes at least two kernel sizes, got {:?}",
                self.kernel_sizes
            )),
            ArchKind::Tsan if self.kernel_sizes.len() != 3 => bad(format!(
                "tsan takes exactly three kernel sizes, got {:?}",
                self.kernel_sizes
            )),
            ArchKind::Lstm if !(1..=2).contains(&self.lstm_layers) => {
                bad(format!("lstm_layers must be 1 or 2, got {}", self.lstm_layers))
            }
            _ => Ok(()),
        }
    }

    /// Width of the per-second representation the backbone emits.
    pub fn rep_width(&self) -> usize {
        match self.kind {
            ArchKind::Conv1d => self.hidden,
            ArchKind::ConvEnsemble => self.kernel_sizes.len() * self.hidden,
            ArchKind::Lstm | ArchKind::Tsan => 2 * self.hidden,
        }
    }

    /// Whether two configs describe interchangeable backbones (dropout and
    /// the number of output classes may differ).
    pub fn same_backbone(&self, other: &ModelConfig) -> bool {
        (
            self.kind,
            self.input_dim,
            self.hidden,
            &self.kernel_sizes,
            self.lstm_layers,
        ) == (
            other.kind,
            other.input_dim,
            other.hidden,
            &other.kernel_sizes,
            other.lstm_layers,
        )
    }

    /// Names and shapes of the backbone parameters, in initialization order.
    /// Lets a checkpoint be checked against an architecture before anything
    /// is allocated.
    pub fn backbone_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (n, h) = (self.input_dim, self.hidden);
        let mut out = Vec::new();
        let convs = |out: &mut Vec<(String, Vec<usize>)>| {
            for (i, &k) in self.kernel_sizes.iter().enumerate() {
                out.push((format!("conv{i}.weight"), vec![h, n, k]));
                out.push((format!("conv{i}.bias"), vec![h]));
            }
        };
        let bilstm = |out: &mut Vec<(String, Vec<usize>)>, name: &str, c_in: usize| {
            for dir in ["fwd", "bwd"] {
                out.push((format!("{name}.{dir}.w_input"), vec![4 * h, c_in]));
                out.push((format!("{name}.{dir}.w_hidden"), vec![4 * h, h]));
                out.push((format!("{name}.{dir}.bias"), vec![4 * h]));
            }
        };
        match self.kind {
            ArchKind::Conv1d | ArchKind::ConvEnsemble => convs(&mut out),
            ArchKind::Lstm => {
                for i in 0..self.lstm_layers {
                    bilstm(&mut out, &format!("bilstm{}", i + 1), if i == 0 { n } else { 2 * h });
                }
            }
            ArchKind::Tsan => {
                convs(&mut out);
                bilstm(&mut out, "bilstm1", n);
                bilstm(&mut out, "bilstm2", 5 * h);
            }
        }
        out
    }

    /// Row label used in result tables, e.g. `conv1d_k25`, `lstm_l2`.
    pub fn label(&self) -> String {
        match self.kind {
            ArchKind::Conv1d => format!("conv1d_k{}", self.kernel_sizes[0]),
            ArchKind::ConvEnsemble => "conv_ensemble".into(),
            ArchKind::Lstm => format!("lstm_l{}", self.lstm_layers),
            ArchKind::Tsan => "tsan".into(),
        }
    }
}

/// The time-series part of a model, without any classification head.
#[derive(Clone, Debug, PartialEq)]
pub enum Backbone {
    Conv {
        convs: Vec<Conv1dParams>,
    },
    Lstm {
        layers: Vec<BiLstmParams>,
    },
    Tsan {
        convs: Vec<Conv1dParams>,
        context: BiLstmParams,
        fusion: BiLstmParams,
    },
}

impl Backbone {
    pub fn init(config: &ModelConfig, store: &mut ParamStore, rng: &mut SeedRng) -> Result<Self> {
        config.validate()?;
        let (n, h) = (config.input_dim, config.hidden);
        let convs = |store: &mut ParamStore, rng: &mut SeedRng| -> Result<Vec<Conv1dParams>> {
            config
                .kernel_sizes
                .iter()
                .enumerate()
                .map(|(i, &k)| Conv1dParams::init(store, &format!("conv{i}"), n, h, k, rng))
                .collect()
        };
        Ok(match config.kind {
            ArchKind::Conv1d | ArchKind::ConvEnsemble => Backbone::Conv {
                convs: convs(store, rng)?,
            },
            ArchKind::Lstm => {
                let mut layers = Vec::with_capacity(config.lstm_layers);
                let mut width = n;
                for i in 0..config.lstm_layers {
                    layers.push(BiLstmParams::init(store, &format!("bilstm{}", i + 1), width, h, rng)?);
                    width = 2 * h;
                }
                Backbone::Lstm { layers }
            }
            ArchKind::Tsan => {
                let convs = convs(store, rng)?;
                let context = BiLstmParams::init(store, "bilstm1", n, h, rng)?;
                let fused_width = 3 * h + 2 * h;
                let fusion = BiLstmParams::init(store, "bilstm2", fused_width, h, rng)?;
                Backbone::Tsan { convs, context, fusion }
            }
        })
    }

    /// L×N features to L×rep_width representations. Dropout is applied to the
    /// input, to the concatenated TSAN branches, and between stacked LSTMs.
    pub fn forward(
        &self,
        config: &ModelConfig,
        store: &ParamStore,
        tape: &mut Tape,
        x: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let width = tape.value(x).cols();
        if tape.value(x).rank() != 2 || width != config.input_dim {
            return Err(Error::shape(
                "backbone_forward",
                tape.value(x).shape(),
                &[config.input_dim],
            ));
        }
        let rate = config.dropout_rate;
        let x = dropout(tape, x, rate, mode)?;
        match self {
            Backbone::Conv { convs } => {
                let outs = convs
                    .iter()
                    .map(|c| c.forward(tape, store, x))
                    .collect::<Result<Vec<_>>>()?;
                tape.concat_last_axis(&outs)
            }
            Backbone::Lstm { layers } => {
                let mut y = x;
                for (i, layer) in layers.iter().enumerate() {
                    if i > 0 {
                        y = dropout(tape, y, rate, mode)?;
                    }
                    y = layer.apply(tape, store, y)?;
                }
                Ok(y)
            }
            Backbone::Tsan { convs, context, fusion } => {
                let mut branches = convs
                    .iter()
                    .map(|c| c.forward(tape, store, x))
                    .collect::<Result<Vec<_>>>()?;
                branches.push(context.apply(tape, store, x)?);
                let fused = tape.concat_last_axis(&branches)?;
                let fused = dropout(tape, fused, rate, mode)?;
                fusion.apply(tape, store, fused)
            }
        }
    }
}

/// Name prefix of the step classifier parameters.
pub const HEAD_PREFIX: &str = "head";

/// Backbone plus a per-second dense classifier (D_rep → num_classes).
#[derive(Clone, Debug, PartialEq)]
pub struct StepModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub head: DenseParams,
}

impl StepModel {
    /// Initializes every layer from `seed`; the backbone is drawn first, then
    /// the head, from a single stream.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::init(config, &mut store, &mut rng)?;
        let head = DenseParams::init(
            &mut store,
            HEAD_PREFIX,
            config.rep_width(),
            config.num_classes,
            &mut rng,
        )?;
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            head,
        })
    }

    pub fn backbone_forward(&self, tape: &mut Tape, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        self.backbone.forward(&self.config, &self.store, tape, x, mode)
    }

    /// L×num_classes per-second log-probabilities.
    pub fn step_log_probs(&self, tape: &mut Tape, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let rep = self.backbone_forward(tape, x, mode)?;
        let logits = self.head.forward(tape, &self.store, rep)?;
        tape.log_softmax_rows(logits)
    }

    pub fn log_probs(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let lp = self.step_log_probs(&mut tape, x, &mut Mode::Eval)?;
        Ok(tape.value(lp).clone())
    }

    /// Per-second argmax in evaluation mode; ties go to the lowest index.
    pub fn predict_steps(&self, features: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.log_probs(features)?))
    }
}

/// Names and shapes of a dense layer's parameters.
pub fn dense_shapes(name: &str, d_in: usize, d_out: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (format!("{name}.weight"), vec![d_in, d_out]),
        (format!("{name}.bias"), vec![d_out]),
    ]
}

pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    (0..scores.rows())
        .map(|t| {
            let row = scores.row(t);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn random(shape: &[usize], rng: &mut SeedRng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn toy(kind: ArchKind, n: usize, h: usize) -> ModelConfig {
        let mut c = ModelConfig::new(kind, n);
        c.hidden = h;
        if kind != ArchKind::Conv1d {
            c.kernel_sizes = vec![3, 5, 7];
        }
        c
    }

    fn all_kinds(n: usize, h: usize) -> Vec<ModelConfig> {
        let mut lstm2 = toy(ArchKind::Lstm, n, h);
        lstm2.lstm_layers = 2;
        vec![
            toy(ArchKind::Conv1d, n, h),
            toy(ArchKind::ConvEnsemble, n, h),
            toy(ArchKind::Lstm, n, h),
            lstm2,
            toy(ArchKind::Tsan, n, h),
        ]
    }

    #[test]
    fn rep_widths() {
        let n = 64;
        assert_eq!(ModelConfig::new(ArchKind::Lstm, n).rep_width(), 256);
        assert_eq!(ModelConfig::new(ArchKind::Tsan, n).rep_width(), 256);
        assert_eq!(ModelConfig::new(ArchKind::ConvEnsemble, n).rep_width(), 384);
        assert_eq!(ModelConfig::new(ArchKind::Conv1d, n).rep_width(), 128);
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::new(ArchKind::Tsan, 8);
        c.kernel_sizes = vec![5, 25];
        assert!(StepModel::build(&c, 0).is_err());
        let mut c = ModelConfig::new(ArchKind::Conv1d, 8);
        c.kernel_sizes = vec![5, 25];
        assert!(c.validate().is_err());
        c.kernel_sizes = vec![4];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(ArchKind::Lstm, 8);
        c.lstm_layers = 3;
        assert!(c.validate().is_err());
        assert!("gru".parse::<ArchKind>().is_err());
        assert_eq!("conv_ensemble".parse::<ArchKind>().unwrap(), ArchKind::ConvEnsemble);
    }

    #[test]
    fn tsan_full_size_widths() {
        let m = StepModel::build(&ModelConfig::new(ArchKind::Tsan, 2049), 1).unwrap();
        let Backbone::Tsan { convs, context, fusion } = &m.backbone else {
            panic!("not a tsan backbone")
        };
        assert!(convs.iter().all(|c| c.c_in == 2049 && c.c_out == 128));
        assert_eq!(convs.iter().map(|c| c.kernel_size).collect::<Vec<_>>(), vec![5, 25, 39]);
        assert_eq!(context.forward.c_in, 2049);
        assert_eq!(fusion.forward.c_in, 640);
        assert_eq!(fusion.out_width(), 256);
        assert_eq!(m.head.d_in, 256);
        assert_eq!(m.head.d_out, 7);
    }

    #[test]
    fn lstm_single_layer_structure() {
        let m = StepModel::build(&ModelConfig::new(ArchKind::Lstm, 16), 1).unwrap();
        let Backbone::Lstm { layers } = &m.backbone else {
            panic!()
        };
        assert_eq!(layers.len(), 1);
        let names: Vec<_> = m.store.iter().map(|p| p.name.as_str()).collect();
        assert!(names
            .iter()
            .all(|n| n.starts_with("bilstm1.") || n.starts_with("head.")));
    }

    #[test]
    fn declared_shapes_match_built_stores() {
        for c in all_kinds(7, 4) {
            let m = StepModel::build(&c, 0).unwrap();
            let mut expected = c.backbone_shapes();
            expected.extend(dense_shapes(HEAD_PREFIX, c.rep_width(), 7));
            let built: Vec<_> = m
                .store
                .iter()
                .map(|p| (p.name.clone(), p.value.shape().to_vec()))
                .collect();
            assert_eq!(built, expected, "{}", c.label());
        }
    }

    #[test]
    fn build_is_deterministic() {
        let c = toy(ArchKind::Tsan, 8, 4);
        assert_eq!(StepModel::build(&c, 9).unwrap(), StepModel::build(&c, 9).unwrap());
        assert_ne!(
            StepModel::build(&c, 9).unwrap().store,
            StepModel::build(&c, 10).unwrap().store
        );
    }

    #[test]
    fn shape_contract_for_every_kind() {
        let mut rng = seeded(2);
        for c in all_kinds(6, 3) {
            let m = StepModel::build(&c, 3).unwrap();
            for l in [1, 9, 50] {
                let mut tape = Tape::new();
                let x = tape.constant(random(&[l, 6], &mut rng));
                let rep = m.backbone_forward(&mut tape, x, &mut Mode::Eval).unwrap();
                assert_eq!(tape.value(rep).shape(), &[l, c.rep_width()], "{}", c.label());
                let mut train_rng = seeded(l as u64);
                let lp = m
                    .step_log_probs(&mut tape, x, &mut Mode::Train(&mut train_rng))
                    .unwrap();
                assert_eq!(tape.value(lp).shape(), &[l, 7]);
                for t in 0..l {
                    let s: f64 = tape.value(lp).row(t).iter().map(|v| v.exp()).sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let m = StepModel::build(&toy(ArchKind::Tsan, 8, 4), 0).unwrap();
        assert!(m.predict_steps(&Tensor::zeros(&[5, 7])).is_err());
    }

    #[test]
    fn zero_parameters_give_zero_rep_and_uniform_probs() {
        let mut m = StepModel::build(&toy(ArchKind::Tsan, 8, 4), 0).unwrap();
        for p in m.store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let x = random(&[20, 8], &mut seeded(1));
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let rep = m.backbone_forward(&mut tape, xv, &mut Mode::Eval).unwrap();
        assert_eq!(tape.value(rep).shape(), &[20, 8]);
        assert!(tape.value(rep).data().iter().all(|&v| v == 0.0));
        let lp = m.log_probs(&x).unwrap();
        for v in lp.data() {
            assert!((v - (1.0f64 / 7.0).ln()).abs() < 1e-15);
        }
        assert!(m.predict_steps(&x).unwrap().iter().all(|&c| c == 0));
    }

    #[test]
    fn eval_forward_is_bit_identical() {
        let m = StepModel::build(&toy(ArchKind::Tsan, 8, 4), 5).unwrap();
        let x = random(&[15, 8], &mut seeded(6));
        assert_eq!(m.log_probs(&x).unwrap(), m.log_probs(&x).unwrap());
    }

    #[test]
    fn argmax_matches_brute_force_scan() {
        let dominant = Tensor::from_rows(&[[0.0, 5.0, 1.0], [9.0, 0.0, 1.0]]).unwrap();
        assert_eq!(argmax_rows(&dominant), vec![1, 0]);
        assert_eq!(argmax_rows(&Tensor::full(&[4, 7], -1.0)), vec![0; 4]);

        let m = StepModel::build(&toy(ArchKind::Lstm, 5, 3), 8).unwrap();
        let x = random(&[30, 5], &mut seeded(9));
        let lp = m.log_probs(&x).unwrap();
        let preds = m.predict_steps(&x).unwrap();
        for (t, &pred) in preds.iter().enumerate() {
            let row = lp.row(t);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first = row.iter().position(|&v| v == max).unwrap();
            assert_eq!(pred, first);
        }
    }

    #[test]
    fn raising_one_head_bias_favors_that_class() {
        let mut m = StepModel::build(&toy(ArchKind::ConvEnsemble, 6, 3), 4).unwrap();
        let x = random(&[25, 6], &mut seeded(10));
        let before_lp = m.log_probs(&x).unwrap();
        let before = argmax_rows(&before_lp);
        let class = 3;
        let id = m.head.bias;
        m.store.get_mut(id).value.data_mut()[class] += 0.7;
        let after_lp = m.log_probs(&x).unwrap();
        let after = argmax_rows(&after_lp);
        for t in 0..25 {
            assert!(after_lp.row(t)[class] > before_lp.row(t)[class]);
            assert!(after[t] == before[t] || after[t] == class);
        }
    }

    #[test]
    fn every_tsan_parameter_receives_gradient() {
        let mut m = StepModel::build(&toy(ArchKind::Tsan, 6, 3), 11).unwrap();
        let mut rng = seeded(12);
        for p in m.store.iter_mut() {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        let x = random(&[12, 6], &mut rng);
        let labels: Vec<usize> = (0..12).map(|t| t % 7).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let lp = m.step_log_probs(&mut tape, xv, &mut Mode::Eval).unwrap();
        let loss = tape.nll_loss(lp, &labels).unwrap();
        tape.backward(loss, &mut m.store).unwrap();
        for p in m.store.iter() {
            assert!(p.grad.data().iter().any(|&g| g != 0.0), "{} got no gradient", p.name);
        }
    }
}
