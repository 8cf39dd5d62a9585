//! Run configuration text (`key = value`, `#` comments, unknown keys rejected).

use crate::error::Result;
use crate::keyvalue::{format_list, KeyValues};
use crate::models::{ArchKind, ModelConfig, DEFAULT_HIDDEN, NUM_STEPS};
use crate::seso::SesoConfig;
use crate::training::TrainConfig;

/// Writes the architecture keys of a model config.
pub fn model_config_text(c: &ModelConfig) -> String {
    format!(
        "arch = {}\ninput_dim = {}\nhidden = {}\nkernel_sizes = {}\nlstm_layers = {}\nnum_classes = {}\ndropout = {}\n",
        c.kind,
        c.input_dim,
        c.hidden,
        format_list(&c.kernel_sizes),
        c.lstm_layers,
        c.num_classes,
        c.dropout_rate
    )
}

/// Takes the keys written by [`model_config_text`]; all are required.
pub fn take_model_config(kv: &mut KeyValues) -> Result<ModelConfig> {
    let missing = |key: &str| crate::Error::Config(format!("missing key {key:?}"));
    let kind: ArchKind = kv.take::<String>("arch")?.ok_or_else(|| missing("arch"))?.parse()?;
    let config = ModelConfig {
        kind,
        input_dim: kv.take("input_dim")?.ok_or_else(|| missing("input_dim"))?,
        hidden: kv.take("hidden")?.ok_or_else(|| missing("hidden"))?,
        kernel_sizes: kv.take_list("kernel_sizes")?.ok_or_else(|| missing("kernel_sizes"))?,
        lstm_layers: kv.take("lstm_layers")?.ok_or_else(|| missing("lstm_layers"))?,
        num_classes: kv.take("num_classes")?.ok_or_else(|| missing("num_classes"))?,
        dropout_rate: kv.take("dropout")?.ok_or_else(|| missing("dropout"))?,
    };
    config.validate()?;
    Ok(config)
}

/// Everything a single `train` or `pretrain-seso` run reads from its config
/// file. The feature width comes from the data.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: ArchKind,
    pub hidden: usize,
    /// `None` keeps the architecture's default kernels.
    pub kernel_sizes: Option<Vec<usize>>,
    pub lstm_layers: usize,
    pub dropout: f64,
    pub train: TrainConfig,
    pub seso: SesoConfig,
    /// Benchmark domain to train on; the source domain when absent.
    pub domain: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: ArchKind::Tsan,
            hidden: DEFAULT_HIDDEN,
            kernel_sizes: None,
            lstm_layers: 1,
            dropout: 0.5,
            train: TrainConfig::default(),
            seso: SesoConfig::default(),
            domain: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let d = Self::default();
        let arch = match kv.take::<String>("arch")? {
            Some(a) => a.parse()?,
            None => d.arch,
        };
        let config = Self {
            arch,
            hidden: kv.take_or("hidden", d.hidden)?,
            kernel_sizes: kv.take_list("kernel_sizes")?,
            lstm_layers: kv.take_or("lstm_layers", d.lstm_layers)?,
            dropout: kv.take_or("dropout", d.dropout)?,
            train: TrainConfig {
                epochs: kv.take_or("epochs", d.train.epochs)?,
                lr: kv.take("lr")?,
                relevance_drop_prob: kv.take_or("relevance_drop_prob", d.train.relevance_drop_prob)?,
                seed: kv.take_or("seed", d.train.seed)?,
                select_best_on_val: kv.take_or("select_best_on_val", d.train.select_best_on_val)?,
                clip_norm: kv.take("clip_norm")?,
            },
            seso: SesoConfig {
                permutations: kv.take_or("permutations", d.seso.permutations)?,
                table_seed: kv.take_or("table_seed", d.seso.table_seed)?,
                val_puzzles_per_video: kv.take_or("val_puzzles_per_video", d.seso.val_puzzles_per_video)?,
                fixed_train_puzzles: false,
            },
            domain: kv.take("domain")?,
        };
        kv.finish()?;
        config.train.validate()?;
        config.model_config(1)?;
        Ok(config)
    }

    /// Explicit text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "arch = {}\nhidden = {}\nlstm_layers = {}\ndropout = {}\nepochs = {}\nrelevance_drop_prob = {}\nseed = {}\nselect_best_on_val = {}\npermutations = {}\ntable_seed = {}\nval_puzzles_per_video = {}\n",
            self.arch,
            self.hidden,
            self.lstm_layers,
            self.dropout,
            self.train.epochs,
            self.train.relevance_drop_prob,
            self.train.seed,
            self.train.select_best_on_val,
            self.seso.permutations,
            self.seso.table_seed,
            self.seso.val_puzzles_per_video,
        );
        if let Some(k) = &self.kernel_sizes {
            out += &format!("kernel_sizes = {}\n", format_list(k));
        }
        if let Some(lr) = self.train.lr {
            out += &format!("lr = {lr}\n");
        }
        if let Some(c) = self.train.clip_norm {
            out += &format!("clip_norm = {c}\n");
        }
        if let Some(d) = &self.domain {
            out += &format!("domain = {d}\n");
        }
        out
    }

    pub fn model_config(&self, input_dim: usize) -> Result<ModelConfig> {
        let mut c = ModelConfig::new(self.arch, input_dim);
        c.hidden = self.hidden;
        if let Some(k) = &self.kernel_sizes {
            c.kernel_sizes.clone_from(k);
        }
        c.lstm_layers = self.lstm_layers;
        c.num_classes = NUM_STEPS;
        c.dropout_rate = self.dropout;
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_defaults_and_overrides() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        let c = RunConfig::parse(
            "# tiny run\narch = lstm\nlstm_layers = 2\nepochs = 3\nlr = 0.05\nseed = 9\ndomain = target_a\n",
        )
        .unwrap();
        assert_eq!(c.arch, ArchKind::Lstm);
        assert_eq!(c.train.lr_for(c.arch), 0.05);
        let m = c.model_config(16).unwrap();
        assert_eq!((m.lstm_layers, m.input_dim, m.rep_width()), (2, 16, 256));
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        for bad in [
            "learning_rate = 0.1",
            "arch = gru",
            "epochs = 0",
            "arch = conv1d\nkernel_sizes = 5,25",
            "dropout = 1.0",
            "relevance_drop_prob = -0.1",
        ] {
            assert!(RunConfig::parse(bad).unwrap_err().is_config(), "{bad}");
        }
    }

    #[test]
    fn model_config_text_round_trip() {
        let mut m = ModelConfig::new(ArchKind::ConvEnsemble, 33);
        m.kernel_sizes = vec![3, 9];
        let mut kv = KeyValues::parse(&model_config_text(&m)).unwrap();
        assert_eq!(take_model_config(&mut kv).unwrap(), m);
        kv.finish().unwrap();
    }
}
