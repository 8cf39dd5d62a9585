//! Per-second feature sequences, their on-disk format, and the synthetic
//! multi-domain workflow benchmark.

mod benchmark;
mod generator;
mod manifest;
mod sfm;

pub use benchmark::{Benchmark, DomainData};
pub use generator::{
    emit_features, generate_benchmark, generate_video, sample_label_sequence, BenchmarkSpec, DomainSpec, EmissionModel,
    MANIFEST_FILE, SPEC_FILE,
};
pub use manifest::{format_manifest, parse_manifest, read_manifest, write_manifest, ManifestEntry, Split};
pub use sfm::{decode_sequence, encode_sequence, read_sequence, write_sequence, SFM_MAGIC, SFM_VERSION};

use crate::error::{Error, Result};
use crate::models::NUM_STEPS;
use crate::numerics::Tensor;

/// An L×N feature matrix with optional per-second step labels and relevance
/// flags (false marks out-of-body or otherwise irrelevant seconds).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    pub features: Tensor,
    pub labels: Option<Vec<usize>>,
    pub relevance: Option<Vec<bool>>,
}

impl FeatureSequence {
    pub fn new(
        id: impl Into<String>,
        features: Tensor,
        labels: Option<Vec<usize>>,
        relevance: Option<Vec<bool>>,
    ) -> Result<Self> {
        let seq = Self {
            id: id.into(),
            features,
            labels,
            relevance,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.rank() != 2 {
            return Err(Error::InvalidTensor(format!(
                "{}: features must be L×N, got {:?}",
                self.id,
                self.features.shape()
            )));
        }
        let l = self.len();
        if let Some(labels) = &self.labels {
            if labels.len() != l {
                return Err(Error::Malformed(format!(
                    "{}: {} labels for {l} rows",
                    self.id,
                    labels.len()
                )));
            }
            if let Some((t, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= NUM_STEPS) {
                return Err(Error::LabelOutOfRange {
                    t,
                    label,
                    classes: NUM_STEPS,
                });
            }
        }
        if let Some(rel) = &self.relevance {
            if rel.len() != l {
                return Err(Error::Malformed(format!(
                    "{}: {} relevance flags for {l} rows",
                    self.id,
                    rel.len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Config(format!("sequence {} has no labels", self.id)))
    }
}

/// Errors unless every sequence has width `n`.
pub fn check_width(seqs: &[FeatureSequence], n: usize) -> Result<()> {
    match seqs.iter().find(|s| s.width() != n) {
        Some(s) => Err(Error::shape("feature width", &[s.len(), s.width()], &[n])),
        None => Ok(()),
    }
}

/// (train, val, test) video counts: test takes 25% of the domain, validation
/// 20% of what remains, each rounded to the nearest video.
pub fn split_sizes(total: usize) -> (usize, usize, usize) {
    let test = (total as f64 * 0.25).round() as usize;
    let val = ((total - test) as f64 * 0.2).round() as usize;
    (total - test - val, val, test)
}
