//! Per-second accuracy, confusion matrices and the metrics CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::models::{StepModel, NUM_STEPS};
use crate::training::History;

/// Fraction of positions where `preds` equals `labels`.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::shape("accuracy", &[preds.len()], &[labels.len()]));
    }
    if labels.is_empty() {
        return Err(Error::Config("accuracy of an empty sequence".into()));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Rows are true steps, columns predicted steps.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_STEPS]; NUM_STEPS],
}

impl ConfusionMatrix {
    pub fn add(&mut self, preds: &[usize], labels: &[usize]) -> Result<()> {
        if preds.len() != labels.len() {
            return Err(Error::shape("confusion", &[preds.len()], &[labels.len()]));
        }
        for (t, (&p, &y)) in preds.iter().zip(labels).enumerate() {
            for label in [p, y] {
                if label >= NUM_STEPS {
                    return Err(Error::LabelOutOfRange {
                        t,
                        label,
                        classes: NUM_STEPS,
                    });
                }
            }
            self.counts[y][p] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_STEPS).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    /// Seconds per true step.
    pub fn row_sums(&self) -> [u64; NUM_STEPS] {
        std::array::from_fn(|i| self.counts[i].iter().sum())
    }

    /// Seven comma-separated lines of counts.
    pub fn to_csv_block(&self) -> String {
        let mut out = String::new();
        for row in &self.counts {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            out += &cells.join(",");
            out.push('\n');
        }
        out
    }
}

pub fn confusion(preds: &[usize], labels: &[usize]) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::default();
    m.add(preds, labels)?;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_video: Vec<(String, f64)>,
    /// Correct seconds over all seconds of all videos.
    pub pooled_accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Evaluates `model` (no dropout) over every second of every video.
pub fn evaluate(model: &StepModel, dataset: &[FeatureSequence]) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let mut confusion = ConfusionMatrix::default();
    let mut per_video = Vec::with_capacity(dataset.len());
    for seq in dataset {
        let labels = seq.labels()?;
        let preds = model.predict_steps(&seq.features)?;
        per_video.push((seq.id.clone(), accuracy(&preds, labels)?));
        confusion.add(&preds, labels)?;
    }
    Ok(MetricsReport {
        per_video,
        pooled_accuracy: confusion.accuracy(),
        confusion,
    })
}

pub fn pooled_accuracy(model: &StepModel, dataset: &[FeatureSequence]) -> Result<f64> {
    Ok(evaluate(model, dataset)?.pooled_accuracy)
}

pub const METRICS_HEADER: &str = "run_id,domain,arch,init,seed,epoch,split,metric,value";

/// One line of a metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub domain: String,
    pub arch: String,
    pub init: String,
    pub seed: u64,
    /// Empty for whole-run metrics.
    pub epoch: Option<usize>,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        let epoch = self.epoch.map(|e| e.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.run_id, self.domain, self.arch, self.init, self.seed, epoch, self.split, self.metric, self.value
        )
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv());
    }
    out
}

/// Writes via a temporary sibling and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Rows for a whole evaluation: pooled and per-video accuracy. The
/// confusion matrix goes to its own file via [`ConfusionMatrix::to_csv_block`].
pub fn report_rows(template: &MetricRow, report: &MetricsReport) -> Vec<MetricRow> {
    let mut rows = vec![MetricRow {
        metric: "accuracy".into(),
        value: report.pooled_accuracy,
        ..template.clone()
    }];
    rows.extend(report.per_video.iter().map(|(id, acc)| MetricRow {
        metric: format!("accuracy:{id}"),
        value: *acc,
        ..template.clone()
    }));
    rows
}

/// Per-epoch training loss and validation `val_metric` rows.
pub fn history_rows(template: &MetricRow, history: &History, val_metric: &str) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for r in &history.records {
        rows.push(MetricRow {
            epoch: Some(r.epoch),
            split: "train".into(),
            metric: "loss".into(),
            value: r.train_loss,
            ..template.clone()
        });
        if let Some(acc) = r.val_accuracy {
            rows.push(MetricRow {
                epoch: Some(r.epoch),
                split: "val".into(),
                metric: val_metric.into(),
                value: acc,
                ..template.clone()
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::models::{ArchKind, ModelConfig};
    use crate::numerics::Tensor;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn confusion_examples() {
        let labels = [0, 1, 2, 3, 4, 5, 6, 6];
        let perfect = confusion(&labels, &labels).unwrap();
        for i in 0..NUM_STEPS {
            for j in 0..NUM_STEPS {
                assert_eq!(perfect.counts[i][j] > 0, i == j);
            }
        }
        let constant = confusion(&[3; 8], &labels).unwrap();
        for row in &constant.counts {
            for (j, &c) in row.iter().enumerate() {
                assert!(j == 3 || c == 0);
            }
        }
        assert_eq!(constant.row_sums(), [1, 1, 1, 1, 1, 1, 2]);
        assert!(confusion(&[7], &[0]).is_err());
        assert_eq!(perfect.to_csv_block().lines().count(), 7);
    }

    proptest! {
        #[test]
        fn confusion_matches_counting_loop(pairs in proptest::collection::vec((0usize..7, 0usize..7), 1..200)) {
            let (preds, labels): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let m = confusion(&preds, &labels).unwrap();
            for i in 0..7 {
                for j in 0..7 {
                    let tally = pairs.iter().filter(|&&(p, y)| y == i && p == j).count() as u64;
                    prop_assert_eq!(m.counts[i][j], tally);
                }
            }
            prop_assert_eq!(m.total(), pairs.len() as u64);
            prop_assert_eq!(m.accuracy(), accuracy(&preds, &labels).unwrap());
        }
    }

    #[test]
    fn zero_model_scores_class_zero_frequency() {
        let mut cfg = ModelConfig::new(ArchKind::Tsan, 4);
        cfg.hidden = 3;
        cfg.kernel_sizes = vec![1, 3, 5];
        let mut model = StepModel::build(&cfg, 0).unwrap();
        for p in model.store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let labels = vec![0, 0, 1, 2, 0, 3, 6, 6, 0, 5];
        let seq = FeatureSequence::new("v", Tensor::full(&[10, 4], 0.3), Some(labels), None).unwrap();
        let report = evaluate(&model, &[seq]).unwrap();
        assert_eq!(report.pooled_accuracy, 0.4);
        assert_eq!(report.pooled_accuracy, report.confusion.accuracy());
    }

    #[test]
    fn csv_layout() {
        let row = MetricRow {
            run_id: "r".into(),
            domain: "d".into(),
            arch: "tsan".into(),
            init: "random".into(),
            seed: 1,
            epoch: None,
            split: "test".into(),
            metric: "accuracy".into(),
            value: 0.5,
        };
        let csv = metrics_csv(&[row.clone(), MetricRow { epoch: Some(3), ..row }]);
        assert_eq!(
            csv,
            "run_id,domain,arch,init,seed,epoch,split,metric,value\nr,d,tsan,random,1,,test,accuracy,0.5\nr,d,tsan,random,1,3,test,accuracy,0.5\n"
        );
    }
}
