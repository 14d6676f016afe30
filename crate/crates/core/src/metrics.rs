//! Action accuracy, confusion matrices, domain probe and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Clip, DatasetSplit};
use crate::error::{Error, Result};
use crate::model::{argmax, DiNetModel};
use crate::tensor::{Scalar, Tensor};
use crate::train::{history_csv, post_hoc_domain_probe, LossRecord, ProbeConfig};

/// Clips evaluated per forward pass.
pub const EVAL_CHUNK: usize = 16;

fn videos<T: Scalar>(clips: &[Clip]) -> Vec<Tensor<T>> {
    clips.iter().map(|c| c.video.cast()).collect()
}

/// Argmax of the action logits for every clip (eval mode, ties to the lowest
/// index). The domain head is not evaluated.
pub fn predict<T: Scalar>(model: &DiNetModel<T>, clips: &[Clip]) -> Result<Vec<usize>> {
    let v = videos::<T>(clips);
    let refs: Vec<&Tensor<T>> = v.iter().collect();
    Ok(model
        .action_logits(&refs, EVAL_CHUNK)?
        .iter()
        .map(|row| argmax(row))
        .collect())
}

/// Eval-mode feature vectors in double precision.
pub fn features<T: Scalar>(model: &DiNetModel<T>, clips: &[Clip]) -> Result<Vec<Vec<f64>>> {
    let v = videos::<T>(clips);
    let refs: Vec<&Tensor<T>> = v.iter().collect();
    Ok(model
        .extract_features(&refs, EVAL_CHUNK)?
        .into_iter()
        .map(|r| r.into_iter().map(Scalar::as_f64).collect())
        .collect())
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Option<Vec<String>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(preds: &[usize], labels: &[usize], k: usize) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} predictions for {} labels",
                preds.len(),
                labels.len()
            )));
        }
        let mut counts = vec![vec![0u64; k]; k];
        for (&p, &l) in preds.iter().zip(labels) {
            if p >= k || l >= k {
                return Err(Error::invalid(format!("class index {} out of range for K={k}", p.max(l))));
            }
            counts[l][p] += 1;
        }
        Ok(Self {
            counts,
            class_names: None,
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Self {
        self.class_names = Some(names);
        self
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// `trace / total`, or 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    /// `counts[k][k] / rowsum(k)`; `None` for classes without samples.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        self.row_sums()
            .iter()
            .enumerate()
            .map(|(k, &n)| (n > 0).then(|| self.counts[k][k] as f64 / n as f64))
            .collect()
    }

    /// Each row scaled to percentages of its sum; empty rows stay zero.
    pub fn row_percentages(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let n: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 })
                    .collect()
            })
            .collect()
    }

    fn names(&self) -> Vec<String> {
        self.class_names
            .clone()
            .unwrap_or_else(|| (0..self.num_classes()).map(|k| format!("class_{k}")).collect())
    }

    /// Header `true\pred,<names>` then one row per true class.
    pub fn to_csv(&self) -> String {
        self.csv_with(|r, c| self.counts[r][c].to_string())
    }

    pub fn percentages_csv(&self) -> String {
        let pct = self.row_percentages();
        self.csv_with(|r, c| format!("{:.2}", pct[r][c]))
    }

    fn csv_with(&self, cell: impl Fn(usize, usize) -> String) -> String {
        let names = self.names();
        let mut s = format!("true\\pred,{}\n", names.join(","));
        for (r, name) in names.iter().enumerate() {
            let cells: Vec<String> = (0..self.num_classes()).map(|c| cell(r, c)).collect();
            let _ = writeln!(s, "{name},{}", cells.join(","));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.is_empty());
        let header = lines.next().ok_or_else(|| Error::invalid("empty confusion csv"))?;
        let names: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
        let counts = lines
            .map(|l| {
                l.split(',')
                    .skip(1)
                    .map(|c| c.parse::<u64>().map_err(|_| Error::invalid(format!("bad count {c:?}"))))
                    .collect::<Result<Vec<u64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        if counts.len() != names.len() || counts.iter().any(|r| r.len() != names.len()) {
            return Err(Error::invalid("confusion csv is not square"));
        }
        Ok(Self {
            counts,
            class_names: Some(names),
        })
    }
}

/// Accuracy on the test clips of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub top1_accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

impl DomainMetrics {
    pub fn compute<T: Scalar>(model: &DiNetModel<T>, clips: &[Clip], class_names: &[String]) -> Result<Self> {
        let k = model.config().num_actions;
        let labels = clips
            .iter()
            .map(|c| {
                c.action
                    .ok_or_else(|| Error::invalid(format!("test clip {} has no action label", c.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let preds = predict(model, clips)?;
        let mut confusion = ConfusionMatrix::from_predictions(&preds, &labels, k)?;
        if class_names.len() == k {
            confusion = confusion.with_names(class_names.to_vec());
        }
        Ok(Self {
            top1_accuracy: confusion.accuracy(),
            per_class_accuracy: confusion.per_class_accuracy(),
            confusion,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub config_hash: String,
    pub mode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Target-domain top-1 accuracy, the quantity adaptation aims to raise.
    pub top1_accuracy: f64,
    pub source: DomainMetrics,
    pub target: DomainMetrics,
    /// Balanced accuracy of a fresh domain classifier on frozen test
    /// features; 0.5 means the features carry no domain signal.
    pub domain_probe_accuracy: f64,
    pub metadata: RunMetadata,
}

/// Source- and target-test accuracy plus the domain probe. Never modifies the
/// model.
pub fn evaluate<T: Scalar>(
    model: &DiNetModel<T>,
    split: &DatasetSplit,
    class_names: &[String],
    probe: &ProbeConfig,
    metadata: RunMetadata,
) -> Result<MetricsReport> {
    if split.test_source.is_empty() || split.test_target.is_empty() {
        return Err(Error::invalid("evaluation needs source and target test clips"));
    }
    let source = DomainMetrics::compute(model, &split.test_source, class_names)?;
    let target = DomainMetrics::compute(model, &split.test_target, class_names)?;
    let fs = features(model, &split.test_source)?;
    let ft = features(model, &split.test_target)?;
    let domain_probe_accuracy = post_hoc_domain_probe(&fs, &ft, probe)?;
    Ok(MetricsReport {
        top1_accuracy: target.top1_accuracy,
        source,
        target,
        domain_probe_accuracy,
        metadata,
    })
}

pub const METRICS_FILE: &str = "metrics.json";
pub const CONFUSION_FILE: &str = "confusion.csv";

/// Writes `metrics.json`, `confusion.csv` (target test set),
/// `confusion_source.csv`, `confusion_percent.csv` and, when given,
/// `history.csv`.
pub fn write_report(report: &MetricsReport, dir: &Path, history: Option<&[LossRecord]>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Path {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    fs::write(dir.join(METRICS_FILE), serde_json::to_string_pretty(report)?)?;
    fs::write(dir.join(CONFUSION_FILE), report.target.confusion.to_csv())?;
    fs::write(dir.join("confusion_source.csv"), report.source.confusion.to_csv())?;
    fs::write(dir.join("confusion_percent.csv"), report.target.confusion.percentages_csv())?;
    if let Some(h) = history {
        fs::write(dir.join("history.csv"), history_csv(h))?;
    }
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<MetricsReport> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(METRICS_FILE))?)?)
}
