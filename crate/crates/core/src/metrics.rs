//! Confusion-matrix accounting, accuracy/precision/recall, trial aggregation.
//!
//! Precision of a class that is never predicted is NaN, and NaN propagates
//! through means. Serialized reports write NaN as the string `"NaN"`.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::Matrix;

/// Counts indexed `(true, predicted)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let trace: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        trace as f64 / self.total() as f64
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.classes).map(|j| self.get(truth, j)).sum()
    }

    pub fn column_sum(&self, predicted: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, predicted)).sum()
    }

    /// NaN when the class never occurs.
    pub fn recall(&self, c: usize) -> f64 {
        self.get(c, c) as f64 / self.row_sum(c) as f64
    }

    /// NaN when the class is never predicted.
    pub fn precision(&self, c: usize) -> f64 {
        self.get(c, c) as f64 / self.column_sum(c) as f64
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn confusion_from_logits(logits: &Matrix, labels: &[usize], classes: usize) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::new(classes);
    for (row, &y) in logits.row_iter().zip(labels) {
        cm.record(y, argmax(row));
    }
    cm
}

/// Evaluation-mode predictions over the whole set, in chunks of `chunk` rows.
pub fn evaluate(net: &Network, ds: &LabeledDataset, chunk: usize) -> Result<ConfusionMatrix> {
    if net.spec().classes() != ds.class_count {
        return Err(Error::shape(
            "evaluate",
            format!("model has {} classes, dataset {}", net.spec().classes(), ds.class_count),
        ));
    }
    let mut cm = ConfusionMatrix::new(ds.class_count);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let (x, y) = ds.gather(part);
        cm.merge(&confusion_from_logits(&net.predict(&x)?, &y, ds.class_count));
    }
    Ok(cm)
}

/// `f64` that serializes NaN as the string `"NaN"`.
pub mod nan_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_str("NaN")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "NaN" => Ok(f64::NAN),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("expected a number or \"NaN\", got {s:?}"))),
        }
    }

    pub mod vec {
        use serde::ser::SerializeSeq;
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            #[derive(serde::Serialize)]
            struct W(#[serde(with = "super")] f64);
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for &x in v {
                seq.serialize_element(&W(x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            #[derive(Deserialize)]
            struct W(#[serde(with = "super")] f64);
            Ok(Vec::<W>::deserialize(d)?.into_iter().map(|w| w.0).collect())
        }
    }
}

/// Metrics of one trial, or the mean over several.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(with = "nan_as_string")]
    pub accuracy: f64,
    #[serde(with = "nan_as_string::vec")]
    pub precision: Vec<f64>,
    #[serde(with = "nan_as_string::vec")]
    pub recall: Vec<f64>,
}

impl PartialEq for MetricsReport {
    /// Bitwise on the floats, so NaN equals NaN.
    fn eq(&self, other: &Self) -> bool {
        let same = |a: &[f64], b: &[f64]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan()))
        };
        same(&[self.accuracy], &[other.accuracy])
            && same(&self.precision, &other.precision)
            && same(&self.recall, &other.recall)
    }
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let k = cm.classes();
        Self {
            accuracy: cm.accuracy(),
            precision: (0..k).map(|c| cm.precision(c)).collect(),
            recall: (0..k).map(|c| cm.recall(c)).collect(),
        }
    }

    /// NaN-propagating mean of every metric.
    pub fn mean(reports: &[MetricsReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Contract("aggregate of zero trials".into()))?;
        let k = first.precision.len();
        if reports.iter().any(|r| r.precision.len() != k || r.recall.len() != k) {
            return Err(Error::shape("MetricsReport::mean", "trials disagree on class count"));
        }
        let n = reports.len() as f64;
        let mean_of = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            accuracy: mean_of(&|r| r.accuracy),
            precision: (0..k).map(|c| mean_of(&|r| r.precision[c])).collect(),
            recall: (0..k).map(|c| mean_of(&|r| r.recall[c])).collect(),
        })
    }
}

/// Objective for picking one trial out of several.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "objective", rename_all = "snake_case", deny_unknown_fields)]
pub enum BestTrial {
    /// Highest accuracy.
    Accuracy,
    /// Lowest precision of `class` among trials with accuracy at least `accuracy_floor`.
    MinPrecision { class: usize, accuracy_floor: f64 },
    /// Lowest recall of `class` among trials with accuracy at least `accuracy_floor`.
    MinRecall { class: usize, accuracy_floor: f64 },
}

impl BestTrial {
    /// Index of the selected trial. NaN metrics rank last; if no trial meets the
    /// floor, the most accurate one is returned. Ties go to the earliest trial.
    pub fn select(&self, trials: &[MetricsReport]) -> Option<usize> {
        if trials.is_empty() {
            return None;
        }
        let most_accurate = || {
            (0..trials.len()).fold(0, |best, i| {
                if trials[i].accuracy > trials[best].accuracy {
                    i
                } else {
                    best
                }
            })
        };
        let (class, floor, pick): (usize, f64, fn(&MetricsReport, usize) -> f64) = match *self {
            BestTrial::Accuracy => return Some(most_accurate()),
            BestTrial::MinPrecision { class, accuracy_floor } => (class, accuracy_floor, |r, c| r.precision[c]),
            BestTrial::MinRecall { class, accuracy_floor } => (class, accuracy_floor, |r, c| r.recall[c]),
        };
        let mut best: Option<usize> = None;
        for (i, r) in trials.iter().enumerate() {
            let v = pick(r, class);
            if r.accuracy < floor || v.is_nan() {
                continue;
            }
            if best.is_none_or(|b| v < pick(&trials[b], class)) {
                best = Some(i);
            }
        }
        Some(best.unwrap_or_else(most_accurate))
    }
}
