//! Imbalance-aware classification metrics from a single confusion matrix.
//!
//! Macro averages run over classes with nonzero support only.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::taxonomy::{Category, Taxonomy, N_CLASSES};
use crate::error::{Error, Result};

/// `m[i][j]` = number of samples with truth `i` predicted as `j`.
pub fn confusion_matrix(y: &[usize], y_hat: &[usize], n_classes: usize) -> Result<Vec<Vec<u64>>> {
    if y.len() != y_hat.len() {
        return Err(Error::shape(
            "confusion_matrix",
            format!("{} labels vs {} predictions", y.len(), y_hat.len()),
        ));
    }
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in y.iter().zip(y_hat) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::index(
                "confusion_matrix",
                format!("label pair ({t}, {p}) out of range for {n_classes} classes"),
            ));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub name: String,
    pub support: u64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub samples: u64,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub macro_fscore: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub macro_recall: f64,
    pub macro_fscore: f64,
    pub per_class: Vec<ClassMetrics>,
    pub per_category: BTreeMap<String, CategoryMetrics>,
    pub confusion: Vec<Vec<u64>>,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let n = confusion.len();
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Contract("metrics need at least one sample".into()));
        }
        let tax = (n == N_CLASSES).then(Taxonomy::build);
        let col: Vec<u64> = (0..n)
            .map(|j| confusion.iter().map(|r| r[j]).sum())
            .collect();
        let per_class: Vec<ClassMetrics> = (0..n)
            .map(|i| {
                let support: u64 = confusion[i].iter().sum();
                let tp = confusion[i][i];
                let recall = ratio(tp, support);
                let precision = ratio(tp, col[i]);
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                let name = match &tax {
                    Some(t) => t.entry(i).map(|(_, n)| n.to_string()).unwrap_or_default(),
                    None => format!("class_{i}"),
                };
                ClassMetrics {
                    class: i,
                    name,
                    support,
                    recall,
                    precision,
                    f1,
                }
            })
            .collect();
        let trace: u64 = (0..n).map(|i| confusion[i][i]).sum();
        let supported: Vec<&ClassMetrics> = per_class.iter().filter(|c| c.support > 0).collect();
        let recalls: Vec<f64> = supported.iter().map(|c| c.recall).collect();
        let f1s: Vec<f64> = supported.iter().map(|c| c.f1).collect();
        let balanced = mean(&recalls);

        let mut per_category = BTreeMap::new();
        if let Some(t) = &tax {
            for cat in Category::ALL {
                let classes: Vec<&ClassMetrics> = per_class
                    .iter()
                    .filter(|c| t.category_of(c.class).ok() == Some(cat) && c.support > 0)
                    .collect();
                let samples: u64 = classes.iter().map(|c| c.support).sum();
                if samples == 0 {
                    continue;
                }
                let correct: u64 = classes.iter().map(|c| confusion[c.class][c.class]).sum();
                per_category.insert(
                    cat.to_string(),
                    CategoryMetrics {
                        samples,
                        accuracy: ratio(correct, samples),
                        balanced_accuracy: mean(
                            &classes.iter().map(|c| c.recall).collect::<Vec<_>>(),
                        ),
                        macro_fscore: mean(&classes.iter().map(|c| c.f1).collect::<Vec<_>>()),
                    },
                );
            }
        }
        Ok(MetricsReport {
            accuracy: ratio(trace, total),
            balanced_accuracy: balanced,
            macro_recall: balanced,
            macro_fscore: mean(&f1s),
            per_class,
            per_category,
            confusion,
        })
    }

    pub fn from_predictions(y: &[usize], y_hat: &[usize], n_classes: usize) -> Result<Self> {
        Self::from_confusion(confusion_matrix(y, y_hat, n_classes)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("metrics report: {e}")))
    }
}

/// Most frequent label of `train` (lowest index on ties).
pub fn majority_class(train: &[usize], n_classes: usize) -> Result<usize> {
    let mut counts = vec![0usize; n_classes];
    for &t in train {
        *counts
            .get_mut(t)
            .ok_or_else(|| Error::index("majority_class", format!("label {t}")))? += 1;
    }
    if train.is_empty() {
        return Err(Error::Contract(
            "majority baseline needs training labels".into(),
        ));
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    Ok(counts.iter().position(|&c| c == best).unwrap_or(0))
}

/// Report of the constant predictor that always answers the training
/// majority class.
pub fn majority_baseline(
    train: &[usize],
    eval: &[usize],
    n_classes: usize,
) -> Result<MetricsReport> {
    let c = majority_class(train, n_classes)?;
    MetricsReport::from_predictions(eval, &vec![c; eval.len()], n_classes)
}

/// Names of the fields every serialized report must carry.
pub const REPORT_FIELDS: [&str; 7] = [
    "accuracy",
    "balanced_accuracy",
    "macro_recall",
    "macro_fscore",
    "per_class",
    "per_category",
    "confusion",
];

/// Checks a JSON document against the report format.
pub fn validate_report_json(v: &serde_json::Value) -> Result<()> {
    let obj = v
        .as_object()
        .ok_or_else(|| Error::Format("report must be a JSON object".into()))?;
    for f in REPORT_FIELDS {
        if !obj.contains_key(f) {
            return Err(Error::Format(format!("report lacks field {f:?}")));
        }
    }
    for f in &REPORT_FIELDS[..4] {
        let x = obj[*f]
            .as_f64()
            .ok_or_else(|| Error::Format(format!("{f} must be a number")))?;
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::Format(format!("{f} = {x} outside [0, 1]")));
        }
    }
    let r: MetricsReport = serde_json::from_value(v.clone())
        .map_err(|e| Error::Format(format!("report schema: {e}")))?;
    let n = r.confusion.len();
    if r.confusion.iter().any(|row| row.len() != n) || r.per_class.len() != n {
        return Err(Error::Format(
            "confusion must be square and match per_class".into(),
        ));
    }
    Ok(())
}
