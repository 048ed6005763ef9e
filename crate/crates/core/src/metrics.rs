//! Per-sample error metrics and their aggregation over a split.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde_json::json;

use crate::dataset::StabilityClass;
use crate::error::{Error, Result};
use crate::processor::N_FIELDS;
use crate::tensor::Matrix;

/// Reported field groups and their columns. Velocity pools its three components.
pub const METRIC_FIELDS: [(&str, &[usize]); 5] = [
    ("v", &[0, 1, 2]),
    ("p", &[3]),
    ("theta", &[4]),
    ("k", &[5]),
    ("eps", &[6]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Nmse,
    L1,
    L2,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Nmse, Metric::L1, Metric::L2];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Nmse => "nmse",
            Metric::L1 => "l1_err",
            Metric::L2 => "l2_err",
        }
    }
}

fn check_pair(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() || y.is_empty() {
        return Err(Error::Shape(format!("metric inputs of length {} and {}", y.len(), yhat.len())));
    }
    Ok(())
}

/// `mean((y - yhat)^2) / var(y)`.
pub fn nmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var.sqrt() <= 1e-12 * mean.abs().max(1.0) {
        return Err(Error::InvalidInput("ground truth has zero variance".into()));
    }
    let mse = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    Ok(mse / var)
}

/// `||y - yhat||_1 / ||y||_1`.
pub fn l1_err(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    let den: f64 = y.iter().map(|v| v.abs()).sum();
    if den == 0.0 {
        return Err(Error::InvalidInput("ground truth has zero L1 norm".into()));
    }
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / den)
}

/// `||y - yhat||_2 / ||y||_2`.
pub fn l2_err(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    let den: f64 = y.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(Error::InvalidInput("ground truth has zero L2 norm".into()));
    }
    Ok((y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / den).sqrt())
}

pub fn metric(m: Metric, y: &[f64], yhat: &[f64]) -> Result<f64> {
    match m {
        Metric::Nmse => nmse(y, yhat),
        Metric::L1 => l1_err(y, yhat),
        Metric::L2 => l2_err(y, yhat),
    }
}

fn columns(m: &Matrix, cols: &[usize]) -> Vec<f64> {
    (0..m.rows()).flat_map(|r| cols.iter().map(move |&c| m.get(r, c))).collect()
}

/// Metrics of one sample, keyed by `(field, metric)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub sample: String,
    pub class: StabilityClass,
    pub values: BTreeMap<(String, Metric), f64>,
}

/// Physical-unit metrics of one sample. Temperature is skipped for neutral samples.
pub fn compute_metrics(sample: &str, pred: &Matrix, truth: &Matrix, class: StabilityClass) -> Result<SampleMetrics> {
    if pred.shape() != truth.shape() || truth.cols() != N_FIELDS {
        return Err(Error::Shape(format!(
            "prediction {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let mut values = BTreeMap::new();
    for (field, cols) in METRIC_FIELDS {
        if field == "theta" && class == StabilityClass::Neutral {
            continue;
        }
        let y = columns(truth, cols);
        let yhat = columns(pred, cols);
        for m in Metric::ALL {
            let v = metric(m, &y, &yhat).map_err(|e| Error::InvalidInput(format!("{sample}, field {field}: {e}")))?;
            values.insert((field.to_string(), m), v);
        }
    }
    Ok(SampleMetrics {
        sample: sample.to_string(),
        class,
        values,
    })
}

impl SampleMetrics {
    pub fn get(&self, field: &str, m: Metric) -> Option<f64> {
        self.values.get(&(field.to_string(), m)).copied()
    }

    /// One JSON object per `(field, metric)`.
    pub fn json_lines(&self) -> Vec<String> {
        self.values
            .iter()
            .map(|((field, m), v)| {
                json!({
                    "sample": self.sample,
                    "class": self.class.name(),
                    "field": field,
                    "metric": m.name(),
                    "value": v,
                })
                .to_string()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub field: String,
    pub metric: Metric,
    pub mean: f64,
    /// Population standard deviation over samples.
    pub std: f64,
    pub count: usize,
}

/// Mean and standard deviation over samples for every `(field, metric)`.
pub fn aggregate(samples: &[SampleMetrics]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    for (field, _) in METRIC_FIELDS {
        for m in Metric::ALL {
            let vals: Vec<f64> = samples.iter().filter_map(|s| s.get(field, m)).collect();
            if vals.is_empty() {
                continue;
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            rows.push(AggregateRow {
                field: field.to_string(),
                metric: m,
                mean,
                std,
                count: vals.len(),
            });
        }
    }
    rows
}

/// Aggregates per stability class, plus `"all"`.
pub fn aggregate_by_class(samples: &[SampleMetrics]) -> BTreeMap<String, Vec<AggregateRow>> {
    let mut out = BTreeMap::new();
    out.insert("all".to_string(), aggregate(samples));
    for class in StabilityClass::ALL {
        let subset: Vec<SampleMetrics> = samples.iter().filter(|s| s.class == class).cloned().collect();
        if !subset.is_empty() {
            out.insert(class.name().to_string(), aggregate(&subset));
        }
    }
    out
}

pub fn aggregate_json(rows: &[AggregateRow]) -> serde_json::Value {
    serde_json::Value::Array(
        rows.iter()
            .map(|r| {
                json!({
                    "field": r.field,
                    "metric": r.metric.name(),
                    "mean": r.mean,
                    "std": r.std,
                    "count": r.count,
                })
            })
            .collect(),
    )
}

/// Text table with one row per field and `mean ± std` per metric.
pub fn format_table(rows: &[AggregateRow]) -> String {
    let mut s = format!("{:<8}", "field");
    for m in Metric::ALL {
        let _ = write!(s, "{:>26}", m.name());
    }
    s.push('\n');
    for (field, _) in METRIC_FIELDS {
        let cells: Vec<&AggregateRow> = rows.iter().filter(|r| r.field == field).collect();
        if cells.is_empty() {
            continue;
        }
        let _ = write!(s, "{field:<8}");
        for m in Metric::ALL {
            match cells.iter().find(|r| r.metric == m) {
                Some(r) => {
                    let _ = write!(s, "{:>26}", format!("{:.4e} ± {:.2e}", r.mean, r.std));
                }
                None => {
                    let _ = write!(s, "{:>26}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

/// Per-sample mean of each field group, broadcast to every point.
pub fn mean_predictor(truth: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(truth.rows(), truth.cols());
    for (_, cols) in METRIC_FIELDS {
        let vals = columns(truth, cols);
        let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        for r in 0..out.rows() {
            for &c in cols {
                out.set(r, c, mean);
            }
        }
    }
    out
}
