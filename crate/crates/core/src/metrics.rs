//! Accuracy, micro/macro F1, repeat aggregation and the support/query
//! similarity export.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute::Tensor;
use crate::protonet::PrototypeStrategy;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no predictions to score")]
    Empty,
    #[error("{preds} predictions for {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("{labels} row/column labels for {rows} rows")]
    LabelMismatch { labels: usize, rows: usize },
}

fn check(preds: &[usize], labels: &[usize]) -> Result<(), MetricError> {
    if preds.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64, MetricError> {
    check(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub micro: f64,
    pub macro_: f64,
}

/// Micro-F1 from pooled counts and macro-F1 as the unweighted mean of
/// per-class F1 over `classes`. A class with no true and no predicted
/// instance scores 0.
pub fn f1_scores(preds: &[usize], labels: &[usize], classes: &[usize]) -> Result<F1Scores, MetricError> {
    check(preds, labels)?;
    let (mut tp_all, mut fp_all, mut fn_all) = (0usize, 0usize, 0usize);
    let mut macro_sum = 0.0;
    for &c in classes {
        let mut tp = 0;
        let mut fp = 0;
        let mut fneg = 0;
        for (&p, &l) in preds.iter().zip(labels) {
            match (p == c, l == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        macro_sum += f1(tp, fp, fneg);
        tp_all += tp;
        fp_all += fp;
        fn_all += fneg;
    }
    Ok(F1Scores {
        micro: f1(tp_all, fp_all, fn_all),
        macro_: if classes.is_empty() {
            0.0
        } else {
            macro_sum / classes.len() as f64
        },
    })
}

fn f1(tp: usize, fp: usize, fneg: usize) -> f64 {
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Metrics for one repeat, averaged over its tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepeatMetrics {
    pub accuracy: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

impl RepeatMetrics {
    pub fn mean_of(tasks: &[RepeatMetrics]) -> Self {
        let n = tasks.len().max(1) as f64;
        Self {
            accuracy: tasks.iter().map(|t| t.accuracy).sum::<f64>() / n,
            micro_f1: tasks.iter().map(|t| t.micro_f1).sum::<f64>() / n,
            macro_f1: tasks.iter().map(|t| t.macro_f1).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation over repeats.
    pub std: f64,
}

impl Summary {
    pub fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count();
        if n == 0 {
            return Self { mean: 0.0, std: 0.0 };
        }
        let mean = values.clone().sum::<f64>() / n as f64;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub num_tasks: usize,
    pub repeats: usize,
    pub strategy: PrototypeStrategy,
    pub per_repeat: Vec<RepeatMetrics>,
    pub accuracy: Summary,
    pub micro_f1: Summary,
    pub macro_f1: Summary,
}

impl MetricReport {
    pub fn from_repeats(
        n_way: usize,
        k_shot: usize,
        m_query: usize,
        num_tasks: usize,
        strategy: PrototypeStrategy,
        per_repeat: Vec<RepeatMetrics>,
    ) -> Self {
        let it = per_repeat.iter();
        Self {
            n_way,
            k_shot,
            m_query,
            num_tasks,
            repeats: per_repeat.len(),
            strategy,
            accuracy: Summary::of(it.clone().map(|r| r.accuracy)),
            micro_f1: Summary::of(it.clone().map(|r| r.micro_f1)),
            macro_f1: Summary::of(it.map(|r| r.macro_f1)),
            per_repeat,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// One row per repeat, then `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("repeat,accuracy,micro_f1,macro_f1\n");
        for (i, r) in self.per_repeat.iter().enumerate() {
            let _ = writeln!(out, "{i},{},{},{}", r.accuracy, r.micro_f1, r.macro_f1);
        }
        let _ = writeln!(
            out,
            "mean,{},{},{}",
            self.accuracy.mean, self.micro_f1.mean, self.macro_f1.mean
        );
        let _ = writeln!(
            out,
            "std,{},{},{}",
            self.accuracy.std, self.micro_f1.std, self.macro_f1.std
        );
        out
    }
}

/// Entry `(i, j) = -‖u_i - v_j‖` (unsquared Euclidean).
pub fn similarity_matrix(u: &Tensor<f64>, v: &Tensor<f64>) -> Result<Tensor<f64>, MetricError> {
    if u.cols() != v.cols() {
        return Err(MetricError::DimMismatch(u.cols(), v.cols()));
    }
    let mut out = Tensor::zeros(u.rows(), v.rows());
    for i in 0..u.rows() {
        for j in 0..v.rows() {
            let d: f64 = u
                .row(i)
                .iter()
                .zip(v.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out.set(i, j, -d.sqrt());
        }
    }
    Ok(out)
}

/// A similarity matrix whose rows (support) and columns (query) are
/// labelled by `(class, member)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: Vec<(usize, usize)>,
    pub cols: Vec<(usize, usize)>,
    pub values: Tensor<f64>,
}

impl SimilarityMatrix {
    pub fn new(
        rows: Vec<(usize, usize)>,
        cols: Vec<(usize, usize)>,
        values: Tensor<f64>,
    ) -> Result<Self, MetricError> {
        if rows.len() != values.rows() {
            return Err(MetricError::LabelMismatch {
                labels: rows.len(),
                rows: values.rows(),
            });
        }
        if cols.len() != values.cols() {
            return Err(MetricError::LabelMismatch {
                labels: cols.len(),
                rows: values.cols(),
            });
        }
        Ok(Self { rows, cols, values })
    }

    /// CSV with a header naming each query column `c<class>:m<member>`;
    /// each row starts with the support label. Values carry 6 significant
    /// digits.
    pub fn to_csv(&self) -> String {
        let label = |(c, m): (usize, usize)| format!("c{c}:m{m}");
        let mut out = String::from("support\\query");
        for &c in &self.cols {
            out.push(',');
            out.push_str(&label(c));
        }
        out.push('\n');
        for (i, &r) in self.rows.iter().enumerate() {
            out.push_str(&label(r));
            for j in 0..self.cols.len() {
                out.push(',');
                out.push_str(&format_sig(self.values.get(i, j), 6));
            }
            out.push('\n');
        }
        out
    }
}

/// Formats like C's `%.{digits}g`.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if exp < -4 || exp >= digits as i32 {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim(&format!("{:.*}", decimals, x))
    }
}
