//! Prototype construction, distance-softmax classification, episode loss
//! and prediction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute::ops::{self, softmax};
use crate::compute::Tensor;
use crate::Real;

/// Lower bound applied to probabilities before taking logs, which only
/// matters for 32-bit underflow.
pub const PROB_FLOOR: f64 = 1e-30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtoError {
    #[error("class {0} has no support nodes")]
    EmptyClass(usize),
    #[error("strategy {strategy} {detail}")]
    StrategyMismatch {
        strategy: PrototypeStrategy,
        detail: &'static str,
    },
    #[error("no prototypes to classify against")]
    NoPrototypes,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("support node {node} out of range for {len} rows")]
    NodeOutOfRange { node: usize, len: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{probs} probability rows for {labels} labels")]
    LabelCount { probs: usize, labels: usize },
    #[error("empty query set")]
    EmptyQuery,
}

/// How class prototypes are formed from support embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PrototypeStrategy {
    /// Importance-weighted average with valuator scores (GPN).
    #[default]
    #[serde(rename = "gpn")]
    Weighted,
    /// Plain mean of support embeddings (GPN-naive / PN).
    #[serde(rename = "gpn-naive")]
    Mean,
}

impl fmt::Display for PrototypeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrototypeStrategy::Weighted => "gpn",
            PrototypeStrategy::Mean => "gpn-naive",
        })
    }
}

impl FromStr for PrototypeStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gpn" => Ok(Self::Weighted),
            "gpn-naive" | "pn" => Ok(Self::Mean),
            other => Err(format!("unknown prototype strategy '{other}' (expected gpn or gpn-naive)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet<T> {
    /// One row per episode class.
    pub prototypes: Tensor<T>,
    /// Support weights grouped by class; uniform for the mean strategy.
    pub weights: Vec<Vec<T>>,
    pub strategy: PrototypeStrategy,
}

impl<T: Real> PrototypeSet<T> {
    pub fn num_classes(&self) -> usize {
        self.prototypes.rows()
    }
}

/// Row `i` holds the distribution over the episode classes for query `i`.
pub type ClassProbabilities<T> = Tensor<T>;

/// `β` for each class: softmax of the adjusted scores of that class's
/// support nodes. `scores` is indexed by node id.
pub fn support_weights<T: Real>(
    scores: &[T],
    support_by_class: &[Vec<usize>],
) -> Result<Vec<Vec<T>>, ProtoError> {
    support_by_class
        .iter()
        .enumerate()
        .map(|(c, nodes)| {
            if nodes.is_empty() {
                return Err(ProtoError::EmptyClass(c));
            }
            let logits = nodes
                .iter()
                .map(|&i| {
                    scores.get(i).copied().ok_or(ProtoError::NodeOutOfRange {
                        node: i,
                        len: scores.len(),
                    })
                })
                .collect::<Result<Vec<T>, _>>()?;
            Ok(softmax(&logits))
        })
        .collect()
}

/// `p_c = Σ β_i z_i` (weighted) or the plain mean (mean strategy).
/// Weights must be given exactly when the strategy is weighted.
pub fn prototypes<T: Real>(
    embeddings: &Tensor<T>,
    weights: Option<&[Vec<T>]>,
    support_by_class: &[Vec<usize>],
    strategy: PrototypeStrategy,
) -> Result<PrototypeSet<T>, ProtoError> {
    let weights: Vec<Vec<T>> = match (strategy, weights) {
        (PrototypeStrategy::Weighted, Some(w)) => {
            if w.len() != support_by_class.len()
                || w.iter().zip(support_by_class).any(|(a, b)| a.len() != b.len())
            {
                return Err(ProtoError::StrategyMismatch {
                    strategy,
                    detail: "weights do not match the support layout",
                });
            }
            w.to_vec()
        }
        (PrototypeStrategy::Weighted, None) => {
            return Err(ProtoError::StrategyMismatch {
                strategy,
                detail: "requires support weights",
            })
        }
        (PrototypeStrategy::Mean, Some(_)) => {
            return Err(ProtoError::StrategyMismatch {
                strategy,
                detail: "takes no support weights",
            })
        }
        (PrototypeStrategy::Mean, None) => support_by_class
            .iter()
            .map(|nodes| vec![T::one() / T::lit(nodes.len() as f64); nodes.len()])
            .collect(),
    };

    let mut out = Tensor::zeros(support_by_class.len(), embeddings.cols());
    for (c, (nodes, w)) in support_by_class.iter().zip(&weights).enumerate() {
        if nodes.is_empty() {
            return Err(ProtoError::EmptyClass(c));
        }
        for (&i, &wi) in nodes.iter().zip(w) {
            if i >= embeddings.rows() {
                return Err(ProtoError::NodeOutOfRange {
                    node: i,
                    len: embeddings.rows(),
                });
            }
            for (o, &z) in out.row_mut(c).iter_mut().zip(embeddings.row(i)) {
                *o = *o + wi * z;
            }
        }
    }
    Ok(PrototypeSet {
        prototypes: out,
        weights,
        strategy,
    })
}

/// `p(c | z) = softmax_c(-‖z - p_c‖²)`.
pub fn classify<T: Real>(query: &[T], protos: &PrototypeSet<T>) -> Result<Vec<T>, ProtoError> {
    if protos.num_classes() == 0 {
        return Err(ProtoError::NoPrototypes);
    }
    if query.len() != protos.prototypes.cols() {
        return Err(ProtoError::DimMismatch(query.len(), protos.prototypes.cols()));
    }
    let d = ops::sq_euclid(query, &protos.prototypes).expect("dims checked");
    let neg: Vec<T> = d.into_iter().map(|x| -x).collect();
    Ok(softmax(&neg))
}

/// Classifies every listed row of `embeddings`.
pub fn classify_all<T: Real>(
    embeddings: &Tensor<T>,
    queries: &[usize],
    protos: &PrototypeSet<T>,
) -> Result<ClassProbabilities<T>, ProtoError> {
    let mut out = Tensor::zeros(queries.len(), protos.num_classes());
    for (r, &q) in queries.iter().enumerate() {
        if q >= embeddings.rows() {
            return Err(ProtoError::NodeOutOfRange {
                node: q,
                len: embeddings.rows(),
            });
        }
        out.row_mut(r).copy_from_slice(&classify(embeddings.row(q), protos)?);
    }
    Ok(out)
}

/// Mean negative log-likelihood of the true (episode-local) labels.
pub fn episode_loss<T: Real>(probs: &ClassProbabilities<T>, labels: &[usize]) -> Result<T, ProtoError> {
    if probs.rows() != labels.len() {
        return Err(ProtoError::LabelCount {
            probs: probs.rows(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(ProtoError::EmptyQuery);
    }
    let floor = T::lit(PROB_FLOOR);
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        if y >= probs.cols() {
            return Err(ProtoError::LabelOutOfRange {
                label: y,
                classes: probs.cols(),
            });
        }
        total = total - probs.get(i, y).max(floor).ln();
    }
    Ok(total / T::lit(labels.len() as f64))
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict<T: Real>(probs: &ClassProbabilities<T>) -> Vec<usize> {
    (0..probs.rows())
        .map(|r| {
            probs
                .row(r)
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
