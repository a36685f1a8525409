//! Node valuator: a scoring layer, two attention-based score aggregation
//! layers and a degree-based centrality adjustment.
//!
//! ```text
//! s⁰_i  = tanh(w_sᵀ x_i + b_s)
//! e_ij  = LeakyReLU_0.2(a_lᵀ [s_i^{l-1} ‖ s_j^{l-1}])      j ∈ N(i) ∪ {i}
//! α_ij  = softmax_j(e_ij)
//! s^l_i = Σ_j α_ij s_j^{l-1}
//! s̃_i   = sigmoid(ln(deg(i) + ε) · s²_i)
//! ```
//!
//! The softmax normaliser runs over the anchor node's own neighbourhood,
//! i.e. every logit in row `i` uses `s_i` as its first component.
//! Neighbourhoods come from the stored pattern of the normalised adjacency,
//! which already contains the self-loop.

use rand::Rng;

use crate::compute::ops::{self, sigmoid, Activation};
use crate::compute::{glorot_uniform, ComputeError, SparseMatrix, Tape, Tensor, Var};
use crate::Real;

pub const AGGREGATION_LAYERS: usize = 2;
pub const ATTENTION_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct ValuatorParams<T> {
    /// Scoring weights, `d x 1`.
    pub w_s: Tensor<T>,
    /// Scoring bias, `1 x 1`.
    pub b_s: Tensor<T>,
    /// Attention vector of the first aggregation layer, `2 x 1`.
    pub a1: Tensor<T>,
    /// Attention vector of the second aggregation layer, `2 x 1`.
    pub a2: Tensor<T>,
}

impl<T: Real> ValuatorParams<T> {
    pub fn init<R: Rng + ?Sized>(feature_dim: usize, rng: &mut R) -> Self {
        Self {
            w_s: glorot_uniform(feature_dim, 1, rng),
            b_s: Tensor::zeros(1, 1),
            a1: glorot_uniform(2, 1, rng),
            a2: glorot_uniform(2, 1, rng),
        }
    }

    /// A valuator whose output is 0.5 for every node.
    pub fn constant(feature_dim: usize) -> Self {
        Self {
            w_s: Tensor::zeros(feature_dim, 1),
            b_s: Tensor::zeros(1, 1),
            a1: Tensor::zeros(2, 1),
            a2: Tensor::zeros(2, 1),
        }
    }

    fn attention(&self, layer: usize) -> &Tensor<T> {
        if layer == 0 {
            &self.a1
        } else {
            &self.a2
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreStage {
    Initial,
    Aggregated(usize),
    Adjusted,
}

/// One score per node, tagged with the stage that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector<T> {
    pub values: Vec<T>,
    pub stage: ScoreStage,
}

pub fn initial_scores<T: Real>(
    features: &Tensor<T>,
    w_s: &Tensor<T>,
    b_s: &Tensor<T>,
) -> Result<ScoreVector<T>, ComputeError> {
    if w_s.shape() != (features.cols(), 1) || b_s.shape() != (1, 1) {
        return Err(ComputeError::ShapeMismatch {
            op: "initial_scores",
            left: features.shape(),
            right: w_s.shape(),
        });
    }
    let b = b_s.item();
    let values = (0..features.rows())
        .map(|r| {
            let dot: T = features
                .row(r)
                .iter()
                .zip(w_s.as_slice())
                .map(|(&x, &w)| x * w)
                .sum();
            (dot + b).tanh()
        })
        .collect();
    Ok(ScoreVector {
        values,
        stage: ScoreStage::Initial,
    })
}

/// Attention weights for every stored entry of `neighbourhoods`, laid out
/// like its CSR values.
pub fn attention_weights<T: Real>(
    neighbourhoods: &SparseMatrix<T>,
    prev: &ScoreVector<T>,
    a: &Tensor<T>,
) -> Result<Vec<T>, ComputeError> {
    check_attention(neighbourhoods, prev, a)?;
    let (_, _, alpha) = ops::neighbor_attention(&prev.values, a.as_slice(), neighbourhoods, ATTENTION_SLOPE)?;
    Ok(alpha)
}

pub fn score_aggregate<T: Real>(
    neighbourhoods: &SparseMatrix<T>,
    prev: &ScoreVector<T>,
    a: &Tensor<T>,
) -> Result<ScoreVector<T>, ComputeError> {
    check_attention(neighbourhoods, prev, a)?;
    let (values, _, _) = ops::neighbor_attention(&prev.values, a.as_slice(), neighbourhoods, ATTENTION_SLOPE)?;
    let layer = match prev.stage {
        ScoreStage::Aggregated(l) => l + 1,
        _ => 1,
    };
    Ok(ScoreVector {
        values,
        stage: ScoreStage::Aggregated(layer),
    })
}

fn check_attention<T: Real>(
    neighbourhoods: &SparseMatrix<T>,
    prev: &ScoreVector<T>,
    a: &Tensor<T>,
) -> Result<(), ComputeError> {
    if prev.values.len() != neighbourhoods.n_rows() || a.len() != 2 {
        return Err(ComputeError::ShapeMismatch {
            op: "score_aggregate",
            left: (neighbourhoods.n_rows(), neighbourhoods.n_cols()),
            right: (prev.values.len(), a.len()),
        });
    }
    Ok(())
}

/// `s̃_i = sigmoid(C(i) · s_i)`; centrality is a graph constant.
pub fn final_scores<T: Real>(
    centrality: &[T],
    last: &ScoreVector<T>,
) -> Result<ScoreVector<T>, ComputeError> {
    if centrality.len() != last.values.len() {
        return Err(ComputeError::ShapeMismatch {
            op: "final_scores",
            left: (centrality.len(), 1),
            right: (last.values.len(), 1),
        });
    }
    Ok(ScoreVector {
        values: centrality
            .iter()
            .zip(&last.values)
            .map(|(&c, &s)| sigmoid(c * s))
            .collect(),
        stage: ScoreStage::Adjusted,
    })
}

/// Full valuator forward pass over all nodes.
pub fn value_nodes<T: Real>(
    features: &Tensor<T>,
    neighbourhoods: &SparseMatrix<T>,
    centrality: &[T],
    p: &ValuatorParams<T>,
) -> Result<ScoreVector<T>, ComputeError> {
    let mut s = initial_scores(features, &p.w_s, &p.b_s)?;
    for layer in 0..AGGREGATION_LAYERS {
        s = score_aggregate(neighbourhoods, &s, p.attention(layer))?;
    }
    final_scores(centrality, &s)
}

#[derive(Debug, Clone, Copy)]
pub struct ValuatorVars {
    pub w_s: Var,
    pub b_s: Var,
    pub a1: Var,
    pub a2: Var,
}

impl ValuatorVars {
    pub fn record<T: Real>(tape: &mut Tape<'_, T>, p: &ValuatorParams<T>) -> Self {
        Self {
            w_s: tape.param(p.w_s.clone()),
            b_s: tape.param(p.b_s.clone()),
            a1: tape.param(p.a1.clone()),
            a2: tape.param(p.a2.clone()),
        }
    }
}

/// Records [`value_nodes`] on a tape; returns the `n x 1` adjusted scores.
pub fn value_nodes_on_tape<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    x: Var,
    neighbourhoods: &'a SparseMatrix<T>,
    centrality: &[T],
    vars: &ValuatorVars,
) -> Result<Var, ComputeError> {
    let lin = tape.affine(x, vars.w_s, vars.b_s)?;
    let mut s = tape.activation(Activation::Tanh, lin)?;
    for a in [vars.a1, vars.a2] {
        s = tape.neighbor_attention(s, a, neighbourhoods, ATTENTION_SLOPE)?;
    }
    let scaled = tape.scale_rows(s, centrality.to_vec())?;
    tape.activation(Activation::Sigmoid, scaled)
}
