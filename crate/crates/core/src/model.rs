//! Trainable parameters and the per-graph tensors every forward pass needs.

use rand::{Rng, SeedableRng};

use crate::compute::{ComputeError, SparseMatrix, Tensor};
use crate::encoder::{self, EncoderParams};
use crate::graph::{centrality, normalized_adjacency, AttributedGraph};
use crate::valuator::{self, ScoreVector, ValuatorParams};
use crate::Real;

/// Names of the parameter tensors, in [`ModelParams::tensors`] order.
pub const PARAM_NAMES: [&str; 8] = [
    "encoder.w0",
    "encoder.b0",
    "encoder.w1",
    "encoder.b1",
    "valuator.w_s",
    "valuator.b_s",
    "valuator.a1",
    "valuator.a2",
];

/// Encoder and valuator parameters. The same layout doubles as the
/// container for their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: EncoderParams<T>,
    pub valuator: ValuatorParams<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn init<R: Rng + ?Sized>(feature_dim: usize, rng: &mut R) -> Self {
        let encoder = EncoderParams::init(feature_dim, rng);
        let valuator = ValuatorParams::init(feature_dim, rng);
        Self { encoder, valuator }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor<T>| Tensor::zeros(t.rows(), t.cols());
        Self {
            encoder: EncoderParams {
                w0: z(&self.encoder.w0),
                b0: z(&self.encoder.b0),
                w1: z(&self.encoder.w1),
                b1: z(&self.encoder.b1),
            },
            valuator: ValuatorParams {
                w_s: z(&self.valuator.w_s),
                b_s: z(&self.valuator.b_s),
                a1: z(&self.valuator.a1),
                a2: z(&self.valuator.a2),
            },
        }
    }

    /// Expected shape of every tensor for a given feature dimension.
    pub fn expected_shapes(feature_dim: usize) -> [(usize, usize); 8] {
        use encoder::{EMBED_DIM, HIDDEN_DIM};
        [
            (feature_dim, HIDDEN_DIM),
            (1, HIDDEN_DIM),
            (HIDDEN_DIM, EMBED_DIM),
            (1, EMBED_DIM),
            (feature_dim, 1),
            (1, 1),
            (2, 1),
            (2, 1),
        ]
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.feature_dim()
    }

    pub fn tensors(&self) -> [&Tensor<T>; 8] {
        let (e, v) = (&self.encoder, &self.valuator);
        [&e.w0, &e.b0, &e.w1, &e.b1, &v.w_s, &v.b_s, &v.a1, &v.a2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 8] {
        let (e, v) = (&mut self.encoder, &mut self.valuator);
        [
            &mut e.w0, &mut e.b0, &mut e.w1, &mut e.b1, &mut v.w_s, &mut v.b_s, &mut v.a1, &mut v.a2,
        ]
    }

    /// Rebuilds parameters from tensors in [`PARAM_NAMES`] order.
    pub fn from_tensors(t: [Tensor<T>; 8]) -> Result<Self, ComputeError> {
        let d = t[0].rows();
        let expected = Self::expected_shapes(d);
        for (k, (tensor, shape)) in t.iter().zip(expected).enumerate() {
            if tensor.shape() != shape {
                return Err(ComputeError::StateMismatch(format!(
                    "{} has shape {:?}, expected {:?}",
                    PARAM_NAMES[k],
                    tensor.shape(),
                    shape
                )));
            }
        }
        let [w0, b0, w1, b1, w_s, b_s, a1, a2] = t;
        Ok(Self {
            encoder: EncoderParams { w0, b0, w1, b1 },
            valuator: ValuatorParams { w_s, b_s, a1, a2 },
        })
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let [w0, b0, w1, b1, w_s, b_s, a1, a2] = self.tensors().map(|t| t.cast::<U>());
        ModelParams {
            encoder: EncoderParams { w0, b0, w1, b1 },
            valuator: ValuatorParams { w_s, b_s, a1, a2 },
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

/// Graph-derived constants in the working precision: features, the
/// normalised adjacency (which also serves as the valuator's neighbourhood
/// pattern) and the centrality vector.
#[derive(Debug, Clone)]
pub struct GraphContext<T> {
    pub features: Tensor<T>,
    pub a_hat: SparseMatrix<T>,
    pub centrality: Vec<T>,
}

impl<T: Real> GraphContext<T> {
    pub fn new(g: &AttributedGraph, centrality_eps: f64) -> Self {
        Self {
            features: g.features().cast(),
            a_hat: normalized_adjacency(g),
            centrality: centrality(g, centrality_eps).into_iter().map(T::lit).collect(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }
}

/// Eval-mode embeddings and adjusted importance scores for every node.
pub fn embed<T: Real>(
    ctx: &GraphContext<T>,
    params: &ModelParams<T>,
) -> Result<(Tensor<T>, ScoreVector<T>), ComputeError> {
    // eval mode never draws from the rng
    let mut no_rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let z = encoder::encode(&ctx.features, &ctx.a_hat, &params.encoder, 0.0, false, &mut no_rng)?;
    let s = valuator::value_nodes(&ctx.features, &ctx.a_hat, &ctx.centrality, &params.valuator)?;
    Ok((z, s))
}
