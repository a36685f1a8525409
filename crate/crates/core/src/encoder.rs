//! Two-layer GCN encoder producing 16-dimensional node embeddings.

use rand::Rng;

use crate::compute::ops::{self, Activation};
use crate::compute::{glorot_uniform, ComputeError, SparseMatrix, Tape, Tensor, Var};
use crate::Real;

pub const HIDDEN_DIM: usize = 32;
pub const EMBED_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub w0: Tensor<T>,
    pub b0: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
}

impl<T: Real> EncoderParams<T> {
    pub fn init<R: Rng + ?Sized>(feature_dim: usize, rng: &mut R) -> Self {
        Self {
            w0: glorot_uniform(feature_dim, HIDDEN_DIM, rng),
            b0: Tensor::zeros(1, HIDDEN_DIM),
            w1: glorot_uniform(HIDDEN_DIM, EMBED_DIM, rng),
            b1: Tensor::zeros(1, EMBED_DIM),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w0.rows()
    }
}

/// Tape handles for [`EncoderParams`].
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub w0: Var,
    pub b0: Var,
    pub w1: Var,
    pub b1: Var,
}

impl EncoderVars {
    pub fn record<T: Real>(tape: &mut Tape<'_, T>, p: &EncoderParams<T>) -> Self {
        Self {
            w0: tape.param(p.w0.clone()),
            b0: tape.param(p.b0.clone()),
            w1: tape.param(p.w1.clone()),
            b1: tape.param(p.b1.clone()),
        }
    }
}

fn check_dims<T: Real>(x: &Tensor<T>, p: &EncoderParams<T>) -> Result<(), ComputeError> {
    if x.cols() != p.w0.rows() {
        return Err(ComputeError::ShapeMismatch {
            op: "encode",
            left: x.shape(),
            right: p.w0.shape(),
        });
    }
    Ok(())
}

/// `Z = ReLU(Â · ReLU(Â · drop(X) · W0 + b0) · W1 + b1)` for every node.
///
/// Dropout is applied to the input of each layer in training mode only.
pub fn encode<T: Real, R: Rng + ?Sized>(
    features: &Tensor<T>,
    a_hat: &SparseMatrix<T>,
    p: &EncoderParams<T>,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor<T>, ComputeError> {
    check_dims(features, p)?;
    let layer = |h: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, rng: &mut R| {
        let h = ops::dropout(h, dropout, training, rng)?;
        let mut out = ops::spmm(a_hat, &h.matmul(w)?)?;
        ops::add_row_bias(&mut out, b)?;
        Ok::<_, ComputeError>(ops::activation(Activation::Relu, &out))
    };
    let h1 = layer(features, &p.w0, &p.b0, rng)?;
    layer(&h1, &p.w1, &p.b1, rng)
}

/// Records [`encode`] on a tape. Masks are drawn from `rng` in the same
/// order as the plain version, so both agree for a given seed.
pub fn encode_on_tape<'a, T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<'a, T>,
    x: Var,
    a_hat: &'a SparseMatrix<T>,
    vars: &EncoderVars,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var, ComputeError> {
    let mut layer = |tape: &mut Tape<'a, T>, h: Var, w: Var, b: Var| {
        let h = if training && dropout > 0.0 {
            let (r, c) = tape.value(h).shape();
            let mask = ops::dropout_mask(r, c, dropout, rng)?;
            tape.mul_const(h, mask)?
        } else {
            h
        };
        let hw = tape.matmul(h, w)?;
        let prop = tape.spmm(a_hat, hw)?;
        let biased = tape.add_bias(prop, b)?;
        tape.activation(Activation::Relu, biased)
    };
    if tape.value(x).cols() != tape.value(vars.w0).rows() {
        return Err(ComputeError::ShapeMismatch {
            op: "encode",
            left: tape.value(x).shape(),
            right: tape.value(vars.w0).shape(),
        });
    }
    let h1 = layer(tape, x, vars.w0, vars.b0)?;
    layer(tape, h1, vars.w1, vars.b1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let p = EncoderParams::<f64>::init(4, &mut rng());
        let a = SparseMatrix::identity(3);
        let z = encode(&Tensor::zeros(3, 4), &a, &p, 0.0, false, &mut rng()).unwrap();
        assert_eq!(z.shape(), (3, EMBED_DIM));
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn isolated_node_is_a_two_layer_mlp() {
        let mut r = rng();
        let mut p = EncoderParams::<f64>::init(3, &mut r);
        p.b0 = glorot_uniform(1, HIDDEN_DIM, &mut r);
        p.b1 = glorot_uniform(1, EMBED_DIM, &mut r);
        let x = Tensor::from_vec(1, 3, vec![0.3, -1.2, 2.0]).unwrap();
        let z = encode(&x, &SparseMatrix::identity(1), &p, 0.5, false, &mut r).unwrap();

        // hand-composed MLP
        let relu = |v: f64| v.max(0.0);
        let h: Vec<f64> = (0..HIDDEN_DIM)
            .map(|j| relu((0..3).map(|i| x.get(0, i) * p.w0.get(i, j)).sum::<f64>() + p.b0.get(0, j)))
            .collect();
        for k in 0..EMBED_DIM {
            let expected = relu((0..HIDDEN_DIM).map(|j| h[j] * p.w1.get(j, k)).sum::<f64>() + p.b1.get(0, k));
            assert!((z.get(0, k) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let p = EncoderParams::<f64>::init(4, &mut rng());
        let err = encode(&Tensor::zeros(2, 5), &SparseMatrix::identity(2), &p, 0.0, false, &mut rng());
        assert!(matches!(err, Err(ComputeError::ShapeMismatch { op: "encode", .. })));
    }

    #[test]
    fn tape_and_plain_routes_agree_in_training_mode() {
        let mut r = rng();
        let p = EncoderParams::<f64>::init(5, &mut r);
        let x: Tensor<f64> = glorot_uniform(4, 5, &mut r);
        let a = SparseMatrix::from_triplets(
            4,
            4,
            &[(0, 0, 0.5), (0, 1, 0.5), (1, 0, 0.5), (1, 1, 0.5), (2, 2, 1.0), (3, 3, 1.0)],
        )
        .unwrap();
        let plain = encode(&x, &a, &p, 0.3, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = EncoderVars::record(&mut tape, &p);
        let z = encode_on_tape(&mut tape, xv, &a, &vars, 0.3, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(tape.value(z).max_abs_diff(&plain) < 1e-14);
    }
}
