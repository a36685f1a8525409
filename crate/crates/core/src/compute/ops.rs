//! Plain forward primitives.

use rand::Rng;

use crate::compute::{ComputeError, SparseMatrix, Tensor};
use crate::Real;

pub use crate::compute::tape::attention_forward as neighbor_attention;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    LeakyRelu(f64),
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::lit(slope)
                }
            }
        }
    }

    /// Derivative given the input `x` and the output `y = apply(x)`.
    /// ReLU has derivative 0 at 0; leaky ReLU has the slope there.
    #[inline]
    pub fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::lit(slope)
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Sparse-dense product `s * d`.
pub fn spmm<T: Real>(s: &SparseMatrix<T>, d: &Tensor<T>) -> Result<Tensor<T>, ComputeError> {
    if s.n_cols() != d.rows() {
        return Err(ComputeError::ShapeMismatch {
            op: "spmm",
            left: (s.n_rows(), s.n_cols()),
            right: d.shape(),
        });
    }
    let mut out = Tensor::zeros(s.n_rows(), d.cols());
    for r in 0..s.n_rows() {
        let (cols, vals) = s.row(r);
        let out_row = out.row_mut(r);
        for (&c, &v) in cols.iter().zip(vals) {
            for (o, &x) in out_row.iter_mut().zip(d.row(c)) {
                *o = *o + v * x;
            }
        }
    }
    Ok(out)
}

/// `sᵀ * g`, the adjoint of [`spmm`] with respect to its dense argument.
pub fn spmm_transpose<T: Real>(
    s: &SparseMatrix<T>,
    g: &Tensor<T>,
) -> Result<Tensor<T>, ComputeError> {
    if s.n_rows() != g.rows() {
        return Err(ComputeError::ShapeMismatch {
            op: "spmm_transpose",
            left: (s.n_rows(), s.n_cols()),
            right: g.shape(),
        });
    }
    let mut out = Tensor::zeros(s.n_cols(), g.cols());
    for r in 0..s.n_rows() {
        let (cols, vals) = s.row(r);
        let g_row = g.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            for (o, &x) in out.row_mut(c).iter_mut().zip(g_row) {
                *o = *o + v * x;
            }
        }
    }
    Ok(out)
}

/// `x * w + b`, with the 1 x d' bias broadcast over rows.
pub fn affine<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>, ComputeError> {
    let mut out = x.matmul(w)?;
    add_row_bias(&mut out, b)?;
    Ok(out)
}

pub(crate) fn add_row_bias<T: Real>(out: &mut Tensor<T>, b: &Tensor<T>) -> Result<(), ComputeError> {
    if b.rows() != 1 || b.cols() != out.cols() {
        return Err(ComputeError::ShapeMismatch {
            op: "bias",
            left: out.shape(),
            right: b.shape(),
        });
    }
    for r in 0..out.rows() {
        for (o, &bv) in out.row_mut(r).iter_mut().zip(b.as_slice()) {
            *o = *o + bv;
        }
    }
    Ok(())
}

pub fn activation<T: Real>(kind: Activation, x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

/// Numerically stable softmax of a whole slice.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |m, x| m.max(x));
    let exps: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax restricted to `mask`; entries outside the mask are zero.
pub fn masked_softmax<T: Real>(logits: &[T], mask: &[usize]) -> Result<Vec<T>, ComputeError> {
    if mask.is_empty() {
        return Err(ComputeError::EmptyMask);
    }
    if let Some(&index) = mask.iter().find(|&&i| i >= logits.len()) {
        return Err(ComputeError::MaskOutOfRange {
            index,
            len: logits.len(),
        });
    }
    let picked: Vec<T> = mask.iter().map(|&i| logits[i]).collect();
    let weights = softmax(&picked);
    let mut out = vec![T::zero(); logits.len()];
    for (&i, w) in mask.iter().zip(weights) {
        out[i] = w;
    }
    Ok(out)
}

/// Squared Euclidean distance from `a` to every row of `b`.
pub fn sq_euclid<T: Real>(a: &[T], b: &Tensor<T>) -> Result<Vec<T>, ComputeError> {
    if a.len() != b.cols() {
        return Err(ComputeError::ShapeMismatch {
            op: "sq_euclid",
            left: (1, a.len()),
            right: b.shape(),
        });
    }
    Ok((0..b.rows())
        .map(|r| {
            a.iter()
                .zip(b.row(r))
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum()
        })
        .collect())
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rate: f64,
    rng: &mut R,
) -> Result<Tensor<T>, ComputeError> {
    check_rate(rate)?;
    let keep = T::lit(1.0 / (1.0 - rate));
    let data = (0..rows * cols)
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

pub fn dropout<T: Real, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor<T>, ComputeError> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask::<T, R>(x.rows(), x.cols(), rate, rng)?;
    let mut out = x.clone();
    for (o, &m) in out.as_mut_slice().iter_mut().zip(mask.as_slice()) {
        *o = *o * m;
    }
    Ok(out)
}

fn check_rate(rate: f64) -> Result<(), ComputeError> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(ComputeError::BadDropoutRate(rate))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spmm_examples() {
        let d = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let id = SparseMatrix::<f64>::identity(2);
        assert_eq!(spmm(&id, &d).unwrap(), d);

        let half = SparseMatrix::from_triplets(
            2,
            2,
            &[(0, 0, 0.5), (0, 1, 0.5), (1, 0, 0.5), (1, 1, 0.5)],
        )
        .unwrap();
        let out = spmm(&half, &d).unwrap();
        assert_eq!(out.as_slice(), &[0.5, 0.5, 0.5, 0.5]);

        let empty_row = SparseMatrix::from_triplets(2, 2, &[(0, 1, 3.0)]).unwrap();
        let out = spmm(&empty_row, &d).unwrap();
        assert_eq!(out.row(1), &[0.0, 0.0]);

        let bad = Tensor::<f64>::zeros(3, 2);
        assert!(spmm(&id, &bad).is_err());
    }

    #[test]
    fn affine_examples() {
        let x = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let zero_b = Tensor::zeros(1, 2);
        assert_eq!(affine(&x, &Tensor::identity(2), &zero_b).unwrap(), x);

        let b = Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let w = Tensor::filled(2, 3, 7.0);
        let out = affine(&Tensor::zeros(4, 2), &w, &b).unwrap();
        for r in 0..4 {
            assert_eq!(out.row(r), b.as_slice());
        }

        let one = |v| Tensor::scalar(v);
        assert_eq!(affine(&one(2.0), &one(3.0), &one(1.0)).unwrap().item(), 7.0);
        assert!(affine(&x, &Tensor::zeros(3, 1), &Tensor::zeros(1, 1)).is_err());
        assert!(affine(&x, &Tensor::zeros(2, 1), &Tensor::zeros(1, 2)).is_err());
    }

    #[test]
    fn activation_examples() {
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::Relu.apply(2.0), 2.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert!((Activation::LeakyRelu(0.2).apply(-1.0f64) + 0.2).abs() < 1e-15);
        assert_eq!(Activation::Relu.derivative(0.0, 0.0), 0.0);
        assert_eq!(Activation::LeakyRelu(0.2).derivative(0.0, 0.0), 0.2);
        // stable at the extremes
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
    }

    #[test]
    fn masked_softmax_examples() {
        let w = masked_softmax(&[0.3f64, 0.3, 9.0, 0.3], &[0, 1, 3]).unwrap();
        for &i in &[0, 1, 3] {
            assert!((w[i] - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(w[2], 0.0);

        let w = masked_softmax(&[0.0, 3f64.ln()], &[0, 1]).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);

        let shifted = masked_softmax(&[100.0, 100.0 + 3f64.ln()], &[0, 1]).unwrap();
        assert!((shifted[1] - w[1]).abs() < 1e-12);

        assert_eq!(masked_softmax::<f64>(&[1.0], &[]), Err(ComputeError::EmptyMask));
        assert!(masked_softmax(&[1.0], &[1]).is_err());
        // large logits do not overflow
        let w = masked_softmax(&[1000.0f64, 0.0], &[0, 1]).unwrap();
        assert_eq!(w[0], 1.0);
    }

    #[test]
    fn sq_euclid_examples() {
        let b = Tensor::<f64>::from_vec(2, 2, vec![3.0, 4.0, 1.0, 1.0]).unwrap();
        assert_eq!(sq_euclid(&[0.0, 0.0], &b).unwrap(), vec![25.0, 2.0]);
        assert_eq!(sq_euclid(&[1.0, 1.0], &b).unwrap()[1], 0.0);
        let scaled = sq_euclid(&[0.0, 0.0], &b.scale(3.0)).unwrap();
        assert!((scaled[0] - 9.0 * 25.0).abs() < 1e-12);
        assert!(sq_euclid(&[0.0], &b).is_err());
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::filled(4, 4, 2.0);
        assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.9, false, &mut rng).unwrap(), x);
        assert!(dropout(&x, 1.0, true, &mut rng).is_err());
        assert!(dropout(&x, -0.1, false, &mut rng).is_err());
    }

    #[test]
    fn dropout_is_unbiased() {
        // Mean of 1e5 inverted-dropout outputs stays within 3 standard errors
        // of the input mean.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let x = Tensor::filled(n, 1, 1.0);
        let out = dropout(&x, 0.5, true, &mut rng).unwrap();
        let mean = out.sum() / n as f64;
        // each output is 0 or 2 with equal probability: variance 1
        let se = (1.0f64 / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean}");
    }
}
