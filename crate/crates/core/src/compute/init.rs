use rand::Rng;

use crate::compute::Tensor;
use crate::Real;

/// Half-width of the Glorot uniform interval.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `rows x cols` matrix drawn uniformly from `±sqrt(6 / (rows + cols))`.
pub fn glorot_uniform<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let bound = glorot_bound(rows, cols);
    let data = (0..rows * cols)
        .map(|_| T::lit(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn values_within_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w: Tensor<f64> = glorot_uniform(30, 32, &mut rng);
        let b = glorot_bound(30, 32);
        assert!(w.as_slice().iter().all(|x| x.abs() <= b));
        assert!(w.as_slice().iter().any(|x| x.abs() > b / 2.0));
    }
}
