//! Tensors, reverse-mode differentiation, and the finite-difference oracle.

mod tape;
mod tensor;

pub use tape::{GradTape, Gradients, ValueId};
pub use tensor::Tensor;

use crate::error::Result;

/// Central-difference gradient of a scalar function, one coordinate at a
/// time: (f(x + h e_i) - f(x - h e_i)) / 2h.
///
/// Evaluates `f` only in forward mode, so it stays independent of any
/// tape-based backward path it is used to check.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = original - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = original;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// ||a - b||_2 / max(||b||_2, 1e-8), the comparison metric used by the
/// gradient checks.
pub fn relative_l2_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_l2_error length mismatch");
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm.max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_difference_on_sum_gives_ones() {
        let x = Tensor::vector(vec![0.3, -1.2, 5.0]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.data().iter().sum()), &x, 1e-6).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_difference_on_quadratic() {
        // f(x) = sum(x_i^2) has gradient 2x.
        let x = Tensor::vector(vec![1.5, -0.25]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-6)
            .unwrap();
        assert!((g.data()[0] - 3.0).abs() < 1e-8);
        assert!((g.data()[1] + 0.5).abs() < 1e-8);
    }
}
