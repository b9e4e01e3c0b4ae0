//! Finite-difference oracles shared by the unit tests, the acceptance suite and
//! the `grad-check` command.

use crate::numerics::{Scalar, Tensor};

/// Central-difference gradient of a scalar function at `x`.
///
/// The divisor is the perturbation actually representable in `T`, which keeps
/// fp32 estimates honest when `x_i ± h` rounds.
pub fn central_difference<T: Scalar>(
    x: &Tensor<T>,
    h: f64,
    mut f: impl FnMut(&Tensor<T>) -> f64,
) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Tensor::<f64>::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let plus = T::from_f64_lossy(orig.as_f64() + h);
        let minus = T::from_f64_lossy(orig.as_f64() - h);
        probe.data_mut()[i] = plus;
        let fp = f(&probe);
        probe.data_mut()[i] = minus;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (fp - fm) / (plus.as_f64() - minus.as_f64());
    }
    out
}

/// Central difference along a single coordinate of `x`.
pub fn central_difference_at<T: Scalar>(
    x: &Tensor<T>,
    index: usize,
    h: f64,
    mut f: impl FnMut(&Tensor<T>) -> f64,
) -> f64 {
    let mut probe = x.clone();
    let orig = x.data()[index];
    let plus = T::from_f64_lossy(orig.as_f64() + h);
    let minus = T::from_f64_lossy(orig.as_f64() - h);
    probe.data_mut()[index] = plus;
    let fp = f(&probe);
    probe.data_mut()[index] = minus;
    let fm = f(&probe);
    (fp - fm) / (plus.as_f64() - minus.as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_polynomial_derivative() {
        let x = Tensor::<f64>::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = central_difference(&x, 1e-5, |t| t.data().iter().map(|v| v * v * v).sum());
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - 3.0 * xi * xi).abs() < 1e-8);
        }
    }
}
