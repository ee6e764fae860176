//! Small numerically careful helpers shared by the objectives.

use ndarray::{Array1, ArrayView1, NdFloat};

/// Below this norm a vector is treated as zero and its cosine as 0.
pub const NORM_FLOOR: f64 = 1e-12;

#[inline]
pub fn cast<F: NdFloat>(x: f64) -> F {
    F::from(x).unwrap()
}

#[inline]
pub fn sigmoid<F: NdFloat>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus<F: NdFloat>(z: F) -> F {
    if z > F::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn log_sum_exp<F: NdFloat>(x: ArrayView1<F>) -> F {
    let m = x.iter().copied().fold(F::neg_infinity(), F::max);
    if !m.is_finite() {
        return m;
    }
    m + x.iter().map(|&v| (v - m).exp()).fold(F::zero(), |a, b| a + b).ln()
}

pub fn softmax<F: NdFloat>(x: ArrayView1<F>) -> Array1<F> {
    let lse = log_sum_exp(x);
    x.mapv(|v| (v - lse).exp())
}

pub fn log_softmax<F: NdFloat>(x: ArrayView1<F>) -> Array1<F> {
    let lse = log_sum_exp(x);
    x.mapv(|v| v - lse)
}

pub fn norm<F: NdFloat>(x: ArrayView1<F>) -> F {
    x.dot(&x).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sigmoid_reference_points() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(1.0f64) - 0.731_058_578_630_005).abs() < 1e-12);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) <= 1.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(1000.0f64) - 1000.0).abs() < 1e-9);
        assert!(softplus(-1000.0f64) >= 0.0);
    }

    #[test]
    fn softmax_shift_invariant() {
        let x = array![0.3f64, -1.2, 2.0];
        let a = softmax(x.view());
        let b = softmax((&x + 100.0).view());
        for (p, q) in a.iter().zip(b.iter()) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!((a.sum() - 1.0).abs() < 1e-12);
    }
}
