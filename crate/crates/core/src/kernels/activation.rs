use crate::error::{ensure, Result};
use crate::{Scalar, Tensor};

/// Clamp applied by [`inverse_sigmoid`] before taking the logit.
pub const INVERSE_SIGMOID_EPS: f64 = 1e-5;

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn inverse_sigmoid_scalar<T: Scalar>(x: T, eps: T) -> T {
    let x = x.max(eps).min(T::one() - eps);
    (x / (T::one() - x)).ln()
}

#[inline]
pub fn silu_scalar<T: Scalar>(x: T) -> T {
    x * sigmoid_scalar(x)
}

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).error_fn())
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(silu_scalar)
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// `ln(x̂ / (1 − x̂))` with `x̂ = clamp(x, eps, 1 − eps)`.
pub fn inverse_sigmoid<T: Scalar>(x: &Tensor<T>, eps: T) -> Tensor<T> {
    x.map(|v| inverse_sigmoid_scalar(v, eps))
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`. A lane that is entirely `-inf`
/// yields zeros rather than NaN.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    ensure!(
        axis < x.rank(),
        "softmax",
        "axis {axis} out of range for {:?}",
        x.shape()
    );
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| data[idx(j)]).fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                (0..n).for_each(|j| data[idx(j)] = T::zero());
                continue;
            }
            let mut sum = T::zero();
            for j in 0..n {
                let e = (data[idx(j)] - max).exp();
                data[idx(j)] = e;
                sum += e;
            }
            for j in 0..n {
                data[idx(j)] /= sum;
            }
        }
    }
    Ok(out)
}

/// In-place softmax over a contiguous lane.
pub(crate) fn softmax_lane<T: Scalar>(lane: &mut [T]) {
    let max = lane.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        lane.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = T::zero();
    for v in lane.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    lane.iter_mut().for_each(|v| *v /= sum);
}

/// Normalizes along `axis` to zero mean and unit (biased) variance, then
/// applies `gamma` and `beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    axis: usize,
) -> Result<Tensor<T>> {
    ensure!(
        axis < x.rank(),
        "layer_norm",
        "axis {axis} out of range for {:?}",
        x.shape()
    );
    let (outer, n, inner) = split_axis(x.shape(), axis);
    ensure!(
        gamma.shape() == [n] && beta.shape() == [n],
        "layer_norm",
        "gamma {:?} / beta {:?} do not match extent {n} of {:?}",
        gamma.shape(),
        beta.shape(),
        x.shape()
    );
    let eps = T::lit(LAYER_NORM_EPS);
    let nf = T::lit(n as f64);
    let (g, b) = (gamma.data(), beta.data());
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let mean = (0..n).map(|j| data[idx(j)]).sum::<T>() / nf;
            let var = (0..n).map(|j| (data[idx(j)] - mean).powi(2)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            for j in 0..n {
                data[idx(j)] = (data[idx(j)] - mean) * inv * g[j] + b[j];
            }
        }
    }
    Ok(out)
}

/// Layer norm over the last axis.
pub fn layer_norm_last<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    ensure!(x.rank() >= 1, "layer_norm", "scalar input");
    layer_norm(x, gamma, beta, x.rank() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_of_zero_is_half() {
        assert_eq!(sigmoid_scalar(0.0f32), 0.5);
    }

    #[test]
    fn softmax_uniform_over_equal_logits() {
        let x = Tensor::<f32>::zeros(vec![4]);
        assert_eq!(softmax(&x, 0).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_fully_masked_lane_is_zero() {
        let x = Tensor::<f32>::full(vec![3], f32::NEG_INFINITY);
        assert_eq!(softmax(&x, 0).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn softmax_middle_axis_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::uniform(vec![2, 5, 3], -4.0, 4.0, &mut rng);
        let s = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                let sum: f64 = (0..5).map(|j| s.at(&[o, j, i])).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inverse_sigmoid_fixed_points() {
        let eps = INVERSE_SIGMOID_EPS as f32;
        assert_eq!(inverse_sigmoid_scalar(0.5f32, eps), 0.0);
        assert!((sigmoid_scalar(inverse_sigmoid_scalar(0.73f32, eps)) - 0.73).abs() < 1e-6);
        // ln(1e-5 / (1 - 1e-5)) evaluated in f64
        let at_zero = inverse_sigmoid_scalar(0.0f64, INVERSE_SIGMOID_EPS);
        assert!(
            (at_zero - (-11.512_915_464_920_228)).abs() < 1e-9,
            "{at_zero}"
        );
        assert!((at_zero - (-11.5129)).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_moments_on_random_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::<f32>::randn(vec![2, 300, 256], 3.0, &mut rng).map(|v| v + 1.5);
        let y =
            layer_norm_last(&x, &Tensor::full(vec![256], 1.0), &Tensor::zeros(vec![256])).unwrap();
        for row in y.data().chunks(256) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / 256.0;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 256.0;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn layer_norm_rejects_gamma_mismatch() {
        let x = Tensor::<f32>::zeros(vec![2, 4]);
        assert!(layer_norm_last(&x, &Tensor::zeros(vec![3]), &Tensor::zeros(vec![4])).is_err());
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        // 0.5 · (1 + erf(1/√2))
        assert!((gelu_scalar(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn relu_nonnegative_sigmoid_open_unit(v in -30.0f32..30.0) {
            let t = Tensor::new(vec![1], vec![v]).unwrap();
            prop_assert!(relu(&t).data()[0] >= 0.0);
            let s = sigmoid(&Tensor::new(vec![1], vec![v as f64]).unwrap()).data()[0];
            prop_assert!(s > 0.0 && s < 1.0);
        }

        #[test]
        fn sigmoid_inverts_inverse_sigmoid(p in 0.01f32..0.99) {
            let back = sigmoid_scalar(inverse_sigmoid_scalar(p, INVERSE_SIGMOID_EPS as f32));
            prop_assert!((back - p).abs() < 1e-6);
        }

        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-30.0f32..30.0, 1..40)) {
            let n = v.len();
            let s = softmax(&Tensor::new(vec![n], v).unwrap(), 0).unwrap();
            let sum: f32 = s.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}
