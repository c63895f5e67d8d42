//! Dense row-major n-dimensional array.

use std::fmt;

use rand::Rng;
use rand_distr_lite::standard_normal;

use crate::error::{ensure, Result};
use crate::Scalar;

/// Contiguous row-major tensor with an explicit shape.
///
/// `shape.iter().product() == data.len()` always holds. Zero extents are
/// allowed so that an empty denoising block (`d = 0`) is representable.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        ensure!(
            numel == data.len(),
            "tensor",
            "shape {shape:?} needs {numel} elements, buffer has {}",
            data.len()
        );
        Ok(Self { shape, data })
    }

    /// Builds a tensor whose shape is known to match `data`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Fills from a function of the flat (row-major) index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(f).collect(),
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.gen_range(lo..hi)))
    }

    /// Normal samples with the given standard deviation.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| T::lit(std * standard_normal(rng)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        ensure!(
            self.rank() == 2,
            "dims2",
            "expected rank 2, got shape {:?}",
            self.shape
        );
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        ensure!(
            self.rank() == 3,
            "dims3",
            "expected rank 3, got shape {:?}",
            self.shape
        );
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        ensure!(
            self.rank() == 4,
            "dims4",
            "expected rank 4, got shape {:?}",
            self.shape
        );
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    /// Element at a multi-index. Panics when out of range.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let mut flat = 0;
        for (axis, (&i, &n)) in index.iter().zip(&self.shape).enumerate() {
            assert!(
                i < n,
                "index {i} out of range for axis {axis} of extent {n}"
            );
            flat = flat * n + i;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        self.clone().into_reshape(shape)
    }

    pub fn into_reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        ensure!(
            numel == self.data.len(),
            "reshape",
            "cannot view {:?} as {shape:?}",
            self.shape
        );
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    /// Reorders axes; `axes[i]` names the source axis of output axis `i`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        ensure!(
            axes.len() == rank,
            "permute",
            "axes {axes:?} for shape {:?}",
            self.shape
        );
        for &a in axes {
            ensure!(
                a < rank && !seen[a],
                "permute",
                "axes {axes:?} is not a permutation"
            );
            seen[a] = true;
        }
        let src_strides = strides_of(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..self.data.len() {
            data.push(self.data[offset]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                offset += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                offset -= strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Self {
            shape: out_shape,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        ensure!(
            self.shape == other.shape,
            op,
            "operand shapes {:?} and {:?} differ",
            self.shape,
            other.shape
        );
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        ensure!(!parts.is_empty(), "concat", "no operands");
        let first = parts[0];
        ensure!(
            axis < first.rank(),
            "concat",
            "axis {axis} out of range for {:?}",
            first.shape
        );
        for p in parts {
            ensure!(
                p.rank() == first.rank()
                    && p.shape
                        .iter()
                        .zip(&first.shape)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b),
                "concat",
                "shapes {:?} and {:?} differ off axis {axis}",
                first.shape,
                p.shape
            );
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        ensure!(
            axis < self.rank() && start + len <= self.shape[axis],
            "narrow",
            "range {start}..{} on axis {axis} of {:?}",
            start + len,
            self.shape
        );
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let n = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute element-wise difference; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64().unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }
}

/// Box-Muller standard normal.
mod rand_distr_lite {
    use rand::Rng;

    pub fn standard_normal(rng: &mut impl Rng) -> f64 {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_inconsistent_buffer() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(err.is_contract_violation());
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn permute_transposes_matrix() {
        let t = Tensor::<f32>::from_fn(vec![2, 3], |i| i as f32);
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn concat_with_empty_operand_is_identity() {
        let a = Tensor::<f32>::from_fn(vec![1, 2, 2, 2], |i| i as f32);
        let e = Tensor::<f32>::zeros(vec![1, 0, 2, 2]);
        assert_eq!(Tensor::concat(&[&a, &e], 1).unwrap(), a);
    }

    #[test]
    fn narrow_extracts_middle() {
        let t = Tensor::<f64>::from_fn(vec![2, 4], |i| i as f64);
        let n = t.narrow(1, 1, 2).unwrap();
        assert_eq!(n.data(), &[1.0, 2.0, 5.0, 6.0]);
    }

    proptest! {
        #[test]
        fn permute_roundtrip(a in 1usize..4, b in 1usize..4, c in 1usize..4) {
            let t = Tensor::<f32>::from_fn(vec![a, b, c], |i| i as f32);
            let p = t.permute(&[2, 0, 1]).unwrap();
            prop_assert_eq!(p.shape(), &[c, a, b]);
            prop_assert_eq!(p.at(&[c - 1, 0, b - 1]), t.at(&[0, b - 1, c - 1]));
            let back = p.permute(&[1, 2, 0]).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn concat_then_narrow_recovers_parts(a in 1usize..4, c1 in 0usize..3, c2 in 1usize..3) {
            let x = Tensor::<f32>::from_fn(vec![a, c1, 2], |i| i as f32);
            let y = Tensor::<f32>::from_fn(vec![a, c2, 2], |i| -(i as f32));
            let cat = Tensor::concat(&[&x, &y], 1).unwrap();
            prop_assert_eq!(cat.narrow(1, 0, c1).unwrap(), x);
            prop_assert_eq!(cat.narrow(1, c1, c2).unwrap(), y);
        }
    }
}
