use rayon::prelude::*;

use super::conv::ROW_CHUNK;
use crate::error::{ensure, Result};
use crate::{Scalar, Tensor};

/// Affine layer parameters; weight is `(out_features, in_features)`.
#[derive(Debug, Clone)]
pub struct Linear<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        let (out, _) = weight.dims2()?;
        if let Some(b) = &bias {
            ensure!(
                b.shape() == [out],
                "linear",
                "bias {:?} does not match weight {:?}",
                b.shape(),
                weight.shape()
            );
        }
        Ok(Self { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        linear(x, &self.weight, self.bias.as_ref())
    }
}

/// Stack of affine layers with ReLU between consecutive layers.
#[derive(Debug, Clone)]
pub struct Mlp<T = f32> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Scalar> Mlp<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = super::relu(&h);
            }
        }
        Ok(h)
    }
}

/// `y[..., o] = Σ_i x[..., i] · W[o, i] + b[o]`
pub fn linear<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (f_out, f_in) = weight.dims2()?;
    ensure!(
        x.rank() >= 1 && x.shape()[x.rank() - 1] == f_in,
        "linear",
        "input {:?} does not end in {f_in} (weight {:?})",
        x.shape(),
        weight.shape()
    );
    if let Some(b) = bias {
        ensure!(
            b.shape() == [f_out],
            "linear",
            "bias {:?} for weight {:?}",
            b.shape(),
            weight.shape()
        );
    }
    let rows = x.numel() / f_in.max(1);
    let mut out = vec![T::zero(); rows * f_out];
    if f_in > 0 {
        let xd = x.data();
        let wd = weight.data();
        out.par_chunks_mut(ROW_CHUNK * f_out)
            .enumerate()
            .for_each(|(ci, chunk)| {
                let m = chunk.len() / f_out;
                let a = &xd[ci * ROW_CHUNK * f_in..(ci * ROW_CHUNK + m) * f_in];
                T::gemm(
                    m,
                    f_in,
                    f_out,
                    a,
                    (f_in as isize, 1),
                    wd,
                    (1, f_in as isize),
                    chunk,
                    (f_out as isize, 1),
                );
            });
    }
    if let Some(b) = bias {
        let b = b.data();
        out.chunks_mut(f_out)
            .for_each(|row| row.iter_mut().zip(b).for_each(|(v, &bv)| *v += bv));
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = f_out;
    Ok(Tensor::from_parts(shape, out))
}
