use rayon::prelude::*;

use super::activation::softmax_lane;
use super::linear::Linear;
use crate::error::{ensure, Result};
use crate::{Scalar, Tensor};

/// Projections of a multi-head attention layer.
#[derive(Debug, Clone)]
pub struct AttentionWeights<T = f32> {
    pub heads: usize,
    pub q_proj: Linear<T>,
    pub k_proj: Linear<T>,
    pub v_proj: Linear<T>,
    pub out_proj: Linear<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn embed_dim(&self) -> usize {
        self.out_proj.out_features()
    }
}

/// Converts a blocked-pair mask (`true` = query row may not attend to key
/// column) into an additive mask of `0` / `-inf`.
pub fn additive_mask<T: Scalar>(blocked: &[bool], n: usize) -> Result<Tensor<T>> {
    ensure!(
        blocked.len() == n * n,
        "additive_mask",
        "{} entries for a {n}x{n} mask",
        blocked.len()
    );
    Ok(Tensor::from_parts(
        vec![n, n],
        blocked
            .iter()
            .map(|&b| if b { T::neg_infinity() } else { T::zero() })
            .collect(),
    ))
}

/// Multi-head scaled dot-product self-attention.
///
/// `pos`, when given, is added to the query/key input only; values are
/// projected from `x` unchanged. `pos` may have batch extent 1 (broadcast)
/// or match `x`. `mask` is an additive `(N, N)` term on the logits.
pub fn mha_self_attention<T: Scalar>(
    x: &Tensor<T>,
    pos: Option<&Tensor<T>>,
    weights: &AttentionWeights<T>,
    mask: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (b, n, e) = x.dims3()?;
    let heads = weights.heads;
    ensure!(
        heads > 0 && e % heads == 0,
        "mha_self_attention",
        "embed dim {e} not divisible by {heads} heads"
    );
    ensure!(
        weights.q_proj.in_features() == e && weights.out_proj.out_features() == e,
        "mha_self_attention",
        "input {:?} vs projection {:?}",
        x.shape(),
        weights.q_proj.weight.shape()
    );
    if let Some(m) = mask {
        ensure!(
            m.shape() == [n, n],
            "mha_self_attention",
            "mask {:?} does not match {n} tokens of input {:?}",
            m.shape(),
            x.shape()
        );
    }
    let qk_in = match pos {
        None => x.clone(),
        Some(p) => {
            let (pb, pn, pe) = p.dims3()?;
            ensure!(
                (pb == 1 || pb == b) && pn == n && pe == e,
                "mha_self_attention",
                "position term {:?} does not broadcast onto input {:?}",
                p.shape(),
                x.shape()
            );
            let pd = p.data();
            let plane = n * e;
            Tensor::from_parts(
                x.shape().to_vec(),
                x.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v + if pb == 1 { pd[i % plane] } else { pd[i] })
                    .collect(),
            )
        }
    };
    let head_dim = e / heads;
    let scale = T::one() / T::lit(head_dim as f64).sqrt();
    let q = weights.q_proj.forward(&qk_in)?.scale(scale);
    let k = weights.k_proj.forward(&qk_in)?;
    let v = weights.v_proj.forward(x)?;
    let mask = mask.map(|m| m.data());

    let per_head: Vec<Vec<T>> = (0..b * heads)
        .into_par_iter()
        .map(|bh| {
            let (bi, h) = (bh / heads, bh % heads);
            let off = bi * n * e + h * head_dim;
            let mut logits = vec![T::zero(); n * n];
            T::gemm(
                n,
                head_dim,
                n,
                &q.data()[off..],
                (e as isize, 1),
                &k.data()[off..],
                (1, e as isize),
                &mut logits,
                (n as isize, 1),
            );
            for (r, row) in logits.chunks_mut(n).enumerate() {
                if let Some(m) = mask {
                    row.iter_mut()
                        .zip(&m[r * n..(r + 1) * n])
                        .for_each(|(l, &mv)| *l += mv);
                }
                softmax_lane(row);
            }
            let mut out = vec![T::zero(); n * head_dim];
            T::gemm(
                n,
                n,
                head_dim,
                &logits,
                (n as isize, 1),
                &v.data()[off..],
                (e as isize, 1),
                &mut out,
                (head_dim as isize, 1),
            );
            out
        })
        .collect();

    let mut merged = vec![T::zero(); b * n * e];
    for (bh, out) in per_head.iter().enumerate() {
        let (bi, h) = (bh / heads, bh % heads);
        for t in 0..n {
            let dst = bi * n * e + t * e + h * head_dim;
            merged[dst..dst + head_dim].copy_from_slice(&out[t * head_dim..(t + 1) * head_dim]);
        }
    }
    weights
        .out_proj
        .forward(&Tensor::from_parts(vec![b, n, e], merged))
}
