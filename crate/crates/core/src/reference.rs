//! Scalar-loop reference implementations.
//!
//! Each function here recomputes a kernel directly from its defining sum
//! with no shared code path (no GEMM, no im2col, no shared interpolation
//! helper). They exist to check the fast kernels, in tests and in the
//! `selftest` command, and are far too slow for inference.

use crate::kernels::{AttentionWeights, ConvSpec};
use crate::{Scalar, Tensor};

/// Triple-loop direct convolution.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, spec: &ConvSpec<T>) -> Tensor<T> {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (kh, kw) = spec.kernel_size;
    let (s, p) = (spec.stride, spec.padding as isize);
    let ho = (h + 2 * spec.padding - kh) / s + 1;
    let wo = (w + 2 * spec.padding - kw) / s + 1;
    let cin_g = c / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    Tensor::from_fn(vec![b, spec.out_channels, ho, wo], |flat| {
        let ox = flat % wo;
        let oy = (flat / wo) % ho;
        let co = (flat / (wo * ho)) % spec.out_channels;
        let bi = flat / (wo * ho * spec.out_channels);
        let g = co / cout_g;
        let mut acc = spec.bias.as_ref().map_or(T::zero(), |bias| bias.data()[co]);
        for ci in 0..cin_g {
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = (oy * s + ky) as isize - p;
                    let ix = (ox * s + kx) as isize - p;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    acc += x.at(&[bi, g * cin_g + ci, iy as usize, ix as usize])
                        * spec.weight.at(&[co, ci, ky, kx]);
                }
            }
        }
        acc
    })
}

/// Dot-product per output feature.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Tensor<T> {
    let (f_out, f_in) = (weight.dim(0), weight.dim(1));
    let rows = x.numel() / f_in;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = f_out;
    Tensor::from_fn(shape, |flat| {
        let (r, o) = (flat / f_out, flat % f_out);
        debug_assert!(r < rows);
        let mut acc = bias.map_or(T::zero(), |b| b.data()[o]);
        for i in 0..f_in {
            acc += x.data()[r * f_in + i] * weight.data()[o * f_in + i];
        }
        acc
    })
}

/// Explicit exp / normalize softmax along the last axis.
pub fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.shape()[x.rank() - 1];
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(n) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// Attention computed one (batch, head, query) at a time.
pub fn mha_self_attention<T: Scalar>(
    x: &Tensor<T>,
    pos: Option<&Tensor<T>>,
    weights: &AttentionWeights<T>,
    mask: Option<&Tensor<T>>,
) -> Tensor<T> {
    let (b, n, e) = (x.dim(0), x.dim(1), x.dim(2));
    let heads = weights.heads;
    let hd = e / heads;
    let qk_in = Tensor::from_fn(x.shape().to_vec(), |i| {
        x.data()[i]
            + pos.map_or(T::zero(), |p| {
                if p.dim(0) == 1 {
                    p.data()[i % (n * e)]
                } else {
                    p.data()[i]
                }
            })
    });
    let q = linear(&qk_in, &weights.q_proj.weight, weights.q_proj.bias.as_ref());
    let k = linear(&qk_in, &weights.k_proj.weight, weights.k_proj.bias.as_ref());
    let v = linear(x, &weights.v_proj.weight, weights.v_proj.bias.as_ref());
    let scale = T::one() / T::lit(hd as f64).sqrt();
    let mut merged = vec![T::zero(); b * n * e];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..n {
                let mut logits = Vec::with_capacity(n);
                for j in 0..n {
                    let mut dot = T::zero();
                    for d in 0..hd {
                        dot += q.at(&[bi, i, h * hd + d]) * k.at(&[bi, j, h * hd + d]);
                    }
                    logits.push(dot * scale + mask.map_or(T::zero(), |m| m.at(&[i, j])));
                }
                let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
                let ex: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
                let z: T = ex.iter().copied().sum();
                for d in 0..hd {
                    let mut acc = T::zero();
                    for j in 0..n {
                        acc += ex[j] / z * v.at(&[bi, j, h * hd + d]);
                    }
                    merged[(bi * n + i) * e + h * hd + d] = acc;
                }
            }
        }
    }
    let merged = Tensor::new(vec![b, n, e], merged).unwrap();
    linear(
        &merged,
        &weights.out_proj.weight,
        weights.out_proj.bias.as_ref(),
    )
}

/// Bilinear interpolation written as a tent-kernel sum over the pixels
/// within one unit of the sample point, zero outside the image.
pub fn bilinear_tent<T: Scalar>(plane: &[T], h: usize, w: usize, gx: T, gy: T) -> T {
    let px = ((gx + T::one()) * T::lit(w as f64) - T::one()) / T::lit(2.0);
    let py = ((gy + T::one()) * T::lit(h as f64) - T::one()) / T::lit(2.0);
    let cy = py.floor().to_i64().unwrap_or(i64::MIN / 2);
    let cx = px.floor().to_i64().unwrap_or(i64::MIN / 2);
    let mut acc = T::zero();
    for i in cy - 1..=cy + 2 {
        for j in cx - 1..=cx + 2 {
            if i < 0 || j < 0 || i >= h as i64 || j >= w as i64 {
                continue;
            }
            let wy = (T::one() - (py - T::lit(i as f64)).abs()).max(T::zero());
            let wx = (T::one() - (px - T::lit(j as f64)).abs()).max(T::zero());
            acc += wx * wy * plane[i as usize * w + j as usize];
        }
    }
    acc
}

/// Grid sampling via [`bilinear_tent`].
pub fn grid_sample_bilinear<T: Scalar>(feat: &Tensor<T>, grid: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = (feat.dim(0), feat.dim(1), feat.dim(2), feat.dim(3));
    let p = grid.dim(1);
    Tensor::from_fn(vec![b, c, p], |flat| {
        let pi = flat % p;
        let ci = (flat / p) % c;
        let bi = flat / (p * c);
        let plane = &feat.data()[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
        bilinear_tent(plane, h, w, grid.at(&[bi, pi, 0]), grid.at(&[bi, pi, 1]))
    })
}

/// Deformable-attention aggregation, one `(batch, query, head, level,
/// point)` sample at a time, reading `value` `(B, L, D)` in place with a
/// tent-kernel sum over every pixel of the level.
pub fn msda_attend<T: Scalar>(
    value: &Tensor<T>,
    level_shapes: &[(usize, usize)],
    locations: &Tensor<T>,
    attn: &Tensor<T>,
    points: usize,
) -> Tensor<T> {
    let (b, l, d) = (value.dim(0), value.dim(1), value.dim(2));
    let (q, heads) = (locations.dim(1), locations.dim(2));
    let hd = d / heads;
    let mut out = Tensor::zeros(vec![b, q, d]);
    let od = out.data_mut();
    for bi in 0..b {
        for qi in 0..q {
            for hi in 0..heads {
                let mut start = 0;
                for (lvl, &(h, w)) in level_shapes.iter().enumerate() {
                    for p in 0..points {
                        let slot = lvl * points + p;
                        let gx = locations.at(&[bi, qi, hi, slot, 0]);
                        let gy = locations.at(&[bi, qi, hi, slot, 1]);
                        // pixel j spans [j, j + 1) in x·w - ½ coordinates
                        let px = (gx + T::one()) / T::lit(2.0) * T::lit(w as f64) - T::lit(0.5);
                        let py = (gy + T::one()) / T::lit(2.0) * T::lit(h as f64) - T::lit(0.5);
                        let a = attn.at(&[bi, qi, hi, slot]);
                        for y in 0..h {
                            for x in 0..w {
                                let wy = (T::one() - (py - T::lit(y as f64)).abs()).max(T::zero());
                                let wx = (T::one() - (px - T::lit(x as f64)).abs()).max(T::zero());
                                if wx * wy == T::zero() {
                                    continue;
                                }
                                for c in 0..hd {
                                    let v = value.at(&[bi, start + y * w + x, hi * hd + c]);
                                    od[(bi * q + qi) * d + hi * hd + c] += a * wx * wy * v;
                                }
                            }
                        }
                    }
                    start += h * w;
                }
                debug_assert!(start == l);
            }
        }
    }
    out
}

/// Full stable sort of each row; returns the first `k` indices per row.
pub fn topk<T: Scalar>(scores: &Tensor<T>, k: usize) -> Vec<usize> {
    let (b, n) = (scores.dim(0), scores.dim(1));
    let mut out = Vec::with_capacity(b * k);
    for bi in 0..b {
        let mut idx: Vec<usize> = (0..n).collect();
        let row = &scores.data()[bi * n..(bi + 1) * n];
        // stable sort keeps lower indices first among equal scores
        idx.sort_by(|&i, &j| row[j].partial_cmp(&row[i]).unwrap());
        out.extend_from_slice(&idx[..k]);
    }
    out
}
