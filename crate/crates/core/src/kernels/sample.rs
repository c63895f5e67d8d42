use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::{Scalar, Tensor};

/// Nearest-neighbour 2× upsampling: every pixel becomes a 2×2 block.
pub fn upsample_nearest_2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); b * c * h2 * w2];
    out.par_chunks_mut(h2 * w2)
        .enumerate()
        .for_each(|(bc, dst)| {
            let src = &x.data()[bc * h * w..(bc + 1) * h * w];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        });
    Ok(Tensor::from_parts(vec![b, c, h2, w2], out))
}

/// Maps a normalized coordinate in `[-1, 1]` to a continuous pixel index
/// under the pixel-edge convention: `-1` is the left edge of pixel 0, `+1`
/// the right edge of the last pixel, pixel `i` has its center at
/// `(2i + 1) / size - 1`.
#[inline]
pub fn unnormalize<T: Scalar>(coord: T, size: usize) -> T {
    ((coord + T::one()) * T::lit(size as f64) - T::one()) * T::lit(0.5)
}

/// Bilinear sample of one channel plane with zero padding outside.
#[inline]
pub(crate) fn bilinear_at<T: Scalar>(plane: &[T], h: usize, w: usize, px: T, py: T) -> T {
    let x0f = px.floor();
    let y0f = py.floor();
    let fx = px - x0f;
    let fy = py - y0f;
    let (x0, y0) = (
        x0f.to_i64().unwrap_or(i64::MIN / 2),
        y0f.to_i64().unwrap_or(i64::MIN / 2),
    );
    let fetch = |yy: i64, xx: i64| -> T {
        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
            T::zero()
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let one = T::one();
    fetch(y0, x0) * (one - fx) * (one - fy)
        + fetch(y0, x0 + 1) * fx * (one - fy)
        + fetch(y0 + 1, x0) * (one - fx) * fy
        + fetch(y0 + 1, x0 + 1) * fx * fy
}

/// Bilinear grid sampling with zero padding and the pixel-edge
/// (`align_corners = false`) convention.
///
/// `feat` is `(B, C, H, W)`, `grid` is `(B, P, 2)` holding `(x, y)` in
/// `[-1, 1]`; the result is `(B, C, P)`.
pub fn grid_sample_bilinear<T: Scalar>(feat: &Tensor<T>, grid: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = feat.dims4()?;
    let (gb, p, two) = grid.dims3()?;
    ensure!(
        gb == b && two == 2,
        "grid_sample_bilinear",
        "grid {:?} incompatible with features {:?}",
        grid.shape(),
        feat.shape()
    );
    ensure!(
        grid.all_finite(),
        "grid_sample_bilinear",
        "grid {:?} contains non-finite coordinates",
        grid.shape()
    );
    let mut out = vec![T::zero(); b * c * p];
    out.par_chunks_mut(c * p).enumerate().for_each(|(bi, dst)| {
        let g = &grid.data()[bi * p * 2..(bi + 1) * p * 2];
        let pixels: Vec<(T, T)> = g
            .chunks(2)
            .map(|xy| (unnormalize(xy[0], w), unnormalize(xy[1], h)))
            .collect();
        for ci in 0..c {
            let plane = &feat.data()[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for (pi, &(px, py)) in pixels.iter().enumerate() {
                dst[ci * p + pi] = bilinear_at(plane, h, w, px, py);
            }
        }
    });
    Ok(Tensor::from_parts(vec![b, c, p], out))
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    ensure!(
        out_h > 0 && out_w > 0,
        "resize_bilinear",
        "target {out_h}x{out_w} is empty"
    );
    let axis = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, T) {
        let scale = src_len as f64 / dst_len as f64;
        let s = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(src_len - 1);
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, T::lit(s - i0 as f64))
    };
    let ys: Vec<_> = (0..out_h).map(|y| axis(y, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|xx| axis(xx, w, out_w)).collect();
    let mut out = vec![T::zero(); b * c * out_h * out_w];
    out.par_chunks_mut(out_h * out_w)
        .enumerate()
        .for_each(|(bc, dst)| {
            let src = &x.data()[bc * h * w..(bc + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        });
    Ok(Tensor::from_parts(vec![b, c, out_h, out_w], out))
}
