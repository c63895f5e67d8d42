use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::{Scalar, Tensor};

/// Output rows handled per GEMM call. Fixed so that results never depend on
/// the size of the thread pool.
pub(crate) const ROW_CHUNK: usize = 64;

/// Parameters of a 2-D convolution. Weight layout is `(out, in / groups, kh, kw)`.
#[derive(Debug, Clone)]
pub struct ConvSpec<T = f32> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> ConvSpec<T> {
    /// Derives the channel fields from the weight shape and checks the
    /// group and bias invariants.
    pub fn new(
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let (out_channels, in_per_group, kh, kw) = weight.dims4()?;
        ensure!(
            groups >= 1 && stride >= 1,
            "conv2d",
            "stride {stride} / groups {groups} must be positive"
        );
        ensure!(
            out_channels % groups == 0,
            "conv2d",
            "out channels {out_channels} not divisible by groups {groups}"
        );
        if let Some(b) = &bias {
            ensure!(
                b.shape() == [out_channels],
                "conv2d",
                "bias shape {:?} does not match {out_channels} output channels",
                b.shape()
            );
        }
        Ok(Self {
            in_channels: in_per_group * groups,
            out_channels,
            kernel_size: (kh, kw),
            stride,
            padding,
            groups,
            weight,
            bias,
        })
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = self.kernel_size;
        (
            (h + 2 * self.padding - kh) / self.stride + 1,
            (w + 2 * self.padding - kw) / self.stride + 1,
        )
    }
}

/// Direct 2-D convolution (cross-correlation) via im2col and GEMM.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let (kh, kw) = spec.kernel_size;
    ensure!(
        c == spec.in_channels,
        "conv2d",
        "input {:?} has {c} channels, weight {:?} expects {}",
        x.shape(),
        spec.weight.shape(),
        spec.in_channels
    );
    ensure!(
        h + 2 * spec.padding >= kh && w + 2 * spec.padding >= kw,
        "conv2d",
        "input {:?} smaller than kernel {:?} after padding {}",
        x.shape(),
        spec.kernel_size,
        spec.padding
    );
    let (ho, wo) = spec.output_hw(h, w);
    let groups = spec.groups;
    let cin_g = c / groups;
    let cout_g = spec.out_channels / groups;
    let k = cin_g * kh * kw;
    let plane = ho * wo;
    let direct = kh == 1 && kw == 1 && spec.stride == 1 && spec.padding == 0;

    let mut out = vec![T::zero(); b * spec.out_channels * plane];
    let mut cols = if direct {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    let wdata = spec.weight.data();

    for bi in 0..b {
        for g in 0..groups {
            let src = &x.data()[(bi * c + g * cin_g) * h * w..(bi * c + (g + 1) * cin_g) * h * w];
            let rhs: &[T] = if direct {
                src
            } else {
                im2col(src, (cin_g, h, w), spec, (ho, wo), &mut cols);
                &cols
            };
            let lhs = &wdata[g * cout_g * k..(g + 1) * cout_g * k];
            let dst = &mut out[(bi * spec.out_channels + g * cout_g) * plane
                ..(bi * spec.out_channels + (g + 1) * cout_g) * plane];
            dst.par_chunks_mut(ROW_CHUNK * plane)
                .enumerate()
                .for_each(|(ci, chunk)| {
                    let rows = chunk.len() / plane;
                    let a = &lhs[ci * ROW_CHUNK * k..(ci * ROW_CHUNK + rows) * k];
                    T::gemm(
                        rows,
                        k,
                        plane,
                        a,
                        (k as isize, 1),
                        rhs,
                        (plane as isize, 1),
                        chunk,
                        (plane as isize, 1),
                    );
                });
        }
    }

    if let Some(bias) = &spec.bias {
        let bias = bias.data();
        out.par_chunks_mut(plane).enumerate().for_each(|(i, row)| {
            let bv = bias[i % spec.out_channels];
            row.iter_mut().for_each(|v| *v += bv);
        });
    }
    Ok(Tensor::from_parts(vec![b, spec.out_channels, ho, wo], out))
}

fn im2col<T: Scalar>(
    src: &[T],
    (_, h, w): (usize, usize, usize),
    spec: &ConvSpec<T>,
    (ho, wo): (usize, usize),
    cols: &mut [T],
) {
    let (kh, kw) = spec.kernel_size;
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    let plane = ho * wo;
    cols.par_chunks_mut(plane)
        .enumerate()
        .for_each(|(row, dst)| {
            let ci = row / (kh * kw);
            let ky = (row / kw) % kh;
            let kx = row % kw;
            let chan = &src[ci * h * w..(ci + 1) * h * w];
            for oy in 0..ho {
                let iy = oy as isize * s + ky as isize - p;
                let line = &mut dst[oy * wo..(oy + 1) * wo];
                if iy < 0 || iy >= h as isize {
                    line.iter_mut().for_each(|v| *v = T::zero());
                    continue;
                }
                let srow = &chan[iy as usize * w..(iy as usize + 1) * w];
                for (ox, v) in line.iter_mut().enumerate() {
                    let ix = ox as isize * s + kx as isize - p;
                    *v = if ix < 0 || ix >= w as isize {
                        T::zero()
                    } else {
                        srow[ix as usize]
                    };
                }
            }
        });
}

/// Max pooling with implicit `-inf` padding.
pub fn max_pool2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    ensure!(
        h + 2 * padding >= kernel && w + 2 * padding >= kernel,
        "max_pool2d",
        "input {:?} smaller than kernel {kernel}",
        x.shape()
    );
    let ho = (h + 2 * padding - kernel) / stride + 1;
    let wo = (w + 2 * padding - kernel) / stride + 1;
    let mut out = vec![T::zero(); b * c * ho * wo];
    out.par_chunks_mut(ho * wo)
        .enumerate()
        .for_each(|(bc, dst)| {
            let src = &x.data()[bc * h * w..(bc + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut m = T::neg_infinity();
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                m = m.max(src[iy as usize * w + ix as usize]);
                            }
                        }
                    }
                    dst[oy * wo + ox] = m;
                }
            }
        });
    Ok(Tensor::from_parts(vec![b, c, ho, wo], out))
}

/// Non-overlapping average pooling with ceil-mode output size; partial
/// windows at the border average only the pixels they cover.
pub fn avg_pool2d_ceil<T: Scalar>(x: &Tensor<T>, kernel: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    ensure!(kernel >= 1, "avg_pool2d", "kernel must be positive");
    let ho = h.div_ceil(kernel);
    let wo = w.div_ceil(kernel);
    let mut out = vec![T::zero(); b * c * ho * wo];
    out.par_chunks_mut(ho * wo)
        .enumerate()
        .for_each(|(bc, dst)| {
            let src = &x.data()[bc * h * w..(bc + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let (y0, y1) = (oy * kernel, ((oy + 1) * kernel).min(h));
                    let (x0, x1) = (ox * kernel, ((ox + 1) * kernel).min(w));
                    let mut acc = T::zero();
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            acc += src[iy * w + ix];
                        }
                    }
                    dst[oy * wo + ox] = acc / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        });
    Ok(Tensor::from_parts(vec![b, c, ho, wo], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_kernel_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::uniform(vec![1, 1, 4, 4], -1.0, 1.0, &mut rng);
        let spec = ConvSpec::new(
            Tensor::full(vec![1, 1, 1, 1], 1.0),
            Some(Tensor::zeros(vec![1])),
            1,
            0,
            1,
        )
        .unwrap();
        assert_eq!(conv2d(&x, &spec).unwrap(), x);
    }

    #[test]
    fn strided_padded_output_shape() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 5, 5]);
        let spec = ConvSpec::new(Tensor::zeros(vec![4, 2, 3, 3]), None, 2, 1, 1).unwrap();
        assert_eq!(conv2d(&x, &spec).unwrap().shape(), &[1, 4, 3, 3]);
    }

    #[test]
    fn channel_mismatch_names_shapes() {
        let x = Tensor::<f32>::zeros(vec![1, 3, 5, 5]);
        let spec = ConvSpec::new(Tensor::zeros(vec![4, 2, 3, 3]), None, 1, 1, 1).unwrap();
        let msg = conv2d(&x, &spec).unwrap_err().to_string();
        assert!(msg.starts_with("conv2d"), "{msg}");
        assert!(
            msg.contains("[1, 3, 5, 5]") && msg.contains("[4, 2, 3, 3]"),
            "{msg}"
        );
    }

    #[test]
    fn grouped_conv_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::uniform(vec![2, 4, 6, 5], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(vec![6, 2, 3, 2], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(vec![6], -1.0, 1.0, &mut rng);
        let spec = ConvSpec::new(w, Some(b), 1, 1, 2).unwrap();
        let got = conv2d(&x, &spec).unwrap();
        let want = reference::conv2d(&x, &spec);
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn random_small_conv_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::uniform(vec![1, 2, 5, 5], -1.0, 1.0, &mut rng);
        let w = Tensor::<f32>::uniform(vec![4, 2, 3, 3], -1.0, 1.0, &mut rng);
        let spec = ConvSpec::new(
            w,
            Some(Tensor::uniform(vec![4], -1.0, 1.0, &mut rng)),
            2,
            1,
            1,
        )
        .unwrap();
        let got = conv2d(&x, &spec).unwrap();
        assert!(got.max_abs_diff(&reference::conv2d(&x, &spec)) < 1e-6);
    }

    #[test]
    fn max_pool_stem_geometry() {
        let x = Tensor::<f32>::from_fn(vec![1, 1, 4, 4], |i| i as f32);
        let y = max_pool2d(&x, 3, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn avg_pool_ceil_partial_window() {
        let x = Tensor::<f32>::from_fn(vec![1, 1, 3, 3], |i| i as f32);
        let y = avg_pool2d_ceil(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[2.0, 3.5, 6.5, 8.0]);
    }
}
