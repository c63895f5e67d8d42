//! ResNet-50-vd feature extractor.
//!
//! Deep stem (three 3×3 convolutions and a max pool), four bottleneck
//! stages, and per-level 1×1 projections that bring the last three stage
//! outputs (strides 8/16/32) to the common pyramid width.

use crate::config::ModelConfig;
use crate::error::{ensure, Result};
use crate::kernels::{avg_pool2d_ceil, conv2d, max_pool2d, relu, ConvSpec};
use crate::trace::ShapeLog;
use crate::weights::{conv_norm, ParamSource};
use crate::{Scalar, Tensor};

/// The three multi-scale maps: strides 8, 16 and 32, equal channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T = f32> {
    pub s3: Tensor<T>,
    pub s4: Tensor<T>,
    pub s5: Tensor<T>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn new(s3: Tensor<T>, s4: Tensor<T>, s5: Tensor<T>) -> Result<Self> {
        let p = Self { s3, s4, s5 };
        p.validate()?;
        Ok(p)
    }

    /// Finest first.
    pub fn levels(&self) -> [&Tensor<T>; 3] {
        [&self.s3, &self.s4, &self.s5]
    }

    pub fn batch(&self) -> usize {
        self.s3.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.s3.dim(1)
    }

    pub fn level_shapes(&self) -> Vec<(usize, usize)> {
        self.levels().iter().map(|t| (t.dim(2), t.dim(3))).collect()
    }

    /// Same batch and channel count everywhere, each level half the
    /// resolution of the previous one.
    pub fn validate(&self) -> Result<()> {
        let (b, c, h, w) = self.s3.dims4()?;
        for (i, t) in [&self.s4, &self.s5].into_iter().enumerate() {
            let (bb, cc, hh, ww) = t.dims4()?;
            let div = 2 << i;
            ensure!(
                bb == b && cc == c && hh * div == h && ww * div == w,
                "feature_pyramid",
                "level shapes {:?}, {:?}, {:?} are not a 2× pyramid",
                self.s3.shape(),
                self.s4.shape(),
                self.s5.shape()
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Shortcut<T = f32> {
    pub conv: ConvSpec<T>,
    /// 2×2 average pool before the projection (stride-2 blocks).
    pub pool: bool,
}

/// `relu(conv_c(relu(conv_b(relu(conv_a(x))))) + shortcut(x))`, stride on
/// the 3×3 convolution.
#[derive(Debug, Clone)]
pub struct Bottleneck<T = f32> {
    pub branch2a: ConvSpec<T>,
    pub branch2b: ConvSpec<T>,
    pub branch2c: ConvSpec<T>,
    pub shortcut: Option<Shortcut<T>>,
}

impl<T: Scalar> Bottleneck<T> {
    pub fn load(
        src: &mut impl ParamSource<T>,
        prefix: &str,
        in_ch: usize,
        width: usize,
        out_ch: usize,
        stride: usize,
    ) -> Result<Self> {
        let shortcut = if in_ch != out_ch || stride != 1 {
            Some(Shortcut {
                conv: conv_norm(src, &format!("{prefix}.short"), in_ch, out_ch, 1, 1)?,
                pool: stride == 2,
            })
        } else {
            None
        };
        Ok(Self {
            branch2a: conv_norm(src, &format!("{prefix}.branch2a"), in_ch, width, 1, 1)?,
            branch2b: conv_norm(src, &format!("{prefix}.branch2b"), width, width, 3, stride)?,
            branch2c: conv_norm(src, &format!("{prefix}.branch2c"), width, out_ch, 1, 1)?,
            shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, _, _) = x.dims4()?;
        ensure!(
            c == self.branch2a.in_channels,
            "bottleneck_block",
            "input {:?} vs block expecting {} channels",
            x.shape(),
            self.branch2a.in_channels
        );
        let y = relu(&conv2d(x, &self.branch2a)?);
        let y = relu(&conv2d(&y, &self.branch2b)?);
        let y = conv2d(&y, &self.branch2c)?;
        let short = match &self.shortcut {
            None => x.clone(),
            Some(s) if s.pool => conv2d(&avg_pool2d_ceil(x, 2)?, &s.conv)?,
            Some(s) => conv2d(x, &s.conv)?,
        };
        Ok(relu(&y.add(&short)?))
    }
}

#[derive(Debug, Clone)]
pub struct Backbone<T = f32> {
    pub stem: Vec<ConvSpec<T>>,
    pub stages: Vec<Vec<Bottleneck<T>>>,
    pub proj: Vec<ConvSpec<T>>,
}

impl<T: Scalar> Backbone<T> {
    pub fn load(src: &mut impl ParamSource<T>, cfg: &ModelConfig) -> Result<Self> {
        let bb = &cfg.backbone;
        let mut stem = Vec::with_capacity(3);
        let mut in_ch = 3;
        for (i, &out) in bb.stem_channels.iter().enumerate() {
            let stride = if i == 0 { 2 } else { 1 };
            stem.push(conv_norm(
                src,
                &format!("backbone.stem.{i}"),
                in_ch,
                out,
                3,
                stride,
            )?);
            in_ch = out;
        }
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let out = bb.stage_out_channels(s);
            let mut blocks = Vec::with_capacity(bb.depths[s]);
            for b in 0..bb.depths[s] {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let prefix = format!("backbone.stages.{s}.blocks.{b}");
                blocks.push(Bottleneck::load(
                    src,
                    &prefix,
                    in_ch,
                    bb.widths[s],
                    out,
                    stride,
                )?);
                in_ch = out;
            }
            stages.push(blocks);
        }
        let proj = (0..3)
            .map(|l| {
                conv_norm(
                    src,
                    &format!("backbone.proj.{l}"),
                    bb.stage_out_channels(l + 1),
                    cfg.hidden_dim(),
                    1,
                    1,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { stem, stages, proj })
    }

    /// Image `(B, 3, H, W)` with `H`, `W` multiples of 32 → pyramid at
    /// strides 8/16/32.
    pub fn forward(&self, image: &Tensor<T>, log: &mut ShapeLog) -> Result<FeaturePyramid<T>> {
        let (_, c, h, w) = image.dims4()?;
        ensure!(
            c == 3 && h % 32 == 0 && w % 32 == 0 && h > 0 && w > 0,
            "run_backbone",
            "image {:?} is not (B, 3, H, W) with H, W multiples of 32",
            image.shape()
        );
        log.record("backbone.input", image.shape());
        let mut x = image.clone();
        for conv in &self.stem {
            x = relu(&conv2d(&x, conv)?);
        }
        x = max_pool2d(&x, 3, 2, 1)?;
        log.record("backbone.stem", x.shape());
        let mut raw = Vec::with_capacity(3);
        for (s, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                x = block.forward(&x)?;
            }
            log.record(format!("backbone.stage{}", s + 1), x.shape());
            if s > 0 {
                raw.push(x.clone());
            }
        }
        let mut projected = raw
            .iter()
            .zip(&self.proj)
            .map(|(t, p)| conv2d(t, p))
            .collect::<Result<Vec<_>>>()?
            .into_iter();
        let pyramid = FeaturePyramid::new(
            projected.next().unwrap(),
            projected.next().unwrap(),
            projected.next().unwrap(),
        )?;
        for (name, t) in ["backbone.s3", "backbone.s4", "backbone.s5"]
            .iter()
            .zip(pyramid.levels())
        {
            log.record(*name, t.shape());
        }
        Ok(pyramid)
    }
}
