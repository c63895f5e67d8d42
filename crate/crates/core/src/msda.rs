//! Multi-scale deformable attention.
//!
//! Every query predicts, per head, a handful of sampling points on each
//! pyramid level around its reference box, plus one softmax weight per
//! point. The attended value is the weighted sum of bilinear samples.

use rayon::prelude::*;

use crate::config::ModelConfig;
use crate::error::{ensure, Result};
use crate::kernels::{grid_sample_bilinear, softmax, Linear};
use crate::trace::ShapeLog;
use crate::weights::{linear, ParamSource};
use crate::{Scalar, Tensor};

/// Scale applied to predicted offsets relative to the box half-extent.
pub const OFFSET_SCALE: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct MsDeformableAttention<T = f32> {
    pub value_proj: Linear<T>,
    pub sampling_offsets: Linear<T>,
    pub attention_weights: Linear<T>,
    pub output_proj: Linear<T>,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

/// Sampling geometry for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan<T = f32> {
    /// `(B, Q, heads, levels·points, 2)` `(x, y)` in `[-1, 1]`, level-major
    /// along the slot axis.
    pub locations: Tensor<T>,
    /// `(B, Q, heads, levels·points)`, each row summing to one.
    pub attn: Tensor<T>,
}

impl<T: Scalar> MsDeformableAttention<T> {
    pub fn load(src: &mut impl ParamSource<T>, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let dc = &cfg.decoder;
        let d = dc.embed_dim;
        Ok(Self {
            value_proj: linear(src, &format!("{prefix}.value_proj"), d, d)?,
            sampling_offsets: linear(
                src,
                &format!("{prefix}.sampling_offsets"),
                d,
                dc.offset_scalars(),
            )?,
            attention_weights: linear(
                src,
                &format!("{prefix}.attention_weights"),
                d,
                dc.sampling_locations(),
            )?,
            output_proj: linear(src, &format!("{prefix}.output_proj"), d, d)?,
            heads: dc.heads,
            levels: dc.scales,
            points: dc.points_per_head_per_scale,
        })
    }

    pub fn slots(&self) -> usize {
        self.levels * self.points
    }

    /// `query` `(B, Q, D)`, `ref_boxes` `(B, Q, 4)` normalized `cx, cy, w, h`.
    ///
    /// Point `(h, l, p)` of a query sits at
    /// `centre + offset / points · (w, h) · OFFSET_SCALE`, mapped to `[-1, 1]`.
    pub fn sampling_locations(
        &self,
        query: &Tensor<T>,
        ref_boxes: &Tensor<T>,
        log: &mut ShapeLog,
    ) -> Result<SamplingPlan<T>> {
        let (b, q, _) = query.dims3()?;
        ensure!(
            ref_boxes.shape() == [b, q, 4],
            "msda_sampling_locations",
            "reference boxes {:?} for queries {:?}",
            ref_boxes.shape(),
            query.shape()
        );
        let (heads, slots) = (self.heads, self.slots());
        let offsets = self.sampling_offsets.forward(query)?;
        log.record("decoder.msda.offsets", offsets.shape());
        let logits = self.attention_weights.forward(query)?;
        log.record("decoder.msda.attn_logits", logits.shape());
        let attn = softmax(&logits.into_reshape(vec![b, q, heads, slots])?, 3)?;

        let rb = ref_boxes.data();
        let od = offsets.data();
        let per_query = heads * slots * 2;
        let points = T::lit(self.points as f64);
        let scale = T::lit(OFFSET_SCALE);
        let two = T::lit(2.0);
        let locations = Tensor::from_fn(vec![b, q, heads, slots, 2], |i| {
            let bq = i / per_query;
            let axis = i % 2;
            let (centre, extent) = (rb[bq * 4 + axis], rb[bq * 4 + 2 + axis]);
            let loc = centre + od[i] / points * extent * scale;
            two * loc - T::one()
        });
        log.record("decoder.msda.locations", locations.shape());
        Ok(SamplingPlan { locations, attn })
    }

    /// Full cross-attention: value projection, sampling, aggregation and
    /// output projection. `memory` is `(B, L, D)` over `level_shapes`.
    pub fn forward(
        &self,
        query: &Tensor<T>,
        ref_boxes: &Tensor<T>,
        memory: &Tensor<T>,
        level_shapes: &[(usize, usize)],
        log: &mut ShapeLog,
    ) -> Result<Tensor<T>> {
        ensure!(
            level_shapes.len() == self.levels,
            "msda",
            "{} level shapes for {} levels",
            level_shapes.len(),
            self.levels
        );
        let value = self.value_proj.forward(memory)?;
        let plan = self.sampling_locations(query, ref_boxes, log)?;
        let sampled = msda_attend(&value, level_shapes, &plan, self.points)?;
        let out = self.output_proj.forward(&sampled)?;
        log.record("decoder.msda.output", out.shape());
        Ok(out)
    }
}

/// Samples and aggregates `value` `(B, L, D)` at the planned locations;
/// returns `(B, Q, D)` before the output projection.
///
/// Each level of `value` is viewed as `(B·heads, D / heads, H, W)` and
/// sampled with [`grid_sample_bilinear`] at that level's `points` slots.
pub fn msda_attend<T: Scalar>(
    value: &Tensor<T>,
    level_shapes: &[(usize, usize)],
    plan: &SamplingPlan<T>,
    points: usize,
) -> Result<Tensor<T>> {
    let (b, l, d) = value.dims3()?;
    let total: usize = level_shapes.iter().map(|(h, w)| h * w).sum();
    ensure!(
        total == l,
        "msda_attend",
        "level shapes {level_shapes:?} cover {total} locations, memory has {l}"
    );
    let loc_shape = plan.locations.shape();
    ensure!(
        loc_shape.len() == 5 && loc_shape[0] == b && loc_shape[4] == 2,
        "msda_attend",
        "locations {loc_shape:?} for memory {:?}",
        value.shape()
    );
    let (q, heads, slots) = (loc_shape[1], loc_shape[2], loc_shape[3]);
    ensure!(
        plan.attn.shape() == [b, q, heads, slots],
        "msda_attend",
        "attention {:?} for locations {loc_shape:?}",
        plan.attn.shape()
    );
    ensure!(
        slots == points * level_shapes.len() && heads > 0 && d % heads == 0,
        "msda_attend",
        "{slots} slots, {points} points over {} levels, {heads} heads, width {d}",
        level_shapes.len()
    );
    let hd = d / heads;
    let mut out = vec![T::zero(); b * q * d];
    let mut start = 0;
    for (lvl, &(h, w)) in level_shapes.iter().enumerate() {
        let n = h * w;
        // (B, n, heads, hd) -> (B, heads, hd, n)
        let level = value
            .narrow(1, start, n)?
            .into_reshape(vec![b, n, heads, hd])?
            .permute(&[0, 2, 3, 1])?
            .into_reshape(vec![b * heads, hd, h, w])?;
        // grid (B·heads, Q·points, 2), query-major
        let grid = Tensor::from_fn(vec![b * heads, q * points, 2], |i| {
            let axis = i % 2;
            let p = (i / 2) % points;
            let qi = (i / (2 * points)) % q;
            let bh = i / (2 * points * q);
            let (bi, hi) = (bh / heads, bh % heads);
            plan.locations.data()
                [((((bi * q + qi) * heads + hi) * slots) + lvl * points + p) * 2 + axis]
        });
        let sampled = grid_sample_bilinear(&level, &grid)?;
        let sd = sampled.data();
        let ad = plan.attn.data();
        out.par_chunks_mut(d).enumerate().for_each(|(bq, row)| {
            let (bi, qi) = (bq / q, bq % q);
            for hi in 0..heads {
                let bh = bi * heads + hi;
                let attn_base = (bq * heads + hi) * slots + lvl * points;
                for c in 0..hd {
                    let plane = &sd[(bh * hd + c) * q * points + qi * points..][..points];
                    let mut acc = T::zero();
                    for (p, v) in plane.iter().enumerate() {
                        acc += ad[attn_base + p] * *v;
                    }
                    row[hi * hd + c] += acc;
                }
            }
        });
        start += n;
    }
    Ok(Tensor::from_parts(vec![b, q, d], out))
}
