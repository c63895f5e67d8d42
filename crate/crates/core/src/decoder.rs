//! Decoder blocks with iterative box refinement.

use crate::config::ModelConfig;
use crate::denoising::{AttentionMask, DenoisingPlan};
use crate::encoder::load_attention;
use crate::error::{ensure, Result};
use crate::kernels::{
    inverse_sigmoid, mha_self_attention, relu, sigmoid, AttentionWeights, Linear, Mlp,
    INVERSE_SIGMOID_EPS,
};
use crate::msda::MsDeformableAttention;
use crate::query::QuerySet;
use crate::trace::ShapeLog;
use crate::weights::{linear, mlp, NormParams, ParamSource};
use crate::{Scalar, Tensor};

/// Post-norm decoder layer: masked self-attention, deformable
/// cross-attention, ReLU feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderLayer<T = f32> {
    pub self_attn: AttentionWeights<T>,
    pub norm1: NormParams<T>,
    pub cross_attn: MsDeformableAttention<T>,
    pub norm2: NormParams<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub norm3: NormParams<T>,
}

impl<T: Scalar> DecoderLayer<T> {
    pub fn load(src: &mut impl ParamSource<T>, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let dc = &cfg.decoder;
        let (d, f) = (dc.embed_dim, dc.ffn_dim);
        Ok(Self {
            self_attn: load_attention(src, &format!("{prefix}.self_attn"), d, dc.heads)?,
            norm1: NormParams::load(src, &format!("{prefix}.norm1"), d)?,
            cross_attn: MsDeformableAttention::load(src, &format!("{prefix}.cross_attn"), cfg)?,
            norm2: NormParams::load(src, &format!("{prefix}.norm2"), d)?,
            fc1: linear(src, &format!("{prefix}.fc1"), d, f)?,
            fc2: linear(src, &format!("{prefix}.fc2"), f, d)?,
            norm3: NormParams::load(src, &format!("{prefix}.norm3"), d)?,
        })
    }

    /// `x`, `pos` `(B, Q, D)`; `ref_boxes` `(B, Q, 4)`; `mask` additive
    /// `(Q, Q)`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        x: &Tensor<T>,
        pos: &Tensor<T>,
        memory: &Tensor<T>,
        level_shapes: &[(usize, usize)],
        ref_boxes: &Tensor<T>,
        mask: Option<&Tensor<T>>,
        log: &mut ShapeLog,
    ) -> Result<Tensor<T>> {
        let attn = mha_self_attention(x, Some(pos), &self.self_attn, mask)?;
        let x = self.norm1.forward(&x.add(&attn)?)?;
        let query = x.add(pos)?;
        let cross = self
            .cross_attn
            .forward(&query, ref_boxes, memory, level_shapes, log)?;
        let x = self.norm2.forward(&x.add(&cross)?)?;
        let ffn = self.fc2.forward(&relu(&self.fc1.forward(&x)?))?;
        self.norm3.forward(&x.add(&ffn)?)
    }
}

/// `sigmoid(offsets + inverse_sigmoid(boxes))`.
pub fn refine_boxes<T: Scalar>(offsets: &Tensor<T>, boxes: &Tensor<T>) -> Result<Tensor<T>> {
    let logits = inverse_sigmoid(boxes, T::lit(INVERSE_SIGMOID_EPS));
    Ok(sigmoid(&offsets.add(&logits)?))
}

#[derive(Debug, Clone)]
pub struct Decoder<T = f32> {
    /// `4 → 2D → D` with ReLU.
    pub query_pos_head: Mlp<T>,
    pub layers: Vec<DecoderLayer<T>>,
    pub bbox_heads: Vec<Mlp<T>>,
    pub class_heads: Vec<Linear<T>>,
}

/// Per-block predictions.
#[derive(Debug, Clone)]
pub struct DecoderOutput<T = f32> {
    /// `(blocks, B, Q, classes)`.
    pub logits: Tensor<T>,
    /// `(blocks, B, Q, 4)` normalized `cx, cy, w, h`.
    pub boxes: Tensor<T>,
    /// Denoising queries at the front of the query axis.
    pub d: usize,
}

impl<T: Scalar> DecoderOutput<T> {
    pub fn blocks(&self) -> usize {
        self.logits.dim(0)
    }

    /// Last block's predictions for the matching queries only:
    /// `(B, Q − d, classes)` and `(B, Q − d, 4)`.
    pub fn final_matching(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        let last = self.blocks() - 1;
        let q = self.logits.dim(2);
        let pick = |t: &Tensor<T>| -> Result<Tensor<T>> {
            let s = t.shape().to_vec();
            t.narrow(0, last, 1)?
                .narrow(2, self.d, q - self.d)?
                .into_reshape(vec![s[1], q - self.d, s[3]])
        };
        Ok((pick(&self.logits)?, pick(&self.boxes)?))
    }
}

impl<T: Scalar> Decoder<T> {
    pub fn load(src: &mut impl ParamSource<T>, cfg: &ModelConfig) -> Result<Self> {
        let dc = &cfg.decoder;
        let d = dc.embed_dim;
        let query_pos_head = mlp(src, "decoder.query_pos_head", 4, 2 * d, d, 2)?;
        let mut layers = Vec::with_capacity(dc.blocks);
        for i in 0..dc.blocks {
            layers.push(DecoderLayer::load(
                src,
                &format!("decoder.layers.{i}"),
                cfg,
            )?);
        }
        let mut bbox_heads = Vec::with_capacity(dc.blocks);
        let mut class_heads = Vec::with_capacity(dc.blocks);
        for i in 0..dc.blocks {
            bbox_heads.push(mlp(src, &format!("decoder.bbox_head.{i}"), d, d, 4, 3)?);
            class_heads.push(linear(
                src,
                &format!("decoder.class_head.{i}"),
                d,
                dc.class_count,
            )?);
        }
        Ok(Self {
            query_pos_head,
            layers,
            bbox_heads,
            class_heads,
        })
    }

    /// Runs every block. `target` `(B, Q, D)` and `boxes` `(B, Q, 4)` are the
    /// initial queries, `memory` `(B, L, D)` the flattened pyramid.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        target: &Tensor<T>,
        boxes: &Tensor<T>,
        memory: &Tensor<T>,
        level_shapes: &[(usize, usize)],
        mask: Option<&AttentionMask>,
        d: usize,
        log: &mut ShapeLog,
    ) -> Result<DecoderOutput<T>> {
        let (b, q, _) = target.dims3()?;
        ensure!(
            boxes.shape() == [b, q, 4],
            "decoder",
            "boxes {:?} for queries {:?}",
            boxes.shape(),
            target.shape()
        );
        if let Some(m) = mask {
            ensure!(
                m.size() == q,
                "decoder",
                "attention mask {:?} for {q} queries",
                m.shape()
            );
        }
        let additive = mask.map(AttentionMask::to_additive::<T>).transpose()?;
        let mut x = target.clone();
        let mut ref_boxes = boxes.clone();
        let mut all_logits = Vec::with_capacity(self.layers.len());
        let mut all_boxes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            log.record(format!("decoder.block{i}.ref_boxes"), &[b, q, 1, 4]);
            let pos = self.query_pos_head.forward(&ref_boxes)?;
            log.record(format!("decoder.block{i}.query_pos"), pos.shape());
            x = layer.forward(
                &x,
                &pos,
                memory,
                level_shapes,
                &ref_boxes,
                additive.as_ref(),
                log,
            )?;
            log.record(format!("decoder.block{i}.hidden"), x.shape());
            let refined = refine_boxes(&self.bbox_heads[i].forward(&x)?, &ref_boxes)?;
            let logits = self.class_heads[i].forward(&x)?;
            log.record(format!("decoder.block{i}.logits"), logits.shape());
            log.record(format!("decoder.block{i}.boxes"), refined.shape());
            all_logits.push(logits);
            // the next block sees the refined boxes as plain values
            ref_boxes = refined.clone();
            all_boxes.push(refined);
        }
        let stack = |parts: Vec<Tensor<T>>| -> Result<Tensor<T>> {
            let mut shape = parts[0].shape().to_vec();
            shape.insert(0, parts.len());
            let refs: Vec<&Tensor<T>> = parts.iter().collect();
            Tensor::concat(&refs, 0)?.into_reshape(shape)
        };
        ensure!(!self.layers.is_empty(), "decoder", "no decoder blocks");
        let out = DecoderOutput {
            logits: stack(all_logits)?,
            boxes: stack(all_boxes)?,
            d,
        };
        log.record("decoder.logits", out.logits.shape());
        log.record("decoder.boxes", out.boxes.shape());
        Ok(out)
    }

    /// Prepends the denoising queries of `plan` (if any) to the selected
    /// queries and runs the decoder.
    pub fn run(
        &self,
        qs: &QuerySet<T>,
        plan: Option<&DenoisingPlan<T>>,
        log: &mut ShapeLog,
    ) -> Result<DecoderOutput<T>> {
        let k = qs.target.dim(1);
        let (target, boxes, mask, d) = match plan.filter(|p| p.d > 0) {
            None => (qs.target.clone(), qs.boxes.clone(), None, 0),
            Some(p) => {
                ensure!(
                    p.mask.size() == p.d + k,
                    "decoder",
                    "plan mask {:?} for {} denoising and {k} matching queries",
                    p.mask.shape(),
                    p.d
                );
                (
                    Tensor::concat(&[&p.embeddings, &qs.target], 1)?,
                    Tensor::concat(&[&p.boxes, &qs.boxes], 1)?,
                    Some(&p.mask),
                    p.d,
                )
            }
        };
        log.record("decoder.queries", target.shape());
        if let Some(m) = mask {
            log.record("decoder.attn_mask", &m.shape());
        }
        self.forward(&target, &boxes, &qs.memory, &qs.level_shapes, mask, d, log)
    }
}
