//! Parameter container I/O, batch-norm folding and typed parameter requests.
//!
//! # Name schema
//!
//! Convolutions followed by batch norm are stored as `{p}.conv.weight` plus
//! `{p}.bn.{weight,bias,running_mean,running_var}`; folding rewrites them to
//! `{p}.conv.weight` / `{p}.conv.bias`. Dense layers are `{p}.weight` /
//! `{p}.bias`. Top-level prefixes:
//!
//! | prefix | contents |
//! |---|---|
//! | `backbone.stem.{0..3}` | 3×3 stem convolutions |
//! | `backbone.stages.{s}.blocks.{b}.{branch2a,branch2b,branch2c,short}` | bottlenecks |
//! | `backbone.proj.{l}` | 1×1 projections to the pyramid width |
//! | `encoder.layers.{i}.{self_attn.*,norm1,fc1,fc2,norm2}` | attention over the coarsest map |
//! | `encoder.{lateral,downsample}.{i}` | fusion convolutions |
//! | `encoder.{fpn,pan}.{i}.{conv1,conv2,conv3,blocks.{j}.{conv3x3,conv1x1}}` | CSP layers |
//! | `query.{input_proj.{l},enc_output.{proj,norm},score_head,bbox_head.layers.{k}}` | query selection |
//! | `denoising.class_embed.weight` | label embedding, one extra padding row |
//! | `decoder.query_pos_head.layers.{k}` | box → positional embedding |
//! | `decoder.layers.{i}.{self_attn.*,norm1,cross_attn.*,norm2,fc1,fc2,norm3}` | decoder layers |
//! | `decoder.{bbox_head.{i}.layers.{k},class_head.{i}}` | per-block heads |

mod container;
mod fold;
mod source;

pub use container::{load_container, parse_container, WeightStore};
pub use fold::{fold_batchnorm, BN_EPS_KEY, DEFAULT_BN_EPS};
pub use source::{
    checkpoint_manifest, conv_norm, linear, mlp, NormParams, ParamKind, ParamSource, ParamSpec,
    RandomInit, SpecRecorder, StoreSource,
};
