//! Encoder-side query selection.
//!
//! The fused pyramid is projected, flattened into one token sequence, and
//! scored by a class head; the top-scoring locations become the decoder's
//! initial queries, with boxes predicted relative to fixed anchors.

use crate::config::ModelConfig;
use crate::error::{ensure, Result};
use crate::kernels::{conv2d, gather_rows, topk_scores, ConvSpec, Linear, Mlp};
use crate::trace::ShapeLog;
use crate::weights::{conv_norm, linear, mlp, NormParams, ParamSource};
use crate::{FeaturePyramid, Scalar, Tensor};

/// Anchors whose coordinates all lie strictly inside this open interval are
/// valid.
pub const ANCHOR_VALID_RANGE: (f64, f64) = (0.01, 0.99);

/// Inverse-sigmoid anchor boxes for every flattened location.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet<T = f32> {
    /// `(L, 4)` `cx, cy, w, h` logits; invalid rows hold `T::max_value()`.
    pub logits: Tensor<T>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> AnchorSet<T> {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Normalized `cx, cy, w, h` anchor of every flattened location.
///
/// Location `(i, j)` of level `l` with extent `H × W` gets the box centred
/// at `((j + ½) / W, (i + ½) / H)` with side `base_scale · 2^l`. Levels are
/// concatenated finest first, each row-major.
pub fn anchor_boxes(level_shapes: &[(usize, usize)], base_scale: f64) -> Vec<[f64; 4]> {
    let mut out = Vec::new();
    for (level, &(h, w)) in level_shapes.iter().enumerate() {
        let side = base_scale * 2f64.powi(level as i32);
        for i in 0..h {
            for j in 0..w {
                out.push([
                    (j as f64 + 0.5) / w as f64,
                    (i as f64 + 0.5) / h as f64,
                    side,
                    side,
                ]);
            }
        }
    }
    out
}

/// [`anchor_boxes`] in inverse-sigmoid space, with validity mask.
pub fn generate_anchors<T: Scalar>(
    level_shapes: &[(usize, usize)],
    base_scale: f64,
) -> AnchorSet<T> {
    let (lo, hi) = ANCHOR_VALID_RANGE;
    let boxes = anchor_boxes(level_shapes, base_scale);
    let mut logits = Vec::with_capacity(boxes.len() * 4);
    let mut valid = Vec::with_capacity(boxes.len());
    for coords in &boxes {
        let ok = coords.iter().all(|&c| c > lo && c < hi);
        valid.push(ok);
        for &c in coords {
            logits.push(if ok {
                T::lit((c / (1.0 - c)).ln())
            } else {
                T::max_value()
            });
        }
    }
    AnchorSet {
        logits: Tensor::from_parts(vec![boxes.len(), 4], logits),
        valid,
    }
}

/// Concatenates `(B, C, H, W)` levels into `(B, Σ H·W, C)`.
pub fn flatten_pyramid<T: Scalar>(levels: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let tokens = levels
        .iter()
        .map(|t| crate::encoder::flatten_map(t))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat(&tokens.iter().collect::<Vec<_>>(), 1)
}

/// Start offset of each level in the flattened sequence.
pub fn level_start_index(level_shapes: &[(usize, usize)]) -> Vec<usize> {
    level_shapes
        .iter()
        .scan(0, |acc, (h, w)| {
            let start = *acc;
            *acc += h * w;
            Some(start)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct QuerySelection<T = f32> {
    /// Per-level 1×1 projection (folded norm, no activation).
    pub input_proj: Vec<ConvSpec<T>>,
    pub enc_proj: Linear<T>,
    pub enc_norm: NormParams<T>,
    pub score_head: Linear<T>,
    pub bbox_head: Mlp<T>,
    pub num_queries: usize,
    pub anchor_base_scale: f64,
}

/// Selected queries plus the memory the decoder attends to.
#[derive(Debug, Clone)]
pub struct QuerySet<T = f32> {
    /// `(B, L, D)`, rows of invalid anchors zeroed.
    pub memory: Tensor<T>,
    pub level_shapes: Vec<(usize, usize)>,
    /// `(B, K, D)` content embeddings of the selected locations.
    pub target: Tensor<T>,
    /// `(B, K, 4)` unsquashed reference boxes.
    pub ref_logits: Tensor<T>,
    /// `(B, K, 4)` `sigmoid(ref_logits)`.
    pub boxes: Tensor<T>,
    /// `(B, K)` best class logit of each selected location.
    pub scores: Tensor<T>,
    /// Selected flat location indices, row-major `B × K`.
    pub indices: Vec<usize>,
}

impl<T: Scalar> QuerySelection<T> {
    pub fn load(src: &mut impl ParamSource<T>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.hidden_dim();
        let input_proj = (0..cfg.decoder.scales)
            .map(|l| conv_norm(src, &format!("query.input_proj.{l}"), d, d, 1, 1))
            .collect::<Result<_>>()?;
        Ok(Self {
            input_proj,
            enc_proj: linear(src, "query.enc_output.proj", d, d)?,
            enc_norm: NormParams::load(src, "query.enc_output.norm", d)?,
            score_head: linear(src, "query.score_head", d, cfg.num_classes())?,
            bbox_head: mlp(src, "query.bbox_head", d, d, 4, 3)?,
            num_queries: cfg.num_queries,
            anchor_base_scale: cfg.anchor_base_scale,
        })
    }

    pub fn forward(&self, p: &FeaturePyramid<T>, log: &mut ShapeLog) -> Result<QuerySet<T>> {
        p.validate()?;
        let projected = p
            .levels()
            .iter()
            .zip(&self.input_proj)
            .map(|(t, conv)| conv2d(t, conv))
            .collect::<Result<Vec<_>>>()?;
        let level_shapes = p.level_shapes();
        let flat = flatten_pyramid(&projected.iter().collect::<Vec<_>>())?;
        log.record("query.memory", flat.shape());
        let (b, l, d) = flat.dims3()?;
        let k = self.num_queries;
        ensure!(
            k <= l,
            "query_selection",
            "{k} queries requested from {l} locations"
        );

        let anchors = generate_anchors::<T>(&level_shapes, self.anchor_base_scale);
        let memory = Tensor::from_fn(flat.shape().to_vec(), |i| {
            if anchors.valid[(i / d) % l] {
                flat.data()[i]
            } else {
                T::zero()
            }
        });
        let output_memory = self.enc_norm.forward(&self.enc_proj.forward(&memory)?)?;
        let class_logits = self.score_head.forward(&output_memory)?;
        log.record("query.enc_class_logits", class_logits.shape());
        let c = class_logits.dim(2);

        let scores = Tensor::from_fn(vec![b, l], |i| {
            if !anchors.valid[i % l] {
                return T::neg_infinity();
            }
            let row = &class_logits.data()[i * c..(i + 1) * c];
            row.iter().copied().fold(T::neg_infinity(), T::max)
        });
        let top = topk_scores(&scores, k)?;

        let deltas = self.bbox_head.forward(&output_memory)?;
        let al = anchors.logits.data();
        let enc_boxes = Tensor::from_fn(deltas.shape().to_vec(), |i| {
            deltas.data()[i] + al[i % (l * 4)]
        });
        log.record("query.enc_box_logits", enc_boxes.shape());
        let target = gather_rows(&output_memory, &top.indices, k)?;
        let ref_logits = gather_rows(&enc_boxes, &top.indices, k)?;
        let boxes = crate::kernels::sigmoid(&ref_logits);
        log.record("query.target", target.shape());
        log.record("query.ref_boxes", boxes.shape());
        Ok(QuerySet {
            memory,
            level_shapes,
            target,
            ref_logits,
            boxes,
            scores: top.values,
            indices: top.indices,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::RandomInit;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Number of `i < n` with `(i + ½) / n` strictly inside the valid range.
    fn valid_centres(n: usize) -> usize {
        (0..n)
            .filter(|&i| {
                let c = (2 * i + 1) as f64 / (2 * n) as f64;
                c > 0.01 && c < 0.99
            })
            .count()
    }

    #[test]
    fn anchor_count_and_first_centre() {
        let cfg = ModelConfig::default();
        let a = generate_anchors::<f64>(&cfg.level_shapes(), 0.05);
        assert_eq!(a.len(), 80 * 80 + 40 * 40 + 20 * 20);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        // location (0, 0) is invalid (centre 1/160 < 0.01); check the first valid one
        assert!(!a.valid[0]);
        let first_valid = a.valid.iter().position(|v| *v).unwrap();
        assert_eq!(first_valid, 80 + 1);
        assert!((sig(a.logits.at(&[first_valid, 0])) - 1.5 / 80.0).abs() < 1e-12);
        assert!((sig(a.logits.at(&[first_valid, 2])) - 0.05).abs() < 1e-12);
        assert_eq!(a.logits.at(&[0, 0]), f64::MAX);
    }

    #[test]
    fn first_anchor_centre_is_half_a_cell() {
        let boxes = anchor_boxes(&ModelConfig::default().level_shapes(), 0.05);
        assert_eq!(boxes[0], [0.5 / 80.0, 0.5 / 80.0, 0.05, 0.05]);
        assert_eq!(boxes[0][0], 0.00625);
        assert_eq!(boxes[6400], [0.5 / 40.0, 0.5 / 40.0, 0.1, 0.1]);
        assert_eq!(boxes[8000][2], 0.2);
    }

    #[test]
    fn valid_mask_matches_enumeration() {
        let cfg = ModelConfig::default();
        let a = generate_anchors::<f32>(&cfg.level_shapes(), 0.05);
        let want: usize = cfg
            .level_shapes()
            .iter()
            .map(|&(h, w)| valid_centres(h) * valid_centres(w))
            .sum();
        assert_eq!(a.valid_count(), want);
        // every invalid anchor lies on the finest level border
        for (idx, ok) in a.valid.iter().enumerate() {
            if !ok {
                assert!(idx < 6400);
                let (i, j) = (idx / 80, idx % 80);
                assert!(i == 0 || j == 0 || i == 79 || j == 79);
            }
        }
    }

    #[test]
    fn oversized_levels_are_invalid() {
        // side 0.05 · 2^5 = 1.6 on the sixth level
        let a = generate_anchors::<f32>(&[(2, 2); 6], 0.05);
        assert!(a.valid[20..].iter().all(|v| !v));
        assert!(a.valid[..20].iter().all(|v| *v));
    }

    #[test]
    fn flatten_orders_levels_then_rows() {
        let a = Tensor::<f32>::from_fn(vec![1, 2, 2, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn(vec![1, 2, 1, 1], |i| 100.0 + i as f32);
        let f = flatten_pyramid(&[&a, &b]).unwrap();
        assert_eq!(f.shape(), &[1, 5, 2]);
        assert_eq!(
            f.data(),
            &[0.0, 4.0, 1.0, 5.0, 2.0, 6.0, 3.0, 7.0, 100.0, 101.0]
        );
        assert_eq!(
            level_start_index(&[(80, 80), (40, 40), (20, 20)]),
            vec![0, 6400, 8000]
        );
    }

    fn selection() -> (QuerySelection<f64>, FeaturePyramid<f64>) {
        let cfg = ModelConfig::tiny();
        let sel = QuerySelection::<f64>::load(&mut RandomInit::new(21), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let p = FeaturePyramid::new(
            Tensor::uniform(vec![2, 32, 8, 8], -1.0, 1.0, &mut rng),
            Tensor::uniform(vec![2, 32, 4, 4], -1.0, 1.0, &mut rng),
            Tensor::uniform(vec![2, 32, 2, 2], -1.0, 1.0, &mut rng),
        )
        .unwrap();
        (sel, p)
    }

    #[test]
    fn selection_matches_full_sort_and_skips_invalid() {
        let (sel, p) = selection();
        let q = sel.forward(&p, &mut ShapeLog::disabled()).unwrap();
        let anchors = generate_anchors::<f64>(&p.level_shapes(), 0.05);
        let (b, l, _) = q.memory.dims3().unwrap();
        assert_eq!(l, 84);
        // recompute the class logits independently and sort
        let out_mem = sel
            .enc_norm
            .forward(&crate::reference::linear(
                &q.memory,
                &sel.enc_proj.weight,
                sel.enc_proj.bias.as_ref(),
            ))
            .unwrap();
        let logits = crate::reference::linear(
            &out_mem,
            &sel.score_head.weight,
            sel.score_head.bias.as_ref(),
        );
        for bi in 0..b {
            let mut cand: Vec<(usize, f64)> = (0..l)
                .filter(|&i| anchors.valid[i])
                .map(|i| {
                    (
                        i,
                        (0..5)
                            .map(|c| logits.at(&[bi, i, c]))
                            .fold(f64::MIN, f64::max),
                    )
                })
                .collect();
            cand.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let want: Vec<usize> = cand.iter().take(20).map(|c| c.0).collect();
            assert_eq!(&q.indices[bi * 20..(bi + 1) * 20], want.as_slice());
        }
        assert!(q.indices.iter().all(|&i| anchors.valid[i]));
        assert!(q.boxes.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert_eq!(q.target.shape(), &[2, 20, 32]);
        assert_eq!(q.ref_logits.shape(), &[2, 20, 4]);
    }

    #[test]
    fn masked_memory_rows_are_zero() {
        let (sel, p) = selection();
        let q = sel.forward(&p, &mut ShapeLog::disabled()).unwrap();
        let anchors = generate_anchors::<f64>(&p.level_shapes(), 0.05);
        for i in 0..84 {
            let zero = (0..32).all(|c| q.memory.at(&[1, i, c]) == 0.0);
            assert_eq!(zero, !anchors.valid[i], "location {i}");
        }
    }

    #[test]
    fn too_many_queries_is_rejected() {
        let (mut sel, p) = selection();
        sel.num_queries = 85;
        assert!(sel
            .forward(&p, &mut ShapeLog::disabled())
            .unwrap_err()
            .is_contract_violation());
    }
}
