//! Contrastive denoising queries and their attention mask.
//!
//! Each ground-truth object is copied into every group twice: a positive
//! copy with a small box perturbation and a negative copy pushed further
//! away. Denoising queries sit in front of the matching queries, and the
//! mask keeps matching queries and other groups from seeing them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DenoisingConfig, ModelConfig};
use crate::error::{ensure, Error, Result};
use crate::weights::{ParamKind, ParamSource};
use crate::{Scalar, Tensor};

/// Objects of one image: normalized `cx, cy, w, h` boxes and class labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<usize>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, label: usize, bbox: [f64; 4]) {
        self.labels.push(label);
        self.boxes.push(bbox);
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        ensure!(
            self.boxes.len() == self.labels.len(),
            "ground_truth",
            "{} boxes for {} labels",
            self.boxes.len(),
            self.labels.len()
        );
        for (b, &l) in self.boxes.iter().zip(&self.labels) {
            ensure!(
                l < num_classes,
                "ground_truth",
                "label {l} outside [0, {num_classes})"
            );
            ensure!(
                b.iter().all(|v| (0.0..=1.0).contains(v)),
                "ground_truth",
                "box {b:?} not normalized"
            );
        }
        Ok(())
    }
}

/// One object of the JSON annotation format, a flat array of
/// `{"image_id": 0, "class_id": 17, "bbox": [cx, cy, w, h]}` records.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Annotation {
    pub image_id: usize,
    pub class_id: usize,
    pub bbox: [f64; 4],
}

/// Groups annotations by image id into a batch of `batch` images.
pub fn parse_annotations(json: &str, batch: usize, num_classes: usize) -> Result<Vec<GroundTruth>> {
    let records: Vec<Annotation> =
        serde_json::from_str(json).map_err(|e| Error::Annotation(e.to_string()))?;
    annotations_to_batch(&records, batch, num_classes)
}

pub fn annotations_to_batch(
    records: &[Annotation],
    batch: usize,
    num_classes: usize,
) -> Result<Vec<GroundTruth>> {
    let mut out = vec![GroundTruth::default(); batch];
    for r in records {
        let gt = out.get_mut(r.image_id).ok_or_else(|| {
            Error::Annotation(format!(
                "image_id {} outside a batch of {batch}",
                r.image_id
            ))
        })?;
        gt.push(r.class_id, r.bbox);
    }
    for gt in &out {
        gt.validate(num_classes)
            .map_err(|e| Error::Annotation(e.to_string()))?;
    }
    Ok(out)
}

/// Square boolean mask over `d + num_queries` decoder queries; `true`
/// means the row query may not attend to the column query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    blocked: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.size, self.size]
    }

    pub fn is_blocked(&self, row: usize, col: usize) -> bool {
        self.blocked[row * self.size + col]
    }

    pub fn blocked(&self) -> &[bool] {
        &self.blocked
    }

    pub fn blocked_count(&self) -> usize {
        self.blocked.iter().filter(|b| **b).count()
    }

    /// `0` for open pairs, `-∞` for blocked ones.
    pub fn to_additive<T: Scalar>(&self) -> Result<Tensor<T>> {
        crate::kernels::additive_mask(&self.blocked, self.size)
    }
}

/// Mask for `d` denoising queries in `groups` equal blocks followed by
/// `num_queries` matching queries.
///
/// Matching queries cannot see any denoising query, and each denoising
/// group cannot see the other groups. Denoising queries do see the matching
/// queries.
pub fn build_attention_mask(d: usize, groups: usize, num_queries: usize) -> Result<AttentionMask> {
    let size = d + num_queries;
    let mut blocked = vec![false; size * size];
    if d > 0 {
        ensure!(
            groups > 0 && d % groups == 0,
            "build_attention_mask",
            "{d} denoising queries cannot form {groups} equal groups"
        );
        let block = d / groups;
        for row in 0..size {
            for col in 0..d {
                blocked[row * size + col] = if row >= d {
                    true
                } else {
                    row / block != col / block
                };
            }
        }
    }
    Ok(AttentionMask { size, blocked })
}

/// Denoising queries for a batch, ready to prepend to the matching queries.
#[derive(Debug, Clone)]
pub struct DenoisingPlan<T = f32> {
    /// `(B, d, D)` label embeddings.
    pub embeddings: Tensor<T>,
    /// `(B, d, 4)` noisy normalized `cx, cy, w, h` boxes.
    pub boxes: Tensor<T>,
    /// Noisy labels, `B × d` row-major; padding slots hold `num_classes`.
    pub labels: Vec<usize>,
    pub mask: AttentionMask,
    pub groups: usize,
    pub d: usize,
    pub max_gt: usize,
}

/// The `(num_classes + 1, D)` label embedding table; the last row embeds
/// padding slots.
#[derive(Debug, Clone)]
pub struct LabelEmbedding<T = f32> {
    pub weight: Tensor<T>,
}

impl<T: Scalar> LabelEmbedding<T> {
    pub fn load(src: &mut impl ParamSource<T>, cfg: &ModelConfig) -> Result<Self> {
        let weight = src.fetch(
            "denoising.class_embed.weight",
            &[cfg.num_classes() + 1, cfg.hidden_dim()],
            ParamKind::Embedding,
        )?;
        Ok(Self { weight })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.dim(0) - 1
    }

    pub fn dim(&self) -> usize {
        self.weight.dim(1)
    }
}

fn to_corners(b: &[f64; 4]) -> [f64; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

/// Jitters the corners of `b` by `delta` (clipped to the unit square) and
/// applies the corner displacement back to centre and size, so a zero
/// displacement returns `b` bit-for-bit. Crossed corners give a negative
/// extent, which the final clamp turns into zero.
fn jitter_box(b: &[f64; 4], delta: [f64; 4]) -> [f64; 4] {
    let c = to_corners(b);
    let moved: Vec<f64> = (0..4)
        .map(|k| (c[k] + delta[k]).clamp(0.0, 1.0) - c[k])
        .collect();
    [
        b[0] + (moved[0] + moved[2]) / 2.0,
        b[1] + (moved[1] + moved[3]) / 2.0,
        b[2] + (moved[2] - moved[0]),
        b[3] + (moved[3] - moved[1]),
    ]
    .map(|v| v.clamp(0.0, 1.0))
}

/// Corner offsets in units of the half extent: magnitude in `[0, 1)` for a
/// positive copy and `(1, 2]` for a negative one, random sign.
fn corner_offsets(rng: &mut impl Rng, negative: bool) -> [f64; 4] {
    let mut out = [0.0; 4];
    for v in &mut out {
        let magnitude = if negative {
            2.0 - rng.gen::<f64>()
        } else {
            rng.gen::<f64>()
        };
        *v = if rng.gen::<bool>() {
            magnitude
        } else {
            -magnitude
        };
    }
    out
}

/// Builds the denoising queries for `gt` (one entry per image).
///
/// With `G` the largest per-image object count, `groups = max(1, num_dn / G)`
/// and `d = 2 · groups · G`. Group `g` occupies slots `[2gG, 2(g+1)G)`:
/// positives for objects `0..G`, then negatives. Images with fewer than
/// `G` objects leave padding slots (padding label, zero box).
///
/// A positive copy moves each corner by up to `box_noise / 2` of the box
/// width (x) or height (y); a negative copy moves it by more than that and
/// at most `box_noise`. Each copy's label is replaced by a uniformly random
/// class with probability `label_noise`. The result depends only on `gt`,
/// the configuration and `seed`.
pub fn build_dn_queries<T: Scalar>(
    gt: &[GroundTruth],
    cfg: &DenoisingConfig,
    class_embed: &LabelEmbedding<T>,
    num_queries: usize,
    seed: u64,
) -> Result<DenoisingPlan<T>> {
    let num_classes = class_embed.num_classes();
    let dim = class_embed.dim();
    for g in gt {
        g.validate(num_classes)?;
    }
    let batch = gt.len();
    let max_gt = gt.iter().map(GroundTruth::len).max().unwrap_or(0);
    if max_gt == 0 || cfg.num_denoising == 0 {
        return Ok(DenoisingPlan {
            embeddings: Tensor::zeros(vec![batch, 0, dim]),
            boxes: Tensor::zeros(vec![batch, 0, 4]),
            labels: Vec::new(),
            mask: build_attention_mask(0, 0, num_queries)?,
            groups: 0,
            d: 0,
            max_gt,
        });
    }
    let groups = (cfg.num_denoising / max_gt).max(1);
    let d = 2 * groups * max_gt;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![num_classes; batch * d];
    let mut boxes = vec![0.0f64; batch * d * 4];

    for (bi, image) in gt.iter().enumerate() {
        for g in 0..groups {
            for (i, (bbox, &label)) in image.boxes.iter().zip(&image.labels).enumerate() {
                for negative in [false, true] {
                    let slot = bi * d + 2 * g * max_gt + if negative { max_gt } else { 0 } + i;
                    labels[slot] = if rng.gen::<f64>() < cfg.label_noise {
                        rng.gen_range(0..num_classes)
                    } else {
                        label
                    };
                    let half = [bbox[2] / 2.0, bbox[3] / 2.0, bbox[2] / 2.0, bbox[3] / 2.0];
                    let unit = corner_offsets(&mut rng, negative);
                    let delta: [f64; 4] =
                        std::array::from_fn(|k| unit[k] * half[k] * cfg.box_noise);
                    boxes[slot * 4..slot * 4 + 4].copy_from_slice(&jitter_box(bbox, delta));
                }
            }
        }
    }

    let table = class_embed.weight.data();
    let embeddings = Tensor::from_fn(vec![batch, d, dim], |i| {
        table[labels[i / dim] * dim + i % dim]
    });
    Ok(DenoisingPlan {
        embeddings,
        boxes: Tensor::from_fn(vec![batch, d, 4], |i| T::lit(boxes[i])),
        labels,
        mask: build_attention_mask(d, groups, num_queries)?,
        groups,
        d,
        max_gt,
    })
}

/// A deterministic synthetic batch with `objects` boxes per image, for
/// shape tracing and tests.
pub fn synthetic_ground_truth(
    batch: usize,
    objects: usize,
    num_classes: usize,
) -> Vec<GroundTruth> {
    (0..batch)
        .map(|b| {
            let mut gt = GroundTruth::default();
            for i in 0..objects {
                let t = (i + 1) as f64 / (objects + 1) as f64;
                gt.push(
                    (b * objects + i) % num_classes.max(1),
                    [t, 1.0 - t, 0.1 + 0.05 * (i % 3) as f64, 0.15],
                );
            }
            gt
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::RandomInit;
    use rand::SeedableRng;

    fn embed() -> LabelEmbedding<f64> {
        let cfg = ModelConfig::default();
        LabelEmbedding::load(&mut RandomInit::new(31), &cfg).unwrap()
    }

    fn dn_cfg(label_noise: f64, box_noise: f64) -> DenoisingConfig {
        DenoisingConfig {
            num_denoising: 100,
            label_noise,
            box_noise,
        }
    }

    #[test]
    fn no_ground_truth_gives_empty_plan() {
        let plan = build_dn_queries(
            &vec![GroundTruth::default(); 2],
            &dn_cfg(0.5, 1.0),
            &embed(),
            300,
            0,
        )
        .unwrap();
        assert_eq!(plan.d, 0);
        assert_eq!(plan.mask.shape(), [300, 300]);
        assert_eq!(plan.mask.blocked_count(), 0);
        assert_eq!(plan.embeddings.shape(), &[2, 0, 256]);
    }

    #[test]
    fn group_arithmetic() {
        let gt = synthetic_ground_truth(2, 5, 80);
        let plan = build_dn_queries(&gt, &dn_cfg(0.5, 1.0), &embed(), 300, 1).unwrap();
        let groups = 100 / 5;
        assert_eq!(plan.groups, groups);
        assert_eq!(plan.d, 2 * groups * 5);
        assert_eq!(plan.mask.shape(), [300 + 2 * groups * 5; 2]);
        assert_eq!(plan.embeddings.shape(), &[2, plan.d, 256]);
        assert_eq!(plan.boxes.shape(), &[2, plan.d, 4]);

        // more objects than denoising slots still yields one group
        let gt = synthetic_ground_truth(1, 150, 80);
        let plan = build_dn_queries(&gt, &dn_cfg(0.5, 1.0), &embed(), 300, 1).unwrap();
        assert_eq!((plan.groups, plan.d), (1, 300));
    }

    #[test]
    fn zero_noise_positives_equal_ground_truth() {
        let mut gt = synthetic_ground_truth(2, 3, 80);
        gt[1].labels.pop();
        gt[1].boxes.pop();
        let e = embed();
        let plan = build_dn_queries(&gt, &dn_cfg(0.0, 0.0), &e, 300, 2).unwrap();
        for (bi, image) in gt.iter().enumerate() {
            for g in 0..plan.groups {
                for i in 0..3 {
                    for neg in [0, 3] {
                        let slot = 6 * g + neg + i;
                        let got: Vec<f64> = (0..4).map(|k| plan.boxes.at(&[bi, slot, k])).collect();
                        let label = plan.labels[bi * plan.d + slot];
                        if i < image.len() {
                            assert_eq!(got, image.boxes[i]);
                            assert_eq!(label, image.labels[i]);
                        } else {
                            assert_eq!(got, vec![0.0; 4]);
                            assert_eq!(label, 80);
                        }
                        for c in [0, 17, 255] {
                            assert_eq!(
                                plan.embeddings.at(&[bi, slot, c]),
                                e.weight.at(&[label, c])
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn offsets_separate_positives_from_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut pos_max, mut neg_min, mut neg_max) = (0.0f64, f64::MAX, 0.0f64);
        let mut signs = [0usize; 2];
        for i in 0..2000 {
            let negative = i % 2 == 1;
            for v in corner_offsets(&mut rng, negative) {
                signs[(v > 0.0) as usize] += 1;
                if negative {
                    neg_min = neg_min.min(v.abs());
                    neg_max = neg_max.max(v.abs());
                } else {
                    pos_max = pos_max.max(v.abs());
                }
            }
        }
        assert!(pos_max < 1.0);
        assert!(neg_min > 1.0 && neg_max <= 2.0);
        assert!(signs[0] > 3000 && signs[1] > 3000);
    }

    #[test]
    fn jitter_moves_corners_and_stays_normalized() {
        let b = [0.5, 0.5, 0.2, 0.2];
        let j = jitter_box(&b, [0.05, -0.02, 0.01, 0.03]);
        let (c0, c1) = (to_corners(&b), to_corners(&j));
        let want = [0.05, -0.02, 0.01, 0.03];
        for k in 0..4 {
            assert!((c1[k] - c0[k] - want[k]).abs() < 1e-12);
        }
        // corners pushed past the image border and past each other
        let j = jitter_box(&[0.05, 0.5, 0.1, 0.2], [-0.2, 0.15, -0.2, -0.15]);
        assert!(j.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(j[3], 0.0);
        assert_eq!(jitter_box(&b, [0.0; 4]), b);
    }

    #[test]
    fn noisy_boxes_are_normalized() {
        let gt = synthetic_ground_truth(2, 7, 80);
        let plan = build_dn_queries(&gt, &dn_cfg(0.5, 1.0), &embed(), 300, 5).unwrap();
        assert!(plan.boxes.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn label_noise_flips_about_the_requested_fraction() {
        let gt = synthetic_ground_truth(4, 25, 80);
        let plan = build_dn_queries(&gt, &dn_cfg(0.5, 1.0), &embed(), 300, 4).unwrap();
        let mut flipped = 0usize;
        let mut total = 0usize;
        for (bi, image) in gt.iter().enumerate() {
            for slot in 0..plan.d {
                let i = slot % 25;
                total += 1;
                if plan.labels[bi * plan.d + slot] != image.labels[i] {
                    flipped += 1;
                }
            }
        }
        // a flip may land on the original class (1/80 of flips)
        let rate = flipped as f64 / total as f64;
        assert!((rate - 0.5 * 79.0 / 80.0).abs() < 0.05, "rate {rate}");
    }

    #[test]
    fn plans_are_deterministic_per_seed() {
        let gt = synthetic_ground_truth(2, 4, 80);
        let e = embed();
        let a = build_dn_queries(&gt, &dn_cfg(0.5, 1.0), &e, 300, 9).unwrap();
        let b = build_dn_queries(&gt, &dn_cfg(0.5, 1.0), &e, 300, 9).unwrap();
        let c = build_dn_queries(&gt, &dn_cfg(0.5, 1.0), &e, 300, 10).unwrap();
        assert_eq!(a.boxes, b.boxes);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.embeddings, b.embeddings);
        assert_ne!(a.boxes, c.boxes);
    }

    #[test]
    fn mask_two_groups_of_two() {
        let m = build_attention_mask(4, 2, 300).unwrap();
        assert_eq!(m.shape(), [304, 304]);
        // enumerate: row r may see column c unless c is a denoising slot
        // outside r's group, or r is matching and c is denoising
        for r in 0..304 {
            for c in 0..304 {
                let want = match (r < 4, c < 4) {
                    (true, true) => r / 2 != c / 2,
                    (false, true) => true,
                    _ => false,
                };
                assert_eq!(m.is_blocked(r, c), want, "({r}, {c})");
            }
        }
        assert!(m.is_blocked(0, 2) && m.is_blocked(0, 3));
        assert!(!m.is_blocked(0, 1));
        assert_ne!(m.is_blocked(300, 0), m.is_blocked(0, 300));
    }

    #[test]
    fn mask_without_denoising_is_open_and_bad_groups_fail() {
        assert_eq!(build_attention_mask(0, 0, 300).unwrap().blocked_count(), 0);
        assert!(build_attention_mask(6, 4, 300)
            .unwrap_err()
            .is_contract_violation());
        assert!(build_attention_mask(6, 0, 300).is_err());
    }

    #[test]
    fn additive_mask_uses_negative_infinity() {
        let m = build_attention_mask(2, 1, 1).unwrap();
        let t = m.to_additive::<f32>().unwrap();
        assert_eq!(
            t.data(),
            &[
                0.0,
                0.0,
                0.0,
                0.0,
                0.0,
                0.0,
                f32::NEG_INFINITY,
                f32::NEG_INFINITY,
                0.0
            ]
        );
    }

    #[test]
    fn annotations_parse_by_image() {
        let json = r#"[
            {"image_id": 1, "class_id": 7, "bbox": [0.5, 0.5, 0.2, 0.2]},
            {"image_id": 0, "class_id": 2, "bbox": [0.1, 0.2, 0.05, 0.1]},
            {"image_id": 1, "class_id": 3, "bbox": [0.3, 0.6, 0.1, 0.1]}
        ]"#;
        let gt = parse_annotations(json, 2, 80).unwrap();
        assert_eq!(gt[0].labels, vec![2]);
        assert_eq!(gt[1].labels, vec![7, 3]);
        assert_eq!(gt[1].boxes[1], [0.3, 0.6, 0.1, 0.1]);
        assert!(matches!(
            parse_annotations(json, 1, 80),
            Err(Error::Annotation(_))
        ));
        assert!(parse_annotations(
            r#"[{"image_id":0,"class_id":80,"bbox":[0.5,0.5,0.1,0.1]}]"#,
            1,
            80
        )
        .is_err());
        assert!(parse_annotations("{", 1, 80).is_err());
    }
}
