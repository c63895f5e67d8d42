//! Turning final-block predictions into scored pixel boxes.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::kernels::{sigmoid_scalar, topk_scores};
use crate::{Scalar, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.3;
pub const DEFAULT_MAX_DET: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    /// `x1, y1, x2, y2` in input-image pixels.
    pub bbox: [f64; 4],
}

/// Decodes one image's `(Q, C)` logits and `(Q, 4)` normalized boxes.
///
/// Every (query, class) pair is a candidate scored by `sigmoid(logit)`; the
/// `max_det` best are kept (ties go to the lower query, then lower class),
/// those scoring above `threshold` are returned best first. No suppression.
pub fn decode_detections<T: Scalar>(
    logits: &Tensor<T>,
    boxes: &Tensor<T>,
    image_size: (usize, usize),
    threshold: f64,
    max_det: usize,
) -> Result<Vec<Detection>> {
    let (q, c) = logits.dims2()?;
    ensure!(
        boxes.shape() == [q, 4],
        "decode_detections",
        "boxes {:?} for logits {:?}",
        boxes.shape(),
        logits.shape()
    );
    let k = max_det.min(q * c);
    let top = topk_scores(&logits.reshape(vec![1, q * c])?, k)?;
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    let mut out = Vec::new();
    for (&flat, &logit) in top.indices.iter().zip(top.values.data()) {
        let score = sigmoid_scalar(logit).to_f64().unwrap_or(0.0);
        if score.is_nan() || score <= threshold {
            continue;
        }
        let (qi, class_id) = (flat / c, flat % c);
        let b: Vec<f64> = (0..4)
            .map(|k| boxes.data()[qi * 4 + k].to_f64().unwrap_or(0.0))
            .collect();
        let bbox = [
            ((b[0] - b[2] / 2.0) * w).clamp(0.0, w),
            ((b[1] - b[3] / 2.0) * h).clamp(0.0, h),
            ((b[0] + b[2] / 2.0) * w).clamp(0.0, w),
            ((b[1] + b[3] / 2.0) * h).clamp(0.0, h),
        ];
        out.push(Detection {
            class_id,
            score,
            bbox,
        });
    }
    Ok(out)
}
