//! Numerical primitives every model stage is composed from.

mod activation;
mod attention;
mod conv;
mod linear;
mod sample;
mod topk;

pub use activation::{
    gelu, gelu_scalar, inverse_sigmoid, inverse_sigmoid_scalar, layer_norm, layer_norm_last, relu,
    sigmoid, sigmoid_scalar, silu, silu_scalar, softmax, INVERSE_SIGMOID_EPS, LAYER_NORM_EPS,
};
pub use attention::{additive_mask, mha_self_attention, AttentionWeights};
pub use conv::{avg_pool2d_ceil, conv2d, max_pool2d, ConvSpec};
pub use linear::{linear, Linear, Mlp};
pub use sample::{grid_sample_bilinear, resize_bilinear, unnormalize, upsample_nearest_2x};
pub use topk::{gather_rows, topk_scores, TopK};

use crate::error::{ensure, Result};
use crate::{Scalar, Tensor};

/// Channel-axis concatenation of two `(B, C, H, W)` maps, `a` first.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, _, ha, wa) = a.dims4()?;
    let (bb, _, hb, wb) = b.dims4()?;
    ensure!(
        (ba, ha, wa) == (bb, hb, wb),
        "concat_channels",
        "maps {:?} and {:?} differ in batch or spatial extent",
        a.shape(),
        b.shape()
    );
    Tensor::concat(&[a, b], 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_fusion_geometry() {
        let a = Tensor::<f32>::zeros(vec![1, 256, 40, 40]);
        assert_eq!(concat_channels(&a, &a).unwrap().shape(), &[1, 512, 40, 40]);
    }

    #[test]
    fn concat_preserves_channel_offsets() {
        let a = Tensor::<f32>::from_fn(vec![2, 3, 2, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn(vec![2, 2, 2, 2], |i| 1000.0 + i as f32);
        let c = concat_channels(&a, &b).unwrap();
        for bi in 0..2 {
            for ch in 0..5 {
                for y in 0..2 {
                    for x in 0..2 {
                        let want = if ch < 3 {
                            a.at(&[bi, ch, y, x])
                        } else {
                            b.at(&[bi, ch - 3, y, x])
                        };
                        assert_eq!(c.at(&[bi, ch, y, x]), want);
                    }
                }
            }
        }
    }

    #[test]
    fn concat_spatial_mismatch_rejected() {
        let a = Tensor::<f32>::zeros(vec![1, 2, 4, 4]);
        let b = Tensor::<f32>::zeros(vec![1, 2, 2, 2]);
        assert!(concat_channels(&a, &b).unwrap_err().is_contract_violation());
    }
}
