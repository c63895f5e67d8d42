//! Hybrid encoder: self-attention on the coarsest map, then top-down and
//! bottom-up CSP fusion across the three levels.

use crate::backbone::FeaturePyramid;
use crate::config::ModelConfig;
use crate::error::{ensure, Result};
use crate::kernels::{
    concat_channels, conv2d, gelu, linear as linear_op, mha_self_attention, silu,
    upsample_nearest_2x, AttentionWeights, ConvSpec, Linear,
};
use crate::trace::ShapeLog;
use crate::weights::{conv_norm, linear, NormParams, ParamSource};
use crate::{Scalar, Tensor};

/// 2-D sine-cosine position table, one row per token of an `h × w` map in
/// row-major order.
///
/// With `q = dim / 4` and `ω_i = temperature^(-i / q)`, the row of token
/// `(y, x)` is `[sin(y·ω), cos(y·ω), sin(x·ω), cos(x·ω)]`.
pub fn sincos_pos_embed_2d<T: Scalar>(
    h: usize,
    w: usize,
    dim: usize,
    temperature: f64,
) -> Result<Tensor<T>> {
    ensure!(
        dim % 4 == 0 && dim > 0,
        "sincos_pos_embed_2d",
        "dim {dim} not divisible by 4"
    );
    let q = dim / 4;
    let omega: Vec<f64> = (0..q)
        .map(|i| temperature.powf(-(i as f64) / q as f64))
        .collect();
    Ok(Tensor::from_fn(vec![h * w, dim], |flat| {
        let (t, c) = (flat / dim, flat % dim);
        let (y, x) = ((t / w) as f64, (t % w) as f64);
        let (part, i) = (c / q, c % q);
        let v = match part {
            0 => (y * omega[i]).sin(),
            1 => (y * omega[i]).cos(),
            2 => (x * omega[i]).sin(),
            _ => (x * omega[i]).cos(),
        };
        T::lit(v)
    }))
}

/// Post-norm transformer layer: attention and a GELU feed-forward, each
/// with a residual connection followed by layer norm.
#[derive(Debug, Clone)]
pub struct EncoderLayer<T = f32> {
    pub self_attn: AttentionWeights<T>,
    pub norm1: NormParams<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub norm2: NormParams<T>,
}

pub(crate) fn load_attention<T: Scalar>(
    src: &mut impl ParamSource<T>,
    prefix: &str,
    dim: usize,
    heads: usize,
) -> Result<AttentionWeights<T>> {
    Ok(AttentionWeights {
        heads,
        q_proj: linear(src, &format!("{prefix}.q_proj"), dim, dim)?,
        k_proj: linear(src, &format!("{prefix}.k_proj"), dim, dim)?,
        v_proj: linear(src, &format!("{prefix}.v_proj"), dim, dim)?,
        out_proj: linear(src, &format!("{prefix}.out_proj"), dim, dim)?,
    })
}

impl<T: Scalar> EncoderLayer<T> {
    pub fn load(src: &mut impl ParamSource<T>, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let (d, f) = (cfg.encoder.embed_dim, cfg.encoder.ffn_dim);
        Ok(Self {
            self_attn: load_attention(src, &format!("{prefix}.self_attn"), d, cfg.encoder.heads)?,
            norm1: NormParams::load(src, &format!("{prefix}.norm1"), d)?,
            fc1: linear(src, &format!("{prefix}.fc1"), d, f)?,
            fc2: linear(src, &format!("{prefix}.fc2"), f, d)?,
            norm2: NormParams::load(src, &format!("{prefix}.norm2"), d)?,
        })
    }

    /// `tokens` `(B, N, D)`, `pos` `(1, N, D)` added to queries and keys.
    pub fn forward(&self, tokens: &Tensor<T>, pos: &Tensor<T>) -> Result<Tensor<T>> {
        let attn = mha_self_attention(tokens, Some(pos), &self.self_attn, None)?;
        let x = self.norm1.forward(&tokens.add(&attn)?)?;
        let hidden = gelu(&self.fc1.forward(&x)?);
        let ffn = linear_op(&hidden, &self.fc2.weight, self.fc2.bias.as_ref())?;
        self.norm2.forward(&x.add(&ffn)?)
    }
}

/// Flattens `(B, C, H, W)` to tokens `(B, H·W, C)`.
pub fn flatten_map<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape(vec![b, c, h * w])?.permute(&[0, 2, 1])
}

/// Inverse of [`flatten_map`].
pub fn unflatten_tokens<T: Scalar>(tokens: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (b, n, c) = tokens.dims3()?;
    ensure!(
        n == h * w,
        "unflatten_tokens",
        "{n} tokens cannot form a {h}x{w} map"
    );
    tokens.permute(&[0, 2, 1])?.into_reshape(vec![b, c, h, w])
}

/// Attention-based intra-scale encoder applied to the coarsest map.
#[derive(Debug, Clone)]
pub struct Aifi<T = f32> {
    pub layers: Vec<EncoderLayer<T>>,
    pub temperature: f64,
}

impl<T: Scalar> Aifi<T> {
    pub fn load(src: &mut impl ParamSource<T>, cfg: &ModelConfig) -> Result<Self> {
        let layers = (0..cfg.encoder.num_encoder_layers)
            .map(|i| EncoderLayer::load(src, &format!("encoder.layers.{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            temperature: cfg.encoder.pos_embed_temperature,
        })
    }

    /// `(B, D, H, W)` → `(B, D, H, W)`.
    pub fn forward(&self, s5: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, d, h, w) = s5.dims4()?;
        let pos =
            sincos_pos_embed_2d::<T>(h, w, d, self.temperature)?.into_reshape(vec![1, h * w, d])?;
        let mut tokens = flatten_map(s5)?;
        for layer in &self.layers {
            tokens = layer.forward(&tokens, &pos)?;
        }
        unflatten_tokens(&tokens, h, w)
    }
}

/// Convolution + folded batch norm + SiLU.
pub fn conv_norm_silu<T: Scalar>(x: &Tensor<T>, conv: &ConvSpec<T>) -> Result<Tensor<T>> {
    Ok(silu(&conv2d(x, conv)?))
}

/// `silu(conv3x3(x) + conv1x1(x))`, both convolutions batch-norm folded.
#[derive(Debug, Clone)]
pub struct RepVggBlock<T = f32> {
    pub conv3x3: ConvSpec<T>,
    pub conv1x1: ConvSpec<T>,
}

impl<T: Scalar> RepVggBlock<T> {
    pub fn load(src: &mut impl ParamSource<T>, prefix: &str, ch: usize) -> Result<Self> {
        Ok(Self {
            conv3x3: conv_norm(src, &format!("{prefix}.conv3x3"), ch, ch, 3, 1)?,
            conv1x1: conv_norm(src, &format!("{prefix}.conv1x1"), ch, ch, 1, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let a = conv2d(x, &self.conv3x3)?;
        let b = conv2d(x, &self.conv1x1)?;
        Ok(silu(&a.add(&b)?))
    }
}

/// Cross-stage-partial fusion: two 1×1 projections of the input, a RepVGG
/// stack on the first, element-wise sum, optional output projection.
#[derive(Debug, Clone)]
pub struct CspRepLayer<T = f32> {
    pub conv1: ConvSpec<T>,
    pub conv2: ConvSpec<T>,
    pub blocks: Vec<RepVggBlock<T>>,
    /// Present only when the hidden width differs from the output width.
    pub conv3: Option<ConvSpec<T>>,
}

impl<T: Scalar> CspRepLayer<T> {
    pub fn load(src: &mut impl ParamSource<T>, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let out = cfg.encoder.embed_dim;
        let inp = 2 * out;
        let hidden = cfg.encoder.csp_hidden();
        let blocks = (0..cfg.encoder.csp_blocks)
            .map(|j| RepVggBlock::load(src, &format!("{prefix}.blocks.{j}"), hidden))
            .collect::<Result<_>>()?;
        Ok(Self {
            conv1: conv_norm(src, &format!("{prefix}.conv1"), inp, hidden, 1, 1)?,
            conv2: conv_norm(src, &format!("{prefix}.conv2"), inp, hidden, 1, 1)?,
            blocks,
            conv3: if hidden != out {
                Some(conv_norm(
                    src,
                    &format!("{prefix}.conv3"),
                    hidden,
                    out,
                    1,
                    1,
                )?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, _, _) = x.dims4()?;
        ensure!(
            c == self.conv1.in_channels,
            "csp_rep_layer",
            "input {:?} vs expected {} channels",
            x.shape(),
            self.conv1.in_channels
        );
        let mut a = conv_norm_silu(x, &self.conv1)?;
        for block in &self.blocks {
            a = block.forward(&a)?;
        }
        let b = conv_norm_silu(x, &self.conv2)?;
        let merged = a.add(&b)?;
        match &self.conv3 {
            Some(conv) => conv_norm_silu(&merged, conv),
            None => Ok(merged),
        }
    }
}

/// Stride-2 3×3 convolution (+ norm + SiLU) halving both spatial extents.
pub fn downsample_conv<T: Scalar>(x: &Tensor<T>, conv: &ConvSpec<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4()?;
    ensure!(
        h % 2 == 0 && w % 2 == 0,
        "downsample_conv",
        "input {:?} has odd spatial extent",
        x.shape()
    );
    conv_norm_silu(x, conv)
}

#[derive(Debug, Clone)]
pub struct HybridEncoder<T = f32> {
    pub aifi: Aifi<T>,
    pub lateral: Vec<ConvSpec<T>>,
    pub fpn: Vec<CspRepLayer<T>>,
    pub downsample: Vec<ConvSpec<T>>,
    pub pan: Vec<CspRepLayer<T>>,
}

/// Fused pyramid plus the attention output on the coarsest level.
#[derive(Debug, Clone)]
pub struct EncoderOutputs<T = f32> {
    pub aifi: Tensor<T>,
    pub fused: FeaturePyramid<T>,
}

impl<T: Scalar> HybridEncoder<T> {
    pub fn load(src: &mut impl ParamSource<T>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.encoder.embed_dim;
        let aifi = Aifi::load(src, cfg)?;
        let mut lateral = Vec::new();
        let mut fpn = Vec::new();
        for i in 0..2 {
            lateral.push(conv_norm(src, &format!("encoder.lateral.{i}"), d, d, 1, 1)?);
            fpn.push(CspRepLayer::load(src, &format!("encoder.fpn.{i}"), cfg)?);
        }
        let mut downsample = Vec::new();
        let mut pan = Vec::new();
        for i in 0..2 {
            downsample.push(conv_norm(
                src,
                &format!("encoder.downsample.{i}"),
                d,
                d,
                3,
                2,
            )?);
            pan.push(CspRepLayer::load(src, &format!("encoder.pan.{i}"), cfg)?);
        }
        Ok(Self {
            aifi,
            lateral,
            fpn,
            downsample,
            pan,
        })
    }

    pub fn forward(&self, p: &FeaturePyramid<T>, log: &mut ShapeLog) -> Result<FeaturePyramid<T>> {
        Ok(self.forward_detailed(p, log)?.fused)
    }

    pub fn forward_detailed(
        &self,
        p: &FeaturePyramid<T>,
        log: &mut ShapeLog,
    ) -> Result<EncoderOutputs<T>> {
        p.validate()?;
        let aifi = self.aifi.forward(&p.s5)?;
        log.record("encoder.aifi", aifi.shape());

        // top-down: 20 → 40 → 80
        let lat5 = conv_norm_silu(&aifi, &self.lateral[0])?;
        let cat4 = concat_channels(&upsample_nearest_2x(&lat5)?, &p.s4)?;
        log.record("encoder.fpn.concat4", cat4.shape());
        let f4 = self.fpn[0].forward(&cat4)?;
        log.record("encoder.fpn.csp4", f4.shape());
        let lat4 = conv_norm_silu(&f4, &self.lateral[1])?;
        let cat3 = concat_channels(&upsample_nearest_2x(&lat4)?, &p.s3)?;
        log.record("encoder.fpn.concat3", cat3.shape());
        let f3 = self.fpn[1].forward(&cat3)?;
        log.record("encoder.fpn.csp3", f3.shape());

        // bottom-up: 80 → 40 → 20
        let cat4 = concat_channels(&downsample_conv(&f3, &self.downsample[0])?, &lat4)?;
        log.record("encoder.pan.concat4", cat4.shape());
        let p4 = self.pan[0].forward(&cat4)?;
        log.record("encoder.pan.csp4", p4.shape());
        let cat5 = concat_channels(&downsample_conv(&p4, &self.downsample[1])?, &lat5)?;
        log.record("encoder.pan.concat5", cat5.shape());
        let p5 = self.pan[1].forward(&cat5)?;
        log.record("encoder.pan.csp5", p5.shape());

        let fused = FeaturePyramid::new(f3, p4, p5)?;
        for (name, t) in ["encoder.out3", "encoder.out4", "encoder.out5"]
            .iter()
            .zip(fused.levels())
        {
            log.record(*name, t.shape());
        }
        Ok(EncoderOutputs { aifi, fused })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::layer_norm_last;
    use crate::reference;
    use crate::weights::RandomInit;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_linear(l: &Linear<f64>) -> Linear<f64> {
        Linear::new(
            Tensor::zeros(l.weight.shape().to_vec()),
            Some(Tensor::zeros(vec![l.out_features()])),
        )
        .unwrap()
    }

    #[test]
    fn pos_embed_shape_and_range() {
        let pe = sincos_pos_embed_2d::<f32>(20, 20, 256, 10000.0).unwrap();
        assert_eq!(pe.shape(), &[400, 256]);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn pos_embed_same_column_differs_only_in_row_half() {
        let pe = sincos_pos_embed_2d::<f64>(6, 5, 16, 10000.0).unwrap();
        // tokens (y=1, x=3) and (y=4, x=3)
        let (a, b) = (5 + 3, 4 * 5 + 3);
        for c in 0..16 {
            let same = pe.at(&[a, c]) == pe.at(&[b, c]);
            assert_eq!(same, c >= 8, "channel {c}");
        }
        // direct evaluation of one entry: sin(x · 10000^(-1/4)) at channel 8 + 1
        let want = (3.0f64 * 10000f64.powf(-0.25)).sin();
        assert!((pe.at(&[a, 9]) - want).abs() < 1e-15);
    }

    #[test]
    fn pos_embed_rejects_bad_dim() {
        assert!(sincos_pos_embed_2d::<f32>(2, 2, 6, 10000.0).is_err());
    }

    #[test]
    fn aifi_zeroed_branches_is_identity_up_to_norm() {
        let cfg = ModelConfig::tiny();
        let mut aifi = Aifi::<f64>::load(&mut RandomInit::new(1), &cfg).unwrap();
        let layer = &mut aifi.layers[0];
        layer.self_attn.out_proj = zero_linear(&layer.self_attn.out_proj);
        layer.fc2 = zero_linear(&layer.fc2);
        for n in [&mut layer.norm1, &mut layer.norm2] {
            n.gamma = Tensor::full(vec![32], 1.0);
            n.beta = Tensor::zeros(vec![32]);
        }
        // inputs already normalized per token so that the identity norms are exact
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw = Tensor::<f64>::randn(vec![1, 4, 32], 1.0, &mut rng);
        let tokens =
            layer_norm_last(&raw, &Tensor::full(vec![32], 1.0), &Tensor::zeros(vec![32])).unwrap();
        let x = unflatten_tokens(&tokens, 2, 2).unwrap();
        let y = aifi.forward(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.max_abs_diff(&x) < 1e-4);
    }

    #[test]
    fn aifi_matches_unfused_oracle() {
        let cfg = ModelConfig::tiny();
        let aifi = Aifi::<f64>::load(&mut RandomInit::new(3), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::uniform(vec![2, 32, 2, 3], -1.0, 1.0, &mut rng);
        let got = aifi.forward(&x).unwrap();

        let layer = &aifi.layers[0];
        let tokens = Tensor::from_fn(vec![2, 6, 32], |i| {
            let (b, t, c) = (i / 192, (i / 32) % 6, i % 32);
            x.at(&[b, c, t / 3, t % 3])
        });
        let pos = sincos_pos_embed_2d::<f64>(2, 3, 32, 10000.0)
            .unwrap()
            .reshape(vec![1, 6, 32])
            .unwrap();
        let attn = reference::mha_self_attention(&tokens, Some(&pos), &layer.self_attn, None);
        let h = layer.norm1.forward(&tokens.add(&attn).unwrap()).unwrap();
        let f = reference::linear(&h, &layer.fc1.weight, layer.fc1.bias.as_ref())
            .map(|v| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)));
        let f = reference::linear(&f, &layer.fc2.weight, layer.fc2.bias.as_ref());
        let out = layer.norm2.forward(&h.add(&f).unwrap()).unwrap();
        let want = Tensor::from_fn(vec![2, 32, 2, 3], |i| {
            let (b, c, y, xx) = (i / 192, (i / 6) % 32, (i / 3) % 2, i % 3);
            out.at(&[b, y * 3 + xx, c])
        });
        assert!(got.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn repvgg_matches_sum_of_branches() {
        let mut init = RandomInit::new(5);
        let block = RepVggBlock::<f64>::load(&mut init, "r", 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::uniform(vec![1, 6, 5, 5], -1.0, 1.0, &mut rng);
        let a = reference::conv2d(&x, &block.conv3x3);
        let b = reference::conv2d(&x, &block.conv1x1);
        let want = silu(&a.add(&b).unwrap());
        assert!(block.forward(&x).unwrap().max_abs_diff(&want) < 1e-10);

        let mut zeroed = block.clone();
        zeroed.conv1x1.weight = Tensor::zeros(vec![6, 6, 1, 1]);
        zeroed.conv1x1.bias = Some(Tensor::zeros(vec![6]));
        assert_eq!(
            zeroed.forward(&x).unwrap(),
            silu(&conv2d(&x, &block.conv3x3).unwrap())
        );
    }

    #[test]
    fn repvgg_preserves_shape_at_fusion_width() {
        let block = RepVggBlock::<f32>::load(&mut RandomInit::new(7), "r", 256).unwrap();
        let x = Tensor::<f32>::zeros(vec![1, 256, 40, 40]);
        assert_eq!(block.forward(&x).unwrap().shape(), &[1, 256, 40, 40]);
    }

    #[test]
    fn csp_with_zeroed_stack_merges_bare_projections() {
        let cfg = ModelConfig::tiny();
        let mut csp = CspRepLayer::<f64>::load(&mut RandomInit::new(8), "c", &cfg).unwrap();
        for b in &mut csp.blocks {
            for conv in [&mut b.conv3x3, &mut b.conv1x1] {
                conv.weight = Tensor::zeros(conv.weight.shape().to_vec());
                conv.bias = Some(Tensor::zeros(vec![conv.out_channels]));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::uniform(vec![1, 64, 4, 4], -1.0, 1.0, &mut rng);
        // silu(0) = 0, so the stack maps anything to zero
        let want = conv_norm_silu(&x, &csp.conv2).unwrap();
        assert_eq!(csp.forward(&x).unwrap(), want);
    }

    #[test]
    fn csp_with_expansion_projects_out() {
        let mut cfg = ModelConfig::tiny();
        cfg.encoder.csp_expansion = 0.5;
        let csp = CspRepLayer::<f32>::load(&mut RandomInit::new(10), "c", &cfg).unwrap();
        assert!(csp.conv3.is_some());
        let y = csp.forward(&Tensor::zeros(vec![1, 64, 4, 4])).unwrap();
        assert_eq!(y.shape(), &[1, 32, 4, 4]);
    }

    #[test]
    fn csp_reduces_fusion_channels() {
        let cfg = ModelConfig::default();
        let csp = CspRepLayer::<f32>::load(&mut RandomInit::new(11), "c", &cfg).unwrap();
        let y = csp.forward(&Tensor::zeros(vec![1, 512, 40, 40])).unwrap();
        assert_eq!(y.shape(), &[1, 256, 40, 40]);
        let err = csp
            .forward(&Tensor::zeros(vec![1, 256, 40, 40]))
            .unwrap_err();
        assert!(err.is_contract_violation());
    }

    #[test]
    fn downsample_halves_and_rejects_odd() {
        let conv = conv_norm::<f32>(&mut RandomInit::new(12), "d", 256, 256, 3, 2).unwrap();
        let y = downsample_conv(&Tensor::zeros(vec![1, 256, 80, 80]), &conv).unwrap();
        assert_eq!(y.shape(), &[1, 256, 40, 40]);
        let y = downsample_conv(&y, &conv).unwrap();
        assert_eq!(y.shape(), &[1, 256, 20, 20]);
        assert!(downsample_conv(&Tensor::zeros(vec![1, 256, 5, 4]), &conv).is_err());
    }

    #[test]
    fn downsample_matches_reference_conv() {
        let conv = conv_norm::<f64>(&mut RandomInit::new(13), "d", 4, 4, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::<f64>::uniform(vec![1, 4, 6, 6], -1.0, 1.0, &mut rng);
        let want = silu(&reference::conv2d(&x, &conv));
        assert!(downsample_conv(&x, &conv).unwrap().max_abs_diff(&want) < 1e-12);
    }

    fn tiny_pyramid(rng: &mut ChaCha8Rng, b: usize) -> FeaturePyramid<f64> {
        FeaturePyramid::new(
            Tensor::uniform(vec![b, 32, 8, 8], -1.0, 1.0, rng),
            Tensor::uniform(vec![b, 32, 4, 4], -1.0, 1.0, rng),
            Tensor::uniform(vec![b, 32, 2, 2], -1.0, 1.0, rng),
        )
        .unwrap()
    }

    #[test]
    fn fused_pyramid_keeps_shapes_and_batch() {
        let cfg = ModelConfig::tiny();
        let enc = HybridEncoder::<f64>::load(&mut RandomInit::new(15), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let p = tiny_pyramid(&mut rng, 2);
        let mut log = ShapeLog::enabled();
        let out = enc.forward(&p, &mut log).unwrap();
        for (a, b) in out.levels().iter().zip(p.levels()) {
            assert_eq!(a.shape(), b.shape());
        }
        for (stage, shape) in log.entries() {
            if stage.contains("concat") {
                assert_eq!(shape[1], 64, "{stage}");
            } else if stage.contains("csp") {
                assert_eq!(shape[1], 32, "{stage}");
            }
        }
    }

    #[test]
    fn middle_level_depends_on_every_scale_and_aifi_only_on_coarsest() {
        let cfg = ModelConfig::tiny();
        let enc = HybridEncoder::<f64>::load(&mut RandomInit::new(17), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let base = tiny_pyramid(&mut rng, 1);
        let ref_out = enc
            .forward_detailed(&base, &mut ShapeLog::disabled())
            .unwrap();
        for level in 0..3 {
            let mut p = base.clone();
            let t = match level {
                0 => &mut p.s3,
                1 => &mut p.s4,
                _ => &mut p.s5,
            };
            *t = t.map(|v| v + 0.5);
            let out = enc.forward_detailed(&p, &mut ShapeLog::disabled()).unwrap();
            assert!(
                out.fused.s4.max_abs_diff(&ref_out.fused.s4) > 1e-6,
                "level {level}"
            );
            if level < 2 {
                assert_eq!(out.aifi, ref_out.aifi);
            }
        }
    }
}
