//! Model hyper-parameters and the structural arithmetic tying them together.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output channels of the three 3×3 stem convolutions.
    pub stem_channels: [usize; 3],
    /// Bottleneck blocks per stage.
    pub depths: [usize; 4],
    /// Inner (3×3) width per stage; stage output is `width · expansion`.
    pub widths: [usize; 4],
    pub expansion: usize,
}

impl BackboneConfig {
    pub fn resnet50_vd() -> Self {
        Self {
            stem_channels: [32, 32, 64],
            depths: [3, 4, 6, 3],
            widths: [64, 128, 256, 512],
            expansion: 4,
        }
    }

    pub fn stage_out_channels(&self, stage: usize) -> usize {
        self.widths[stage] * self.expansion
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub num_encoder_layers: usize,
    pub pos_embed_temperature: f64,
    /// RepVGG blocks per CSP layer.
    pub csp_blocks: usize,
    /// Hidden width of a CSP layer relative to its output width.
    pub csp_expansion: f64,
}

impl EncoderConfig {
    pub fn csp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.csp_expansion) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub blocks: usize,
    pub heads: usize,
    pub points_per_head_per_scale: usize,
    pub scales: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub class_count: usize,
}

impl DecoderConfig {
    /// Sampling slots per head across all scales.
    pub fn points_per_head(&self) -> usize {
        self.points_per_head_per_scale * self.scales
    }

    /// Sampling locations per query (one attention weight each).
    pub fn sampling_locations(&self) -> usize {
        self.heads * self.points_per_head()
    }

    /// Offset scalars per query, `(x, y)` per location.
    pub fn offset_scalars(&self) -> usize {
        2 * self.sampling_locations()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoisingConfig {
    pub num_denoising: usize,
    pub label_noise: f64,
    pub box_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub num_queries: usize,
    pub anchor_base_scale: f64,
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub denoising: DenoisingConfig,
}

/// Feature strides of the three pyramid levels, finest first.
pub const LEVEL_STRIDES: [usize; 3] = [8, 16, 32];

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 640,
            num_queries: 300,
            anchor_base_scale: 0.05,
            backbone: BackboneConfig::resnet50_vd(),
            encoder: EncoderConfig {
                embed_dim: 256,
                heads: 8,
                ffn_dim: 1024,
                num_encoder_layers: 1,
                pos_embed_temperature: 10000.0,
                csp_blocks: 3,
                csp_expansion: 1.0,
            },
            decoder: DecoderConfig {
                blocks: 6,
                heads: 8,
                points_per_head_per_scale: 4,
                scales: 3,
                embed_dim: 256,
                ffn_dim: 1024,
                class_count: 80,
            },
            denoising: DenoisingConfig {
                num_denoising: 100,
                label_noise: 0.5,
                box_noise: 1.0,
            },
        }
    }
}

impl ModelConfig {
    /// A narrow, low-resolution variant with the same topology, for tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 64,
            num_queries: 20,
            anchor_base_scale: 0.05,
            backbone: BackboneConfig {
                stem_channels: [8, 8, 16],
                depths: [1, 1, 2, 1],
                widths: [8, 16, 32, 64],
                expansion: 4,
            },
            encoder: EncoderConfig {
                embed_dim: 32,
                heads: 8,
                ffn_dim: 64,
                num_encoder_layers: 1,
                pos_embed_temperature: 10000.0,
                csp_blocks: 2,
                csp_expansion: 1.0,
            },
            decoder: DecoderConfig {
                blocks: 6,
                heads: 8,
                points_per_head_per_scale: 4,
                scales: 3,
                embed_dim: 32,
                ffn_dim: 64,
                class_count: 5,
            },
            denoising: DenoisingConfig {
                num_denoising: 10,
                label_noise: 0.5,
                box_noise: 1.0,
            },
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder.embed_dim
    }

    pub fn num_classes(&self) -> usize {
        self.decoder.class_count
    }

    /// `(H, W)` of each pyramid level for the configured input size.
    pub fn level_shapes(&self) -> Vec<(usize, usize)> {
        self.level_shapes_for(self.image_size, self.image_size)
    }

    pub fn level_shapes_for(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        LEVEL_STRIDES.iter().map(|s| (h / s, w / s)).collect()
    }

    /// Flattened location count across all levels.
    pub fn num_locations(&self) -> usize {
        self.level_shapes().iter().map(|(h, w)| h * w).sum()
    }

    /// Checks every relation between hyper-parameters the model relies on.
    pub fn validate(&self) -> Result<()> {
        let op = "config";
        let (enc, dec) = (&self.encoder, &self.decoder);
        ensure!(
            self.image_size > 0 && self.image_size % 32 == 0,
            op,
            "image size {} is not a positive multiple of 32",
            self.image_size
        );
        ensure!(
            enc.heads > 0 && enc.embed_dim % enc.heads == 0,
            op,
            "encoder embed dim {} not divisible by {} heads",
            enc.embed_dim,
            enc.heads
        );
        ensure!(
            enc.embed_dim % 4 == 0,
            op,
            "encoder embed dim {} not divisible by 4",
            enc.embed_dim
        );
        ensure!(
            dec.heads > 0 && dec.embed_dim % dec.heads == 0,
            op,
            "decoder embed dim {} not divisible by {} heads",
            dec.embed_dim,
            dec.heads
        );
        ensure!(
            dec.embed_dim == enc.embed_dim,
            op,
            "decoder width {} differs from encoder width {}",
            dec.embed_dim,
            enc.embed_dim
        );
        ensure!(
            dec.scales == LEVEL_STRIDES.len(),
            op,
            "decoder attends {} scales, pyramid has {}",
            dec.scales,
            LEVEL_STRIDES.len()
        );
        ensure!(
            dec.sampling_locations() == dec.heads * dec.points_per_head_per_scale * dec.scales
                && dec.offset_scalars() == 2 * dec.sampling_locations(),
            op,
            "sampling arithmetic inconsistent"
        );
        ensure!(
            self.num_queries <= self.num_locations(),
            op,
            "{} queries exceed {} locations",
            self.num_queries,
            self.num_locations()
        );
        ensure!(enc.csp_hidden() > 0, op, "CSP hidden width is zero");
        ensure!(
            dec.blocks > 0 && enc.num_encoder_layers > 0,
            op,
            "empty encoder or decoder stack"
        );
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_structural_arithmetic() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.level_shapes(), vec![(80, 80), (40, 40), (20, 20)]);
        assert_eq!(cfg.num_locations(), 80 * 80 + 40 * 40 + 20 * 20);
        assert_eq!(cfg.num_locations(), 8400);
        assert_eq!(cfg.decoder.sampling_locations(), 96);
        assert_eq!(cfg.decoder.offset_scalars(), 192);
        assert_eq!(cfg.decoder.head_dim(), 32);
        assert_eq!(cfg.decoder.points_per_head(), 12);
    }

    #[test]
    fn tiny_is_valid() {
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut cfg = ModelConfig::default();
        cfg.decoder.heads = 7;
        assert!(cfg.validate().unwrap_err().is_contract_violation());
    }

    #[test]
    fn rejects_non_multiple_of_32() {
        let cfg = ModelConfig {
            image_size: 600,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
