//! The assembled detector.

use std::collections::BTreeMap;

use crate::backbone::Backbone;
use crate::config::ModelConfig;
use crate::decoder::{Decoder, DecoderOutput};
use crate::denoising::{build_dn_queries, DenoisingPlan, GroundTruth, LabelEmbedding};
use crate::encoder::HybridEncoder;
use crate::error::{ensure, Error, Result};
use crate::query::{QuerySelection, QuerySet};
use crate::trace::ShapeLog;
use crate::weights::{
    checkpoint_manifest, fold_batchnorm, ParamSource, RandomInit, SpecRecorder, StoreSource,
    WeightStore,
};
use crate::{Scalar, Tensor};

/// Metadata keys holding per-channel input normalization, each a JSON array
/// of three numbers. Absent keys mean plain `[0, 1]` scaling.
pub const INPUT_MEAN_KEY: &str = "input_mean";
pub const INPUT_STD_KEY: &str = "input_std";

/// Metadata key holding a JSON [`ModelConfig`]; absent means the default
/// configuration.
pub const MODEL_CONFIG_KEY: &str = "model_config";

pub fn config_from_metadata(meta: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let Some(raw) = meta.get(MODEL_CONFIG_KEY) else {
        return Ok(ModelConfig::default());
    };
    let cfg: ModelConfig = serde_json::from_str(raw).map_err(|e| Error::Container {
        offset: 0,
        message: format!("metadata {MODEL_CONFIG_KEY}: {e}"),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// `(x − mean) / std` per RGB channel, applied after scaling to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputNormalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for InputNormalization {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl InputNormalization {
    pub fn from_metadata(meta: &BTreeMap<String, String>) -> Result<Self> {
        let read = |key: &str, default: [f64; 3]| -> Result<[f64; 3]> {
            match meta.get(key) {
                None => Ok(default),
                Some(v) => serde_json::from_str(v).map_err(|e| Error::Container {
                    offset: 0,
                    message: format!("metadata {key} = {v:?}: {e}"),
                }),
            }
        };
        let out = Self {
            mean: read(INPUT_MEAN_KEY, [0.0; 3])?,
            std: read(INPUT_STD_KEY, [1.0; 3])?,
        };
        ensure!(
            out.std.iter().all(|s| *s > 0.0),
            "input_normalization",
            "non-positive std {:?}",
            out.std
        );
        Ok(out)
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    /// Normalizes a `(B, 3, H, W)` batch.
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, h, w) = x.dims4()?;
        ensure!(
            c == 3,
            "input_normalization",
            "expected 3 channels, got {:?}",
            x.shape()
        );
        if self.is_identity() {
            return Ok(x.clone());
        }
        let plane = h * w;
        Ok(Tensor::from_fn(x.shape().to_vec(), |i| {
            let ch = (i / plane) % 3;
            (x.data()[i] - T::lit(self.mean[ch])) / T::lit(self.std[ch])
        }))
    }
}

#[derive(Debug, Clone)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub encoder: HybridEncoder<T>,
    pub query: QuerySelection<T>,
    pub label_embed: LabelEmbedding<T>,
    pub decoder: Decoder<T>,
    pub input_norm: InputNormalization,
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct ModelOutput<T = f32> {
    pub queries: QuerySet<T>,
    pub decoder: DecoderOutput<T>,
}

/// Store entries the model did not request.
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub unused: Vec<String>,
}

impl<T: Scalar> Model<T> {
    /// Requests every parameter from `src` in a fixed order and checks the
    /// structural arithmetic on the result.
    pub fn load(src: &mut impl ParamSource<T>, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let model = Self {
            config: config.clone(),
            backbone: Backbone::load(src, config)?,
            encoder: HybridEncoder::load(src, config)?,
            query: QuerySelection::load(src, config)?,
            label_embed: LabelEmbedding::load(src, config)?,
            decoder: Decoder::load(src, config)?,
            input_norm: InputNormalization::default(),
        };
        model.check_structure()?;
        Ok(model)
    }

    /// Folds batch norm, loads, and reports leftover entries.
    pub fn from_store(store: WeightStore, config: &ModelConfig) -> Result<(Self, LoadReport)> {
        store.validate_finite()?;
        let input_norm = InputNormalization::from_metadata(store.metadata())?;
        let folded = fold_batchnorm(store)?;
        let mut src = StoreSource::new(&folded);
        let mut model = Self::load(&mut src, config)?;
        model.input_norm = input_norm;
        Ok((
            model,
            LoadReport {
                unused: src.unused(),
            },
        ))
    }

    /// Seeded random weights.
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::load(&mut RandomInit::new(seed), config)
    }

    /// Re-checks the relations between layer widths the forward pass relies
    /// on, on the loaded tensors themselves.
    pub fn check_structure(&self) -> Result<()> {
        let dc = &self.config.decoder;
        let op = "model_structure";
        let slots = dc.heads * dc.points_per_head_per_scale * dc.scales;
        ensure!(
            dc.embed_dim % dc.heads == 0 && dc.embed_dim / dc.heads == dc.head_dim(),
            op,
            "embed dim {} over {} heads",
            dc.embed_dim,
            dc.heads
        );
        for (i, layer) in self.decoder.layers.iter().enumerate() {
            let ca = &layer.cross_attn;
            ensure!(
                ca.attention_weights.weight.shape() == [slots, dc.embed_dim]
                    && ca.sampling_offsets.weight.shape() == [2 * slots, dc.embed_dim],
                op,
                "decoder layer {i}: attention {:?}, offsets {:?}, expected {slots} and {} outputs",
                ca.attention_weights.weight.shape(),
                ca.sampling_offsets.weight.shape(),
                2 * slots
            );
        }
        for (i, head) in self.decoder.class_heads.iter().enumerate() {
            ensure!(
                head.weight.shape() == [dc.class_count, dc.embed_dim],
                op,
                "class head {i}: {:?}",
                head.weight.shape()
            );
        }
        ensure!(
            self.query.score_head.weight.shape() == [dc.class_count, dc.embed_dim],
            op,
            "encoder class head {:?}",
            self.query.score_head.weight.shape()
        );
        Ok(())
    }

    pub fn denoising_plan(&self, gt: &[GroundTruth], seed: u64) -> Result<DenoisingPlan<T>> {
        build_dn_queries(
            gt,
            &self.config.denoising,
            &self.label_embed,
            self.config.num_queries,
            seed,
        )
    }

    /// `image` is `(B, 3, H, W)` with `H`, `W` multiples of 32, already
    /// normalized.
    pub fn forward(
        &self,
        image: &Tensor<T>,
        plan: Option<&DenoisingPlan<T>>,
        log: &mut ShapeLog,
    ) -> Result<ModelOutput<T>> {
        let (b, _, _, _) = image.dims4()?;
        if let Some(p) = plan {
            ensure!(
                p.embeddings.dim(0) == b,
                "model",
                "denoising plan for batch {} applied to batch {b}",
                p.embeddings.dim(0)
            );
        }
        log.record("input", image.shape());
        let features = self.backbone.forward(image, log)?;
        let fused = self.encoder.forward(&features, log)?;
        let queries = self.query.forward(&fused, log)?;
        let decoder = self.decoder.run(&queries, plan, log)?;
        Ok(ModelOutput { queries, decoder })
    }
}

/// Names and shapes of an unfolded checkpoint for `config`.
pub fn parameter_manifest(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    let mut rec = SpecRecorder::new();
    Model::<f32>::load(&mut rec, config)?;
    Ok(checkpoint_manifest(&rec.into_specs()))
}

/// An unfolded checkpoint of seeded random weights for `config`, with the
/// configuration recorded in its metadata.
pub fn random_checkpoint(config: &ModelConfig, seed: u64) -> Result<WeightStore> {
    let mut init = RandomInit::new(seed);
    Model::<f32>::load(&mut init, config)?;
    let (entries, mut metadata) = init.into_checkpoint().into_parts();
    let cfg = serde_json::to_string(config).expect("config serializes");
    metadata.insert(MODEL_CONFIG_KEY.to_string(), cfg);
    Ok(WeightStore::new(entries, metadata))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoising::synthetic_ground_truth;

    #[test]
    fn config_travels_in_checkpoint_metadata() {
        let cfg = ModelConfig::tiny();
        let ckpt = random_checkpoint(&cfg, 1).unwrap();
        assert_eq!(config_from_metadata(ckpt.metadata()).unwrap(), cfg);
        assert_eq!(
            config_from_metadata(&BTreeMap::new()).unwrap(),
            ModelConfig::default()
        );
        let mut bad = BTreeMap::new();
        bad.insert(MODEL_CONFIG_KEY.to_string(), "{".to_string());
        assert!(config_from_metadata(&bad).is_err());
    }

    #[test]
    fn random_checkpoint_roundtrips_through_folding() {
        let cfg = ModelConfig::tiny();
        let ckpt = random_checkpoint(&cfg, 3).unwrap();
        let manifest = parameter_manifest(&cfg).unwrap();
        assert_eq!(ckpt.len(), manifest.len());
        for (name, shape) in &manifest {
            assert_eq!(
                ckpt.get(name).map(|t| t.shape()),
                Some(shape.as_slice()),
                "{name}"
            );
        }
        let bytes = ckpt.to_bytes();
        let store = crate::weights::parse_container(&bytes).unwrap();
        let (model, report) = Model::<f32>::from_store(store, &cfg).unwrap();
        assert!(report.unused.is_empty());
        assert!(model.input_norm.is_identity());
    }

    #[test]
    fn missing_entry_is_named() {
        let cfg = ModelConfig::tiny();
        let (mut entries, meta) = random_checkpoint(&cfg, 4).unwrap().into_parts();
        entries.remove("decoder.class_head.3.weight");
        let err = Model::<f32>::from_store(WeightStore::new(entries, meta), &cfg).unwrap_err();
        assert!(matches!(err, Error::MissingWeight(n) if n == "decoder.class_head.3.weight"));
    }

    #[test]
    fn nan_weights_are_rejected() {
        let cfg = ModelConfig::tiny();
        let (mut entries, meta) = random_checkpoint(&cfg, 5).unwrap().into_parts();
        let t = entries.get_mut("query.score_head.bias").unwrap();
        *t = t.map(|_| f32::NAN);
        let err = Model::<f32>::from_store(WeightStore::new(entries, meta), &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn metadata_normalization() {
        let meta = BTreeMap::from([
            (INPUT_MEAN_KEY.to_string(), "[0.5, 0.5, 0.5]".to_string()),
            (INPUT_STD_KEY.to_string(), "[0.25, 0.5, 1.0]".to_string()),
        ]);
        let n = InputNormalization::from_metadata(&meta).unwrap();
        let x = Tensor::<f64>::full(vec![1, 3, 1, 1], 1.0);
        assert_eq!(n.apply(&x).unwrap().data(), &[2.0, 1.0, 0.5]);
        let bad = BTreeMap::from([(INPUT_STD_KEY.to_string(), "[1, 0, 1]".to_string())]);
        assert!(InputNormalization::from_metadata(&bad).is_err());
    }

    #[test]
    fn tiny_forward_end_to_end() {
        let cfg = ModelConfig::tiny();
        let model = Model::<f32>::random(&cfg, 6).unwrap();
        let image = Tensor::<f32>::full(vec![2, 3, 64, 64], 0.5);
        let mut log = ShapeLog::enabled();
        let out = model.forward(&image, None, &mut log).unwrap();
        assert_eq!(out.decoder.logits.shape(), &[6, 2, 20, 5]);
        assert_eq!(log.last("query.memory"), Some(&[2, 84, 32][..]));

        let plan = model
            .denoising_plan(&synthetic_ground_truth(2, 2, 5), 1)
            .unwrap();
        let with = model
            .forward(&image, Some(&plan), &mut ShapeLog::disabled())
            .unwrap();
        assert_eq!(with.decoder.logits.dim(2), 20 + plan.d);
        let (a, _) = out.decoder.final_matching().unwrap();
        let (b, _) = with.decoder.final_matching().unwrap();
        assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn plan_batch_must_match() {
        let cfg = ModelConfig::tiny();
        let model = Model::<f32>::random(&cfg, 7).unwrap();
        let plan = model
            .denoising_plan(&synthetic_ground_truth(1, 2, 5), 1)
            .unwrap();
        let image = Tensor::<f32>::zeros(vec![2, 3, 64, 64]);
        assert!(model
            .forward(&image, Some(&plan), &mut ShapeLog::disabled())
            .is_err());
    }
}
