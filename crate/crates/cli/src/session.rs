//! A loaded model plus everything needed to answer detection requests.

use std::path::Path;

use anyhow::{Context, Result};
use rtdetr::model::config_from_metadata;
use rtdetr::postprocess::{decode_detections, Detection};
use rtdetr::weights::{load_container, WeightStore};
use rtdetr::{Model, ShapeLog};

use crate::preprocess::preprocess_image;

/// Immutable after construction; one session can serve many threads, each
/// request allocating its own activations.
#[derive(Debug)]
pub struct Session {
    pub model: Model<f32>,
    /// Checkpoint entries the model never asked for.
    pub unused: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct DetectionResult {
    pub width: usize,
    pub height: usize,
    pub detections: Vec<Detection>,
}

impl Session {
    /// Loads a checkpoint; its `model_config` metadata, when present,
    /// selects the architecture.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let store = load_container(path).with_context(|| format!("loading {}", path.display()))?;
        Self::from_store(store)
    }

    pub fn from_store(store: WeightStore) -> Result<Self> {
        let config = config_from_metadata(store.metadata())?;
        let (model, report) = Model::from_store(store, &config)?;
        Ok(Self {
            model,
            unused: report.unused,
        })
    }

    pub fn image_size(&self) -> usize {
        self.model.config.image_size
    }

    /// Full pipeline on encoded image bytes.
    pub fn detect(&self, bytes: &[u8], threshold: f64, max_det: usize) -> Result<DetectionResult> {
        let image = preprocess_image(bytes, self.image_size())?;
        let input = self.model.input_norm.apply(&image.tensor)?;
        let out = self
            .model
            .forward(&input, None, &mut ShapeLog::disabled())?;
        let (logits, boxes) = out.decoder.final_matching()?;
        let (_, q, c) = logits.dims3()?;
        let detections = decode_detections(
            &logits.reshape(vec![q, c])?,
            &boxes.reshape(vec![q, 4])?,
            (image.width, image.height),
            threshold,
            max_det,
        )?;
        Ok(DetectionResult {
            width: image.width,
            height: image.height,
            detections,
        })
    }
}
