use std::collections::BTreeMap;

use super::WeightStore;
use crate::error::{Error, Result};
use crate::Tensor;

/// Metadata key holding the batch-norm variance epsilon.
pub const BN_EPS_KEY: &str = "bn_eps";
pub const DEFAULT_BN_EPS: f64 = 1e-5;

const BN_FIELDS: [&str; 4] = ["weight", "bias", "running_mean", "running_var"];

/// Folds every `{p}.bn.*` group into the convolution `{p}.conv.weight`:
///
/// ```text
/// s  = γ / sqrt(σ² + ε)
/// W' = W · s        (per output channel)
/// b' = (b − μ) · s + β
/// ```
///
/// The folded bias is written to `{p}.conv.bias` and the `bn` entries are
/// dropped. A store without `bn` entries is returned unchanged.
pub fn fold_batchnorm(store: WeightStore) -> Result<WeightStore> {
    let eps = match store.metadata().get(BN_EPS_KEY) {
        Some(v) => v.parse::<f64>().map_err(|_| Error::Container {
            offset: 0,
            message: format!("metadata {BN_EPS_KEY} = {v:?} is not a number"),
        })?,
        None => DEFAULT_BN_EPS,
    };
    let (mut entries, metadata) = store.into_parts();
    let prefixes: Vec<String> = entries
        .keys()
        .filter_map(|k| {
            BN_FIELDS
                .iter()
                .find_map(|f| k.strip_suffix(&format!(".bn.{f}")))
                .map(str::to_string)
        })
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();

    for prefix in prefixes {
        let conv_key = format!("{prefix}.conv.weight");
        let Some(weight) = entries.remove(&conv_key) else {
            return Err(Error::OrphanBatchNorm(prefix));
        };
        let mut bn = BTreeMap::new();
        for f in BN_FIELDS {
            let key = format!("{prefix}.bn.{f}");
            let t = entries
                .remove(&key)
                .ok_or_else(|| Error::MissingWeight(key.clone()))?;
            bn.insert(f, t);
        }
        let out = weight.shape()[0];
        for (f, t) in &bn {
            if t.shape() != [out] {
                return Err(Error::WeightShape {
                    name: format!("{prefix}.bn.{f}"),
                    expected: vec![out],
                    actual: t.shape().to_vec(),
                });
            }
        }
        let bias_key = format!("{prefix}.conv.bias");
        let bias = entries.remove(&bias_key);
        let per_out = weight.numel() / out.max(1);
        let scale: Vec<f64> = (0..out)
            .map(|o| {
                bn["weight"].data()[o] as f64 / (bn["running_var"].data()[o] as f64 + eps).sqrt()
            })
            .collect();
        let folded_w = Tensor::from_fn(weight.shape().to_vec(), |i| {
            (weight.data()[i] as f64 * scale[i / per_out]) as f32
        });
        let folded_b = Tensor::from_fn(vec![out], |o| {
            let b = bias.as_ref().map_or(0.0, |b| b.data()[o] as f64);
            ((b - bn["running_mean"].data()[o] as f64) * scale[o] + bn["bias"].data()[o] as f64)
                as f32
        });
        entries.insert(conv_key, folded_w);
        entries.insert(bias_key, folded_b);
    }
    Ok(WeightStore::new(entries, metadata))
}
