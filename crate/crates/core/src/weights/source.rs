//! Typed parameter requests.
//!
//! Model stages build themselves by requesting named tensors of known shape
//! from a [`ParamSource`]. The same request sequence serves three purposes:
//! loading a checkpoint ([`StoreSource`]), drawing seeded random weights
//! ([`RandomInit`]), and enumerating the parameter manifest.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::fold::{BN_EPS_KEY, DEFAULT_BN_EPS};
use super::WeightStore;
use crate::error::{Error, Result};
use crate::kernels::{ConvSpec, Linear, Mlp};
use crate::{Scalar, Tensor};

/// What a parameter is, which decides its random initialization and how it
/// appears in an unfolded checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamKind {
    /// Dense or convolution weight with the given fan-in.
    Weight {
        fan_in: usize,
    },
    Bias,
    /// Bias of a convolution whose batch norm has been folded in; stored in
    /// a checkpoint as the four `bn.*` vectors instead.
    FoldedBias,
    NormScale,
    NormShift,
    Embedding,
}

pub trait ParamSource<T: Scalar> {
    fn fetch(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<Tensor<T>>;
}

/// Serves parameters from a (batch-norm folded) [`WeightStore`], checking
/// every shape and remembering which names were used.
pub struct StoreSource<'a> {
    store: &'a WeightStore,
    used: BTreeSet<String>,
}

impl<'a> StoreSource<'a> {
    pub fn new(store: &'a WeightStore) -> Self {
        Self {
            store,
            used: BTreeSet::new(),
        }
    }

    /// Store entries no request asked for.
    pub fn unused(&self) -> Vec<String> {
        self.store
            .names()
            .filter(|n| !self.used.contains(*n))
            .map(str::to_string)
            .collect()
    }
}

impl<T: Scalar> ParamSource<T> for StoreSource<'_> {
    fn fetch(&mut self, name: &str, shape: &[usize], _kind: ParamKind) -> Result<Tensor<T>> {
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))?;
        if t.shape() != shape {
            return Err(Error::WeightShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                actual: t.shape().to_vec(),
            });
        }
        self.used.insert(name.to_string());
        Ok(t.cast())
    }
}

/// One recorded request.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

/// Draws seeded random parameters and records every request.
pub struct RandomInit {
    rng: ChaCha8Rng,
    specs: Vec<ParamSpec>,
    values: Vec<Tensor<f32>>,
}

impl RandomInit {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            specs: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// The drawn parameters as a folded store.
    pub fn into_store(self) -> WeightStore {
        let entries = self
            .specs
            .into_iter()
            .map(|s| s.name)
            .zip(self.values)
            .collect();
        WeightStore::new(entries, BTreeMap::new())
    }

    /// The drawn parameters as an unfolded checkpoint: every folded bias
    /// `{p}.conv.bias` is replaced by random `{p}.bn.*` statistics.
    pub fn into_checkpoint(mut self) -> WeightStore {
        let mut entries = BTreeMap::new();
        let specs = std::mem::take(&mut self.specs);
        let values = std::mem::take(&mut self.values);
        for (spec, value) in specs.into_iter().zip(values) {
            if spec.kind == ParamKind::FoldedBias {
                let prefix = spec.name.trim_end_matches(".conv.bias");
                let n = spec.shape.clone();
                entries.insert(
                    format!("{prefix}.bn.weight"),
                    Tensor::uniform(n.clone(), 0.8, 1.2, &mut self.rng),
                );
                entries.insert(
                    format!("{prefix}.bn.bias"),
                    Tensor::uniform(n.clone(), -0.1, 0.1, &mut self.rng),
                );
                entries.insert(
                    format!("{prefix}.bn.running_mean"),
                    Tensor::uniform(n.clone(), -0.1, 0.1, &mut self.rng),
                );
                entries.insert(
                    format!("{prefix}.bn.running_var"),
                    Tensor::uniform(n, 0.5, 1.5, &mut self.rng),
                );
            } else {
                entries.insert(spec.name, value);
            }
        }
        let metadata = BTreeMap::from([(BN_EPS_KEY.to_string(), DEFAULT_BN_EPS.to_string())]);
        WeightStore::new(entries, metadata)
    }
}

impl<T: Scalar> ParamSource<T> for RandomInit {
    fn fetch(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<Tensor<T>> {
        let rng = &mut self.rng;
        let t: Tensor<f32> = match kind {
            ParamKind::Weight { fan_in } => {
                let a = (3.0 / fan_in.max(1) as f64).sqrt();
                Tensor::uniform(shape.to_vec(), -a, a, rng)
            }
            ParamKind::Bias | ParamKind::FoldedBias => {
                Tensor::uniform(shape.to_vec(), -0.05, 0.05, rng)
            }
            ParamKind::NormScale => Tensor::uniform(shape.to_vec(), 0.9, 1.1, rng),
            ParamKind::NormShift => Tensor::uniform(shape.to_vec(), -0.05, 0.05, rng),
            ParamKind::Embedding => Tensor::randn(shape.to_vec(), 1.0, rng),
        };
        self.specs.push(ParamSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            kind,
        });
        self.values.push(t.clone());
        Ok(t.cast())
    }
}

/// Records requests and answers each with zeros; used to enumerate the
/// parameter list without drawing values.
#[derive(Debug, Default)]
pub struct SpecRecorder {
    specs: Vec<ParamSpec>,
}

impl SpecRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }
}

impl<T: Scalar> ParamSource<T> for SpecRecorder {
    fn fetch(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<Tensor<T>> {
        self.specs.push(ParamSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            kind,
        });
        Ok(Tensor::zeros(shape.to_vec()))
    }
}

/// Expands recorded requests into the names and shapes an unfolded
/// checkpoint must contain.
pub fn checkpoint_manifest(specs: &[ParamSpec]) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for s in specs {
        if s.kind == ParamKind::FoldedBias {
            let prefix = s.name.trim_end_matches(".conv.bias");
            for f in ["weight", "bias", "running_mean", "running_var"] {
                out.push((format!("{prefix}.bn.{f}"), s.shape.clone()));
            }
        } else {
            out.push((s.name.clone(), s.shape.clone()));
        }
    }
    out
}

/// Convolution followed by a (folded) batch norm: `{prefix}.conv.weight`
/// and `{prefix}.conv.bias`, padding `(k - 1) / 2`.
pub fn conv_norm<T: Scalar>(
    src: &mut impl ParamSource<T>,
    prefix: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
) -> Result<ConvSpec<T>> {
    let w = src.fetch(
        &format!("{prefix}.conv.weight"),
        &[out_ch, in_ch, kernel, kernel],
        ParamKind::Weight {
            fan_in: in_ch * kernel * kernel,
        },
    )?;
    let b = src.fetch(
        &format!("{prefix}.conv.bias"),
        &[out_ch],
        ParamKind::FoldedBias,
    )?;
    ConvSpec::new(w, Some(b), stride, (kernel - 1) / 2, 1)
}

/// `{prefix}.weight` `(out, in)` and `{prefix}.bias` `(out)`.
pub fn linear<T: Scalar>(
    src: &mut impl ParamSource<T>,
    prefix: &str,
    in_features: usize,
    out_features: usize,
) -> Result<Linear<T>> {
    let w = src.fetch(
        &format!("{prefix}.weight"),
        &[out_features, in_features],
        ParamKind::Weight {
            fan_in: in_features,
        },
    )?;
    let b = src.fetch(&format!("{prefix}.bias"), &[out_features], ParamKind::Bias)?;
    Linear::new(w, Some(b))
}

/// `{prefix}.layers.{k}` for `k < depth`: `in → hidden → … → out`.
pub fn mlp<T: Scalar>(
    src: &mut impl ParamSource<T>,
    prefix: &str,
    in_features: usize,
    hidden: usize,
    out_features: usize,
    depth: usize,
) -> Result<Mlp<T>> {
    let layers = (0..depth)
        .map(|k| {
            let i = if k == 0 { in_features } else { hidden };
            let o = if k + 1 == depth { out_features } else { hidden };
            linear(src, &format!("{prefix}.layers.{k}"), i, o)
        })
        .collect::<Result<_>>()?;
    Ok(Mlp { layers })
}

/// Affine parameters of a layer norm.
#[derive(Debug, Clone)]
pub struct NormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> NormParams<T> {
    pub fn load(src: &mut impl ParamSource<T>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: src.fetch(&format!("{prefix}.weight"), &[dim], ParamKind::NormScale)?,
            beta: src.fetch(&format!("{prefix}.bias"), &[dim], ParamKind::NormShift)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        crate::kernels::layer_norm_last(x, &self.gamma, &self.beta)
    }
}
