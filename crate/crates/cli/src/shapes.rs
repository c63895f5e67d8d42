//! Running the whole pipeline on random weights and checking every
//! recorded inter-stage shape against a table derived from the
//! configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use anyhow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rtdetr::config::LEVEL_STRIDES;
use rtdetr::denoising::synthetic_ground_truth;
use rtdetr::{Model, ModelConfig, ShapeLog, Tensor};

#[derive(Debug, Clone)]
pub struct TraceOptions {
    pub config: ModelConfig,
    pub batch: usize,
    /// Ground-truth objects per image for the denoising branch; `None`
    /// disables it.
    pub denoise_objects: Option<usize>,
    pub seed: u64,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            config: ModelConfig::default(),
            batch: 1,
            denoise_objects: None,
            seed: 0,
        }
    }
}

/// Number of denoising queries for `objects` boxes per image.
pub fn denoising_queries(cfg: &ModelConfig, objects: usize) -> usize {
    if objects == 0 {
        return 0;
    }
    let groups = (cfg.denoising.num_denoising / objects).max(1);
    2 * groups * objects
}

/// Stage name to expected shape, in pipeline order. `dn` is the number of
/// denoising queries prepended in the decoder (0 when disabled).
pub fn expected_shapes(cfg: &ModelConfig, batch: usize, dn: usize) -> Vec<(String, Vec<usize>)> {
    let b = batch;
    let s = cfg.image_size;
    let d = cfg.encoder.embed_dim;
    let bb = &cfg.backbone;
    let dc = &cfg.decoder;
    let side = |stride: usize| s / stride;
    let map = |c: usize, stride: usize| vec![b, c, side(stride), side(stride)];
    let locations: usize = LEVEL_STRIDES.iter().map(|&st| side(st) * side(st)).sum();
    let k = cfg.num_queries;
    let q = k + dn;
    let c = dc.class_count;
    let slots = dc.scales * dc.points_per_head_per_scale;

    let mut t: Vec<(String, Vec<usize>)> = vec![
        ("input".into(), vec![b, 3, s, s]),
        ("backbone.input".into(), vec![b, 3, s, s]),
        ("backbone.stem".into(), map(bb.stem_channels[2], 4)),
    ];
    for st in 0..4 {
        t.push((
            format!("backbone.stage{}", st + 1),
            map(bb.widths[st] * bb.expansion, 4 << st),
        ));
    }
    for (lvl, &stride) in LEVEL_STRIDES.iter().enumerate() {
        t.push((format!("backbone.s{}", lvl + 3), map(d, stride)));
    }
    t.extend([
        ("encoder.aifi".into(), map(d, 32)),
        ("encoder.fpn.concat4".into(), map(2 * d, 16)),
        ("encoder.fpn.csp4".into(), map(d, 16)),
        ("encoder.fpn.concat3".into(), map(2 * d, 8)),
        ("encoder.fpn.csp3".into(), map(d, 8)),
        ("encoder.pan.concat4".into(), map(2 * d, 16)),
        ("encoder.pan.csp4".into(), map(d, 16)),
        ("encoder.pan.concat5".into(), map(2 * d, 32)),
        ("encoder.pan.csp5".into(), map(d, 32)),
        ("encoder.out3".into(), map(d, 8)),
        ("encoder.out4".into(), map(d, 16)),
        ("encoder.out5".into(), map(d, 32)),
        ("query.memory".into(), vec![b, locations, d]),
        ("query.enc_class_logits".into(), vec![b, locations, c]),
        ("query.enc_box_logits".into(), vec![b, locations, 4]),
        ("query.target".into(), vec![b, k, d]),
        ("query.ref_boxes".into(), vec![b, k, 4]),
        ("decoder.queries".into(), vec![b, q, d]),
    ]);
    if dn > 0 {
        t.push(("decoder.attn_mask".into(), vec![q, q]));
    }
    t.extend([
        (
            "decoder.msda.offsets".into(),
            vec![b, q, dc.heads * slots * 2],
        ),
        (
            "decoder.msda.attn_logits".into(),
            vec![b, q, dc.heads * slots],
        ),
        (
            "decoder.msda.locations".into(),
            vec![b, q, dc.heads, slots, 2],
        ),
        ("decoder.msda.output".into(), vec![b, q, d]),
    ]);
    for i in 0..dc.blocks {
        t.extend([
            (format!("decoder.block{i}.ref_boxes"), vec![b, q, 1, 4]),
            (format!("decoder.block{i}.query_pos"), vec![b, q, d]),
            (format!("decoder.block{i}.hidden"), vec![b, q, d]),
            (format!("decoder.block{i}.logits"), vec![b, q, c]),
            (format!("decoder.block{i}.boxes"), vec![b, q, 4]),
        ]);
    }
    t.push(("decoder.logits".into(), vec![dc.blocks, b, q, c]));
    t.push(("decoder.boxes".into(), vec![dc.blocks, b, q, 4]));
    t
}

#[derive(Debug, Clone)]
pub struct StageCheck {
    pub stage: String,
    pub expected: Vec<usize>,
    /// Every shape recorded under the stage, in order.
    pub observed: Vec<Vec<usize>>,
}

impl StageCheck {
    pub fn ok(&self) -> bool {
        !self.observed.is_empty() && self.observed.iter().all(|s| *s == self.expected)
    }
}

#[derive(Debug, Clone)]
pub struct ShapeReport {
    pub batch: usize,
    pub denoising_queries: usize,
    pub checks: Vec<StageCheck>,
    /// Recorded stages missing from the expected table.
    pub unexpected: Vec<(String, Vec<usize>)>,
    pub elapsed: Duration,
}

impl ShapeReport {
    /// Names of the stages that failed, unexpected ones included.
    pub fn deviations(&self) -> Vec<String> {
        self.checks
            .iter()
            .filter(|c| !c.ok())
            .map(|c| c.stage.clone())
            .chain(self.unexpected.iter().map(|(s, _)| s.clone()))
            .collect()
    }

    pub fn observed(&self, stage: &str) -> Option<&[usize]> {
        self.checks
            .iter()
            .find(|c| c.stage == stage)
            .and_then(|c| c.observed.first())
            .map(Vec::as_slice)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.ok() { "ok" } else { "MISMATCH" };
            let seen = match c.observed.as_slice() {
                [] => "missing".to_string(),
                [one, ..] if c.observed.iter().all(|s| s == one) => {
                    let times = if c.observed.len() > 1 {
                        format!(" x{}", c.observed.len())
                    } else {
                        String::new()
                    };
                    format!("{one:?}{times}")
                }
                many => format!("{many:?}"),
            };
            let _ = writeln!(
                out,
                "{status:<8}  {:<26}  expected {:?}  got {seen}",
                c.stage, c.expected
            );
        }
        for (stage, shape) in &self.unexpected {
            let _ = writeln!(out, "{:<8}  {stage:<26}  got {shape:?}", "UNKNOWN");
        }
        let _ = writeln!(
            out,
            "batch {}, denoising queries {}, {} stages, {} deviations, {:.2}s",
            self.batch,
            self.denoising_queries,
            self.checks.len(),
            self.deviations().len(),
            self.elapsed.as_secs_f64()
        );
        out
    }
}

/// Executes the model on seeded random weights and a random image, then
/// compares the shape log with [`expected_shapes`].
pub fn trace_shapes(opts: &TraceOptions) -> Result<ShapeReport> {
    let cfg = &opts.config;
    let start = Instant::now();
    let model = Model::<f32>::random(cfg, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let s = cfg.image_size;
    let image = Tensor::<f32>::uniform(vec![opts.batch, 3, s, s], 0.0, 1.0, &mut rng);
    let plan = match opts.denoise_objects {
        Some(n) => {
            let gt = synthetic_ground_truth(opts.batch, n, cfg.num_classes());
            Some(model.denoising_plan(&gt, opts.seed)?)
        }
        None => None,
    };
    let mut log = ShapeLog::enabled();
    model.forward(&image, plan.as_ref(), &mut log)?;
    let elapsed = start.elapsed();

    let dn = opts
        .denoise_objects
        .map_or(0, |n| denoising_queries(cfg, n));
    let expected = expected_shapes(cfg, opts.batch, dn);
    let mut recorded: BTreeMap<&str, Vec<Vec<usize>>> = BTreeMap::new();
    for (stage, shape) in log.entries() {
        recorded.entry(stage).or_default().push(shape.clone());
    }
    let checks = expected
        .iter()
        .map(|(stage, shape)| StageCheck {
            stage: stage.clone(),
            expected: shape.clone(),
            observed: recorded.remove(stage.as_str()).unwrap_or_default(),
        })
        .collect();
    let unexpected = recorded
        .into_iter()
        .flat_map(|(s, shapes)| shapes.into_iter().map(move |sh| (s.to_string(), sh)))
        .collect();
    Ok(ShapeReport {
        batch: opts.batch,
        denoising_queries: dn,
        checks,
        unexpected,
        elapsed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_carries_the_headline_shapes() {
        let t: BTreeMap<_, _> = expected_shapes(&ModelConfig::default(), 2, 0)
            .into_iter()
            .collect();
        assert_eq!(t["encoder.out3"], [2, 256, 80, 80]);
        assert_eq!(t["encoder.out4"], [2, 256, 40, 40]);
        assert_eq!(t["encoder.out5"], [2, 256, 20, 20]);
        assert_eq!(t["query.memory"], [2, 8400, 256]);
        assert_eq!(t["query.enc_class_logits"], [2, 8400, 80]);
        assert_eq!(t["query.enc_box_logits"], [2, 8400, 4]);
        assert_eq!(t["query.target"], [2, 300, 256]);
        assert_eq!(t["decoder.msda.attn_logits"], [2, 300, 96]);
        assert_eq!(t["decoder.msda.offsets"], [2, 300, 192]);
        assert_eq!(t["decoder.msda.locations"], [2, 300, 8, 12, 2]);
        assert!(!t.contains_key("decoder.attn_mask"));
    }

    #[test]
    fn denoising_counts_follow_group_arithmetic() {
        let cfg = ModelConfig::default();
        assert_eq!(denoising_queries(&cfg, 5), 200);
        assert_eq!(denoising_queries(&cfg, 0), 0);
        assert_eq!(denoising_queries(&cfg, 150), 300);
    }

    #[test]
    fn tiny_trace_has_no_deviations() {
        for dn in [None, Some(3)] {
            let report = trace_shapes(&TraceOptions {
                config: ModelConfig::tiny(),
                batch: 2,
                denoise_objects: dn,
                seed: 4,
            })
            .unwrap();
            assert!(report.deviations().is_empty(), "{}", report.render());
        }
    }

    #[test]
    fn wrong_table_is_reported_by_stage() {
        let cfg = ModelConfig::tiny();
        let mut report = trace_shapes(&TraceOptions {
            config: cfg,
            ..TraceOptions::default()
        })
        .unwrap();
        report.checks[5].expected[1] += 1;
        let bad = report.checks[5].stage.clone();
        assert_eq!(report.deviations(), vec![bad.clone()]);
        assert!(report.render().contains(&format!("MISMATCH  {bad}")));
    }
}
