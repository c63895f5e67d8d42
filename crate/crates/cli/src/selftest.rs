//! Seeded comparisons of the optimized kernels (run in `f32`) against the
//! brute-force reference implementations (run in `f64` on the same inputs).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtdetr::kernels::{self, AttentionWeights, ConvSpec, Linear};
use rtdetr::msda::{msda_attend, SamplingPlan};
use rtdetr::{reference, Tensor};

pub const KERNEL_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_CASES: usize = 100;

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub kernel: &'static str,
    pub cases: usize,
    /// Largest absolute difference seen; for `topk`, the number of
    /// mismatched indices.
    pub max_abs_err: f64,
    pub tolerance: f64,
}

impl OracleResult {
    pub fn passed(&self) -> bool {
        self.cases > 0 && self.max_abs_err <= self.tolerance
    }
}

impl std::fmt::Display for OracleResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<20} {:>4} cases  max err {:.3e}  (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.kernel,
            self.cases,
            self.max_abs_err,
            self.tolerance
        )
    }
}

/// Every kernel suite, `cases` each, seeded from `seed`.
pub fn run_all(seed: u64, cases: usize) -> Vec<OracleResult> {
    type Suite = fn(&mut ChaCha8Rng) -> anyhow::Result<f64>;
    let suites: [(&'static str, Suite); 7] = [
        ("conv2d", conv2d_case),
        ("linear", linear_case),
        ("mha_self_attention", mha_case),
        ("grid_sample_bilinear", grid_sample_case),
        ("softmax", softmax_case),
        ("topk", topk_case),
        ("msda_attend", msda_case),
    ];
    suites
        .iter()
        .enumerate()
        .map(|(i, &(kernel, case))| run_suite(kernel, seed.wrapping_add(i as u64), cases, case))
        .collect()
}

pub fn run_suite(
    kernel: &'static str,
    seed: u64,
    cases: usize,
    case: fn(&mut ChaCha8Rng) -> anyhow::Result<f64>,
) -> OracleResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        // a kernel error or NaN counts as an unbounded miss
        let err = case(&mut rng).unwrap_or(f64::INFINITY);
        worst = if err.is_nan() {
            f64::INFINITY
        } else {
            worst.max(err)
        };
    }
    OracleResult {
        kernel,
        cases,
        max_abs_err: worst,
        tolerance: if kernel == "topk" {
            0.0
        } else {
            KERNEL_TOLERANCE
        },
    }
}

fn diff(fast: &Tensor<f32>, oracle: &Tensor<f64>) -> f64 {
    if fast.shape() != oracle.shape() {
        return f64::INFINITY;
    }
    fast.cast::<f64>().max_abs_diff(oracle)
}

fn uniform(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn linear_layer(f_in: usize, f_out: usize, rng: &mut ChaCha8Rng) -> anyhow::Result<Linear<f32>> {
    let w = uniform(vec![f_out, f_in], rng).scale(1.0 / (f_in as f32).sqrt());
    Ok(Linear::new(w, Some(uniform(vec![f_out], rng)))?)
}

fn widen(l: &Linear<f32>) -> anyhow::Result<Linear<f64>> {
    Ok(Linear::new(
        l.weight.cast(),
        l.bias.as_ref().map(Tensor::cast),
    )?)
}

pub fn conv2d_case(rng: &mut ChaCha8Rng) -> anyhow::Result<f64> {
    let groups = [1, 1, 2][rng.gen_range(0..3)];
    let cin = groups * rng.gen_range(1..5);
    let cout = groups * rng.gen_range(1..5);
    let k = [1, 3, 3, 7][rng.gen_range(0..4)];
    let stride = rng.gen_range(1..3);
    let pad = rng.gen_range(0..=k / 2);
    let h = rng.gen_range(k.max(2)..12);
    let w = rng.gen_range(k.max(2)..12);
    let b = rng.gen_range(1..3);
    let x = uniform(vec![b, cin, h, w], rng);
    let weight = uniform(vec![cout, cin / groups, k, k], rng).scale(0.3);
    let bias = rng.gen_bool(0.5).then(|| uniform(vec![cout], rng));
    let spec = ConvSpec::new(weight, bias, stride, pad, groups)?;
    let wide = ConvSpec::new(
        spec.weight.cast(),
        spec.bias.as_ref().map(Tensor::cast),
        stride,
        pad,
        groups,
    )?;
    let fast = kernels::conv2d(&x, &spec)?;
    Ok(diff(&fast, &reference::conv2d(&x.cast(), &wide)))
}

pub fn linear_case(rng: &mut ChaCha8Rng) -> anyhow::Result<f64> {
    let rows = rng.gen_range(1..200);
    let f_in = rng.gen_range(1..64);
    let f_out = rng.gen_range(1..64);
    let x = uniform(vec![rows, f_in], rng);
    let layer = linear_layer(f_in, f_out, rng)?;
    let wide = widen(&layer)?;
    let fast = kernels::linear(&x, &layer.weight, layer.bias.as_ref())?;
    Ok(diff(
        &fast,
        &reference::linear(&x.cast(), &wide.weight, wide.bias.as_ref()),
    ))
}

pub fn mha_case(rng: &mut ChaCha8Rng) -> anyhow::Result<f64> {
    let heads = [1, 2, 4, 8][rng.gen_range(0..4)];
    let e = heads * rng.gen_range(1..5);
    let n = rng.gen_range(1..24);
    let b = rng.gen_range(1..3);
    let x = uniform(vec![b, n, e], rng);
    let pos = rng.gen_bool(0.5).then(|| uniform(vec![b, n, e], rng));
    let mask = rng.gen_bool(0.5).then(|| {
        // keep the diagonal open so no row is fully blocked
        let blocked: Vec<bool> = (0..n * n)
            .map(|i| i / n != i % n && rng.gen_bool(0.3))
            .collect();
        kernels::additive_mask::<f32>(&blocked, n).expect("square mask")
    });
    let weights = AttentionWeights {
        heads,
        q_proj: linear_layer(e, e, rng)?,
        k_proj: linear_layer(e, e, rng)?,
        v_proj: linear_layer(e, e, rng)?,
        out_proj: linear_layer(e, e, rng)?,
    };
    let wide = AttentionWeights {
        heads,
        q_proj: widen(&weights.q_proj)?,
        k_proj: widen(&weights.k_proj)?,
        v_proj: widen(&weights.v_proj)?,
        out_proj: widen(&weights.out_proj)?,
    };
    let fast = kernels::mha_self_attention(&x, pos.as_ref(), &weights, mask.as_ref())?;
    let pos64 = pos.as_ref().map(Tensor::cast);
    let mask64 = mask.as_ref().map(Tensor::cast);
    let oracle = reference::mha_self_attention(&x.cast(), pos64.as_ref(), &wide, mask64.as_ref());
    Ok(diff(&fast, &oracle))
}

pub fn grid_sample_case(rng: &mut ChaCha8Rng) -> anyhow::Result<f64> {
    let b = rng.gen_range(1..3);
    let c = rng.gen_range(1..5);
    let h = rng.gen_range(1..10);
    let w = rng.gen_range(1..10);
    let p = rng.gen_range(1..40);
    let feat = uniform(vec![b, c, h, w], rng);
    // reach past the border so zero padding is exercised
    let grid = Tensor::<f32>::uniform(vec![b, p, 2], -1.3, 1.3, rng);
    let fast = kernels::grid_sample_bilinear(&feat, &grid)?;
    Ok(diff(
        &fast,
        &reference::grid_sample_bilinear(&feat.cast(), &grid.cast()),
    ))
}

pub fn softmax_case(rng: &mut ChaCha8Rng) -> anyhow::Result<f64> {
    let rank = rng.gen_range(1..4);
    let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..9)).collect();
    let axis = rng.gen_range(0..rank);
    let x = Tensor::<f32>::uniform(shape.clone(), -8.0, 8.0, rng);
    let fast = kernels::softmax(&x, axis)?;
    // move `axis` last for the oracle, then back
    let mut order: Vec<usize> = (0..rank).filter(|&a| a != axis).collect();
    order.push(axis);
    let mut inverse = vec![0; rank];
    for (i, &a) in order.iter().enumerate() {
        inverse[a] = i;
    }
    let oracle = reference::softmax_last(&x.cast::<f64>().permute(&order)?).permute(&inverse)?;
    Ok(diff(&fast, &oracle))
}

pub fn topk_case(rng: &mut ChaCha8Rng) -> anyhow::Result<f64> {
    let b = rng.gen_range(1..3);
    let n = rng.gen_range(1..500);
    let k = rng.gen_range(0..=n);
    // coarse values force ties
    let levels = rng.gen_range(2..50);
    let x = Tensor::<f32>::from_fn(vec![b, n], |_| rng.gen_range(0..levels) as f32);
    let fast = kernels::topk_scores(&x, k)?;
    let oracle = reference::topk(&x.cast::<f64>(), k);
    let misses = fast
        .indices
        .iter()
        .zip(&oracle)
        .filter(|(a, b)| a != b)
        .count()
        + fast.indices.len().abs_diff(oracle.len());
    Ok(misses as f64)
}

/// Three pyramid levels halving in size, as in the detector.
pub fn msda_case(rng: &mut ChaCha8Rng) -> anyhow::Result<f64> {
    let base_h = rng.gen_range(1..4);
    let base_w = rng.gen_range(1..4);
    let shapes: Vec<(usize, usize)> = (0..3).rev().map(|l| (base_h << l, base_w << l)).collect();
    let l: usize = shapes.iter().map(|(h, w)| h * w).sum();
    let heads = [1, 2, 8][rng.gen_range(0..3)];
    let d = heads * rng.gen_range(1..5);
    let points = rng.gen_range(1..5);
    let slots = 3 * points;
    let (b, q) = (rng.gen_range(1..3), rng.gen_range(1..8));
    let value = uniform(vec![b, l, d], rng);
    let locations = Tensor::<f32>::uniform(vec![b, q, heads, slots, 2], -1.2, 1.2, rng);
    let logits = Tensor::<f32>::uniform(vec![b, q, heads, slots], -3.0, 3.0, rng);
    let attn = kernels::softmax(&logits, 3)?;
    let plan = SamplingPlan { locations, attn };
    let fast = msda_attend(&value, &shapes, &plan, points)?;
    let oracle = reference::msda_attend(
        &value.cast(),
        &shapes,
        &plan.locations.cast(),
        &plan.attn.cast(),
        points,
    );
    Ok(diff(&fast, &oracle))
}
