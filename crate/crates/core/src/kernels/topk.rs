use std::cmp::Ordering;

use crate::error::{ensure, Result};
use crate::{Scalar, Tensor};

/// Result of [`topk_scores`]: values `(B, k)` and their source indices,
/// row-major `B × k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopK<T = f32> {
    pub values: Tensor<T>,
    pub indices: Vec<usize>,
    pub k: usize,
}

impl<T> TopK<T> {
    pub fn row(&self, b: usize) -> &[usize] {
        &self.indices[b * self.k..(b + 1) * self.k]
    }
}

/// Descending by value, ascending by index on ties; NaN ranks last.
fn rank<T: Scalar>(a: (usize, T), b: (usize, T)) -> Ordering {
    match (a.1.is_nan(), b.1.is_nan()) {
        (true, true) => a.0.cmp(&b.0),
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        _ => b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)),
    }
}

/// The `k` largest entries of each row of a `(B, N)` score matrix, in
/// descending order. Equal scores resolve to the lower index first.
pub fn topk_scores<T: Scalar>(scores: &Tensor<T>, k: usize) -> Result<TopK<T>> {
    let (b, n) = scores.dims2()?;
    ensure!(
        k <= n,
        "topk_scores",
        "k = {k} exceeds {n} candidates of {:?}",
        scores.shape()
    );
    let mut values = Vec::with_capacity(b * k);
    let mut indices = Vec::with_capacity(b * k);
    for row in scores.data().chunks(n.max(1)).take(b) {
        let mut cand: Vec<(usize, T)> = row.iter().copied().enumerate().collect();
        if k > 0 && k < n {
            cand.select_nth_unstable_by(k - 1, |&a, &b| rank(a, b));
        }
        cand.truncate(k);
        cand.sort_unstable_by(|&a, &b| rank(a, b));
        for (i, v) in cand {
            indices.push(i);
            values.push(v);
        }
    }
    Ok(TopK {
        values: Tensor::from_parts(vec![b, k], values),
        indices,
        k,
    })
}

/// Gathers rows of a `(B, N, F)` tensor: output `(B, k, F)` with
/// `out[b, j] = x[b, indices[b·k + j]]`.
pub fn gather_rows<T: Scalar>(x: &Tensor<T>, indices: &[usize], k: usize) -> Result<Tensor<T>> {
    let (b, n, f) = x.dims3()?;
    ensure!(
        indices.len() == b * k,
        "gather_rows",
        "{} indices for batch {b} × k {k}",
        indices.len()
    );
    let mut out = Vec::with_capacity(b * k * f);
    for (j, &i) in indices.iter().enumerate() {
        ensure!(
            i < n,
            "gather_rows",
            "index {i} out of range for {:?}",
            x.shape()
        );
        let base = ((j / k.max(1)) * n + i) * f;
        out.extend_from_slice(&x.data()[base..base + f]);
    }
    Ok(Tensor::from_parts(vec![b, k, f], out))
}
