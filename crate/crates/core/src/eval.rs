//! Top-N ranking evaluation: Recall@N and NDCG@N with known-item masking.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::InteractionMatrix;
use crate::error::{Error, Result};
use crate::jg::score_block;
use crate::model::ModelState;
use crate::tensor::Tensor;

const SCORE_CHUNK: usize = 256;

/// Scores for `users` against every item, with every pair present in any of
/// `masks` set to `−∞`.
pub fn score_all(state: &ModelState, users: &[usize], masks: &[&InteractionMatrix]) -> Result<Tensor> {
    let mut scores = score_block(users, state)?;
    for (r, &u) in users.iter().enumerate() {
        let row = scores.row_slice_mut(r);
        for m in masks {
            for &i in m.user_row(u) {
                row[i as usize] = f64::NEG_INFINITY;
            }
        }
    }
    Ok(scores)
}

/// Indices of the `n` highest finite scores, descending, ties by ascending index.
pub fn top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > f64::NEG_INFINITY).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if idx.len() > n {
        idx.select_nth_unstable_by(n, cmp);
        idx.truncate(n);
    }
    idx.sort_by(cmp);
    idx
}

/// `|top ∩ test| / min(N, |test|)`; `None` when `test` is empty.
/// `test` must be sorted ascending, as CSR rows are.
pub fn recall_at_n(top: &[usize], test: &[u32], n: usize) -> Option<f64> {
    debug_assert!(test.windows(2).all(|w| w[0] < w[1]), "test items must be sorted");
    if test.is_empty() || n == 0 {
        return None;
    }
    let hits = top.iter().take(n).filter(|&&i| test.binary_search(&(i as u32)).is_ok()).count();
    Some(hits as f64 / n.min(test.len()) as f64)
}

/// DCG over hit ranks divided by the ideal DCG of `min(N, |test|)` hits.
/// `test` must be sorted ascending.
pub fn ndcg_at_n(top: &[usize], test: &[u32], n: usize) -> Option<f64> {
    debug_assert!(test.windows(2).all(|w| w[0] < w[1]), "test items must be sorted");
    if test.is_empty() || n == 0 {
        return None;
    }
    let dcg: f64 = top
        .iter()
        .take(n)
        .enumerate()
        .filter(|(_, &i)| test.binary_search(&(i as u32)).is_ok())
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..n.min(test.len())).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    Some(dcg / idcg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Recall,
    Ndcg,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Recall => "recall",
            Metric::Ndcg => "ndcg",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: Metric,
    pub n: usize,
    pub value: f64,
    pub n_users: usize,
}

/// Per-user top lists and macro-averaged metrics over evaluable users.
#[derive(Clone, Debug)]
pub struct RankingResult {
    /// Users with at least one target item, ascending.
    pub users: Vec<usize>,
    /// Top-`max(cutoffs)` list per evaluable user.
    pub top: Vec<Vec<usize>>,
    /// `(metric, N, per-user values aligned with users)`.
    pub per_user: Vec<(Metric, usize, Vec<f64>)>,
    pub rows: Vec<MetricRow>,
}

impl RankingResult {
    pub fn value(&self, metric: Metric, n: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric && r.n == n).map(|r| r.value)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tN\tvalue\tn_users\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{:.6}\t{}", r.metric.name(), r.n, r.value, r.n_users);
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Ranks all items for every user with a non-empty `target` row, masking
/// `masks`, and reports Recall and NDCG at each cutoff.
pub fn evaluate(
    state: &ModelState,
    target: &InteractionMatrix,
    masks: &[&InteractionMatrix],
    cutoffs: &[usize],
) -> Result<RankingResult> {
    let users: Vec<usize> = (0..target.num_users()).filter(|&u| !target.user_row(u).is_empty()).collect();
    let depth = cutoffs.iter().copied().max().unwrap_or(0);
    let mut top = Vec::with_capacity(users.len());
    for chunk in users.chunks(SCORE_CHUNK) {
        let scores = score_all(state, chunk, masks)?;
        for r in 0..chunk.len() {
            top.push(top_n(scores.row_slice(r), depth));
        }
    }
    let mut per_user = Vec::new();
    let mut rows = Vec::new();
    for metric in [Metric::Recall, Metric::Ndcg] {
        for &n in cutoffs {
            let f = match metric {
                Metric::Recall => recall_at_n,
                Metric::Ndcg => ndcg_at_n,
            };
            let vals: Vec<f64> = users
                .iter()
                .zip(&top)
                .filter_map(|(&u, t)| f(t, target.user_row(u), n))
                .collect();
            let value = if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
            rows.push(MetricRow {
                metric,
                n,
                value,
                n_users: vals.len(),
            });
            per_user.push((metric, n, vals));
        }
    }
    Ok(RankingResult {
        users,
        top,
        per_user,
        rows,
    })
}

/// Validation Recall@20 used for model selection.
pub fn validation_recall(state: &ModelState, train: &InteractionMatrix, validation: &InteractionMatrix) -> Result<f64> {
    let res = evaluate(state, validation, &[train], &[20])?;
    Ok(res.value(Metric::Recall, 20).unwrap_or(0.0))
}
