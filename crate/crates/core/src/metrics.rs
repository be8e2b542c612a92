//! Rank metrics with binary relevance.
//!
//! Within a user, equal scores are ordered by ascending item index. NDCG and
//! recall are macro-averaged over users that have at least one positive.

use std::cmp::Ordering;

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::check_dim;

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            what: "labels",
            expected: (scores.len(), 1),
            found: (labels.len(), 1),
        });
    }
    if let Some(v) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain {
            what: "scores must be finite",
            value: *v,
        });
    }
    Ok(())
}

/// Twice the Mann-Whitney win count: 2 per positive ranked above a
/// negative, 1 per tie.
fn twice_wins(scores: &[f64], labels: &[bool]) -> (u128, u64, u64) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut twice, mut neg_below) = (0u128, 0u64);
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let pos = order[start..end].iter().filter(|&&j| labels[j]).count() as u64;
        let neg = (end - start) as u64 - pos;
        twice += pos as u128 * (2 * neg_below as u128 + neg as u128);
        neg_below += neg;
        start = end;
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    (twice, n_pos, labels.len() as u64 - n_pos)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels)?;
    let (twice, n_pos, n_neg) = twice_wins(scores, labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok(twice as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Scores and labels of one user's candidate items.
#[derive(Debug, Clone, Copy)]
pub struct UserList<'a> {
    pub scores: &'a [f64],
    pub labels: &'a [bool],
}

/// Item positions sorted by descending score, ties by ascending position.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

fn per_user<F>(users: &[UserList<'_>], k: usize, f: F) -> Result<f64>
where
    F: Fn(&[usize], &[bool], usize) -> f64 + Sync,
{
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    for u in users {
        check_scores(u.scores, u.labels)?;
    }
    let values: Vec<Option<f64>> = users
        .par_iter()
        .map(|u| {
            let n_pos = u.labels.iter().filter(|&&l| l).count();
            (n_pos > 0).then(|| f(&ranking(u.scores), u.labels, n_pos))
        })
        .collect();
    let (sum, count) = values.iter().flatten().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        return Err(Error::NoEligibleUsers);
    }
    Ok(sum / count as f64)
}

fn ndcg_one(order: &[usize], labels: &[bool], n_pos: usize, k: usize) -> f64 {
    let discount = |rank: usize| 1.0 / ((rank + 2) as f64).log2();
    let dcg: f64 = order.iter().take(k).enumerate().filter(|(_, &j)| labels[j]).map(|(r, _)| discount(r)).sum();
    let idcg: f64 = (0..n_pos.min(k)).map(discount).sum();
    dcg / idcg
}

fn recall_one(order: &[usize], labels: &[bool], n_pos: usize, k: usize) -> f64 {
    let hits = order.iter().take(k).filter(|&&j| labels[j]).count();
    hits as f64 / n_pos as f64
}

pub fn ndcg_at_k(users: &[UserList<'_>], k: usize) -> Result<f64> {
    per_user(users, k, |o, l, p| ndcg_one(o, l, p, k))
}

pub fn recall_at_k(users: &[UserList<'_>], k: usize) -> Result<f64> {
    per_user(users, k, |o, l, p| recall_one(o, l, p, k))
}

/// Ranking quality of a score matrix against binary labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankingReport {
    pub k: usize,
    pub auc: f64,
    pub ndcg: f64,
    pub recall: f64,
}

/// Evaluates rows as users. With a mask, only pairs where it equals 1 are
/// candidates. AUC pools all candidate pairs.
pub fn evaluate_ranking(scores: &Array2<f64>, labels: &Array2<f64>, mask: Option<&Array2<f64>>, k: usize) -> Result<RankingReport> {
    check_dim("labels", scores.dim(), labels.dim())?;
    if let Some(m) = mask {
        check_dim("evaluation mask", scores.dim(), m.dim())?;
    }
    let n = scores.nrows();
    let mut rows: Vec<(Vec<f64>, Vec<bool>)> = Vec::with_capacity(n);
    for u in 0..n {
        let mut s = Vec::new();
        let mut l = Vec::new();
        for i in 0..scores.ncols() {
            if mask.is_none_or(|m| m[[u, i]] == 1.0) {
                s.push(scores[[u, i]]);
                l.push(labels[[u, i]] == 1.0);
            }
        }
        rows.push((s, l));
    }
    let users: Vec<UserList<'_>> = rows.iter().map(|(s, l)| UserList { scores: s, labels: l }).collect();
    let all_scores: Vec<f64> = rows.iter().flat_map(|(s, _)| s.iter().copied()).collect();
    let all_labels: Vec<bool> = rows.iter().flat_map(|(_, l)| l.iter().copied()).collect();
    Ok(RankingReport {
        k,
        auc: auc(&all_scores, &all_labels)?,
        ndcg: ndcg_at_k(&users, k)?,
        recall: recall_at_k(&users, k)?,
    })
}
