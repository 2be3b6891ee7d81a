//! Ranking by cosine similarity and the retrieval metrics computed on it.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{CategoryPartition, EmbeddingStore};

/// Store indices ordered by descending similarity; equal scores keep
/// ascending store index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRetrieval {
    pub order: Vec<usize>,
    pub scores: Vec<f64>,
}

impl RankedRetrieval {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Relevance of each ranked item, in rank order.
    pub fn relevance(&self, positives: &BTreeSet<usize>) -> Vec<bool> {
        self.order.iter().map(|i| positives.contains(i)).collect()
    }

    pub fn top(&self, k: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.order.iter().copied().zip(self.scores.iter().copied()).take(k)
    }
}

/// Order `candidates` (all items when `None`) by cosine similarity to `query`.
pub fn rank(query: &[f64], store: &EmbeddingStore, candidates: Option<&[usize]>) -> Result<RankedRetrieval> {
    if query.len() != store.dim() {
        return Err(Error::DimensionMismatch {
            expected: store.dim(),
            actual: query.len(),
        });
    }
    let norm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::NonFinite("query embedding".into()));
    }
    let all: Vec<usize>;
    let candidates = match candidates {
        Some(c) => c,
        None => {
            all = (0..store.len()).collect();
            &all
        }
    };
    let mut scored: Vec<(usize, f64)> = candidates
        .iter()
        .map(|&i| {
            let row = store.row(i);
            let dot: f64 = row.iter().zip(query).map(|(a, b)| *a as f64 * b).sum();
            (i, dot / norm)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(RankedRetrieval {
        order: scored.iter().map(|s| s.0).collect(),
        scores: scored.iter().map(|s| s.1).collect(),
    })
}

/// Mean of the precision at each positive's rank.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (i, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            total += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::NoPositives);
    }
    Ok(total / hits as f64)
}

/// Fraction of the top `k` that are positive.
pub fn precision_at_k(relevance: &[bool], k: usize) -> Result<f64> {
    if k == 0 || k > relevance.len() {
        return Err(Error::BadK {
            k,
            n: relevance.len(),
        });
    }
    Ok(relevance[..k].iter().filter(|r| **r).count() as f64 / k as f64)
}

/// Retrieval curve of one category: `fraction[n-1]` is the share of the
/// category found in the top `n`; `auc` is the mean of the curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryCurve {
    pub category: usize,
    pub label: String,
    pub size: usize,
    pub fraction: Vec<f64>,
    pub auc: f64,
}

/// Curves for categories given each ranked item's category. Empty
/// categories are omitted.
pub fn category_curves(ranked_categories: &[usize], labels: &[String]) -> Result<Vec<CategoryCurve>> {
    let n = ranked_categories.len();
    let mut sizes = vec![0usize; labels.len()];
    for &c in ranked_categories {
        if c >= labels.len() {
            return Err(Error::PartitionMismatch(format!(
                "category {c} outside {} categories",
                labels.len()
            )));
        }
        sizes[c] += 1;
    }
    let mut curves: Vec<CategoryCurve> = labels
        .iter()
        .enumerate()
        .map(|(c, label)| CategoryCurve {
            category: c,
            label: label.clone(),
            size: sizes[c],
            fraction: Vec::with_capacity(n),
            auc: 0.0,
        })
        .collect();
    let mut found = vec![0usize; labels.len()];
    for &c in ranked_categories {
        found[c] += 1;
        for curve in curves.iter_mut().filter(|k| k.size > 0) {
            curve.fraction.push(found[curve.category] as f64 / curve.size as f64);
        }
    }
    curves.retain(|c| c.size > 0);
    for c in &mut curves {
        c.auc = c.fraction.iter().sum::<f64>() / n as f64;
    }
    Ok(curves)
}

/// Per-category curves for a ranking over exactly the partition's items.
pub fn preference_auc(r: &RankedRetrieval, partition: &CategoryPartition) -> Result<Vec<CategoryCurve>> {
    if r.len() != partition.items().len() {
        return Err(Error::PartitionMismatch(format!(
            "ranking has {} items, partition {}",
            r.len(),
            partition.items().len()
        )));
    }
    let cats = r
        .order
        .iter()
        .map(|&i| {
            partition
                .category_of(i)
                .ok_or_else(|| Error::PartitionMismatch(format!("item {i} is not in the partition")))
        })
        .collect::<Result<Vec<_>>>()?;
    category_curves(&cats, partition.labels())
}

/// Probability that a random positive scores above a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::CountMismatch {
            embeddings: scores.len(),
            metadata: labels.len(),
        });
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Count, for each tie group, negatives strictly below and within the group.
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let group = &idx[i..j];
        let gp = group.iter().filter(|&&k| labels[k]).count();
        let gn = group.len() - gp;
        wins += gp as f64 * (neg_below as f64 + 0.5 * gn as f64);
        neg_below += gn;
        i = j;
    }
    Ok(wins / (pos as f64 * neg as f64))
}
