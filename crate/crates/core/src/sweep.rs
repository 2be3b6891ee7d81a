//! Retrieval metrics across a grid of span weights.

use std::collections::BTreeSet;
use std::fmt::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode, encode_prompt_weighting, EncoderConfig, EncoderModel, Scalar};
use crate::error::{Error, Result};
use crate::metrics::{average_precision, precision_at_k, preference_auc, rank, CategoryCurve, RankedRetrieval};
use crate::store::{CategoryPartition, EmbeddingStore};
use crate::tokenizer::{map_span_weights, SpanWeightSpec, TokenSequence, TokenWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum SweepMethod {
    /// Reweighted attention as configured in the encoder.
    Reweight,
    /// Blend with the empty prompt at the input of `inject_block`.
    PromptWeighting { inject_block: usize },
}

impl SweepMethod {
    pub fn name(&self) -> &'static str {
        match self {
            SweepMethod::Reweight => "reweight",
            SweepMethod::PromptWeighting { .. } => "prompt_weighting",
        }
    }
}

/// Token weights with every entry of `spans` set to `weight`.
pub fn swept_weights(seq: &TokenSequence, spans: &SpanWeightSpec, weight: f64) -> Result<TokenWeights> {
    let mut spec = spans.clone();
    for e in &mut spec.entries {
        e.weight = weight;
    }
    map_span_weights(seq, &spec)
}

/// Everything one ranking produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSnapshot {
    pub ranking: RankedRetrieval,
    pub ap: f64,
    pub precision_at_k: f64,
    pub curves: Vec<CategoryCurve>,
}

/// Rank the partition's items for `query` and score the ranking.
pub fn evaluate_query(
    query: &[f64],
    store: &EmbeddingStore,
    partition: &CategoryPartition,
    positives: &BTreeSet<usize>,
    k: usize,
) -> Result<RetrievalSnapshot> {
    let ranking = rank(query, store, Some(partition.items()))?;
    let rel = ranking.relevance(positives);
    Ok(RetrievalSnapshot {
        ap: average_precision(&rel)?,
        precision_at_k: precision_at_k(&rel, k)?,
        curves: preference_auc(&ranking, partition)?,
        ranking,
    })
}

/// A weighted prompt's ranking and, when a partition is given, its curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub ranking: RankedRetrieval,
    pub curves: Vec<CategoryCurve>,
}

/// Encode `seq` under `weights` and rank the store: the partition's items
/// when one is given, every item otherwise. The CLI and the service both go
/// through here, so equal inputs give bit-identical rankings.
pub fn retrieve<T: Scalar>(
    seq: &TokenSequence,
    weights: &TokenWeights,
    model: &EncoderModel<T>,
    cfg: &EncoderConfig,
    store: &EmbeddingStore,
    partition: Option<&CategoryPartition>,
) -> Result<Retrieval> {
    let query = encode(seq, weights.values(), model, cfg)?.to_f64().vector;
    let ranking = rank(&query, store, partition.map(|p| p.items()))?;
    let curves = match partition {
        Some(p) => preference_auc(&ranking, p)?,
        None => Vec::new(),
    };
    Ok(Retrieval { ranking, curves })
}

/// Inputs shared by every grid point.
#[derive(Debug, Clone, Copy)]
pub struct SweepSetup<'a, T> {
    pub seq: &'a TokenSequence,
    pub spans: &'a SpanWeightSpec,
    pub store: &'a EmbeddingStore,
    pub partition: &'a CategoryPartition,
    pub positives: &'a BTreeSet<usize>,
    pub k: usize,
    pub model: &'a EncoderModel<T>,
    pub cfg: &'a EncoderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub weight: f64,
    pub method: String,
    pub ap: f64,
    pub precision_at_k: f64,
    pub curves: Vec<CategoryCurve>,
}

/// Encode once per grid value and evaluate the ranking.
pub fn weight_sweep<T: Scalar>(
    setup: &SweepSetup<'_, T>,
    grid: &[f64],
    method: SweepMethod,
) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if setup.spans.entries.is_empty() {
        return Err(Error::InvalidConfig("weight sweep needs at least one span entry".into()));
    }
    grid.par_iter()
        .map(|&w| {
            let weights = swept_weights(setup.seq, setup.spans, w)?;
            let e = match method {
                SweepMethod::Reweight => encode(setup.seq, weights.values(), setup.model, setup.cfg)?,
                SweepMethod::PromptWeighting { inject_block } => encode_prompt_weighting(
                    setup.seq,
                    weights.values(),
                    setup.model,
                    setup.cfg,
                    inject_block,
                )?,
            };
            let snap = evaluate_query(
                &e.to_f64().vector,
                setup.store,
                setup.partition,
                setup.positives,
                setup.k,
            )?;
            Ok(SweepPoint {
                weight: w,
                method: method.name().to_string(),
                ap: snap.ap,
                precision_at_k: snap.precision_at_k,
                curves: snap.curves,
            })
        })
        .collect()
}

/// Long format: one row per grid point and category.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("weight,method,ap,precision_at_k,category,label,auc\n");
    for p in points {
        for c in &p.curves {
            let _ = writeln!(
                out,
                "{},{},{},{},{},\"{}\",{}",
                p.weight, p.method, p.ap, p.precision_at_k, c.category, c.label, c.auc
            );
        }
    }
    out
}

/// Curves in long format: `weight,method,category,label,n,fraction`.
pub fn curves_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("weight,method,category,label,n,fraction\n");
    for p in points {
        for c in &p.curves {
            for (i, f) in c.fraction.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},\"{}\",{},{}",
                    p.weight,
                    p.method,
                    c.category,
                    c.label,
                    i + 1,
                    f
                );
            }
        }
    }
    out
}
