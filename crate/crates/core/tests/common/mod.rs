//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stori_core::encoder::{EncoderConfig, EncoderModel, ReweightMode};
use stori_core::store::{ingest_parts, partition, CategoryPartition, EmbeddingStore};
use stori_core::synth::{self, DirectionSource, FewShotClass, FewShotSpec, PlantedStoreSpec};
use stori_core::tokenizer::{tokenize, SpanEntry, SpanWeightSpec, TokenSequence, Vocabulary};
use stori_core::trainer::{class_embedding, grad_logweights, loss, ClassPromptSet, FewShotBatch};

// ---- weight gradients ----

pub const GRAD_WORDS: [&str; 8] = ["photo", "cat", "dog", "red", "small", "bird", "car", "of"];

pub struct GradInstance {
    pub model: EncoderModel<f64>,
    pub cfg: EncoderConfig,
    pub sets: Vec<ClassPromptSet>,
    pub batch: FewShotBatch,
    pub tau: f64,
}

/// A random toy encoder, reweighting setup, prompt sets with random
/// log-weights and a random image batch.
pub fn grad_instance(seed: u64) -> GradInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = synth::toy_vocabulary(&GRAD_WORDS);
    let blocks = rng.gen_range(1..=3);
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    let mode = if rng.gen_bool(0.5) {
        ReweightMode::FromBlockOnward
    } else {
        ReweightMode::SingleBlock
    };
    let cfg = synth::toy_config(vocab.size(), blocks, 16, heads)
        .with_reweighting(rng.gen_range(1..=blocks), mode);
    let model = synth::toy_model::<f64>(&cfg, seed);
    let classes = rng.gen_range(2..=3);
    let mut sets = Vec::new();
    for c in 0..classes {
        let prompts: Vec<String> = (0..rng.gen_range(1..=2))
            .map(|_| {
                (0..rng.gen_range(1..=4))
                    .map(|_| GRAD_WORDS[rng.gen_range(0..GRAD_WORDS.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let mut set = ClassPromptSet::new(format!("c{c}"), &prompts, &vocab).unwrap();
        for p in &mut set.prompts {
            let last = p.theta.len() - 1;
            for t in &mut p.theta[1..last] {
                *t = 0.5 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        sets.push(set);
    }
    let b = rng.gen_range(2..=5);
    let x = Array2::from_shape_simple_fn((b, cfg.projection_dim), || rng.sample(StandardNormal));
    let labels = (0..b).map(|_| rng.gen_range(0..classes)).collect();
    let tau = [0.01, 0.07, 1.0][rng.gen_range(0..3)];
    GradInstance {
        model,
        cfg,
        sets,
        batch: FewShotBatch::new(x, labels).unwrap(),
        tau,
    }
}

fn eval_loss(inst: &GradInstance, sets: &[ClassPromptSet]) -> f64 {
    let classes: Vec<_> = sets
        .iter()
        .map(|s| class_embedding(s, &inst.model, &inst.cfg).unwrap())
        .collect();
    loss(&inst.batch, &classes, inst.tau).unwrap()
}

/// Relative error ‖g − fd‖ / ‖fd‖ over every log-weight of the instance
/// (central differences, step 1e-4), plus the largest per-prompt |Σ_i g_i|.
pub fn gradient_check(inst: &GradInstance) -> (f64, f64) {
    let h = 1e-4;
    let g = grad_logweights(&inst.batch, &inst.sets, &inst.model, &inst.cfg, inst.tau).unwrap();
    let (mut num, mut den, mut sum_err) = (0.0f64, 0.0f64, 0.0f64);
    for (c, set) in inst.sets.iter().enumerate() {
        for (p, prompt) in set.prompts.iter().enumerate() {
            sum_err = sum_err.max(g.grads[c][p].iter().sum::<f64>().abs());
            for i in 0..prompt.theta.len() {
                let mut plus = inst.sets.clone();
                plus[c].prompts[p].theta[i] += h;
                let mut minus = inst.sets.clone();
                minus[c].prompts[p].theta[i] -= h;
                let fd = (eval_loss(inst, &plus) - eval_loss(inst, &minus)) / (2.0 * h);
                num += (g.grads[c][p][i] - fd).powi(2);
                den += fd * fd;
            }
        }
    }
    (num.sqrt() / den.sqrt().max(1e-300), sum_err)
}

// ---- brute-force metric oracles ----

/// Mean over positives of (positives ranked at or above it) / (its rank).
pub fn ap_brute(relevance: &[bool]) -> f64 {
    let ranks: Vec<usize> = (0..relevance.len()).filter(|&i| relevance[i]).collect();
    let per: Vec<f64> = ranks
        .iter()
        .map(|&r| ranks.iter().filter(|&&q| q <= r).count() as f64 / (r + 1) as f64)
        .collect();
    per.iter().sum::<f64>() / per.len() as f64
}

pub fn pk_brute(relevance: &[bool], k: usize) -> f64 {
    let mut hits = 0;
    for (i, r) in relevance.iter().enumerate() {
        if i < k && *r {
            hits += 1;
        }
    }
    hits as f64 / k as f64
}

/// Over all positive/negative pairs: 1 for a win, 1/2 for a tie.
pub fn auroc_brute(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut total, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                total += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    total / pairs
}

/// Category AUC from ranks: an item at 1-based rank r is counted in the
/// top-n curve for the N − r + 1 values n ≥ r.
pub fn category_auc_brute(ranked_categories: &[usize], category: usize) -> Option<f64> {
    let n = ranked_categories.len() as f64;
    let ranks: Vec<f64> = ranked_categories
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == category)
        .map(|(i, _)| (i + 1) as f64)
        .collect();
    if ranks.is_empty() {
        return None;
    }
    let m = ranks.len() as f64;
    Some(ranks.iter().map(|r| n - r + 1.0).sum::<f64>() / (n * m))
}

// ---- planted store ----

pub const PLANTED_PROMPT: &str = "a photo of a woman with blonde hair, wearing eyeglasses";
pub const PLANTED_WORDS: [&str; 8] = [
    "photo", "of", "woman", "with", "blonde", "hair", "wearing", "eyeglasses",
];
pub const ATTRIBUTES: [(&str, &str); 3] = [
    ("female", "woman"),
    ("blonde", "with blonde hair"),
    ("eyeglasses", "wearing eyeglasses"),
];
pub const SWEPT_SPAN: &str = "with blonde hair";
/// +female, +blonde, -eyeglasses
pub const TARGET_CATEGORY: usize = 0b110;
pub const DEFAULT_START: usize = 7;

pub struct Planted {
    pub vocab: Vocabulary,
    pub cfg: EncoderConfig,
    pub model: EncoderModel<f64>,
    pub store: EmbeddingStore,
    pub partition: CategoryPartition,
    pub positives: BTreeSet<usize>,
    pub seq: TokenSequence,
    pub spans: SpanWeightSpec,
}

pub fn planted_config(vocab: &Vocabulary) -> EncoderConfig {
    synth::toy_config(vocab.size(), 12, 64, 4).with_reweighting(DEFAULT_START, ReweightMode::FromBlockOnward)
}

pub fn planted() -> Planted {
    let vocab = synth::toy_vocabulary(&PLANTED_WORDS);
    let cfg = planted_config(&vocab);
    let model: EncoderModel<f64> = synth::toy_model(&cfg, 0);
    let spec = PlantedStoreSpec {
        prompt: PLANTED_PROMPT.into(),
        attributes: ATTRIBUTES.iter().map(|(a, p)| (a.to_string(), p.to_string())).collect(),
        items_per_category: 100,
        strength: 1.0,
        noise: 2.0,
        direction: DirectionSource::Silencing,
        seed: 7,
    };
    let built = synth::planted_store(&spec, &vocab, &model, &cfg).unwrap();
    let (store, table, _) = ingest_parts(built.embeddings, built.records, None).unwrap();
    let names: Vec<&str> = ATTRIBUTES.iter().map(|a| a.0).collect();
    let partition = partition(&table, &names, None, 0, false).unwrap();
    let positives = partition.with_attribute("blonde").unwrap().into_iter().collect();
    let seq = tokenize(PLANTED_PROMPT, &vocab).unwrap();
    let spans = SpanWeightSpec::default().with(SpanEntry::text(SWEPT_SPAN, 1.0));
    Planted {
        vocab,
        cfg,
        model,
        store,
        partition,
        positives,
        seq,
        spans,
    }
}

// ---- few-shot task ----

pub const FEW_SHOT_WORDS: [&str; 5] = ["photo", "of", "striped", "spotted", "cat"];
pub const RARE_SUFFIX: &str = " q j x z v";

pub fn few_shot_spec(seed: u64) -> FewShotSpec {
    let class = |label: &str| FewShotClass {
        label: label.into(),
        prompts: vec![format!("a photo of a {label} cat")],
        discriminative: Some(label.into()),
    };
    FewShotSpec {
        classes: [class("striped"), class("spotted")],
        shots_per_class: 16,
        eval_per_class: 500,
        shared: 1.0,
        signal: 0.2,
        noise: 1.0,
        seed,
    }
}
