//! Small vocabularies, random-init models and synthetic datasets for tests,
//! benchmarks and the CLI `fixture` command.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use serde::{Deserialize, Serialize};

use crate::encoder::{
    encode, encode_plain, Activation, Block, EncoderConfig, EncoderModel, LayerNorm, Linear,
    ReweightMode, Scalar, DEFAULT_TEMPERATURE,
};
use crate::error::{Error, Result};
use crate::store::ItemRecord;
use crate::trainer::{ClassPromptSet, FewShotBatch};
use crate::tokenizer::{
    bytes_to_unicode, map_span_weights, tokenize, SpanEntry, SpanWeightSpec, Vocabulary, EOS_TOKEN,
    SOS_TOKEN,
};

/// Byte-level vocabulary plus one whole-word token per entry of `words`,
/// reachable through a chain of prefix merges.
pub fn toy_vocabulary(words: &[&str]) -> Vocabulary {
    let table = bytes_to_unicode();
    let mut token_to_id: HashMap<String, u32> = HashMap::new();
    let add = |t: String, map: &mut HashMap<String, u32>| {
        let n = map.len() as u32;
        map.entry(t).or_insert(n);
    };
    for c in table {
        add(c.to_string(), &mut token_to_id);
    }
    for c in table {
        add(format!("{c}</w>"), &mut token_to_id);
    }
    let mut merges: Vec<(String, String)> = Vec::new();
    for word in words {
        let symbols: Vec<String> = word
            .to_lowercase()
            .bytes()
            .map(|b| table[b as usize].to_string())
            .collect();
        let mut prefix = symbols[0].clone();
        for (i, s) in symbols.iter().enumerate().skip(1) {
            let right = if i + 1 == symbols.len() {
                format!("{s}</w>")
            } else {
                s.clone()
            };
            let pair = (prefix.clone(), right.clone());
            prefix = format!("{prefix}{right}");
            if !merges.contains(&pair) {
                merges.push(pair);
            }
            add(prefix.clone(), &mut token_to_id);
        }
    }
    add(SOS_TOKEN.to_string(), &mut token_to_id);
    add(EOS_TOKEN.to_string(), &mut token_to_id);
    Vocabulary::from_parts(token_to_id, merges, 77).expect("toy vocabulary is valid")
}

/// A small encoder configuration reweighting from block 1 onward.
pub fn toy_config(vocab_size: usize, num_blocks: usize, dim: usize, heads: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size,
        num_blocks,
        model_dim: dim,
        num_heads: heads,
        mlp_dim: 4 * dim,
        projection_dim: dim,
        context_length: 77,
        activation: Activation::QuickGelu,
        layer_norm_eps: 1e-5,
        reweight_start_block: 1,
        reweight_mode: ReweightMode::FromBlockOnward,
        temperature: DEFAULT_TEMPERATURE,
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn matrix<T: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Array2<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        Array2::from_shape_simple_fn((rows, cols), || {
            T::from_f64(dist.sample(&mut self.rng)).expect("finite")
        })
    }

    fn vector<T: Scalar>(&mut self, len: usize, mean: f64, std: f64) -> Array1<T> {
        let dist = Normal::new(mean, std).expect("positive std");
        Array1::from_shape_simple_fn(len, || T::from_f64(dist.sample(&mut self.rng)).expect("finite"))
    }

    fn linear<T: Scalar>(&mut self, rows: usize, cols: usize) -> Linear<T> {
        Linear {
            weight: self.matrix(rows, cols, (rows as f64).powf(-0.5)),
            bias: self.vector(cols, 0.0, 0.02),
        }
    }

    fn layer_norm<T: Scalar>(&mut self, dim: usize) -> LayerNorm<T> {
        LayerNorm {
            gamma: self.vector(dim, 1.0, 0.1),
            beta: self.vector(dim, 0.0, 0.02),
        }
    }
}

/// Random-init model with CLIP-like scales, deterministic in `seed`.
pub fn toy_model<T: Scalar>(cfg: &EncoderConfig, seed: u64) -> EncoderModel<T> {
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let d = cfg.model_dim;
    let token_embedding = init.matrix(cfg.vocab_size, d, 0.02);
    let positional_embedding = init.matrix(cfg.context_length, d, 0.01);
    let blocks = (0..cfg.num_blocks)
        .map(|_| Block {
            ln_1: init.layer_norm(d),
            q: init.linear(d, d),
            k: init.linear(d, d),
            v: init.linear(d, d),
            out: init.linear(d, d),
            ln_2: init.layer_norm(d),
            fc1: init.linear(d, cfg.mlp_dim),
            fc2: init.linear(cfg.mlp_dim, d),
        })
        .collect();
    EncoderModel {
        token_embedding,
        positional_embedding,
        blocks,
        final_ln: init.layer_norm(d),
        text_projection: init.matrix(d, cfg.projection_dim, (d as f64).powf(-0.5)),
    }
}

/// How an attribute's image-space direction is derived from the encoder.
/// Either way the direction is then made orthogonal to the embedding without
/// the attribute and to the directions before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionSource {
    /// Plain embedding of the prompt minus that of the prompt with the
    /// attribute phrase deleted from the text.
    Deletion,
    /// Embedding of the prompt minus the embedding with the phrase at weight 0.
    Silencing,
}

/// Recipe for a store whose items carry planted attribute directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedStoreSpec {
    pub prompt: String,
    /// `(attribute name, phrase in the prompt)`.
    pub attributes: Vec<(String, String)>,
    pub items_per_category: usize,
    /// Length of the attribute part of each item before normalization.
    pub strength: f64,
    /// Norm of the per-item noise before normalization.
    pub noise: f64,
    pub direction: DirectionSource,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct PlantedStore {
    pub embeddings: Array2<f32>,
    pub records: Vec<ItemRecord>,
    /// Orthonormalized attribute directions, in attribute order.
    pub directions: Vec<Vec<f64>>,
}

fn gram_schmidt(vectors: &mut [Vec<f64>], against: &[Vec<f64>]) -> Result<()> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for a in against {
        let mut u = a.clone();
        for b in &basis {
            let p = dot(&u, b);
            u.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = dot(&u, &u).sqrt();
        if n > 1e-12 {
            basis.push(u.into_iter().map(|x| x / n).collect());
        }
    }
    for v in vectors.iter_mut() {
        // twice, so rounding leaves no measurable component
        for _ in 0..2 {
            for b in &basis {
                let p = dot(v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = dot(v, v).sqrt();
        if !(n > 1e-12) {
            return Err(Error::InvalidConfig("attribute directions are linearly dependent".into()));
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v.clone());
    }
    Ok(())
}

fn remove_phrase(prompt: &str, phrase: &str) -> Result<String> {
    let count = prompt.matches(phrase).count();
    if count != 1 {
        return Err(Error::SpanNotFound(phrase.to_string()));
    }
    Ok(prompt.replacen(phrase, " ", 1).split_whitespace().collect::<Vec<_>>().join(" "))
}

/// Build a planted store. Every category gets `items_per_category` items;
/// item slot `j` of every category shares one noise draw, orthogonal to all
/// attribute directions, so categories differ only by their attribute signs.
pub fn planted_store<T: Scalar>(
    spec: &PlantedStoreSpec,
    vocab: &Vocabulary,
    model: &EncoderModel<T>,
    cfg: &EncoderConfig,
) -> Result<PlantedStore> {
    let seq = tokenize(&spec.prompt, vocab)?;
    let full = encode_plain(&seq, model, cfg)?.to_f64().vector;
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(spec.attributes.len());
    for (_, phrase) in &spec.attributes {
        let (mut dir, neutral) = match spec.direction {
            DirectionSource::Deletion => {
                let reduced = tokenize(&remove_phrase(&spec.prompt, phrase)?, vocab)?;
                let without = encode_plain(&reduced, model, cfg)?.to_f64().vector;
                (full.iter().zip(&without).map(|(a, b)| a - b).collect::<Vec<f64>>(), without)
            }
            DirectionSource::Silencing => {
                let spans = SpanWeightSpec::default().with(SpanEntry::text(phrase.clone(), 0.0));
                let w = map_span_weights(&seq, &spans)?;
                let silent = encode(&seq, w.values(), model, cfg)?.to_f64().vector;
                (full.iter().zip(&silent).map(|(a, b)| a - b).collect::<Vec<f64>>(), silent)
            }
        };
        // the text without the attribute should not prefer either side of it
        let mut against = vec![neutral];
        against.extend(directions.iter().cloned());
        gram_schmidt(std::slice::from_mut(&mut dir), &against)?;
        directions.push(dir);
    }

    let k = spec.attributes.len();
    let dim = cfg.projection_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let mut noise: Vec<Vec<f64>> = (0..spec.items_per_category)
        .map(|_| (0..dim).map(|_| gauss.sample(&mut rng)).collect())
        .collect();
    for v in &mut noise {
        for d in &directions {
            let p: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(d).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x *= spec.noise / n);
    }
    let names: Vec<String> = spec.attributes.iter().map(|a| a.0.clone()).collect();
    let per_dir = spec.strength / (k as f64).sqrt();
    let mut embeddings = Array2::zeros(((1 << k) * spec.items_per_category, dim));
    let mut records = Vec::new();
    for c in 0..(1usize << k) {
        let present: Vec<bool> = (0..k).map(|j| c & (1 << (k - 1 - j)) != 0).collect();
        for (j, xi) in noise.iter().enumerate() {
            let mut x = xi.clone();
            for (d, &on) in directions.iter().zip(&present) {
                let s = if on { per_dir } else { -per_dir };
                x.iter_mut().zip(d).for_each(|(v, u)| *v += s * u);
            }
            let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let row = records.len();
            for (slot, v) in embeddings.row_mut(row).iter_mut().zip(&x) {
                *slot = (v / n) as f32;
            }
            records.push(ItemRecord {
                id: format!("c{c}-{j:04}"),
                attributes: names.iter().cloned().zip(present.iter().copied()).collect(),
                thumbnail: None,
            });
        }
    }
    Ok(PlantedStore {
        embeddings,
        records,
        directions,
    })
}

/// Recipe for a two-class few-shot task separated along one direction.
///
/// Prompts of a class may name a discriminative phrase. The class direction
/// `u` is the discriminative contribution (prompt embedding minus the
/// embedding with the phrase at weight 0, summed over prompts) of the first
/// class minus that of the second, made orthogonal
/// to `m`, the mean normalized class text embedding. Image embeddings are
/// `shared·m ± signal·u + noise·ξ`, normalized, with `+` for the first class
/// and `ξ` isotropic with expected norm 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSpec {
    pub classes: [FewShotClass; 2],
    pub shots_per_class: usize,
    pub eval_per_class: usize,
    pub shared: f64,
    pub signal: f64,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotClass {
    pub label: String,
    pub prompts: Vec<String>,
    /// Must occur exactly once in every prompt of the class.
    pub discriminative: Option<String>,
}

#[derive(Debug, Clone)]
pub struct FewShotTask {
    pub train: FewShotBatch,
    pub eval: FewShotBatch,
    /// Unit direction separating the first class from the second.
    pub direction: Vec<f64>,
}

impl FewShotSpec {
    /// Prompt sets for the trainer, each prompt followed by `suffix`.
    pub fn prompt_sets(&self, vocab: &Vocabulary, suffix: &str) -> Result<Vec<ClassPromptSet>> {
        self.classes
            .iter()
            .map(|c| {
                let texts: Vec<String> = c.prompts.iter().map(|p| format!("{p}{suffix}")).collect();
                ClassPromptSet::new(c.label.clone(), &texts, vocab)
            })
            .collect()
    }
}

/// Sample the training shots and the held-out set of a few-shot task.
pub fn few_shot_task<T: Scalar>(
    spec: &FewShotSpec,
    vocab: &Vocabulary,
    model: &EncoderModel<T>,
    cfg: &EncoderConfig,
) -> Result<FewShotTask> {
    let dim = cfg.projection_dim;
    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let mut mean = vec![0.0; dim];
    let mut direction = vec![0.0; dim];
    for (class, sign) in spec.classes.iter().zip([1.0, -1.0]) {
        if class.prompts.is_empty() {
            return Err(Error::EmptyClass(class.label.clone()));
        }
        let mut text = vec![0.0; dim];
        for prompt in &class.prompts {
            let seq = tokenize(prompt, vocab)?;
            let full = encode_plain(&seq, model, cfg)?.to_f64().vector;
            if let Some(phrase) = &class.discriminative {
                let spans = SpanWeightSpec::default().with(SpanEntry::text(phrase.clone(), 0.0));
                let w = map_span_weights(&seq, &spans)?;
                let silent = encode(&seq, w.values(), model, cfg)?.to_f64().vector;
                for i in 0..dim {
                    direction[i] += sign * (full[i] - silent[i]);
                }
            }
            for (t, x) in text.iter_mut().zip(unit(full)) {
                *t += x;
            }
        }
        for (m, t) in mean.iter_mut().zip(unit(text)) {
            *m += t;
        }
    }
    let mean = unit(mean);
    gram_schmidt(std::slice::from_mut(&mut direction), std::slice::from_ref(&mean))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gauss = Normal::new(0.0, (dim as f64).powf(-0.5)).expect("positive scale");
    let mut sample = |per_class: usize| {
        let mut rows = Array2::zeros((2 * per_class, dim));
        let mut labels = Vec::with_capacity(2 * per_class);
        for (c, sign) in [(0, 1.0), (1, -1.0)] {
            for _ in 0..per_class {
                let r = labels.len();
                for (i, slot) in rows.row_mut(r).iter_mut().enumerate() {
                    *slot = spec.shared * mean[i]
                        + sign * spec.signal * direction[i]
                        + spec.noise * gauss.sample(&mut rng);
                }
                labels.push(c);
            }
        }
        FewShotBatch::new(rows, labels)
    };
    let train = sample(spec.shots_per_class)?;
    let eval = sample(spec.eval_per_class)?;
    Ok(FewShotTask {
        train,
        eval,
        direction,
    })
}
