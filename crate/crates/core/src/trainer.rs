//! Few-shot training of per-token log-weights with the encoder frozen.
//!
//! Each prompt carries `θ` with `w = exp(θ)`. Class embeddings are the
//! renormalized mean of the normalized prompt embeddings, logits are cosine
//! similarities over the temperature, and the loss is mean cross-entropy.
//! Gradients reach `θ` through the renormalization, the averaging and the
//! reweighted attention of every prompt.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    backward_weights, encode, encode_with_state, ActivationState, EncoderConfig, EncoderModel,
    Embedding, Scalar,
};
use crate::error::{Error, Result};
use crate::tokenizer::{tokenize, TokenSequence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `lr_e = lr · (1 + cos(π·e/E)) / 2` for epoch `e` of `E`.
    Cosine,
    Constant,
}

impl Schedule {
    pub fn rate(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            Schedule::Cosine => {
                0.5 * base * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
            }
            Schedule::Constant => base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    /// Recorded for provenance; the batch itself fixes the shot count.
    pub shots_per_class: usize,
    pub schedule: Schedule,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 100,
            batch_size: 256,
            temperature: crate::encoder::DEFAULT_TEMPERATURE,
            shots_per_class: 16,
            schedule: Schedule::Cosine,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate {} must be non-negative", self.learning_rate));
        }
        let a = self.optimizer;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return fail(format!("invalid Adam parameters {a:?}"));
        }
        Ok(())
    }
}

/// One prompt and its trainable log-weights (one per position, SOS/EOS held at 0).
#[derive(Debug, Clone)]
pub struct PromptWeights {
    pub seq: TokenSequence,
    pub theta: Vec<f64>,
}

impl PromptWeights {
    pub fn new(seq: TokenSequence) -> Self {
        let theta = vec![0.0; seq.len()];
        Self { seq, theta }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.theta.iter().map(|t| t.exp()).collect()
    }

    pub fn record(&self) -> PromptWeightsRecord {
        PromptWeightsRecord {
            prompt_text: self.seq.source().to_string(),
            token_strings: (0..self.seq.len()).map(|i| self.seq.token_text(i)).collect(),
            theta: self.theta.clone(),
            weights: self.weights(),
        }
    }
}

/// Serialized form of trained weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptWeightsRecord {
    pub prompt_text: String,
    pub token_strings: Vec<String>,
    pub theta: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ClassPromptSet {
    pub label: String,
    pub prompts: Vec<PromptWeights>,
}

impl ClassPromptSet {
    pub fn new(label: impl Into<String>, prompts: &[impl AsRef<str>], vocab: &Vocabulary) -> Result<Self> {
        let label = label.into();
        if prompts.is_empty() {
            return Err(Error::EmptyClass(label));
        }
        let prompts = prompts
            .iter()
            .map(|p| Ok(PromptWeights::new(tokenize(p.as_ref(), vocab)?)))
            .collect::<Result<_>>()?;
        Ok(Self { label, prompts })
    }
}

/// Unit-normalized image embeddings with class labels.
#[derive(Debug, Clone)]
pub struct FewShotBatch {
    embeddings: Array2<f64>,
    labels: Vec<usize>,
}

impl FewShotBatch {
    /// Rows are normalized on construction.
    pub fn new(mut embeddings: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if embeddings.nrows() != labels.len() {
            return Err(Error::CountMismatch {
                embeddings: embeddings.nrows(),
                metadata: labels.len(),
            });
        }
        for (i, mut row) in embeddings.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if !(n.is_finite() && n > 0.0) {
                return Err(Error::NonFinite(format!("image embedding {i}")));
            }
            row /= n;
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            embeddings: self.embeddings.select(ndarray::Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    fn check(&self, classes: usize, dim: usize) -> Result<()> {
        if let Some(&label) = self.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::UnknownLabel { label, classes });
        }
        if self.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: self.dim(),
            });
        }
        Ok(())
    }
}

fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|x| *x * *x).sum::<T>().sqrt()
}

/// Forward results for one class, kept for the reverse pass.
struct ClassPass<T> {
    raw: Vec<Vec<T>>,
    states: Vec<Option<ActivationState<T>>>,
    weights: Vec<Vec<T>>,
    mean: Vec<T>,
    embedding: Vec<T>,
}

fn class_pass<T: Scalar>(
    set: &ClassPromptSet,
    model: &EncoderModel<T>,
    cfg: &EncoderConfig,
    capture: bool,
) -> Result<ClassPass<T>> {
    if set.prompts.is_empty() {
        return Err(Error::EmptyClass(set.label.clone()));
    }
    let encoded: Vec<_> = set
        .prompts
        .par_iter()
        .map(|p| {
            let w = p.weights();
            let (e, state) = if capture {
                let (e, s) = encode_with_state(&p.seq, &w, model, cfg)?;
                (e, Some(s))
            } else {
                (encode(&p.seq, &w, model, cfg)?, None)
            };
            let wt: Vec<T> = w.iter().map(|x| T::from_f64(*x).expect("finite")).collect();
            Ok((e.vector, state, wt))
        })
        .collect::<Result<_>>()?;
    let dim = cfg.projection_dim;
    let count = T::from_usize(encoded.len()).expect("count");
    let mut mean = vec![T::zero(); dim];
    let (mut raw, mut states, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    for (e, state, w) in encoded {
        let n = norm(&e);
        for (m, x) in mean.iter_mut().zip(&e) {
            *m += *x / n / count;
        }
        raw.push(e);
        states.push(state);
        weights.push(w);
    }
    let mn = norm(&mean);
    let embedding = mean.iter().map(|x| *x / mn).collect();
    Ok(ClassPass {
        raw,
        states,
        weights,
        mean,
        embedding,
    })
}

/// Normalize each prompt embedding, average, renormalize.
pub fn class_embedding<T: Scalar>(
    set: &ClassPromptSet,
    model: &EncoderModel<T>,
    cfg: &EncoderConfig,
) -> Result<Embedding<T>> {
    let pass = class_pass(set, model, cfg, false)?;
    Ok(Embedding {
        vector: pass.embedding,
        normalized: true,
    })
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn cross_entropy(batch: &FewShotBatch, classes: &[Vec<f64>], temperature: f64) -> (f64, Array2<f64>) {
    let b = batch.len();
    let mut d_logits = Array2::zeros((b, classes.len()));
    let mut total = 0.0;
    for (i, (x, &y)) in batch.embeddings.rows().into_iter().zip(&batch.labels).enumerate() {
        let logits: Vec<f64> = classes
            .iter()
            .map(|c| c.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>() / temperature)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        total += z.ln() + max - logits[y];
        for (c, l) in logits.iter().enumerate() {
            let p = (l - max).exp() / z;
            d_logits[[i, c]] = (p - if c == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    (total / b as f64, d_logits)
}

/// Mean cross-entropy of the softmax over `cos(class, image) / τ`.
pub fn loss<T: Scalar>(
    batch: &FewShotBatch,
    class_embeddings: &[Embedding<T>],
    temperature: f64,
) -> Result<f64> {
    let classes: Vec<Vec<f64>> = class_embeddings.iter().map(|e| e.to_f64().vector).collect();
    batch.check(classes.len(), classes.first().map_or(batch.dim(), Vec::len))?;
    if batch.is_empty() {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    Ok(cross_entropy(batch, &classes, temperature).0)
}

/// Loss and `∂L/∂θ` for every prompt of every class (all positions,
/// including the frozen SOS/EOS entries).
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub loss: f64,
    pub grads: Vec<Vec<Vec<f64>>>,
}

pub fn grad_logweights<T: Scalar>(
    batch: &FewShotBatch,
    sets: &[ClassPromptSet],
    model: &EncoderModel<T>,
    cfg: &EncoderConfig,
    temperature: f64,
) -> Result<LossGradient> {
    batch.check(sets.len(), cfg.projection_dim)?;
    if batch.is_empty() {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    let passes: Vec<ClassPass<T>> = sets
        .iter()
        .map(|s| class_pass(s, model, cfg, true))
        .collect::<Result<_>>()?;
    let classes: Vec<Vec<f64>> = passes
        .iter()
        .map(|p| p.embedding.iter().copied().map(to_f64).collect())
        .collect();
    let (loss, d_logits) = cross_entropy(batch, &classes, temperature);
    // dL/dc = Σ_b dlogit_bc · x_b / τ
    let d_classes = d_logits.t().dot(&batch.embeddings) / temperature;

    let lit = |x: f64| T::from_f64(x).expect("finite");
    let mut jobs = Vec::new();
    for (c, pass) in passes.iter().enumerate() {
        let dc: Vec<T> = d_classes.row(c).iter().map(|x| lit(*x)).collect();
        let emb = &pass.embedding;
        let proj = emb.iter().zip(&dc).map(|(a, b)| *a * *b).sum::<T>();
        let mn = norm(&pass.mean);
        let count = T::from_usize(pass.raw.len()).expect("count");
        // through the renormalization and the mean
        let du: Vec<T> = dc
            .iter()
            .zip(emb)
            .map(|(g, e)| (*g - *e * proj) / mn / count)
            .collect();
        for p in 0..pass.raw.len() {
            jobs.push((c, p, du.clone()));
        }
    }
    let flat: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|(c, p, du)| {
            let pass = &passes[*c];
            let e = &pass.raw[*p];
            let n = norm(e);
            let u: Vec<T> = e.iter().map(|x| *x / n).collect();
            let proj = u.iter().zip(du).map(|(a, b)| *a * *b).sum::<T>();
            let de: Vec<T> = du.iter().zip(&u).map(|(g, x)| (*g - *x * proj) / n).collect();
            let state = pass.states[*p].as_ref().expect("captured");
            let w = &pass.weights[*p];
            let dw = backward_weights(state, w, &de, model, cfg)?;
            Ok(dw.iter().zip(w).map(|(g, w)| to_f64(*g * *w)).collect())
        })
        .collect::<Result<_>>()?;
    let mut grads: Vec<Vec<Vec<f64>>> = sets.iter().map(|s| Vec::with_capacity(s.prompts.len())).collect();
    for ((c, _, _), g) in jobs.iter().zip(flat) {
        grads[*c].push(g);
    }
    Ok(LossGradient { loss, grads })
}

/// Fraction of the batch whose nearest class embedding is its label.
pub fn accuracy<T: Scalar>(
    batch: &FewShotBatch,
    sets: &[ClassPromptSet],
    model: &EncoderModel<T>,
    cfg: &EncoderConfig,
) -> Result<f64> {
    let classes: Vec<Vec<f64>> = sets
        .iter()
        .map(|s| Ok(class_embedding(s, model, cfg)?.to_f64().vector))
        .collect::<Result<_>>()?;
    batch.check(classes.len(), cfg.projection_dim)?;
    let correct = batch
        .embeddings
        .rows()
        .into_iter()
        .zip(&batch.labels)
        .filter(|(x, &y)| {
            let scores: Vec<f64> = classes
                .iter()
                .map(|c| c.iter().zip(x.iter()).map(|(a, b)| a * b).sum())
                .collect();
            let best = (0..scores.len())
                .fold(0, |best, c| if scores[c] > scores[best] { c } else { best });
            best == y
        })
        .count();
    Ok(correct as f64 / batch.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub sets: Vec<ClassPromptSet>,
    pub history: Vec<EpochRecord>,
    pub eval_accuracy: Option<f64>,
}

/// Loss history as `epoch,lr,loss` CSV.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,loss\n");
    for r in history {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.lr, r.loss));
    }
    out
}

struct Adam {
    m: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<Vec<f64>>>,
    step: i32,
    cfg: AdamConfig,
}

impl Adam {
    fn new(sets: &[ClassPromptSet], cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<Vec<f64>>> = sets
            .iter()
            .map(|s| s.prompts.iter().map(|p| vec![0.0; p.theta.len()]).collect())
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            cfg,
        }
    }

    /// Update content positions only; SOS/EOS stay at `θ = 0`.
    fn update(&mut self, sets: &mut [ClassPromptSet], grads: &[Vec<Vec<f64>>], lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for (c, set) in sets.iter_mut().enumerate() {
            for (p, prompt) in set.prompts.iter_mut().enumerate() {
                let last = prompt.theta.len() - 1;
                for i in 1..last {
                    let g = grads[c][p][i];
                    let m = &mut self.m[c][p][i];
                    let v = &mut self.v[c][p][i];
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    prompt.theta[i] -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Train every prompt's log-weights with Adam under the configured schedule.
///
/// The whole batch is one step when it fits in `batch_size`; otherwise each
/// epoch walks a seeded shuffle in chunks. Epoch loss is the size-weighted
/// mean of the step losses, measured before each update.
pub fn train<T: Scalar>(
    sets: &[ClassPromptSet],
    data: &FewShotBatch,
    model: &EncoderModel<T>,
    enc_cfg: &EncoderConfig,
    train_cfg: &TrainingConfig,
    eval: Option<&FewShotBatch>,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    enc_cfg.validate()?;
    if sets.is_empty() {
        return Err(Error::InvalidConfig("no classes to train".into()));
    }
    data.check(sets.len(), enc_cfg.projection_dim)?;
    for (c, set) in sets.iter().enumerate() {
        if set.prompts.is_empty() {
            return Err(Error::EmptyClass(set.label.clone()));
        }
        if !data.labels.contains(&c) {
            return Err(Error::InvalidConfig(format!(
                "training data has no examples of class {:?}",
                set.label
            )));
        }
    }
    let mut sets = sets.to_vec();
    let mut adam = Adam::new(&sets, train_cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(train_cfg.epochs);
    for epoch in 0..train_cfg.epochs {
        let lr = train_cfg
            .schedule
            .rate(train_cfg.learning_rate, epoch, train_cfg.epochs);
        let chunks: Vec<Vec<usize>> = if data.len() <= train_cfg.batch_size {
            vec![order.clone()]
        } else {
            order.shuffle(&mut rng);
            order.chunks(train_cfg.batch_size).map(<[usize]>::to_vec).collect()
        };
        let mut total = 0.0;
        for rows in chunks {
            let batch = if rows.len() == data.len() {
                data.clone()
            } else {
                data.subset(&rows)
            };
            let step = grad_logweights(&batch, &sets, model, enc_cfg, train_cfg.temperature)?;
            total += step.loss * rows.len() as f64;
            adam.update(&mut sets, &step.grads, lr);
        }
        let loss = total / data.len() as f64;
        log::debug!("epoch {epoch}: lr {lr:.6} loss {loss:.6}");
        history.push(EpochRecord { epoch, lr, loss });
    }
    let eval_accuracy = eval
        .map(|b| accuracy(b, &sets, model, enc_cfg))
        .transpose()?;
    Ok(TrainOutcome {
        sets,
        history,
        eval_accuracy,
    })
}

/// One content token's weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenReport {
    pub position: usize,
    pub token: String,
    pub weight: f64,
    /// Weight divided by the sum over content tokens.
    pub normalized: f64,
}

/// Content-token weights in position order, with their share of the total.
pub fn inspect_weights(seq: &TokenSequence, weights: &[f64]) -> Result<Vec<TokenReport>> {
    if weights.len() != seq.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for a sequence of {} tokens",
            weights.len(),
            seq.len()
        )));
    }
    let content = &weights[1..weights.len() - 1];
    let total: f64 = content.iter().sum();
    Ok(content
        .iter()
        .enumerate()
        .map(|(i, &w)| TokenReport {
            position: i + 1,
            token: seq.token_text(i + 1),
            weight: w,
            normalized: if total > 0.0 { w / total } else { 0.0 },
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use ndarray::array;

    #[test]
    fn two_class_hand_value() {
        let batch = FewShotBatch::new(array![[1.0, 0.0]], vec![0]).unwrap();
        let classes = [
            Embedding::new(vec![1.0f64, 0.0]),
            Embedding::new(vec![0.0f64, 1.0]),
        ];
        let l = loss(&batch, &classes, 1.0).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn equal_logits_give_log_c() {
        let batch = FewShotBatch::new(array![[0.0, 0.0, 1.0]], vec![1]).unwrap();
        let classes: Vec<_> = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]]
            .iter()
            .map(|v| Embedding::new(v.to_vec()))
            .collect();
        let l: f64 = loss(&batch, &classes, 0.01).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logit_gives_zero_loss() {
        let batch = FewShotBatch::new(array![[1.0, 0.0]], vec![0]).unwrap();
        let classes = [Embedding::new(vec![1.0f64, 0.0]), Embedding::new(vec![-1.0f64, 0.0])];
        assert!(loss(&batch, &classes, 1e-3).unwrap() < 1e-300);
    }

    #[test]
    fn class_embedding_averages() {
        let vocab = synth::toy_vocabulary(&["cat", "dog"]);
        let cfg = synth::toy_config(vocab.size(), 2, 16, 2);
        let model = synth::toy_model::<f64>(&cfg, 5);
        let one = ClassPromptSet::new("cat", &["a cat"], &vocab).unwrap();
        let two = ClassPromptSet::new("cat", &["a cat", "a cat"], &vocab).unwrap();
        let e1 = class_embedding(&one, &model, &cfg).unwrap();
        let e2 = class_embedding(&two, &model, &cfg).unwrap();
        let plain = crate::encoder::encode_plain(&one.prompts[0].seq, &model, &cfg)
            .unwrap()
            .normalize();
        for i in 0..e1.len() {
            assert!((e1.vector[i] - plain.vector[i]).abs() < 1e-12);
            assert!((e1.vector[i] - e2.vector[i]).abs() < 1e-12);
        }
        assert!((e1.norm() - 1.0).abs() < 1e-12);
        assert!(matches!(
            ClassPromptSet::new("none", &[] as &[&str], &vocab),
            Err(Error::EmptyClass(_))
        ));
    }

    #[test]
    fn inspect_normalizes_over_content() {
        let vocab = synth::toy_vocabulary(&["cat", "dog"]);
        let seq = tokenize("cat dog", &vocab).unwrap();
        let r = inspect_weights(&seq, &[1.0, 1.0, 3.0, 1.0]).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].token, "cat");
        assert_eq!((r[0].normalized, r[1].normalized), (0.25, 0.75));
        let seq = tokenize("a cat a dog", &vocab).unwrap();
        let r = inspect_weights(&seq, &[1.0; 6]).unwrap();
        assert!(r.iter().all(|t| t.normalized == 0.25));
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        let bad = |f: fn(&mut TrainingConfig)| {
            let mut c = TrainingConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(!bad(|c| c.epochs = 0));
        assert!(bad(|c| c.temperature = 0.0));
        assert!(bad(|c| c.learning_rate = -1.0));
        assert!(bad(|c| c.batch_size = 0));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(Schedule::Cosine.rate(0.1, 0, 10), 0.1);
        assert!((Schedule::Cosine.rate(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert_eq!(Schedule::Constant.rate(0.1, 7, 10), 0.1);
    }
}
