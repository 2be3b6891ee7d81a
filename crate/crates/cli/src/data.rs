//! File formats for training: class prompts, labelled image embeddings and
//! trained weights.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stori_core::trainer::{FewShotBatch, PromptWeightsRecord, TrainingConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassPrompts {
    pub label: String,
    pub prompts: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptsFile {
    pub classes: Vec<ClassPrompts>,
}

/// One line of a few-shot JSONL file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Example {
    pub label: String,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedClass {
    pub label: String,
    pub prompts: Vec<PromptWeightsRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsFile {
    pub classes: Vec<TrainedClass>,
    pub training: TrainingConfig,
    pub reweight_start: usize,
    #[serde(default)]
    pub baseline_accuracy: Option<f64>,
    #[serde(default)]
    pub eval_accuracy: Option<f64>,
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::read(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

pub fn read_examples(path: &Path) -> CliResult<Vec<Example>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::read(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::invalid(format!("{} line {}: {e}", path.display(), n + 1)))
        })
        .collect()
}

pub fn write_examples(examples: &[Example]) -> String {
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(e).expect("examples serialize"));
        out.push('\n');
    }
    out
}

/// Keep at most `shots` examples per label, chosen by a seeded shuffle;
/// file order is kept among the survivors. Zero keeps everything.
pub fn sample_shots(examples: Vec<Example>, shots: usize, seed: u64) -> Vec<Example> {
    if shots == 0 {
        return examples;
    }
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        by_label.entry(&e.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for (label, mut rows) in by_label {
        if rows.len() < shots {
            log::warn!("class {label:?} has only {} of {shots} shots", rows.len());
        }
        rows.shuffle(&mut rng);
        rows.truncate(shots);
        keep.extend(rows);
    }
    keep.sort_unstable();
    keep.into_iter().map(|i| examples[i].clone()).collect()
}

/// Stack examples into a batch, mapping labels to class order.
pub fn batch(examples: &[Example], labels: &[String], dim: usize) -> CliResult<FewShotBatch> {
    let mut values = Vec::with_capacity(examples.len() * dim);
    let mut classes = Vec::with_capacity(examples.len());
    for (i, e) in examples.iter().enumerate() {
        let c = labels
            .iter()
            .position(|l| *l == e.label)
            .ok_or_else(|| CliError::invalid(format!("example {} has unknown label {:?}", i + 1, e.label)))?;
        if e.embedding.len() != dim {
            return Err(CliError::invalid(format!(
                "example {} has dimension {}, the model projects to {dim}",
                i + 1,
                e.embedding.len()
            )));
        }
        values.extend_from_slice(&e.embedding);
        classes.push(c);
    }
    let m = Array2::from_shape_vec((examples.len(), dim), values).expect("rows checked");
    Ok(FewShotBatch::new(m, classes)?)
}
