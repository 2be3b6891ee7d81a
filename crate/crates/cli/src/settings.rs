//! Tunables shared by every command. Each resolves from the command line,
//! then the TOML config file, then the built-in default.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use stori_core::encoder::{ReweightMode, DEFAULT_REWEIGHT_START, DEFAULT_TEMPERATURE};
use stori_core::trainer::TrainingConfig;

use crate::error::{CliError, CliResult};

pub const DATA_DIR_VAR: &str = "STORI_DATA_DIR";

/// Flags that can also be set in the config file, under the same names
/// with dashes replaced by underscores.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    /// Text-tower checkpoint (safetensors).
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Name map for the checkpoint: a builtin name or a JSON file. Detected when absent.
    #[arg(long, global = true)]
    pub layout: Option<String>,
    /// BPE vocabulary JSON. Defaults to vocab.json beside the model, then the bundled CLIP vocabulary.
    #[arg(long, global = true)]
    pub vocab: Option<PathBuf>,
    /// BPE merges file, paired with --vocab.
    #[arg(long, global = true)]
    pub merges: Option<PathBuf>,
    /// Image-embedding container (safetensors, tensor "embeddings").
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    /// Store metadata JSONL: {"id", "attributes": {name: bool}, "thumbnail"?} per line.
    #[arg(long, global = true)]
    pub metadata: Option<PathBuf>,
    /// Attributes that define the category partition, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub attrs: Option<Vec<String>>,
    /// Span weights to sweep, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// First reweighted block, 1-based; one past the last block disables reweighting.
    #[arg(long, global = true)]
    pub reweight_start: Option<usize>,
    /// from-block-onward or single-block.
    #[arg(long, global = true)]
    pub reweight_mode: Option<ReweightMode>,
    /// Training images per class; 0 keeps them all.
    #[arg(long, global = true)]
    pub shots: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Softmax temperature of the training loss.
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Ranked items to print or return.
    #[arg(long, global = true)]
    pub top_k: Option<usize>,
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    #[arg(long, global = true)]
    pub warmup: Option<usize>,
    #[arg(long, global = true)]
    pub serve_addr: Option<SocketAddr>,
    /// Directory of static assets for the service.
    #[arg(long, global = true)]
    pub static_dir: Option<PathBuf>,
    /// Where outputs and the run manifest go.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
}

/// Fully resolved tunables, recorded in every manifest.
#[derive(Debug, Clone, Serialize)]
pub struct Settings {
    pub model: Option<PathBuf>,
    pub layout: Option<String>,
    pub vocab: Option<PathBuf>,
    pub merges: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    pub attrs: Vec<String>,
    pub grid: Vec<f64>,
    pub reweight_start: usize,
    pub reweight_mode: ReweightMode,
    pub shots: usize,
    pub epochs: usize,
    pub lr: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub top_k: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub serve_addr: SocketAddr,
    pub static_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub data_dir: Option<PathBuf>,
    /// Where each value came from: "flag", "config" or "default".
    pub sources: BTreeMap<String, &'static str>,
}

pub fn load_config(path: &Path) -> CliResult<Overrides> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::read(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

/// Make the config file's relative paths relative to the file itself.
pub fn rebase(o: &mut Overrides, config_dir: &Path) {
    let base = config_dir.canonicalize().unwrap_or_else(|_| config_dir.to_path_buf());
    for p in [
        &mut o.model,
        &mut o.vocab,
        &mut o.merges,
        &mut o.store,
        &mut o.metadata,
        &mut o.static_dir,
        &mut o.out_dir,
    ]
    .into_iter()
    .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

impl Settings {
    pub fn resolve(flags: &Overrides, file: &Overrides, data_dir: Option<PathBuf>) -> Settings {
        let mut sources = BTreeMap::new();
        macro_rules! pick {
            ($field:ident) => {{
                let (value, source) = match (&flags.$field, &file.$field) {
                    (Some(v), _) => (Some(v.clone()), "flag"),
                    (None, Some(v)) => (Some(v.clone()), "config"),
                    (None, None) => (None, "default"),
                };
                sources.insert(stringify!($field).to_string(), source);
                value
            }};
            ($field:ident, $default:expr) => {
                pick!($field).unwrap_or_else(|| $default)
            };
        }
        let training = TrainingConfig::default();
        Settings {
            model: pick!(model),
            layout: pick!(layout),
            vocab: pick!(vocab),
            merges: pick!(merges),
            store: pick!(store),
            metadata: pick!(metadata),
            attrs: pick!(attrs, Vec::new()),
            grid: pick!(grid, vec![0.0, 0.5, 1.0, 1.5]),
            reweight_start: pick!(reweight_start, DEFAULT_REWEIGHT_START),
            reweight_mode: pick!(reweight_mode, ReweightMode::FromBlockOnward),
            shots: pick!(shots, training.shots_per_class),
            epochs: pick!(epochs, training.epochs),
            lr: pick!(lr, training.learning_rate),
            tau: pick!(tau, DEFAULT_TEMPERATURE),
            batch_size: pick!(batch_size, training.batch_size),
            seed: pick!(seed, training.seed),
            top_k: pick!(top_k, stori_service::DEFAULT_TOP_K),
            iterations: pick!(iterations, 1000),
            warmup: pick!(warmup, 100),
            serve_addr: pick!(serve_addr, SocketAddr::from(([127, 0, 0, 1], 8080))),
            static_dir: pick!(static_dir),
            out_dir: pick!(out_dir, PathBuf::from("stori-out")),
            data_dir,
            sources,
        }
    }

    /// Relative input paths are taken from the data directory when one is set.
    pub fn input(&self, path: &Path) -> PathBuf {
        match &self.data_dir {
            Some(root) if path.is_relative() => root.join(path),
            _ => path.to_path_buf(),
        }
    }

    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            temperature: self.tau,
            shots_per_class: self.shots,
            seed: self.seed,
            ..TrainingConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_config_beat_defaults() {
        let flags = Overrides {
            epochs: Some(3),
            ..Overrides::default()
        };
        let file: Overrides = toml::from_str("epochs = 9\nlr = 0.5\nattrs = [\"a\", \"b\"]\nreweight_mode = \"single_block\"").unwrap();
        let s = Settings::resolve(&flags, &file, None);
        assert_eq!(s.epochs, 3);
        assert_eq!(s.lr, 0.5);
        assert_eq!(s.attrs, ["a", "b"]);
        assert_eq!(s.reweight_mode, ReweightMode::SingleBlock);
        assert_eq!(s.reweight_start, 7);
        assert_eq!(s.sources["epochs"], "flag");
        assert_eq!(s.sources["lr"], "config");
        assert_eq!(s.sources["reweight_start"], "default");
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(toml::from_str::<Overrides>("epoch = 3").is_err());
    }

    #[test]
    fn inputs_resolve_under_the_data_dir() {
        let s = Settings::resolve(&Overrides::default(), &Overrides::default(), Some("/data".into()));
        assert_eq!(s.input(Path::new("m.safetensors")), Path::new("/data/m.safetensors"));
        assert_eq!(s.input(Path::new("/abs/m")), Path::new("/abs/m"));
    }
}
