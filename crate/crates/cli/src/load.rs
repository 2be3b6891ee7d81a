//! Loading models, vocabularies, stores and span specs from settings.

use std::path::{Path, PathBuf};

use stori_core::encoder::{EncoderConfig, EncoderModel};
use stori_core::model_io::{load_model, NameMap};
use stori_core::tokenizer::{SpanEntry, SpanWeightSpec, Vocabulary};
use stori_service::StoreHandle;

use crate::error::{CliError, CliResult};
use crate::manifest::Run;
use crate::settings::Settings;
use crate::PromptArgs;

const CLIP_VOCAB: &str = include_str!("../../core/assets/clip/vocab.json");
const CLIP_MERGES: &str = include_str!("../../core/assets/clip/merges.txt");
pub const CLIP_CONTEXT: usize = 77;

fn required(value: &Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    value
        .clone()
        .ok_or_else(|| CliError::invalid(format!("--{flag} is required (flag or config file)")))
}

pub struct Loaded {
    pub model: EncoderModel<f32>,
    pub cfg: EncoderConfig,
    pub vocab: Vocabulary,
}

/// Model with the configured reweighting, plus its vocabulary.
pub fn model(s: &Settings, run: &mut Run) -> CliResult<Loaded> {
    let path = s.input(&required(&s.model, "model")?);
    run.input("model", &path)?;
    let map = s.layout.as_deref().map(NameMap::resolve).transpose()?;
    let loaded = load_model(&path, map.as_ref())?;
    if !loaded.unused.is_empty() {
        log::info!("{} tensors not used by the text tower", loaded.unused.len());
    }
    let cfg = loaded
        .config
        .with_reweighting(s.reweight_start, s.reweight_mode);
    cfg.validate()?;
    let vocab = vocabulary(s, run, Some(&path), cfg.context_length)?;
    if vocab.size() > cfg.vocab_size {
        return Err(CliError::invalid(format!(
            "vocabulary has {} tokens but the model embeds only {}",
            vocab.size(),
            cfg.vocab_size
        )));
    }
    run.phase("load model");
    Ok(Loaded {
        model: loaded.model,
        cfg,
        vocab,
    })
}

/// --vocab/--merges, else vocab.json/merges.txt beside the model, else the bundled CLIP files.
pub fn vocabulary(s: &Settings, run: &mut Run, model: Option<&Path>, context: usize) -> CliResult<Vocabulary> {
    let pair = match (&s.vocab, &s.merges) {
        (Some(v), Some(m)) => Some((s.input(v), s.input(m))),
        (None, None) => model.and_then(|m| {
            let dir = m.parent()?;
            let (v, g) = (dir.join("vocab.json"), dir.join("merges.txt"));
            (v.is_file() && g.is_file()).then_some((v, g))
        }),
        _ => return Err(CliError::invalid("--vocab and --merges go together")),
    };
    Ok(match pair {
        Some((v, m)) => {
            run.input("vocab", &v)?;
            run.input("merges", &m)?;
            Vocabulary::load(&v, &m, context)?
        }
        None => Vocabulary::from_strs(CLIP_VOCAB, CLIP_MERGES, context)?,
    })
}

/// The store named by --store/--metadata, partitioned by --attrs.
pub fn store(s: &Settings, run: &mut Run, dim: usize) -> CliResult<StoreHandle> {
    let emb = s.input(&required(&s.store, "store")?);
    let meta = s.input(&required(&s.metadata, "metadata")?);
    run.input("store", &emb)?;
    run.input("metadata", &meta)?;
    let id = emb
        .file_stem()
        .map(|x| x.to_string_lossy().into_owned())
        .unwrap_or_else(|| "store".into());
    let handle = StoreHandle::load(id, &emb, &meta, &s.attrs, Some(dim))?;
    run.phase("load store");
    Ok(handle)
}

/// Span spec from --spans (file or inline JSON) extended by each --span.
pub fn spans(s: &Settings, run: &mut Run, args: &PromptArgs) -> CliResult<SpanWeightSpec> {
    let mut spec = match &args.spans {
        None => SpanWeightSpec::default(),
        Some(x) if x.trim_start().starts_with('{') => serde_json::from_str(x)
            .map_err(|e| CliError::invalid(format!("--spans: {e}")))?,
        Some(x) => {
            let path = s.input(Path::new(x));
            run.input("spans", &path)?;
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::read(&path, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?
        }
    };
    for entry in &args.span {
        let (text, weight) = entry
            .rsplit_once('=')
            .ok_or_else(|| CliError::invalid(format!("--span {entry:?}: expected TEXT=WEIGHT")))?;
        let weight: f64 = weight
            .trim()
            .parse()
            .map_err(|_| CliError::invalid(format!("--span {entry:?}: bad weight")))?;
        spec.entries.push(SpanEntry::text(text.trim(), weight));
    }
    Ok(spec)
}
