use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::json;
use stori_core::bench::{self, BenchMode};
use stori_core::encoder::{EncoderModel, ReweightMode};
use stori_core::model_io::save_model;
use stori_core::store::{self, write_store_files};
use stori_core::sweep::{self, curves_csv, sweep_csv, weight_sweep, SweepMethod, SweepSetup};
use stori_core::synth::{self, DirectionSource, FewShotClass, FewShotSpec, PlantedStoreSpec};
use stori_core::tokenizer::{map_span_weights, tokenize, SpanEntry, SpanWeightSpec};
use stori_core::trainer::{self, history_csv, inspect_weights, ClassPromptSet, PromptWeights};
use stori_service::{ranking_digest, AppState, ServiceConfig, StoreHandle};

use crate::data::{self, ClassPrompts, Example, PromptsFile, TrainedClass, WeightsFile};
use crate::error::{CliError, CliResult};
use crate::load;
use crate::manifest::Run;
use crate::settings::{Settings, DATA_DIR_VAR};
use crate::{PromptArgs, SweepArgs};

fn done(run: Run, s: &Settings, result: serde_json::Value) -> CliResult<()> {
    let path = run.finish(s, result)?;
    println!("manifest: {}", path.display());
    Ok(())
}

fn prompt_weights(
    s: &Settings,
    run: &mut Run,
    l: &load::Loaded,
    args: &PromptArgs,
) -> CliResult<(stori_core::tokenizer::TokenSequence, stori_core::tokenizer::TokenWeights)> {
    let spec = load::spans(s, run, args)?;
    let seq = tokenize(&args.prompt, &l.vocab)?;
    let weights = map_span_weights(&seq, &spec)?;
    Ok((seq, weights))
}

pub fn encode(s: &Settings, name: &str, args: &PromptArgs) -> CliResult<()> {
    let mut run = Run::start(name);
    let l = load::model(s, &mut run)?;
    let (seq, weights) = prompt_weights(s, &mut run, &l, args)?;
    let e = stori_core::encoder::encode(&seq, weights.values(), &l.model, &l.cfg)?;
    run.phase("encode");
    println!("{:>4}  {:<20} {:>8}", "pos", "token", "weight");
    let mut tokens = Vec::new();
    for (i, &w) in weights.values().iter().enumerate() {
        let text = seq.token_text(i);
        println!("{i:>4}  {text:<20} {w:>8.3}");
        tokens.push(json!({"index": i, "text": text, "weight": w}));
    }
    let body = json!({
        "prompt": args.prompt,
        "reweight_start": l.cfg.reweight_start_block,
        "reweight_mode": l.cfg.reweight_mode,
        "tokens": tokens,
        "norm": e.norm(),
        "embedding": e.vector,
    });
    let out = s.out_dir.join("embedding.json");
    run.write("embedding", &out, serde_json::to_string_pretty(&body).unwrap().as_bytes())?;
    println!("embedding: {} ({} dims, norm {:.4})", out.display(), e.len(), e.norm());
    done(
        run,
        s,
        json!({"tokens": seq.len(), "dim": e.len(), "reweight_start": l.cfg.reweight_start_block}),
    )
}

pub fn train(
    s: &Settings,
    name: &str,
    prompts: &Path,
    data_path: &Path,
    eval: Option<&Path>,
    weights_out: Option<PathBuf>,
) -> CliResult<()> {
    let mut run = Run::start(name);
    let l = load::model(s, &mut run)?;
    let tc = s.training();
    tc.validate()?;
    let prompts_path = s.input(prompts);
    run.input("prompts", &prompts_path)?;
    let spec: PromptsFile = data::read_json(&prompts_path)?;
    if spec.classes.len() < 2 {
        return Err(CliError::invalid("need at least two classes"));
    }
    let sets = spec
        .classes
        .iter()
        .map(|c| ClassPromptSet::new(c.label.clone(), &c.prompts, &l.vocab))
        .collect::<stori_core::Result<Vec<_>>>()?;
    let labels: Vec<String> = spec.classes.iter().map(|c| c.label.clone()).collect();
    let data_path = s.input(data_path);
    run.input("data", &data_path)?;
    let train_examples = data::sample_shots(data::read_examples(&data_path)?, s.shots, s.seed);
    let dim = l.cfg.projection_dim;
    let train_batch = data::batch(&train_examples, &labels, dim)?;
    let eval_batch = match eval {
        Some(p) => {
            let p = s.input(p);
            run.input("eval", &p)?;
            Some(data::batch(&data::read_examples(&p)?, &labels, dim)?)
        }
        None => None,
    };
    run.phase("load data");
    // gradients in 64-bit
    let model: EncoderModel<f64> = l.model.cast();
    let baseline = eval_batch
        .as_ref()
        .map(|b| trainer::accuracy(b, &sets, &model, &l.cfg))
        .transpose()?;
    let out = trainer::train(&sets, &train_batch, &model, &l.cfg, &tc, eval_batch.as_ref())?;
    run.phase("train");

    let weights = WeightsFile {
        classes: out
            .sets
            .iter()
            .map(|c| TrainedClass {
                label: c.label.clone(),
                prompts: c.prompts.iter().map(PromptWeights::record).collect(),
            })
            .collect(),
        training: tc.clone(),
        reweight_start: l.cfg.reweight_start_block,
        baseline_accuracy: baseline,
        eval_accuracy: out.eval_accuracy,
    };
    let weights_path = weights_out.unwrap_or_else(|| s.out_dir.join("weights.json"));
    run.write(
        "weights",
        &weights_path,
        serde_json::to_string_pretty(&weights).unwrap().as_bytes(),
    )?;
    run.write("loss", &s.out_dir.join("loss.csv"), history_csv(&out.history).as_bytes())?;
    for c in &out.sets {
        for p in &c.prompts {
            let report = inspect_weights(&p.seq, &p.weights())?;
            if let Some(top) = report.iter().max_by(|a, b| a.normalized.total_cmp(&b.normalized)) {
                println!("{}: {:?} top token {:?} ({:.3})", c.label, p.seq.source(), top.token, top.normalized);
            }
        }
    }
    let first = out.history.first().map(|r| r.loss);
    let last = out.history.last().map(|r| r.loss);
    if let (Some(a), Some(b)) = (first, last) {
        println!("loss {a:.4} -> {b:.4} over {} epochs", out.history.len());
    }
    if let (Some(b), Some(a)) = (baseline, out.eval_accuracy) {
        println!("held-out accuracy {a:.4} (all-ones {b:.4})");
    }
    done(
        run,
        s,
        json!({
            "train_examples": train_batch.len(),
            "first_loss": first,
            "final_loss": last,
            "baseline_accuracy": baseline,
            "eval_accuracy": out.eval_accuracy,
        }),
    )
}

pub fn inspect(s: &Settings, name: &str, weights: &Path) -> CliResult<()> {
    let mut run = Run::start(name);
    let path = s.input(weights);
    run.input("weights", &path)?;
    let file: WeightsFile = data::read_json(&path)?;
    let longest = file
        .classes
        .iter()
        .flat_map(|c| &c.prompts)
        .map(|p| p.weights.len())
        .max()
        .unwrap_or(0);
    let model = s.model.as_ref().map(|m| s.input(m));
    let vocab = load::vocabulary(s, &mut run, model.as_deref(), longest.max(load::CLIP_CONTEXT))?;
    let mut csv = String::from("class,prompt,position,token,weight,normalized\n");
    let mut tops = Vec::new();
    for c in &file.classes {
        for p in &c.prompts {
            let seq = tokenize(&p.prompt_text, &vocab)?;
            if seq.len() != p.weights.len() {
                return Err(CliError::invalid(format!(
                    "{:?} tokenizes to {} positions but has {} weights; wrong vocabulary?",
                    p.prompt_text,
                    seq.len(),
                    p.weights.len()
                )));
            }
            let report = inspect_weights(&seq, &p.weights)?;
            println!("[{}] {}", c.label, p.prompt_text);
            for r in &report {
                println!("  {:>3} {:<16} {:>8.4} {:>7.1}%", r.position, r.token, r.weight, 100.0 * r.normalized);
                let _ = writeln!(
                    csv,
                    "\"{}\",\"{}\",{},\"{}\",{},{}",
                    c.label, p.prompt_text, r.position, r.token, r.weight, r.normalized
                );
            }
            if let Some(top) = report.iter().max_by(|a, b| a.normalized.total_cmp(&b.normalized)) {
                tops.push(json!({"class": c.label, "prompt": p.prompt_text, "token": top.token, "normalized": top.normalized}));
            }
        }
    }
    run.write("report", &s.out_dir.join("inspect.csv"), csv.as_bytes())?;
    done(run, s, json!({ "top_tokens": tops }))
}

pub fn retrieve(s: &Settings, name: &str, args: &PromptArgs) -> CliResult<()> {
    let mut run = Run::start(name);
    let l = load::model(s, &mut run)?;
    let handle = load::store(s, &mut run, l.cfg.projection_dim)?;
    let (seq, weights) = prompt_weights(s, &mut run, &l, args)?;
    let r = sweep::retrieve(&seq, &weights, &l.model, &l.cfg, &handle.store, handle.partition.as_ref())?;
    run.phase("retrieve");
    let digest = ranking_digest(&r.ranking, &handle.store);
    let mut csv = String::from("rank,index,id,score\n");
    for (rank, (i, score)) in r.ranking.top(r.ranking.len()).enumerate() {
        let _ = writeln!(csv, "{},{},\"{}\",{}", rank + 1, i, handle.store.id(i), score);
    }
    run.write("ranking", &s.out_dir.join("ranking.csv"), csv.as_bytes())?;
    for (rank, (i, score)) in r.ranking.top(s.top_k).enumerate() {
        println!("{:>5} {:<24} {score:.6}", rank + 1, handle.store.id(i));
    }
    let aucs: Vec<_> = r
        .curves
        .iter()
        .map(|c| json!({"category": c.category, "label": c.label, "size": c.size, "auc": c.auc}))
        .collect();
    for c in &r.curves {
        println!("AUC {:<32} {:.4}", c.label, c.auc);
    }
    println!("ranking digest {digest}");
    done(
        run,
        s,
        json!({"items": r.ranking.len(), "digest": digest, "weights": weights.content(), "curves": aucs}),
    )
}

struct SweepInputs {
    l: load::Loaded,
    handle: StoreHandle,
    partition: store::CategoryPartition,
    seq: stori_core::tokenizer::TokenSequence,
    spans: SpanWeightSpec,
    positives: BTreeSet<usize>,
    positives_attr: String,
}

fn sweep_inputs(s: &Settings, run: &mut Run, args: &SweepArgs) -> CliResult<SweepInputs> {
    if s.attrs.is_empty() {
        return Err(CliError::invalid("--attrs is required for retrieval evaluation"));
    }
    if s.grid.is_empty() {
        return Err(stori_core::Error::EmptyGrid.into());
    }
    let l = load::model(s, run)?;
    let handle = load::store(s, run, l.cfg.projection_dim)?;
    let partition = match args.sample_per_category {
        Some(n) => store::partition(&handle.table, &s.attrs, Some(n), s.seed, false)?,
        None => handle.partition.clone().expect("attrs given"),
    };
    let spans = load::spans(s, run, &args.prompt)?;
    if spans.entries.is_empty() {
        return Err(CliError::invalid("give the swept span with --spans or --span"));
    }
    let seq = tokenize(&args.prompt.prompt, &l.vocab)?;
    // resolve once so span errors surface before any encoding
    map_span_weights(&seq, &spans)?;
    let positives_attr = args.positives.clone().unwrap_or_else(|| s.attrs[0].clone());
    let positives: BTreeSet<usize> = partition.with_attribute(&positives_attr)?.into_iter().collect();
    if positives.is_empty() {
        return Err(stori_core::Error::NoPositives.into());
    }
    Ok(SweepInputs {
        l,
        handle,
        partition,
        seq,
        spans,
        positives,
        positives_attr,
    })
}

pub fn eval_retrieval(s: &Settings, name: &str, args: &SweepArgs, method: SweepMethod) -> CliResult<()> {
    let mut run = Run::start(name);
    let x = sweep_inputs(s, &mut run, args)?;
    let setup = SweepSetup {
        seq: &x.seq,
        spans: &x.spans,
        store: &x.handle.store,
        partition: &x.partition,
        positives: &x.positives,
        k: x.positives.len(),
        model: &x.l.model,
        cfg: &x.l.cfg,
    };
    let points = weight_sweep(&setup, &s.grid, method)?;
    run.phase("sweep");
    run.write("metrics", &s.out_dir.join("metrics.csv"), sweep_csv(&points).as_bytes())?;
    run.write("curves", &s.out_dir.join("curves.csv"), curves_csv(&points).as_bytes())?;
    println!("{:>8} {:>8} {:>8}", "weight", "AP", "P_k");
    for p in &points {
        println!("{:>8.3} {:>8.4} {:>8.4}", p.weight, p.ap, p.precision_at_k);
    }
    let summary: Vec<_> = points
        .iter()
        .map(|p| json!({"weight": p.weight, "ap": p.ap, "precision_at_k": p.precision_at_k}))
        .collect();
    done(
        run,
        s,
        json!({
            "method": method,
            "positives": x.positives_attr,
            "k": x.positives.len(),
            "items": x.partition.items().len(),
            "points": summary,
        }),
    )
}

pub fn ablate(s: &Settings, name: &str, args: &SweepArgs, starts: Option<Vec<usize>>) -> CliResult<()> {
    let mut run = Run::start(name);
    let x = sweep_inputs(s, &mut run, args)?;
    let blocks = x.l.cfg.num_blocks;
    let starts = starts.unwrap_or_else(|| (1..=blocks).collect());
    let mut csv = String::from("start,mode,");
    csv.push_str(sweep_csv(&[]).trim_end());
    csv.push('\n');
    let mut summary = Vec::new();
    for &start in &starts {
        for mode in [ReweightMode::FromBlockOnward, ReweightMode::SingleBlock] {
            let cfg = x.l.cfg.clone().with_reweighting(start, mode);
            cfg.validate()?;
            let setup = SweepSetup {
                seq: &x.seq,
                spans: &x.spans,
                store: &x.handle.store,
                partition: &x.partition,
                positives: &x.positives,
                k: x.positives.len(),
                model: &x.l.model,
                cfg: &cfg,
            };
            let points = weight_sweep(&setup, &s.grid, SweepMethod::Reweight)?;
            let mode_name = serde_json::to_value(mode).unwrap();
            let mode_name = mode_name.as_str().unwrap_or("");
            for line in sweep_csv(&points).lines().skip(1) {
                let _ = writeln!(csv, "{start},{mode_name},{line}");
            }
            let aps: Vec<f64> = points.iter().map(|p| p.ap).collect();
            println!("start {start:>2} {mode_name:<18} AP {aps:.4?}");
            summary.push(json!({"start": start, "mode": mode, "ap": aps}));
        }
    }
    run.phase("sweeps");
    run.write("ablation", &s.out_dir.join("ablation.csv"), csv.as_bytes())?;
    done(run, s, json!({ "runs": summary }))
}

pub fn bench(s: &Settings, name: &str, args: &PromptArgs, plain_vs_plain: bool) -> CliResult<()> {
    let mut run = Run::start(name);
    let l = load::model(s, &mut run)?;
    let (seq, weights) = prompt_weights(s, &mut run, &l, args)?;
    let mode = if plain_vs_plain {
        BenchMode::PlainVsPlain
    } else {
        BenchMode::Reweighted
    };
    let report = bench::run(&seq, weights.values(), &l.model, &l.cfg, s.iterations, s.warmup, mode)?;
    run.phase("bench");
    println!(
        "{} iterations: plain {:.1} us, {} {:.1} us, ratio {:.4}",
        report.iterations,
        report.plain_mean_us,
        if plain_vs_plain { "plain" } else { "reweighted" },
        report.other_mean_us,
        report.ratio
    );
    let body = serde_json::to_value(&report).unwrap();
    run.write("report", &s.out_dir.join("bench.json"), serde_json::to_string_pretty(&body).unwrap().as_bytes())?;
    done(run, s, body)
}

pub fn serve(s: &Settings) -> CliResult<()> {
    let mut run = Run::start("serve");
    let l = load::model(s, &mut run)?;
    let handle = load::store(s, &mut run, l.cfg.projection_dim)?;
    let config = ServiceConfig {
        top_k: s.top_k,
        static_dir: s.static_dir.as_ref().map(|d| s.input(d)),
        ..ServiceConfig::default()
    };
    let state = Arc::new(AppState::new(l.model, l.cfg, l.vocab, vec![handle], config)?);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(s.serve_addr)
            .await
            .map_err(|e| CliError::invalid(format!("bind {}: {e}", s.serve_addr)))?;
        let addr = listener.local_addr().map_err(|e| CliError::Internal(e.to_string()))?;
        println!("listening on http://{addr}");
        use std::io::Write;
        let _ = std::io::stdout().flush();
        stori_service::serve_on(listener, state)
            .await
            .map_err(|e| CliError::Internal(e.to_string()))
    })
}

pub const FIXTURE_PROMPT: &str = "a photo of a woman with blonde hair, wearing eyeglasses";

/// Toy model, vocabulary, planted store and two-class few-shot data.
pub fn fixture(s: &Settings, name: &str, dir: Option<PathBuf>) -> CliResult<()> {
    let dir = dir
        .or_else(|| std::env::var_os(DATA_DIR_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("stori-fixture"));
    let mut run = Run::start(name);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::write(&dir, e))?;
    let words = [
        "photo", "of", "woman", "man", "with", "blonde", "hair", "wearing", "eyeglasses", "striped",
        "spotted", "cat",
    ];
    let vocab = synth::toy_vocabulary(&words);
    let cfg = synth::toy_config(vocab.size(), 12, 64, 4).with_reweighting(s.reweight_start, s.reweight_mode);
    cfg.validate()?;
    let model: EncoderModel<f32> = synth::toy_model(&cfg, s.seed);
    let (vocab_json, merges) = vocab.to_strs();
    run.write("vocab", &dir.join("vocab.json"), vocab_json.as_bytes())?;
    run.write("merges", &dir.join("merges.txt"), merges.as_bytes())?;
    let model_path = dir.join("model.safetensors");
    run.check_output(&model_path)?;
    save_model(&model, &cfg, &model_path)?;
    run.written("model", &model_path)?;

    let spec = PlantedStoreSpec {
        prompt: FIXTURE_PROMPT.into(),
        attributes: vec![
            ("female".into(), "woman".into()),
            ("blonde".into(), "with blonde hair".into()),
            ("eyeglasses".into(), "wearing eyeglasses".into()),
        ],
        items_per_category: 100,
        strength: 1.0,
        noise: 2.0,
        direction: DirectionSource::Silencing,
        seed: s.seed + 7,
    };
    let planted = synth::planted_store(&spec, &vocab, &model, &cfg)?;
    let (emb, meta) = (dir.join("store.safetensors"), dir.join("store.jsonl"));
    run.check_output(&emb)?;
    write_store_files(&emb, &meta, &planted.embeddings, &planted.records)?;
    run.written("store", &emb)?;
    run.written("metadata", &meta)?;
    let spans = SpanWeightSpec::default().with(SpanEntry::text("with blonde hair", 1.5));
    run.write("spans", &dir.join("spans.json"), serde_json::to_string_pretty(&spans).unwrap().as_bytes())?;

    let few = FewShotSpec {
        classes: ["striped", "spotted"].map(|label| FewShotClass {
            label: label.into(),
            prompts: vec![format!("a photo of a {label} cat")],
            discriminative: Some(label.into()),
        }),
        shots_per_class: 16,
        eval_per_class: 200,
        shared: 1.0,
        signal: 0.2,
        noise: 1.0,
        seed: s.seed,
    };
    let task = synth::few_shot_task(&few, &vocab, &model, &cfg)?;
    let labels = ["striped", "spotted"];
    let examples = |b: &stori_core::trainer::FewShotBatch| -> Vec<Example> {
        b.embeddings()
            .rows()
            .into_iter()
            .zip(b.labels())
            .map(|(row, &c)| Example {
                label: labels[c].into(),
                embedding: row.to_vec(),
            })
            .collect()
    };
    run.write("train", &dir.join("train.jsonl"), data::write_examples(&examples(&task.train)).as_bytes())?;
    run.write("eval", &dir.join("eval.jsonl"), data::write_examples(&examples(&task.eval)).as_bytes())?;
    let prompts = PromptsFile {
        classes: few
            .classes
            .iter()
            .map(|c| ClassPrompts {
                label: c.label.clone(),
                prompts: c.prompts.clone(),
            })
            .collect(),
    };
    run.write("prompts", &dir.join("prompts.json"), serde_json::to_string_pretty(&prompts).unwrap().as_bytes())?;
    let config = "model = \"model.safetensors\"\nstore = \"store.safetensors\"\nmetadata = \"store.jsonl\"\nattrs = [\"female\", \"blonde\", \"eyeglasses\"]\n";
    run.write("config", &dir.join("stori.toml"), config.as_bytes())?;
    println!("fixture written to {}", dir.display());
    done(
        run,
        s,
        json!({
            "dir": dir,
            "model_checksum": model.checksum(),
            "items": planted.records.len(),
            "prompt": FIXTURE_PROMPT,
        }),
    )
}
