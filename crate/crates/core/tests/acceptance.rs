//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

mod common;

use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stori_core::bench::{self, BenchMode};
use stori_core::encoder::{
    attention_reweighted, encode, encode_plain, EncoderModel, ReweightMode,
};
use stori_core::metrics::{auroc, average_precision, category_curves, precision_at_k};
use stori_core::sweep::{swept_weights, weight_sweep, SweepMethod, SweepSetup};
use stori_core::synth;
use stori_core::tokenizer::tokenize;
use stori_core::trainer::{accuracy, inspect_weights, train, TrainingConfig};

use common::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn neutrality() -> Outcome {
    let start = Instant::now();
    let words = ["photo", "cat", "dog", "red", "small", "bird", "car", "of", "the", "a"];
    let vocab = synth::toy_vocabulary(&words);
    let cfg = synth::toy_config(vocab.size(), 4, 64, 4);
    let model: EncoderModel<f32> = synth::toy_model(&cfg, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let len = rng.gen_range(1..=12);
        let text: Vec<&str> = (0..len).map(|_| words[rng.gen_range(0..words.len())]).collect();
        let seq = tokenize(&text.join(" "), &vocab).unwrap();
        let plain = encode_plain(&seq, &model, &cfg).unwrap();
        let ones = encode(&seq, &vec![1.0; seq.len()], &model, &cfg).unwrap();
        for (a, b) in plain.vector.iter().zip(&ones.vector) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-6 && secs < 10.0,
        format!("100 prompts, max |diff| {worst:.1e}, {secs:.2} s"),
    )
}

#[derive(Debug, Clone)]
struct AttentionCase {
    n: usize,
    d: usize,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    w: Vec<f32>,
    scale: f32,
    causal: bool,
}

fn attention_case() -> impl Strategy<Value = AttentionCase> {
    (1usize..=12, 1usize..=8, any::<bool>(), 0.01f32..100.0).prop_flat_map(|(n, d, causal, scale)| {
        let mat = prop::collection::vec(-3.0f32..3.0, n * d);
        // roughly a quarter of the weights are exactly zero; column 0 stays live
        let weight = prop_oneof![1 => Just(0.0f32), 3 => 0.01f32..10.0];
        (
            mat.clone(),
            mat.clone(),
            mat,
            prop::collection::vec(weight, n),
        )
            .prop_map(move |(q, k, v, mut w)| {
                w[0] = w[0].max(0.5);
                AttentionCase {
                    n,
                    d,
                    q,
                    k,
                    v,
                    w,
                    scale,
                    causal,
                }
            })
    })
}

fn attention_algebra() -> Outcome {
    use ndarray::Array2;
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        ..Config::default()
    });
    // worst row-sum, scale and equal-logit deviations seen
    let worst = std::cell::Cell::new([0.0f32; 3]);
    let note = |i: usize, x: f32| {
        let mut w = worst.get();
        w[i] = w[i].max(x);
        worst.set(w);
    };
    let result = runner.run(&attention_case(), |c| {
        let m = |x: &[f32]| Array2::from_shape_vec((c.n, c.d), x.to_vec()).unwrap();
        let (q, k, v) = (m(&c.q), m(&c.k), m(&c.v));
        let plain = attention_reweighted(q.view(), k.view(), v.view(), None, c.causal).unwrap();
        let re = attention_reweighted(q.view(), k.view(), v.view(), Some(&c.w), c.causal).unwrap();
        for a in [&plain.attention, &re.attention] {
            for row in a.rows() {
                let dev = (row.sum() - 1.0).abs();
                note(0, dev);
                prop_assert!(dev <= 1e-5, "row sum off by {dev}");
            }
        }
        for (j, &w) in c.w.iter().enumerate() {
            if w == 0.0 {
                prop_assert!(re.attention.column(j).iter().all(|&x| x == 0.0));
            }
        }
        let scaled: Vec<f32> = c.w.iter().map(|w| w * c.scale).collect();
        let s = attention_reweighted(q.view(), k.view(), v.view(), Some(&scaled), c.causal).unwrap();
        let dev = (&s.attention - &re.attention).iter().fold(0.0f32, |m, x| m.max(x.abs()));
        note(1, dev);
        prop_assert!(dev <= 1e-6, "scale invariance off by {dev}");
        let zero_q = Array2::<f32>::zeros((c.n, c.d));
        let eq = attention_reweighted(zero_q.view(), k.view(), v.view(), Some(&c.w), c.causal).unwrap();
        let mut eq_dev = 0.0f32;
        for mrow in 0..c.n {
            let visible = if c.causal { mrow + 1 } else { c.n };
            let total: f32 = c.w[..visible].iter().sum();
            for j in 0..c.n {
                let expect = if j < visible { c.w[j] / total } else { 0.0 };
                eq_dev = eq_dev.max((eq.attention[[mrow, j]] - expect).abs());
            }
        }
        note(2, eq_dev);
        prop_assert!(eq_dev <= 1e-6, "equal-logit reduction off by {eq_dev}");
        Ok::<(), TestCaseError>(())
    });
    let w = worst.get();
    match result {
        Ok(()) => outcome(
            true,
            format!(
                "1000 instances; worst row-sum {:.1e}, scale {:.1e}, equal-logit {:.1e}; zero columns exact",
                w[0], w[1], w[2]
            ),
        ),
        Err(e) => outcome(false, format!("{e}")),
    }
}

fn gradients() -> Outcome {
    let (mut rel, mut sum) = (0.0f64, 0.0f64);
    for seed in 1000..1100 {
        let (r, s) = gradient_check(&grad_instance(seed));
        rel = rel.max(r);
        sum = sum.max(s);
    }
    outcome(
        rel <= 1e-4 && sum <= 1e-5,
        format!("100 configurations, worst relative error {rel:.2e}, worst |Σ grad| {sum:.1e}"),
    )
}

fn few_shot_setup() -> (stori_core::tokenizer::Vocabulary, stori_core::encoder::EncoderConfig, EncoderModel<f64>) {
    let vocab = synth::toy_vocabulary(&FEW_SHOT_WORDS);
    let cfg = planted_config(&vocab);
    let model = synth::toy_model(&cfg, 0);
    (vocab, cfg, model)
}

fn few_shot() -> Outcome {
    let start = Instant::now();
    let (vocab, cfg, model) = few_shot_setup();
    let spec = few_shot_spec(0);
    let task = synth::few_shot_task(&spec, &vocab, &model, &cfg).unwrap();
    let sets = spec.prompt_sets(&vocab, "").unwrap();
    let baseline = accuracy(&task.eval, &sets, &model, &cfg).unwrap();
    let tc = TrainingConfig {
        seed: 0,
        ..TrainingConfig::default()
    };
    let out = train(&sets, &task.train, &model, &cfg, &tc, Some(&task.eval)).unwrap();
    let trained = out.eval_accuracy.unwrap();
    let mut tops = Vec::new();
    let mut argmax_ok = true;
    for (set, class) in out.sets.iter().zip(&spec.classes) {
        let token = class.discriminative.as_deref().unwrap();
        for p in &set.prompts {
            let report = inspect_weights(&p.seq, &p.weights()).unwrap();
            let top = report
                .iter()
                .max_by(|a, b| a.normalized.total_cmp(&b.normalized))
                .unwrap();
            argmax_ok &= top.token.trim_end_matches("</w>") == token;
            tops.push(format!("{}={:.2}", top.token.trim_end_matches("</w>"), top.normalized));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        argmax_ok && trained > baseline && secs < 60.0,
        format!(
            "top tokens [{}], held-out accuracy {trained:.3} vs all-ones {baseline:.3}, {secs:.1} s",
            tops.join(", ")
        ),
    )
}

fn rare_tokens() -> Outcome {
    let (vocab, cfg, model) = few_shot_setup();
    let (mut plain, mut rare, mut n) = (0.0, 0.0, 0usize);
    let mut per_seed = Vec::new();
    for seed in 0..3 {
        let spec = few_shot_spec(seed);
        let task = synth::few_shot_task(&spec, &vocab, &model, &cfg).unwrap();
        let tc = TrainingConfig {
            seed,
            ..TrainingConfig::default()
        };
        let mut acc = [0.0; 2];
        for (slot, suffix) in ["", RARE_SUFFIX].iter().enumerate() {
            let sets = spec.prompt_sets(&vocab, suffix).unwrap();
            let out = train(&sets, &task.train, &model, &cfg, &tc, Some(&task.eval)).unwrap();
            acc[slot] = out.eval_accuracy.unwrap();
        }
        per_seed.push(format!("{:.3}/{:.3}", acc[0], acc[1]));
        plain += acc[0];
        rare += acc[1];
        n += task.eval.len();
    }
    let (plain, rare) = (plain / 3.0, rare / 3.0);
    let noise = 2.0 * (plain * (1.0 - plain) / n as f64).sqrt();
    outcome(
        rare - plain <= noise,
        format!(
            "without/with suffix per seed [{}], mean gain {:+.4} vs noise {noise:.4}",
            per_seed.join(" "),
            rare - plain
        ),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=64);
        let mut rel: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        rel[rng.gen_range(0..n)] = true;
        let k = rng.gen_range(1..=n);
        worst = worst.max((average_precision(&rel).unwrap() - ap_brute(&rel)).abs());
        worst = worst.max((precision_at_k(&rel, k).unwrap() - pk_brute(&rel, k)).abs());

        // coarse scores so ties occur
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 4.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        worst = worst.max((auroc(&scores, &labels).unwrap() - auroc_brute(&scores, &labels)).abs());

        let ncat = rng.gen_range(1..=8);
        let cats: Vec<usize> = (0..n).map(|_| rng.gen_range(0..ncat)).collect();
        let names: Vec<String> = (0..ncat).map(|c| format!("c{c}")).collect();
        let curves = category_curves(&cats, &names).unwrap();
        for c in 0..ncat {
            let brute = category_auc_brute(&cats, c);
            let got = curves.iter().find(|k| k.category == c).map(|k| k.auc);
            match (brute, got) {
                (Some(b), Some(g)) => worst = worst.max((b - g).abs()),
                (None, None) => {}
                _ => worst = f64::INFINITY,
            }
        }
    }
    let ap = average_precision(&[true, false, true, false]).unwrap();
    let curves = category_curves(&[0, 0, 1, 1], &["A".into(), "B".into()]).unwrap();
    let auc = curves[0].auc;
    // 5/6 has no exact binary form, so "exact" is the same 1e-12 as the oracles
    let (ap_dev, auc_dev) = ((ap - 5.0 / 6.0).abs(), (auc - 0.875).abs());
    outcome(
        worst <= 1e-12 && ap_dev <= 1e-12 && auc_dev <= 1e-12,
        format!(
            "1000 rankings, worst |diff| {worst:.1e}; worked AP {ap} (5/6, off {ap_dev:.1e}), AUC {auc} (off {auc_dev:.1e})"
        ),
    )
}

fn sweep(p: &Planted, grid: &[f64], method: SweepMethod, cfg: &stori_core::encoder::EncoderConfig) -> Vec<stori_core::sweep::SweepPoint> {
    let setup = SweepSetup {
        seq: &p.seq,
        spans: &p.spans,
        store: &p.store,
        partition: &p.partition,
        positives: &p.positives,
        k: p.positives.len(),
        model: &p.model,
        cfg,
    };
    weight_sweep(&setup, grid, method).unwrap()
}

fn auc_of(point: &stori_core::sweep::SweepPoint, category: usize) -> f64 {
    point.curves.iter().find(|c| c.category == category).unwrap().auc
}

fn emphasis(p: &Planted) -> Outcome {
    let pts = sweep(p, &[0.0, 0.5, 1.0, 1.5], SweepMethod::Reweight, &p.cfg);
    let ap: Vec<f64> = pts[1..].iter().map(|x| x.ap).collect();
    let pk: Vec<f64> = pts[1..].iter().map(|x| x.precision_at_k).collect();
    let increasing = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
    // every pair of categories that differ only in the blonde bit
    let gap = [0b000, 0b001, 0b100, 0b101]
        .iter()
        .map(|&c| (auc_of(&pts[0], c | 0b010) - auc_of(&pts[0], c)).abs())
        .fold(0.0f64, f64::max);
    outcome(
        increasing(&ap) && increasing(&pk) && gap <= 0.02,
        format!(
            "AP {:.4} {:.4} {:.4}, P_k {:.4} {:.4} {:.4}, w=0 max AUC gap {gap:.4}",
            ap[0], ap[1], ap[2], pk[0], pk[1], pk[2]
        ),
    )
}

fn baseline_contrast(p: &Planted) -> Outcome {
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.25).collect();
    let re: Vec<f64> = sweep(p, &grid, SweepMethod::Reweight, &p.cfg)
        .iter()
        .map(|x| auc_of(x, TARGET_CATEGORY))
        .collect();
    let pw: Vec<f64> = sweep(
        p,
        &grid,
        SweepMethod::PromptWeighting {
            inject_block: DEFAULT_START,
        },
        &p.cfg,
    )
    .iter()
    .map(|x| auc_of(x, TARGET_CATEGORY))
    .collect();
    let monotone = re.windows(2).all(|w| w[1] >= w[0]);
    let (peak_at, peak) = pw
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, x)| if x > b.1 { (i, x) } else { b });
    let last = *pw.last().unwrap();
    let rises_then_falls =
        peak_at > 0 && peak_at < pw.len() - 1 && peak - pw[0] >= 0.01 && peak - last >= 0.01;
    outcome(
        monotone && rises_then_falls,
        format!(
            "reweighting {:.3} -> {:.3} (non-decreasing: {monotone}); baseline {:.3} -> peak {peak:.3} at w={} -> {last:.3}",
            re[0],
            re[re.len() - 1],
            pw[0],
            grid[peak_at]
        ),
    )
}

fn overhead() -> Outcome {
    let words = ["photo", "cat", "red", "small", "of"];
    let vocab = synth::toy_vocabulary(&words);
    let cfg = synth::toy_config(vocab.size(), 4, 64, 4);
    let model: EncoderModel<f32> = synth::toy_model(&cfg, 0);
    let seq = tokenize("a photo of a small red cat", &vocab).unwrap();
    let weights: Vec<f64> = (0..seq.len()).map(|i| if i == 5 { 2.5 } else { 1.0 }).collect();
    let r = bench::run(&seq, &weights, &model, &cfg, 1000, 100, BenchMode::Reweighted).unwrap();
    outcome(
        r.ratio <= 1.10,
        format!(
            "1000 iterations: plain {:.1} us, reweighted {:.1} us, ratio {:.3}",
            r.plain_mean_us, r.other_mean_us, r.ratio
        ),
    )
}

fn position_ablation(p: &Planted) -> Outcome {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut valid = true;
    let mut bends = Vec::new();
    for start in 1..=p.cfg.num_blocks {
        let cfg = p.cfg.clone().with_reweighting(start, ReweightMode::FromBlockOnward);
        let mut q = Vec::new();
        for w in [0.0, 0.1, 0.2, 1.0, 2.0, 5.0] {
            let weights = swept_weights(&p.seq, &p.spans, w).unwrap();
            let e = encode(&p.seq, weights.values(), &p.model, &cfg).unwrap();
            valid &= e.len() == cfg.projection_dim && e.vector.iter().all(|x| x.is_finite()) && e.norm() > 0.0;
            q.push(e.normalize().vector);
        }
        bends.push(dist(&q[1], &q[0]) / dist(&q[2], &q[1]));
    }
    let bend_only_first = bends[0] >= 2.0 && bends[1..].iter().all(|&b| b < 2.0);

    let single = p.cfg.clone().with_reweighting(DEFAULT_START, ReweightMode::SingleBlock);
    let shift = |cfg| {
        let pts = sweep(p, &[1.0, 2.0], SweepMethod::Reweight, cfg);
        (auc_of(&pts[1], TARGET_CATEGORY) - auc_of(&pts[0], TARGET_CATEGORY)).abs()
    };
    let (one, onward) = (shift(&single), shift(&p.cfg));
    let ratio = one / onward;
    outcome(
        valid && bend_only_first && ratio < 0.25,
        format!(
            "valid embeddings: {valid}; bend by start [{}] (needs >= 2 at start 1 only); SingleBlock |dAUC| {one:.4} vs FromBlockOnward {onward:.4}, ratio {ratio:.3} (needs < 0.25)",
            bends.iter().map(|b| format!("{b:.2}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn main() {
    let started = Instant::now();
    let planted = planted();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("neutrality", Box::new(neutrality)),
        ("attention algebra", Box::new(attention_algebra)),
        ("gradient correctness", Box::new(gradients)),
        ("few-shot toy reproduction", Box::new(few_shot)),
        ("rare-token control", Box::new(rare_tokens)),
        ("metric oracles", Box::new(metric_oracles)),
        ("emphasis monotonicity", Box::new(|| emphasis(&planted))),
        ("baseline contrast", Box::new(|| baseline_contrast(&planted))),
        ("overhead", Box::new(overhead)),
        ("position ablation", Box::new(|| position_ablation(&planted))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {:<26} {}  {}",
            i + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "{} of {} criteria passed in {:.1} s",
        criteria.len() - failed,
        criteria.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
