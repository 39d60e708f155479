use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use lchd_core::data::{read_examples, read_pairs, write_jsonl, Label, LabeledExample};
use lchd_core::llm_client::{judge as judge_one, JudgeVerdict, LlmClient};
use lchd_core::metrics::{latency_bench, roc_curve, write_roc_csv, LatencyReport, MetricsReport};
use lchd_core::model::{Detector, DetectorWeights};
use lchd_core::perplexity::{verify_corpus, GroupReport, NGramLM};
use lchd_core::synthesis::{
    derive_seed, split_dataset, synthesize_dataset, toy_corpus, Injector, SplitSummary, SynthesisStats,
    ToyCorpusConfig,
};
use lchd_core::tokenizer::Vocab;
use lchd_core::training::{
    load_checkpoint, prepare, save_checkpoint, score_prepared, Checkpoint, EpochRecord, TrainConfig,
};
use lchd_core::Error;

use crate::run::{create, in_file, open, print_json, read_json, write_json, Failure, Outcome, RunConfig};
use crate::{BenchArgs, EvalArgs, InjectorArg, JudgeArgs, ScoreArgs, SynthArgs, TrainArgs, VerifyArgs};

/// Default train/dev/test proportions (5653 / 854 / 950).
const SPLIT_SIZES: [f64; 3] = [5653.0, 854.0, 950.0];

fn check_probability(name: &str, v: f64) -> Outcome {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Failure::usage(format!("--{name} {v} is outside [0, 1]")))
    }
}

fn load_examples(path: &Path) -> Outcome<Vec<LabeledExample>> {
    let examples = in_file(path, read_examples(open(path)?, false))?;
    if examples.is_empty() {
        return Err(Failure::data(format!("{} contains no examples", path.display())));
    }
    Ok(examples)
}

fn load_detector(dir: &Path) -> Outcome<Detector> {
    Ok(in_file(dir, load_checkpoint(dir))?.into_detector()?)
}

fn write_examples(path: &Path, examples: &[LabeledExample]) -> Outcome {
    let mut w = create(path)?;
    write_jsonl(&mut w, examples)?;
    w.flush()?;
    Ok(())
}

fn render_metrics(title: &str, m: &MetricsReport) {
    eprintln!("{title}");
    eprintln!("  precision          {:.4}", m.precision);
    eprintln!("  recall             {:.4}", m.recall);
    eprintln!("  balanced accuracy  {:.4}", m.balanced_accuracy);
    eprintln!("  mcc                {:.4}", m.mcc);
    match m.roc_auc {
        Some(auc) => eprintln!("  roc auc            {auc:.4}"),
        None => eprintln!("  roc auc            n/a"),
    }
    let c = &m.counts;
    eprintln!("  tp {} fp {} tn {} fn {}", c.tp, c.fp, c.tn, c.fn_);
}

#[derive(Serialize)]
struct SynthSummary {
    #[serde(flatten)]
    stats: SynthesisStats,
    hallucinated_fraction: f64,
    baseless_fraction: f64,
    contradictory_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    splits: Option<Vec<SplitSummary>>,
}

pub fn synth(a: SynthArgs) -> Outcome {
    check_probability("p", a.p)?;
    let mut rc = RunConfig::default()
        .input_opt(a.pairs.as_ref())
        .output(&a.out)
        .output_opt(a.stats.as_ref());
    if a.injector == InjectorArg::Llm {
        let path = a.client_config.as_ref().ok_or_else(|| Failure::usage("--client-config is required"))?;
        rc = rc.client_config(path)?;
    }
    let rc = rc.validate()?;

    let pairs = match (&a.pairs, a.toy_corpus) {
        (Some(path), _) => in_file(path, read_pairs(open(path)?))?,
        (None, Some(n)) => toy_corpus(&ToyCorpusConfig {
            pairs: n,
            context_tokens: a.context_tokens,
            seed: a.seed,
            ..Default::default()
        }),
        (None, None) => return Err(Failure::usage("either --pairs or --toy-corpus is required")),
    };
    if pairs.is_empty() {
        return Err(Failure::data("no document pairs to corrupt"));
    }

    let client = match rc.client {
        Some(cfg) => Some(LlmClient::from_env(cfg)?),
        None => None,
    };
    let injector = match &client {
        Some(c) => Injector::Llm {
            model: c,
            max_in_flight: c.config().max_in_flight,
        },
        None => Injector::Rule,
    };
    let out = synthesize_dataset(&pairs, a.p, a.seed, &injector)?;
    write_examples(&a.out, &out.examples)?;

    let splits = match &a.split_dir {
        Some(dir) => {
            let total: f64 = SPLIT_SIZES.iter().sum();
            let [tr, dv, te] = SPLIT_SIZES.map(|s| s / total);
            let s = split_dataset(&out.examples, (tr, dv, te), a.seed)?;
            fs::create_dir_all(dir)?;
            write_examples(&dir.join("train.jsonl"), &s.train)?;
            write_examples(&dir.join("dev.jsonl"), &s.dev)?;
            write_examples(&dir.join("test.jsonl"), &s.test)?;
            Some(s.summary())
        }
        None => None,
    };

    let st = out.stats;
    let frac = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let summary = SynthSummary {
        hallucinated_fraction: frac(st.hallucinated, st.total),
        baseless_fraction: frac(st.baseless, st.hallucinated),
        contradictory_fraction: frac(st.contradictory, st.hallucinated),
        stats: st,
        splits,
    };
    let st = &summary.stats;
    eprintln!("{:<14}{:>8}{:>10}", "", "count", "share");
    eprintln!("{:<14}{:>8}{:>9.1}%", "faithful", st.faithful, 100.0 * frac(st.faithful, st.total));
    eprintln!("{:<14}{:>8}{:>9.1}%", "hallucinated", st.hallucinated, 100.0 * summary.hallucinated_fraction);
    eprintln!("{:<14}{:>8}{:>9.1}%", "  baseless", st.baseless, 100.0 * summary.baseless_fraction);
    eprintln!("{:<14}{:>8}{:>9.1}%", "  contradict.", st.contradictory, 100.0 * summary.contradictory_fraction);
    if let Some(path) = &a.stats {
        write_json(path, &summary)?;
    }
    print_json(&summary)
}

/// Seeded hold-out: each example goes to dev with probability `fraction`.
fn hold_out(data: Vec<LabeledExample>, fraction: f64, seed: u64) -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    let cut = (fraction * 1e6) as u64;
    let (dev, train): (Vec<_>, Vec<_>) = data
        .into_iter()
        .enumerate()
        .partition(|(i, _)| derive_seed(seed ^ 0xDE5, *i as u64) % 1_000_000 < cut);
    (
        train.into_iter().map(|(_, e)| e).collect(),
        dev.into_iter().map(|(_, e)| e).collect(),
    )
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    steps: usize,
    best_epoch: Option<usize>,
    best_metrics: Option<&'a MetricsReport>,
    train_examples: usize,
    dev_examples: usize,
    vocab_size: usize,
}

pub fn train(a: TrainArgs) -> Outcome {
    if a.out.is_file() {
        return Err(Failure::usage(format!("--out {} is a file", a.out.display())));
    }
    RunConfig::default()
        .input(&a.data)
        .input_opt(a.dev.as_ref())
        .input(&a.config)
        .validate()?;
    let mut raw: serde_json::Value = read_json(&a.config).map_err(|f| Failure::usage(f.to_string()))?;
    // The embedding table defaults to the size of the vocabulary built here.
    let auto_vocab = raw.pointer("/model/encoder/vocab_size").is_none();
    if auto_vocab {
        if let Some(enc) = raw.pointer_mut("/model/encoder").and_then(|v| v.as_object_mut()) {
            enc.insert("vocab_size".into(), serde_json::json!(usize::MAX));
        }
    }
    let mut cfg: TrainConfig =
        serde_json::from_value(raw).map_err(|e| Failure::usage(format!("{}: {e}", a.config.display())))?;
    cfg.validate()?;

    let data = load_examples(&a.data)?;
    let (train_set, dev_set) = match &a.dev {
        Some(path) => (data, load_examples(path)?),
        None => hold_out(data, cfg.dev_fraction, cfg.seed),
    };
    if train_set.is_empty() {
        return Err(Failure::data("hold-out left no training examples"));
    }
    let used = cfg.train_subset_size.unwrap_or(train_set.len()).min(train_set.len());
    let texts: Vec<&str> = train_set[..used]
        .iter()
        .flat_map(|e| [e.context.as_str(), e.response.as_str()])
        .collect();
    let vocab = Vocab::build(&texts, cfg.max_vocab)?;
    if auto_vocab {
        cfg.model.encoder.vocab_size = vocab.len();
    }
    log::info!(
        "training on {used} examples, {} dev, vocabulary {}",
        dev_set.len(),
        vocab.len()
    );
    let weights = DetectorWeights::init(&cfg.model, cfg.seed)?;
    let out = lchd_core::training::train(weights, &vocab, &train_set, &dev_set, &cfg)?;

    let ckpt = Checkpoint {
        config: cfg.model.clone(),
        train_config: Some(cfg),
        step: out.steps,
        metrics: out.best_metrics.clone(),
        weights: out.weights,
        vocab,
    };
    save_checkpoint(&ckpt, &a.out)?;
    write_json::<Vec<EpochRecord>>(&a.out.join("history.json"), &out.history)?;
    if !out.warm_start_history.is_empty() {
        write_json::<Vec<EpochRecord>>(&a.out.join("warm_start_history.json"), &out.warm_start_history)?;
    }
    if let Some(m) = &out.best_metrics {
        render_metrics(&format!("best dev epoch {}", out.best_epoch.unwrap_or(0)), m);
    }
    print_json(&TrainSummary {
        steps: out.steps,
        best_epoch: out.best_epoch,
        best_metrics: out.best_metrics.as_ref(),
        train_examples: used,
        dev_examples: dev_set.len(),
        vocab_size: ckpt.vocab.len(),
    })
}

pub fn eval(a: EvalArgs) -> Outcome {
    check_probability("threshold", a.threshold)?;
    RunConfig::default()
        .input(&a.data)
        .checkpoint(&a.ckpt)
        .output(&a.report)
        .output_opt(a.roc_csv.as_ref())
        .validate()?;
    let detector = load_detector(&a.ckpt)?;
    let data = load_examples(&a.data)?;
    let items = prepare(&data, &detector.vocab, &detector.config)?;
    let scores = score_prepared(&detector, &items, a.batch)?;
    let labels: Vec<Label> = data.iter().map(|e| e.label).collect();
    let report = MetricsReport::compute(&scores, &labels, a.threshold)?;
    if report.roc_auc.is_none() {
        log::warn!("only one class present in {}; roc_auc reported as null", a.data.display());
    }
    if let Some(path) = &a.roc_csv {
        match roc_curve(&scores, &labels) {
            Ok(points) => {
                let mut w = create(path)?;
                write_roc_csv(&mut w, &points)?;
                w.flush()?;
            }
            Err(Error::SingleClass) => log::warn!("roc curve skipped: only one class present"),
            Err(e) => return Err(e.into()),
        }
    }
    write_json(&a.report, &report)?;
    render_metrics(&format!("{} examples", data.len()), &report);
    print_json(&report)
}

#[derive(Serialize)]
struct Scored {
    id: String,
    probability: f64,
    label: Label,
}

#[derive(Serialize)]
struct SweepPoint {
    threshold: f64,
    hallucinated: Vec<String>,
}

#[derive(Serialize)]
struct ScoreOutput {
    threshold: f64,
    scores: Vec<Scored>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep: Option<Vec<SweepPoint>>,
}

#[derive(Serialize)]
struct AttentionDump {
    slots: Vec<String>,
    attention: Vec<Vec<f64>>,
}

fn slot_names(k_ctx: usize, k_resp: usize) -> Vec<String> {
    let mut names = vec!["global_cls".to_string()];
    names.extend((0..k_ctx).map(|i| format!("ctx_{i}")));
    names.push("sep".into());
    names.extend((0..k_resp).map(|i| format!("resp_{i}")));
    names
}

pub fn score(a: ScoreArgs) -> Outcome {
    check_probability("threshold", a.threshold)?;
    RunConfig::default()
        .checkpoint(&a.ckpt)
        .input_opt(a.context.as_ref())
        .input_opt(a.response.as_ref())
        .input_opt(a.data.as_ref())
        .output_opt(a.dump_attention.as_ref())
        .validate()?;
    let detector = load_detector(&a.ckpt)?;
    let label = |p: f64| lchd_core::aggregator::predict(p, a.threshold);

    let scores: Vec<Scored> = match (&a.data, &a.context, &a.response) {
        (Some(path), _, _) => {
            let data = load_examples(path)?;
            let items = prepare(&data, &detector.vocab, &detector.config)?;
            let probs = score_prepared(&detector, &items, 4)?;
            data.into_iter()
                .zip(probs)
                .map(|(e, p)| Scored {
                    id: e.id,
                    probability: p,
                    label: label(p),
                })
                .collect()
        }
        (None, Some(ctx), Some(resp)) => {
            let context = fs::read_to_string(ctx)?;
            let response = fs::read_to_string(resp)?;
            let out = detector.score(&context, &response)?;
            if let Some(path) = &a.dump_attention {
                let plan = detector.config.plan;
                let attention = out.attention;
                let dump = AttentionDump {
                    slots: slot_names(plan.k_ctx, plan.k_resp),
                    attention: (0..attention.rows()).map(|r| attention.row(r).to_vec()).collect(),
                };
                write_json(path, &dump)?;
            }
            vec![Scored {
                id: "input".into(),
                probability: out.probability,
                label: label(out.probability),
            }]
        }
        _ => return Err(Failure::usage("give --context and --response, or --data")),
    };

    let sweep = a.sweep.then(|| {
        (1..20)
            .map(|i| {
                let t = i as f64 * 0.05;
                SweepPoint {
                    threshold: t,
                    hallucinated: scores
                        .iter()
                        .filter(|s| lchd_core::aggregator::predict(s.probability, t).is_positive())
                        .map(|s| s.id.clone())
                        .collect(),
                }
            })
            .collect()
    });
    if a.data.is_none() && sweep.is_none() {
        let s = &scores[0];
        return print_json(&serde_json::json!({
            "probability": s.probability,
            "label": s.label,
            "threshold": a.threshold,
        }));
    }
    print_json(&ScoreOutput {
        threshold: a.threshold,
        scores,
        sweep,
    })
}

pub fn bench(a: BenchArgs) -> Outcome {
    if a.batch == 0 || a.iters == 0 {
        return Err(Failure::usage("--batch and --iters must be at least 1"));
    }
    RunConfig::default()
        .checkpoint(&a.ckpt)
        .input(&a.data)
        .output_opt(a.report.as_ref())
        .validate()?;
    let detector = load_detector(&a.ckpt)?;
    let data = load_examples(&a.data)?;
    let n = data.len();
    // Each timed batch includes tokenization and chunking.
    let report: LatencyReport = latency_bench(a.batch, a.warmup, a.iters, |b| {
        let pairs = (0..a.batch)
            .map(|j| {
                let e = &data[(b * a.batch + j) % n];
                detector.prepare(&e.context, &e.response)
            })
            .collect::<lchd_core::Result<Vec<_>>>()?;
        detector.score_pairs(&pairs).map(|_| ())
    })?;
    eprintln!(
        "batch {}: {:.2} ± {:.2} samples/sec over {} iterations",
        report.batch_size, report.mean_samples_per_sec, report.std_samples_per_sec, report.timed_iters
    );
    let enc = &detector.config.encoder;
    let report = BenchReport {
        latency: report,
        includes_tokenization: true,
        threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
        arch: std::env::consts::ARCH,
        os: std::env::consts::OS,
        model: format!(
            "d={} L={} H={} c={} k={}+{}",
            enc.dim,
            enc.layers,
            enc.heads,
            detector.config.plan.chunk_size,
            detector.config.plan.k_ctx,
            detector.config.plan.k_resp
        ),
    };
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    print_json(&report)
}

/// Throughput plus the machine and model it was measured on.
#[derive(Serialize)]
struct BenchReport {
    #[serde(flatten)]
    latency: LatencyReport,
    includes_tokenization: bool,
    threads: usize,
    arch: &'static str,
    os: &'static str,
    model: String,
}

#[derive(Serialize)]
struct VerdictLine {
    id: String,
    label: Label,
    #[serde(skip_serializing_if = "Option::is_none")]
    verdict: Option<JudgeVerdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize)]
struct JudgeReport {
    metrics: MetricsReport,
    judged: usize,
    unparseable: usize,
    failed: usize,
    truncated: usize,
}

pub fn judge(a: JudgeArgs) -> Outcome {
    let rc = RunConfig::default()
        .input(&a.data)
        .output(&a.report)
        .output_opt(a.verdicts.as_ref())
        .client_config(&a.client_config)?
        .validate()?;
    let cfg = rc.client.ok_or_else(|| Failure::usage("missing client config"))?;
    let client = LlmClient::from_env(cfg)?;
    let data = load_examples(&a.data)?;
    let budget = client.config().judge_token_budget;

    let results: Vec<Mutex<Option<lchd_core::Result<JudgeVerdict>>>> = data.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = client.config().max_in_flight.clamp(1, data.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(e) = data.get(i) else { break };
                let r = judge_one(&client, &e.context, &e.response, budget);
                *results[i].lock().expect("result slot") = Some(r);
            });
        }
    });

    let mut lines = Vec::with_capacity(data.len());
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    let (mut unparseable, mut failed, mut truncated) = (0, 0, 0);
    for (e, slot) in data.iter().zip(results) {
        let r = slot.into_inner().expect("result slot").expect("every example judged");
        let mut line = VerdictLine {
            id: e.id.clone(),
            label: e.label,
            verdict: None,
            error: None,
        };
        match r {
            Ok(v) => {
                scores.push(if v.label.is_positive() { 1.0 } else { 0.0 });
                labels.push(e.label);
                truncated += usize::from(v.truncated);
                line.verdict = Some(v);
            }
            Err(err) => {
                log::warn!("judge failed for {}: {err}", e.id);
                match err {
                    Error::UnparseableVerdict { .. } => unparseable += 1,
                    _ => failed += 1,
                }
                line.error = Some(err.to_string());
            }
        }
        lines.push(line);
    }
    if let Some(path) = &a.verdicts {
        let mut w = create(path)?;
        write_jsonl(&mut w, &lines)?;
        w.flush()?;
    }
    if scores.is_empty() {
        return Err(Failure::from(Error::Protocol("no example received a usable verdict".into())));
    }
    let metrics = MetricsReport::compute(&scores, &labels, 0.5)?;
    if metrics.roc_auc.is_none() {
        log::warn!("only one class among judged examples; roc_auc reported as null");
    }
    render_metrics(&format!("judge on {} examples", scores.len()), &metrics);
    let report = JudgeReport {
        metrics,
        judged: scores.len(),
        unparseable,
        failed,
        truncated,
    };
    write_json(&a.report, &report)?;
    print_json(&report)
}

pub fn verify(a: VerifyArgs) -> Outcome {
    if a.order == 0 || !(a.k > 0.0) {
        return Err(Failure::usage("--order must be ≥ 1 and --k positive"));
    }
    RunConfig::default()
        .input(&a.originals)
        .input(&a.injected)
        .output_opt(a.report.as_ref())
        .validate()?;
    let pairs = in_file(&a.originals, read_pairs(open(&a.originals)?))?;
    let injected: Vec<String> = load_examples(&a.injected)?
        .into_iter()
        .filter(|e| e.label.is_positive())
        .map(|e| e.response)
        .collect();
    if pairs.is_empty() || injected.is_empty() {
        return Err(Failure::data("both groups need at least one summary"));
    }
    let contexts: Vec<&str> = pairs.iter().map(|p| p.context.as_str()).collect();
    let lm = NGramLM::train(&contexts, a.order, a.k)?;
    let originals: Vec<String> = pairs.into_iter().map(|p| p.reference).collect();
    let report: Vec<GroupReport> = verify_corpus(&lm, &originals, &injected)?;
    eprintln!("{:<10}{:>8}{:>12}{:>12}{:>10}", "group", "count", "mean ppl", "median", "delta");
    for g in &report {
        eprintln!(
            "{:<10}{:>8}{:>12.2}{:>12.2}{:>+10.2}",
            g.group, g.count, g.mean_ppl, g.median_ppl, g.delta
        );
    }
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    print_json(&report)
}
