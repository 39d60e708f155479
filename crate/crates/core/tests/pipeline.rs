use std::collections::HashSet;
use std::io::BufReader;

use lchd_core::aggregator::AggregatorConfig;
use lchd_core::chunker::ChunkPlan;
use lchd_core::data::{read_examples, write_jsonl, Label, LabeledExample};
use lchd_core::encoder::EncoderConfig;
use lchd_core::model::{Detector, DetectorWeights, ModelConfig};
use lchd_core::synthesis::{split_dataset, synthesize_dataset, toy_corpus, Injector, ToyCorpusConfig};
use lchd_core::tokenizer::Vocab;
use lchd_core::training::{load_checkpoint, prepare, save_checkpoint, score_prepared, train, Checkpoint, TrainConfig};
use proptest::prelude::*;

fn corpus(n: usize) -> Vec<LabeledExample> {
    let pairs = toy_corpus(&ToyCorpusConfig {
        pairs: n,
        seed: 11,
        context_tokens: 120,
        ..Default::default()
    });
    synthesize_dataset(&pairs, 0.5, 11, &Injector::Rule).unwrap().examples
}

fn tiny(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            layers: 1,
            heads: 2,
            dim: 16,
            ffn_dim: 32,
            max_positions: 32,
            vocab_size: vocab.len(),
            dropout: 0.1,
        },
        plan: ChunkPlan::new(32, 4, 2).unwrap(),
        aggregator: AggregatorConfig {
            heads: 2,
            ..Default::default()
        },
    }
}

fn vocab_of(examples: &[LabeledExample]) -> Vocab {
    let texts: Vec<&str> = examples
        .iter()
        .flat_map(|e| [e.context.as_str(), e.response.as_str()])
        .collect();
    Vocab::build(&texts, 500).unwrap()
}

#[test]
fn examples_round_trip_through_jsonl() {
    let ex = corpus(20);
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &ex).unwrap();
    let back = read_examples(BufReader::new(buf.as_slice()), true).unwrap();
    assert_eq!(back, ex);
}

#[test]
fn splits_partition_by_id() {
    let ex = corpus(60);
    let s = split_dataset(&ex, (0.6, 0.2, 0.2), 4).unwrap();
    assert_eq!(s.train.len() + s.dev.len() + s.test.len(), ex.len());
    let ids = |xs: &[LabeledExample]| xs.iter().map(|e| e.id.clone()).collect::<HashSet<_>>();
    let (a, b, c) = (ids(&s.train), ids(&s.dev), ids(&s.test));
    assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
}

#[test]
fn trained_checkpoint_scores_identically_after_reload() {
    let ex = corpus(24);
    let vocab = vocab_of(&ex);
    let model = tiny(&vocab);
    let mut cfg = TrainConfig::new(model.clone());
    cfg.learning_rate = 1e-3;
    cfg.warmup_steps = 2;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    let out = train(DetectorWeights::init(&model, 2).unwrap(), &vocab, &ex[..16], &ex[16..], &cfg).unwrap();
    assert_eq!(out.history.len(), 2);
    assert!(out.history.iter().all(|h| h.train_loss.is_finite()));

    let ckpt = Checkpoint {
        config: model.clone(),
        train_config: Some(cfg),
        step: out.steps,
        metrics: out.best_metrics.clone(),
        weights: out.weights.clone(),
        vocab: vocab.clone(),
    };
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&ckpt, dir.path()).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap().into_detector().unwrap();
    let original = Detector::new(model, out.weights, vocab).unwrap();

    let items = prepare(&ex[16..], &original.vocab, &original.config).unwrap();
    let a = score_prepared(&original, &items, 3).unwrap();
    let b = score_prepared(&loaded, &items, 3).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn scores_do_not_depend_on_batch_composition() {
    let ex = corpus(10);
    let vocab = vocab_of(&ex);
    let model = tiny(&vocab);
    let det = Detector::new(model.clone(), DetectorWeights::init(&model, 5).unwrap(), vocab).unwrap();
    let items = prepare(&ex, &det.vocab, &det.config).unwrap();
    let batched = score_prepared(&det, &items, 10).unwrap();
    let single = score_prepared(&det, &items, 1).unwrap();
    for (x, y) in batched.iter().zip(&single) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synthesis_labels_agree_with_types(n in 4usize..30, seed in any::<u64>(), p in 0.0f64..=1.0) {
        let pairs = toy_corpus(&ToyCorpusConfig { pairs: n, seed, context_tokens: 80, ..Default::default() });
        let out = synthesize_dataset(&pairs, p, seed, &Injector::Rule).unwrap();
        prop_assert_eq!(out.examples.len(), n);
        for e in &out.examples {
            prop_assert!(e.validate().is_ok());
            prop_assert_eq!(e.label == Label::Hallucinated, e.injected_sentence_index.is_some());
        }
    }
}
