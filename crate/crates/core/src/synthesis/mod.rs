//! Balanced hallucination injection over document/summary pairs and the
//! dataset split.

pub mod rules;
pub mod toy;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use rules::{inject_baseless_rule, inject_contradictory_rule};
pub use toy::{toy_corpus, ToyCorpusConfig};

use crate::data::{DocumentPair, HallucinationType, InjectorKind, Label, LabeledExample};
use crate::error::{Error, Result};
use crate::llm_client::{ChatModel, INJECTION_TEMPERATURE};

pub const BASELESS_PROMPT: &str = "Add a complete sentence that is related to the topic but introduces some new information you make up. You can add the sentence anywhere in the paragraph but make sure it is a complete sentence and the paragraph is coherent. Reply with the whole paragraph that includes the sentence you added.";

pub const CONTRADICTORY_PROMPT: &str = "Given the paragraph, rewrite one sentence completely so that it utterly contradicts from its original sentence. You can choose any sentence in the paragraph but make sure the paragraph is still coherent and now has a claim that contradicts the original paragraph. Reply with the whole paragraph after the change.";

/// Sends the injection prompt for `kind` with the summary and validates the
/// reply.
pub fn inject_llm(summary: &str, kind: HallucinationType, model: &dyn ChatModel) -> Result<String> {
    let prompt = match kind {
        HallucinationType::Baseless => BASELESS_PROMPT,
        HallucinationType::Contradictory => CONTRADICTORY_PROMPT,
        HallucinationType::None => return Err(Error::Contract("no injection requested".into())),
    };
    let temperature = model.temperature_override().unwrap_or(INJECTION_TEMPERATURE);
    let reply = model.complete(prompt, summary, temperature)?;
    let reply = reply.trim();
    if reply.is_empty() {
        return Err(Error::InjectionRejected("empty reply".into()));
    }
    if reply == summary.trim() {
        return Err(Error::InjectionRejected("reply identical to input".into()));
    }
    Ok(reply.to_string())
}

pub enum Injector<'a> {
    Rule,
    Llm { model: &'a dyn ChatModel, max_in_flight: usize },
}

impl Injector<'_> {
    fn kind(&self) -> InjectorKind {
        match self {
            Injector::Rule => InjectorKind::Rule,
            Injector::Llm { .. } => InjectorKind::Llm,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisStats {
    pub total: usize,
    pub faithful: usize,
    pub hallucinated: usize,
    /// Types drawn before any fallback.
    pub assigned_baseless: usize,
    pub assigned_contradictory: usize,
    /// Emitted types.
    pub baseless: usize,
    pub contradictory: usize,
    /// Contradictory assignments that fell back to baseless.
    pub fallbacks: usize,
    /// Corrupted pairs emitted as faithful after an injector error.
    pub injector_failures: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisOutput {
    pub examples: Vec<LabeledExample>,
    pub stats: SynthesisStats,
}

/// Per-item seed derived from a base seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

enum Outcome {
    Faithful,
    Injected {
        text: String,
        kind: HallucinationType,
        sentence: Option<usize>,
        fallback: bool,
    },
    Failed,
}

fn rule_inject(reference: &str, kind: HallucinationType, seed: u64) -> Result<Outcome> {
    if kind == HallucinationType::Contradictory {
        match inject_contradictory_rule(reference, seed) {
            Ok((text, i)) => {
                return Ok(Outcome::Injected {
                    text,
                    kind,
                    sentence: Some(i),
                    fallback: false,
                })
            }
            Err(Error::NoCandidate) => {}
            Err(e) => return Err(e),
        }
    }
    let (text, i) = inject_baseless_rule(reference, seed)?;
    Ok(Outcome::Injected {
        text,
        kind: HallucinationType::Baseless,
        sentence: Some(i),
        fallback: kind == HallucinationType::Contradictory,
    })
}

/// Corrupts each pair with probability `p`, choosing the hallucination type
/// uniformly. Decisions are drawn sequentially from `seed`; injection itself
/// runs in parallel with per-pair seeds.
pub fn synthesize_dataset(pairs: &[DocumentPair], p: f64, seed: u64, injector: &Injector) -> Result<SynthesisOutput> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("corruption probability {p} outside [0, 1]")));
    }
    for pair in pairs {
        pair.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan: Vec<HallucinationType> = pairs
        .iter()
        .map(|_| {
            if rng.random::<f64>() < p {
                if rng.random_bool(0.5) {
                    HallucinationType::Baseless
                } else {
                    HallucinationType::Contradictory
                }
            } else {
                HallucinationType::None
            }
        })
        .collect();

    let run = |(i, (pair, &kind)): (usize, (&DocumentPair, &HallucinationType))| -> Outcome {
        if kind == HallucinationType::None {
            return Outcome::Faithful;
        }
        let result = match injector {
            Injector::Rule => rule_inject(&pair.reference, kind, derive_seed(seed, i as u64)),
            Injector::Llm { model, .. } => inject_llm(&pair.reference, kind, *model).map(|text| Outcome::Injected {
                text,
                kind,
                sentence: None,
                fallback: false,
            }),
        };
        result.unwrap_or_else(|e| {
            log::warn!("injection failed for pair {}: {e}; emitting it as faithful", pair.id);
            Outcome::Failed
        })
    };
    let jobs = pairs.par_iter().zip(plan.par_iter()).enumerate();
    let outcomes: Vec<Outcome> = match injector {
        Injector::Rule => jobs.map(run).collect(),
        Injector::Llm { max_in_flight, .. } => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads((*max_in_flight).max(1))
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            pool.install(|| jobs.map(run).collect())
        }
    };

    let mut stats = SynthesisStats {
        total: pairs.len(),
        ..Default::default()
    };
    let mut examples = Vec::with_capacity(pairs.len());
    for ((pair, kind), outcome) in pairs.iter().zip(&plan).zip(outcomes) {
        match kind {
            HallucinationType::Baseless => stats.assigned_baseless += 1,
            HallucinationType::Contradictory => stats.assigned_contradictory += 1,
            HallucinationType::None => {}
        }
        let mut ex = LabeledExample {
            id: pair.id.clone(),
            context: pair.context.clone(),
            response: pair.reference.clone(),
            label: Label::Faithful,
            hallucination_type: HallucinationType::None,
            injected_sentence_index: None,
            injector: injector.kind(),
        };
        match outcome {
            Outcome::Faithful => stats.faithful += 1,
            Outcome::Failed => {
                stats.faithful += 1;
                stats.injector_failures += 1;
            }
            Outcome::Injected {
                text,
                kind,
                sentence,
                fallback,
            } => {
                stats.hallucinated += 1;
                stats.fallbacks += usize::from(fallback);
                match kind {
                    HallucinationType::Baseless => stats.baseless += 1,
                    _ => stats.contradictory += 1,
                }
                ex.response = text;
                ex.label = Label::Hallucinated;
                ex.hallucination_type = kind;
                ex.injected_sentence_index = sentence;
            }
        }
        examples.push(ex);
    }
    Ok(SynthesisOutput { examples, stats })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: String,
    pub count: usize,
    pub hallucinated: usize,
    pub hallucinated_fraction: f64,
}

impl Splits {
    pub fn summary(&self) -> Vec<SplitSummary> {
        [("train", &self.train), ("dev", &self.dev), ("test", &self.test)]
            .into_iter()
            .map(|(name, xs)| {
                let h = xs.iter().filter(|x| x.label == Label::Hallucinated).count();
                SplitSummary {
                    split: name.into(),
                    count: xs.len(),
                    hallucinated: h,
                    hallucinated_fraction: h as f64 / xs.len() as f64,
                }
            })
            .collect()
    }
}

/// Seeded shuffle, then contiguous train/dev/test slices with rounded sizes
/// (each at least one example).
pub fn split_dataset(examples: &[LabeledExample], ratios: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (a, b, c) = ratios;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }
    let n = examples.len();
    if n < 3 {
        return Err(Error::Contract(format!("{n} examples cannot fill three splits")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((a * n as f64).round() as usize).clamp(1, n - 2);
    let n_dev = ((b * n as f64).round() as usize).clamp(1, n - n_train - 1);
    let take = |r: std::ops::Range<usize>| -> Vec<LabeledExample> { order[r].iter().map(|&i| examples[i].clone()).collect() };
    Ok(Splits {
        train: take(0..n_train),
        dev: take(n_train..n_train + n_dev),
        test: take(n_train + n_dev..n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{chat_body, MockServer, Reply};

    fn pairs(n: usize) -> Vec<DocumentPair> {
        toy_corpus(&ToyCorpusConfig {
            pairs: n,
            context_tokens: 60,
            seed: 1,
            ..Default::default()
        })
    }

    #[test]
    fn extremes_of_p() {
        let ps = pairs(30);
        let none = synthesize_dataset(&ps, 0.0, 1, &Injector::Rule).unwrap();
        assert!(none.examples.iter().all(|e| e.label == Label::Faithful));
        for (e, p) in none.examples.iter().zip(&ps) {
            assert_eq!(e.response, p.reference);
        }
        let all = synthesize_dataset(&ps, 1.0, 1, &Injector::Rule).unwrap();
        assert!(all.examples.iter().all(|e| e.label == Label::Hallucinated));
        assert!(all.examples.iter().all(|e| e.validate().is_ok()));
        assert!(synthesize_dataset(&ps, 1.5, 1, &Injector::Rule).is_err());
    }

    #[test]
    fn deterministic_in_seed() {
        let ps = pairs(40);
        let a = synthesize_dataset(&ps, 0.5, 9, &Injector::Rule).unwrap();
        let b = synthesize_dataset(&ps, 0.5, 9, &Injector::Rule).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn no_candidate_falls_back_to_baseless() {
        let ps = vec![DocumentPair {
            id: "x".into(),
            context: "Birds sing. Rivers flow.".into(),
            reference: "Birds sing.".into(),
        }];
        // find a seed whose draw is contradictory
        let out = (0..50)
            .map(|s| synthesize_dataset(&ps, 1.0, s, &Injector::Rule).unwrap())
            .find(|o| o.stats.assigned_contradictory == 1)
            .unwrap();
        assert_eq!(out.stats.fallbacks, 1);
        assert_eq!(out.examples[0].hallucination_type, HallucinationType::Baseless);
    }

    #[test]
    fn llm_injector_validation() {
        let echo = MockServer::start(vec![Reply::ok(&chat_body("Birds sing."))]);
        let mut cfg = crate::llm_client::ClientConfig::new(echo.url(), "m");
        cfg.max_retries = 0;
        let client = crate::llm_client::LlmClient::with_token(cfg.clone(), "t").unwrap();
        assert!(matches!(
            inject_llm("Birds sing.", HallucinationType::Baseless, &client),
            Err(Error::InjectionRejected(_))
        ));
        let good = MockServer::start(vec![Reply::ok(&chat_body("Birds sing. Wolves fly."))]);
        cfg.base_url = good.url();
        let client = crate::llm_client::LlmClient::with_token(cfg, "t").unwrap();
        let out = inject_llm("Birds sing.", HallucinationType::Contradictory, &client).unwrap();
        assert_eq!(out, "Birds sing. Wolves fly.");
        let body: serde_json::Value = serde_json::from_str(&good.requests()[0].body).unwrap();
        assert_eq!(body["messages"][0]["content"], CONTRADICTORY_PROMPT);
        assert_eq!(body["temperature"], 0.7);
    }

    #[test]
    fn llm_failures_become_faithful() {
        let server = MockServer::start(vec![Reply::status(400, "nope")]);
        let client = crate::llm_client::LlmClient::with_token(crate::llm_client::ClientConfig::new(server.url(), "m"), "t").unwrap();
        let ps = pairs(4);
        let out = synthesize_dataset(
            &ps,
            1.0,
            2,
            &Injector::Llm {
                model: &client,
                max_in_flight: 2,
            },
        )
        .unwrap();
        assert_eq!(out.stats.injector_failures, 4);
        assert!(out.examples.iter().all(|e| e.label == Label::Faithful && e.injector == InjectorKind::Llm));
        assert_eq!(out.examples.iter().map(|e| e.id.clone()).collect::<Vec<_>>(), ps.iter().map(|p| p.id.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn split_sizes() {
        let ex = synthesize_dataset(&pairs(10), 0.5, 3, &Injector::Rule).unwrap().examples;
        let s = split_dataset(&ex, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (8, 1, 1));
        assert_eq!(s, split_dataset(&ex, (0.8, 0.1, 0.1), 5).unwrap());
        assert!(split_dataset(&ex[..2], (0.8, 0.1, 0.1), 5).is_err());
        assert!(split_dataset(&ex, (0.8, 0.1, 0.2), 5).is_err());
        let s = split_dataset(&ex[..3], (0.98, 0.01, 0.01), 0).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (1, 1, 1));
    }
}
