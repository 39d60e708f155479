//! Perplexity scoring with a pluggable token scorer and a built-in add-k
//! n-gram language model.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::normalize;

/// Anything that can assign natural-log probabilities to each token of a
/// sequence given its prefix.
pub trait TokenScorer {
    fn log_probs(&self, tokens: &[String]) -> Vec<f64>;
}

/// `exp(−(1/N) Σ ln P(w_i | history))` over the normalized tokens of `text`.
pub fn perplexity(scorer: &impl TokenScorer, text: &str) -> Result<f64> {
    let tokens = normalize(text);
    if tokens.is_empty() {
        return Err(Error::Contract("perplexity of an empty token sequence".into()));
    }
    let lp = scorer.log_probs(&tokens);
    let mean = lp.iter().sum::<f64>() / tokens.len() as f64;
    Ok((-mean).exp())
}

/// Add-k smoothed n-gram model. Histories shorter than `order − 1` are
/// padded with a start symbol; unseen words map to a single unknown type.
#[derive(Clone, Debug)]
pub struct NGramLM {
    order: usize,
    k: f64,
    ids: HashMap<String, u32>,
    /// `count(h, w)` keyed by the full n-gram `h ++ [w]`.
    ngrams: HashMap<Vec<u32>, u64>,
    /// `count(h)` = Σ_w count(h, w).
    histories: HashMap<Vec<u32>, u64>,
}

const START: u32 = u32::MAX;

impl NGramLM {
    pub fn train<S: AsRef<str>>(corpus: &[S], order: usize, k: f64) -> Result<Self> {
        let mut lm = Self::empty(order, k)?;
        let streams: Vec<Vec<String>> = corpus.iter().map(|t| normalize(t.as_ref())).collect();
        if streams.iter().all(Vec::is_empty) {
            return Err(Error::EmptyCorpus);
        }
        for tok in streams.iter().flatten() {
            let next = lm.ids.len() as u32;
            lm.ids.entry(tok.clone()).or_insert(next);
        }
        for stream in &streams {
            let ids = lm.to_ids(stream);
            for i in 0..ids.len() {
                let gram = lm.gram(&ids, i);
                *lm.histories.entry(gram[..order - 1].to_vec()).or_default() += 1;
                *lm.ngrams.entry(gram).or_default() += 1;
            }
        }
        Ok(lm)
    }

    /// Model with the given word types and no counts: every token has
    /// probability exactly `1/V`.
    pub fn with_vocab<S: AsRef<str>>(words: &[S], order: usize, k: f64) -> Result<Self> {
        let mut lm = Self::empty(order, k)?;
        for w in words {
            let next = lm.ids.len() as u32;
            lm.ids.entry(w.as_ref().to_string()).or_insert(next);
        }
        Ok(lm)
    }

    fn empty(order: usize, k: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("n-gram order must be ≥ 1".into()));
        }
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::Config(format!("smoothing constant {k} must be positive")));
        }
        Ok(NGramLM {
            order,
            k,
            ids: HashMap::new(),
            ngrams: HashMap::new(),
            histories: HashMap::new(),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Vocabulary size including the unknown type.
    pub fn vocab_size(&self) -> usize {
        self.ids.len() + 1
    }

    fn unk(&self) -> u32 {
        self.ids.len() as u32
    }

    fn to_ids(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.ids.get(t).copied().unwrap_or(self.unk())).collect()
    }

    /// The n-gram ending at position `i`, left-padded with start symbols.
    fn gram(&self, ids: &[u32], i: usize) -> Vec<u32> {
        let n = self.order;
        let mut g = Vec::with_capacity(n);
        for j in (0..n).rev() {
            g.push(if i >= j { ids[i - j] } else { START });
        }
        g
    }

    /// `P(w | h)` where `gram = h ++ [w]`.
    fn prob(&self, gram: &[u32]) -> f64 {
        let c_hw = self.ngrams.get(gram).copied().unwrap_or(0) as f64;
        let c_h = self.histories.get(&gram[..self.order - 1]).copied().unwrap_or(0) as f64;
        (c_hw + self.k) / (c_h + self.k * self.vocab_size() as f64)
    }

    /// Conditional probability of `word` after `history` (last `order − 1`
    /// tokens are used; shorter histories are start-padded).
    pub fn conditional(&self, history: &[String], word: &str) -> f64 {
        let mut toks: Vec<String> = history.to_vec();
        toks.push(word.to_string());
        let ids = self.to_ids(&toks);
        self.prob(&self.gram(&ids, ids.len() - 1))
    }
}

impl TokenScorer for NGramLM {
    fn log_probs(&self, tokens: &[String]) -> Vec<f64> {
        let ids = self.to_ids(tokens);
        (0..ids.len()).map(|i| self.prob(&self.gram(&ids, i)).ln()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub count: usize,
    pub mean_ppl: f64,
    pub median_ppl: f64,
    /// Mean difference from the original group.
    pub delta: f64,
}

fn summarize(scorer: &impl TokenScorer, texts: &[String]) -> Result<(f64, f64)> {
    if texts.is_empty() {
        return Err(Error::Contract("empty text group".into()));
    }
    let mut ppl: Vec<f64> = texts.iter().map(|t| perplexity(scorer, t)).collect::<Result<_>>()?;
    let mean = ppl.iter().sum::<f64>() / ppl.len() as f64;
    ppl.sort_by(f64::total_cmp);
    let mid = ppl.len() / 2;
    let median = if ppl.len().is_multiple_of(2) {
        (ppl[mid - 1] + ppl[mid]) / 2.0
    } else {
        ppl[mid]
    };
    Ok((mean, median))
}

/// Mean and median perplexity of both groups; `delta` is injected minus
/// original.
pub fn verify_corpus(scorer: &impl TokenScorer, originals: &[String], injected: &[String]) -> Result<Vec<GroupReport>> {
    let (om, omed) = summarize(scorer, originals)?;
    let (im, imed) = summarize(scorer, injected)?;
    Ok(vec![
        GroupReport {
            group: "original".into(),
            count: originals.len(),
            mean_ppl: om,
            median_ppl: omed,
            delta: 0.0,
        },
        GroupReport {
            group: "injected".into(),
            count: injected.len(),
            mean_ppl: im,
            median_ppl: imed,
            delta: im - om,
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Fixed(Vec<f64>);

    impl TokenScorer for Fixed {
        fn log_probs(&self, tokens: &[String]) -> Vec<f64> {
            (0..tokens.len()).map(|i| self.0[i % self.0.len()].ln()).collect()
        }
    }

    fn toks(s: &str) -> Vec<String> {
        normalize(s)
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(perplexity(&Fixed(vec![1.0]), "a b c").unwrap(), 1.0);
        let p = perplexity(&Fixed(vec![0.5, 0.25, 0.125]), "x y z").unwrap();
        assert!((p - 4.0).abs() < 1e-12);
        assert!(perplexity(&Fixed(vec![1.0]), "   ").is_err());
    }

    #[test]
    fn unigram_symmetry_and_bigram_limit() {
        let lm = NGramLM::train(&["a b a b"], 1, 1e-9).unwrap();
        assert!((lm.conditional(&[], "a") - lm.conditional(&[], "b")).abs() < 1e-9);
        let lm = NGramLM::train(&["a b a b a b"], 2, 1e-9).unwrap();
        assert!((lm.conditional(&toks("a"), "b") - 1.0).abs() < 1e-6);
    }

    #[test]
    fn huge_k_is_uniform() {
        let lm = NGramLM::train(&["the cat sat on the mat"], 3, 1e9).unwrap();
        let v = lm.vocab_size() as f64;
        assert!((lm.conditional(&toks("the cat"), "sat") - 1.0 / v).abs() < 1e-6);
    }

    #[test]
    fn uniform_model_scores_v() {
        let words: Vec<String> = (0..999).map(|i| format!("w{i}")).collect();
        let lm = NGramLM::with_vocab(&words, 3, 0.01).unwrap();
        assert_eq!(lm.vocab_size(), 1000);
        let p = perplexity(&lm, "w1 w5 w7 unseen w3").unwrap();
        assert!((p - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        assert!(matches!(NGramLM::train(&[" "], 2, 0.1), Err(Error::EmptyCorpus)));
        assert!(NGramLM::train(&["a"], 0, 0.1).is_err());
        assert!(NGramLM::train(&["a"], 2, 0.0).is_err());
    }

    #[test]
    fn verify_report_shape() {
        let lm = NGramLM::train(&["the army is weak . the city is old ."], 2, 0.01).unwrap();
        let orig = vec!["the army is weak .".to_string(), "the city is old .".to_string()];
        let same = verify_corpus(&lm, &orig, &orig).unwrap();
        assert_eq!(same[1].delta, 0.0);
        let mut noisy = orig.clone();
        noisy.push("zq xv kk pw rr".into());
        let r = verify_corpus(&lm, &orig, &noisy).unwrap();
        assert!(r[1].mean_ppl > r[0].mean_ppl);
        let json = serde_json::to_value(&r).unwrap();
        for key in ["group", "count", "mean_ppl", "median_ppl", "delta"] {
            assert!(json[0].get(key).is_some());
        }
    }

    proptest! {
        #[test]
        fn conditionals_sum_to_one(hist in prop::collection::vec(0usize..4, 0..3), order in 1usize..4) {
            let corpus = ["a b c a b d a c", "d d a b"];
            let lm = NGramLM::train(&corpus, order, 0.3).unwrap();
            let words = ["a", "b", "c", "d"];
            let h: Vec<String> = hist.iter().map(|&i| words[i].to_string()).collect();
            let mut total: f64 = words.iter().map(|w| lm.conditional(&h, w)).sum();
            total += lm.conditional(&h, "never-seen");
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn equal_token_streams_score_equally(words in prop::collection::vec("[a-d]", 1..10)) {
            let lm = NGramLM::train(&["a b c d a b"], 3, 0.1).unwrap();
            let spaced = words.join(" ");
            let upper = words.join("   ").to_uppercase();
            prop_assert_eq!(perplexity(&lm, &spaced).unwrap(), perplexity(&lm, &upper).unwrap());
        }
    }
}
