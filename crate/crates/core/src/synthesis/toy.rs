//! Seeded grammar producing long document / summary pairs whose summaries
//! restate a subset of the document's facts.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DocumentPair;
use crate::tokenizer::normalize;

const ENTITIES: [&str; 40] = [
    "Aldric", "Brenna", "Cedric", "Dagna", "Edric", "Fiora", "Garrick", "Helena", "Ivor", "Jorunn", "Kaelen",
    "Liora", "Matthias", "Nessa", "Orrin", "Perrin", "Rowena", "Soren", "Talia", "Ulric", "Vera", "Wendel",
    "Yara", "Alaric", "Beatrix", "Corin", "Delia", "Emeric", "Freya", "Gideon", "Hester", "Isolde", "Jasper",
    "Katrin", "Leopold", "Mirela", "Nikolai", "Ottilie", "Piers", "Rosalind",
];

const PLACES: [&str; 20] = [
    "Carden", "Varn", "Eastmere", "Highfold", "Marrowby", "Stonecross", "Wyndham", "Ashford", "Brightwater",
    "Coldharbour", "Dunmore", "Elmstead", "Fairhaven", "Greywick", "Hollowmere", "Ironvale", "Kingsreach",
    "Larkspur", "Northwold", "Oakhurst",
];

const ADJECTIVES: [&str; 28] = [
    "brave", "cowardly", "loyal", "treacherous", "honest", "deceitful", "kind", "cruel", "wise", "foolish",
    "rich", "poor", "weak", "strong", "calm", "restless", "proud", "humble", "reliable", "tired", "curious",
    "silent", "careful", "famous", "clever", "patient", "gentle", "stubborn",
];

const PLACE_ADJECTIVES: [&str; 10] = [
    "safe", "dangerous", "ancient", "modern", "crowded", "quiet", "wealthy", "remote", "cold", "green",
];

const OBJECTS: [&str; 12] = [
    "horse", "sword", "book", "ship", "farm", "lantern", "cloak", "shield", "letter", "ring", "hound", "boat",
];

const NUMBERS: [&str; 6] = ["two", "three", "four", "five", "six", "seven"];

const SKILLS: [&str; 12] = [
    "read old maps", "ride through the night", "speak the northern tongue", "forge fine blades", "sail in storms",
    "heal the sick", "track wolves", "play the harp", "brew strong ale", "read the stars", "climb the cliffs",
    "mend broken nets",
];

const RELATIONS: [&str; 4] = ["friends", "enemies", "cousins", "rivals"];

const FILLERS: [&str; 16] = [
    "Rain fell over the hills for many days.",
    "The road to the coast wound between low stone walls.",
    "Smoke rose from the chimneys in the evening.",
    "Merchants gathered in the square each morning.",
    "The river ran high after the spring thaw.",
    "Bells rang from the tower at dusk.",
    "Travelers spoke of the long winter to come.",
    "The harvest that year came late.",
    "Wind rattled the shutters of the old inn.",
    "Children played by the well near the market.",
    "Lanterns were lit along the harbor wall.",
    "The forest paths grew muddy in autumn.",
    "A fog settled over the valley before dawn.",
    "Fishermen mended their nets on the shore.",
    "The great hall smelled of pine and bread.",
    "Snow covered the mountain passes until spring.",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusConfig {
    pub pairs: usize,
    /// Approximate context length in tokens.
    pub context_tokens: usize,
    /// Facts restated in each summary.
    pub summary_facts: usize,
    /// Probability that a generated fact is stated in negated form.
    pub negation_rate: f64,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        ToyCorpusConfig {
            pairs: 100,
            context_tokens: 2000,
            summary_facts: 6,
            negation_rate: 0.03,
            seed: 0,
        }
    }
}

struct Cast<'a> {
    people: Vec<&'a str>,
    places: Vec<&'a str>,
}

fn fact(rng: &mut ChaCha8Rng, cast: &Cast, negate: bool) -> String {
    let e = *cast.people.choose(rng).unwrap();
    let p = *cast.places.choose(rng).unwrap();
    let not = if negate { " not" } else { "" };
    match rng.random_range(0..9) {
        0 => format!("{e} is{not} {}.", ADJECTIVES.choose(rng).unwrap()),
        1 => format!("{e} was{not} born in {p}."),
        2 => format!("{e} has{not} {} {}s.", NUMBERS.choose(rng).unwrap(), OBJECTS.choose(rng).unwrap()),
        3 => format!("{e} can{not} {}.", SKILLS.choose(rng).unwrap()),
        4 => format!("The town of {p} is{not} {}.", PLACE_ADJECTIVES.choose(rng).unwrap()),
        5 => {
            let other = loop {
                let o = *cast.people.choose(rng).unwrap();
                if o != e {
                    break o;
                }
            };
            format!("{e} and {other} are{not} {}.", RELATIONS.choose(rng).unwrap())
        }
        6 => format!("{e} will{not} travel to {p} in the spring."),
        7 => format!("The people of {p} were{not} {}.", ADJECTIVES.choose(rng).unwrap()),
        _ => format!("{e} should{not} leave {p} before the winter."),
    }
}

fn make_pair(rng: &mut ChaCha8Rng, cfg: &ToyCorpusConfig, index: usize) -> DocumentPair {
    let mut people = ENTITIES.to_vec();
    people.shuffle(rng);
    people.truncate(8);
    let mut places = PLACES.to_vec();
    places.shuffle(rng);
    places.truncate(4);
    let cast = Cast { people, places };

    let mut sentences = Vec::new();
    let mut facts = Vec::new();
    let mut tokens = 0;
    while tokens < cfg.context_tokens {
        let s = if rng.random_bool(0.5) {
            let negate = rng.random_bool(cfg.negation_rate);
            let f = fact(rng, &cast, negate);
            facts.push(sentences.len());
            f
        } else {
            FILLERS.choose(rng).unwrap().to_string()
        };
        tokens += normalize(&s).len();
        sentences.push(s);
    }
    if facts.is_empty() {
        facts.push(sentences.len());
        sentences.push(fact(rng, &cast, false));
    }
    let mut chosen: Vec<usize> = facts
        .choose_multiple(rng, cfg.summary_facts.clamp(1, facts.len()))
        .copied()
        .collect();
    chosen.sort_unstable();
    let reference = chosen
        .iter()
        .map(|&i| sentences[i].as_str())
        .collect::<Vec<_>>()
        .join(" ");
    DocumentPair {
        id: format!("toy-{index:05}"),
        context: sentences.join(" "),
        reference,
    }
}

/// Deterministic in `cfg`.
pub fn toy_corpus(cfg: &ToyCorpusConfig) -> Vec<DocumentPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.pairs).map(|i| make_pair(&mut rng, cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::rules::RESERVED_ENTITIES;

    #[test]
    fn deterministic_and_sized() {
        let cfg = ToyCorpusConfig {
            pairs: 5,
            seed: 3,
            ..Default::default()
        };
        let a = toy_corpus(&cfg);
        assert_eq!(a, toy_corpus(&cfg));
        for p in &a {
            let n = normalize(&p.context).len();
            assert!((2000..2100).contains(&n), "{n}");
            for sentence in crate::tokenizer::split_sentences(&p.reference) {
                assert!(p.context.contains(sentence));
            }
        }
    }

    #[test]
    fn reserved_entities_never_generated() {
        for name in RESERVED_ENTITIES {
            assert!(!ENTITIES.contains(&name) && !PLACES.contains(&name));
        }
        let corpus = toy_corpus(&ToyCorpusConfig {
            pairs: 20,
            ..Default::default()
        });
        for p in corpus {
            for name in RESERVED_ENTITIES {
                assert!(!p.context.contains(name));
            }
        }
    }
}
