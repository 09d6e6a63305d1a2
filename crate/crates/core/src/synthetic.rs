//! Deterministic seed corpus for pretraining the base language model.
//!
//! Documents are short topical paragraphs produced from a small template
//! grammar. Each document sticks to one topic so that different documents
//! carry different content words, which is what content conditioning needs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Topic {
    nouns: &'static [&'static str],
    people: &'static [&'static str],
    places: &'static [&'static str],
    adjectives: &'static [&'static str],
    verbs: &'static [&'static str],
}

const TOPICS: &[Topic] = &[
    Topic {
        nouns: &["river", "storm", "forest", "harbor", "glacier", "valley", "flood", "drought"],
        people: &["farmers", "sailors", "rangers", "villagers"],
        places: &["coast", "mountains", "old bridge", "northern plains"],
        adjectives: &["cold", "quiet", "wild", "frozen", "rising", "dark"],
        verbs: &["crossed", "watched", "protected", "mapped", "flooded", "measured"],
    },
    Topic {
        nouns: &["team", "match", "goal", "coach", "season", "league", "stadium", "trophy"],
        people: &["fans", "players", "referees", "students"],
        places: &["city", "arena", "training ground", "capital"],
        adjectives: &["strong", "young", "famous", "tired", "fast", "proud"],
        verbs: &["won", "lost", "played", "celebrated", "trained", "scored"],
    },
    Topic {
        nouns: &["bread", "soup", "garden", "market", "kitchen", "apple", "cheese", "recipe"],
        people: &["cooks", "families", "bakers", "neighbors"],
        places: &["village", "restaurant", "farm", "town square"],
        adjectives: &["fresh", "warm", "sweet", "simple", "green", "golden"],
        verbs: &["cooked", "sold", "shared", "baked", "planted", "tasted"],
    },
    Topic {
        nouns: &["council", "election", "law", "budget", "mayor", "vote", "report", "policy"],
        people: &["officials", "voters", "lawyers", "reporters"],
        places: &["capital", "city hall", "parliament", "county"],
        adjectives: &["new", "public", "secret", "local", "final", "strict"],
        verbs: &["approved", "rejected", "announced", "debated", "signed", "questioned"],
    },
    Topic {
        nouns: &["experiment", "telescope", "signal", "planet", "cell", "engine", "theory", "sample"],
        people: &["scientists", "engineers", "doctors", "researchers"],
        places: &["laboratory", "university", "observatory", "desert station"],
        adjectives: &["bright", "strange", "careful", "tiny", "distant", "precise"],
        verbs: &["discovered", "tested", "built", "observed", "repaired", "studied"],
    },
    Topic {
        nouns: &["song", "guitar", "concert", "album", "band", "piano", "stage", "melody"],
        people: &["musicians", "singers", "listeners", "dancers"],
        places: &["theater", "club", "festival", "studio"],
        adjectives: &["loud", "gentle", "beautiful", "sad", "happy", "perfect"],
        verbs: &["recorded", "performed", "wrote", "heard", "loved", "played"],
    },
];

const NAMES: &[&str] = &["anna", "marco", "lena", "omar", "sofia", "james", "mei", "peter"];
const TIMES: &[&str] = &["today", "last week", "on monday", "this spring", "at night", "every year"];
const COUNTS: &[&str] = &["two", "three", "many", "several", "five", "ten"];

fn pick<'a>(rng: &mut impl Rng, items: &[&'a str]) -> &'a str {
    items.choose(rng).copied().expect("non-empty word list")
}

fn sentence(rng: &mut impl Rng, t: &Topic) -> String {
    let noun = pick(rng, t.nouns);
    let noun2 = pick(rng, t.nouns);
    let adj = pick(rng, t.adjectives);
    let verb = pick(rng, t.verbs);
    let place = pick(rng, t.places);
    let people = pick(rng, t.people);
    match rng.gen_range(0..6) {
        0 => format!("the {adj} {noun} {verb} the {noun2} near the {place} ."),
        1 => format!("{} said that the {noun} was {adj} {} .", pick(rng, NAMES), pick(rng, TIMES)),
        2 => format!("in the {place} , {people} {verb} {} {noun}s .", pick(rng, COUNTS)),
        3 => format!("many {people} believe the {noun2} is {adj} and {} .", pick(rng, t.adjectives)),
        4 => format!("{} the {people} {verb} a {adj} {noun} .", pick(rng, TIMES)),
        _ => format!("the {noun} and the {noun2} were {adj} , so {} {verb} them .", pick(rng, NAMES)),
    }
}

/// `n` documents of three to six sentences, each on a single topic.
pub fn documents(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let topic = &TOPICS[rng.gen_range(0..TOPICS.len())];
            let k = rng.gen_range(3..=6);
            (0..k).map(|_| sentence(&mut rng, topic)).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_single_line() {
        let a = documents(20, 3);
        assert_eq!(a, documents(20, 3));
        assert_ne!(a, documents(20, 4));
        assert!(a.iter().all(|d| !d.contains('\n') && d.is_ascii() && !d.is_empty()));
    }
}
