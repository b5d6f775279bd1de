//! Generated corpora for oracles, tests and demos.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Language, LabeledPost, Split};

const BENIGN: [&str; 20] = [
    "sunny", "garden", "coffee", "music", "river", "picnic", "puppy", "bakery", "concert", "holiday",
    "library", "meadow", "painting", "sunset", "festival", "breakfast", "harbor", "orchard", "poetry", "weekend",
];

const HOSTILE: [&str; 20] = [
    "idiot", "moron", "trash", "loser", "clown", "scum", "filthy", "vermin", "worthless", "pathetic",
    "disgusting", "creep", "coward", "rotten", "parasite", "garbage", "freak", "lowlife", "bigot", "dimwit",
];

fn post(id: String, words: Vec<&str>, a: &str, b: &str, split: Split) -> LabeledPost {
    LabeledPost::new(id, words.join(" "), a, b, Language::English, split).expect("generated labels are consistent")
}

fn sample<'a>(vocab: &[&'a str], len: usize, rng: &mut ChaCha8Rng) -> Vec<&'a str> {
    (0..len).map(|_| *vocab.choose(rng).unwrap()).collect()
}

/// Two classes drawn from disjoint word lists, alternating NOT/HOF.
fn two_vocabulary(n: usize, split: Split, prefix: &str, rng: &mut ChaCha8Rng) -> Vec<LabeledPost> {
    (0..n)
        .map(|i| {
            let len = rng.random_range(3..=6);
            if i % 2 == 0 {
                post(format!("{prefix}{i}"), sample(&BENIGN, len, rng), "NOT", "NONE", split)
            } else {
                post(format!("{prefix}{i}"), sample(&HOSTILE, len, rng), "HOF", "OFFN", split)
            }
        })
        .collect()
}

/// 32 training posts, 16 per task-A class, separable by vocabulary.
pub fn overfit_fixture() -> Vec<LabeledPost> {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    two_vocabulary(32, Split::Train, "fx", &mut rng)
}

/// 100 training and 40 test posts whose classes use disjoint vocabularies.
pub fn separable_corpus(seed: u64) -> (Vec<LabeledPost>, Vec<LabeledPost>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = two_vocabulary(100, Split::Train, "tr", &mut rng);
    let test = two_vocabulary(40, Split::Test, "te", &mut rng);
    (train, test)
}

const PERSONS: [&str; 6] = ["you", "your brother", "this guy", "that woman", "the coach", "my neighbour"];
const GROUPS: [&str; 4] = ["those people", "all of them", "that whole crowd", "these folks"];
const INSULTS: [&str; 8] = ["stupid", "pathetic", "disgusting", "useless", "idiotic", "worthless", "vile", "brainless"];
const PRAISE: [&str; 8] = ["brilliant", "kind", "lovely", "smart", "helpful", "wonderful", "honest", "gentle"];
const NEGATORS: [&str; 2] = ["not", "never"];
const PROFANITY: [&str; 4] = ["damn", "crap", "bloody hell", "freaking"];
const FILLERS: [&str; 8] = ["today", "honestly", "again", "lol", "for sure", "as usual", "i think", "right now"];

/// Posts whose label depends on context: an insult is hateful or offensive
/// unless negated, praise is offensive when negated. Profanity marks a
/// post profane regardless. Task B: profanity gives PRFN, a hostile remark
/// about a group gives HATE, one about a person gives OFFN.
///
/// The first 80% of posts are tagged train, the rest test.
pub fn negation_corpus(seed: u64, size: usize) -> Vec<LabeledPost> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_count = size * 4 / 5;
    (0..size)
        .map(|i| {
            let group = rng.random_bool(0.3);
            let subject = if group { GROUPS.choose(&mut rng) } else { PERSONS.choose(&mut rng) }.unwrap();
            let copula = if group || *subject == "you" { "are" } else { "is" };
            let insult = rng.random_bool(0.5);
            let negated = rng.random_bool(0.5);
            let profane = rng.random_bool(0.2);
            let adjective = if insult { INSULTS.choose(&mut rng) } else { PRAISE.choose(&mut rng) }.unwrap();
            let mut words = vec![*subject, copula];
            if negated {
                words.push(NEGATORS.choose(&mut rng).unwrap());
            }
            words.push(adjective);
            if profane {
                let at = rng.random_range(0..=words.len());
                words.insert(at, PROFANITY.choose(&mut rng).unwrap());
            }
            if rng.random_bool(0.6) {
                words.push(FILLERS.choose(&mut rng).unwrap());
            }
            let hostile = insult != negated;
            let (a, b) = if profane {
                ("HOF", "PRFN")
            } else if hostile && group {
                ("HOF", "HATE")
            } else if hostile {
                ("HOF", "OFFN")
            } else {
                ("NOT", "NONE")
            };
            let split = if i < train_count { Split::Train } else { Split::Test };
            post(format!("ng{i}"), words, a, b, split)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn overfit_fixture_shape() {
        let f = overfit_fixture();
        assert_eq!(f.len(), 32);
        assert_eq!(f.iter().filter(|p| p.task_a == 1).count(), 16);
        assert_eq!(f, overfit_fixture());
    }

    #[test]
    fn separable_vocabularies_are_disjoint() {
        let (train, test) = separable_corpus(4);
        assert_eq!((train.len(), test.len()), (100, 40));
        let words = |label: usize| -> HashSet<String> {
            train
                .iter()
                .chain(&test)
                .filter(|p| p.task_a == label)
                .flat_map(|p| p.text.split(' ').map(str::to_string).collect::<Vec<_>>())
                .collect()
        };
        assert!(words(0).is_disjoint(&words(1)));
    }

    #[test]
    fn negation_labels_follow_rule() {
        let c = negation_corpus(7, 600);
        assert_eq!(c.len(), 600);
        assert_eq!(c.iter().filter(|p| p.split == Split::Test).count(), 120);
        for p in &c {
            let has = |list: &[&str]| list.iter().any(|w| p.text.split(' ').any(|t| t == *w));
            if has(&["damn", "crap", "freaking"]) || p.text.contains("bloody hell") {
                assert_eq!(p.task_b, 3);
                continue;
            }
            let hostile = has(&INSULTS) != has(&NEGATORS);
            assert_eq!(p.task_a == 1, hostile, "{}", p.text);
        }
        let classes: HashSet<usize> = c.iter().map(|p| p.task_b).collect();
        assert_eq!(classes.len(), 4);
    }
}
