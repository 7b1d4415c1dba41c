//! Small generated conversations with known answers, for tests and demos.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::coqa::{CoqaDocument, Turn};

const NAMES: [&str; 24] = [
    "anna", "ben", "carla", "dev", "emil", "fiona", "gus", "hana", "ivan", "jade", "kofi", "lena",
    "milo", "nora", "omar", "pia", "quinn", "rosa", "sami", "tara", "uma", "vik", "wren", "yara",
];
const CITIES: [&str; 24] = [
    "paris", "lima", "oslo", "cairo", "delhi", "quito", "rome", "seoul", "tokyo", "dakar", "perth",
    "riga", "sofia", "hanoi", "bern", "doha", "kyiv", "lagos", "minsk", "nairobi", "porto", "vienna",
    "zagreb", "austin",
];
const COLORS: [&str; 12] = [
    "red", "blue", "green", "yellow", "black", "white", "pink", "brown", "gray", "orange",
    "purple", "silver",
];
const OBJECTS: [&str; 24] = [
    "bike", "car", "boat", "kite", "drum", "lamp", "chair", "hat", "coat", "ball", "book", "cup",
    "bag", "desk", "sofa", "clock", "guitar", "piano", "tent", "scarf", "watch", "phone", "sled",
    "wagon",
];
const ANIMALS: [&str; 12] = [
    "dog", "cat", "horse", "rabbit", "parrot", "turtle", "goat", "hamster", "duck", "pony",
    "lizard", "ferret",
];
const PET_NAMES: [&str; 24] = [
    "rex", "luna", "max", "bella", "oscar", "daisy", "rocky", "coco", "leo", "ruby", "toby",
    "nala", "ziggy", "pepper", "buddy", "olive", "bruno", "misty", "shadow", "biscuit", "pebble",
    "mango", "ginger", "socks",
];

fn cap(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

struct Person {
    name: String,
    city: String,
    color: String,
    object: String,
    animal: String,
    pet: String,
}

fn person(rng: &mut ChaCha8Rng, avoid: Option<&Person>) -> Person {
    loop {
        let p = Person {
            name: cap(NAMES.choose(rng).unwrap()),
            city: cap(CITIES.choose(rng).unwrap()),
            color: COLORS.choose(rng).unwrap().to_string(),
            object: OBJECTS.choose(rng).unwrap().to_string(),
            animal: ANIMALS.choose(rng).unwrap().to_string(),
            pet: cap(PET_NAMES.choose(rng).unwrap()),
        };
        match avoid {
            Some(a) if a.name == p.name || a.object == p.object || a.animal == p.animal => continue,
            _ => return p,
        }
    }
}

fn sentences(p: &Person) -> [String; 3] {
    [
        format!("{} lives in {}.", p.name, p.city),
        format!("{} has a {} {}.", p.name, p.color, p.object),
        format!("The {} of {} is called {}.", p.animal, p.name, p.pet),
    ]
}

/// Rationale text and the question/answer pair built around it.
struct Qa {
    question: String,
    answer: String,
    rationale: Option<String>,
}

fn make_qa(kind: usize, p: &Person, other: &Person, rng: &mut ChaCha8Rng, free_form: bool) -> Qa {
    let s = sentences(p);
    let strip = |x: &str| x.trim_end_matches('.').to_string();
    match kind {
        0 => Qa {
            question: format!("Where does {} live?", p.name),
            answer: if free_form && rng.random_bool(0.5) {
                format!("{} lives in {}", p.name, p.city)
            } else {
                p.city.clone()
            },
            rationale: Some(strip(&s[0])),
        },
        1 => Qa {
            question: format!("What color is the {} of {}?", p.object, p.name),
            answer: if free_form && rng.random_bool(0.5) {
                format!("it is {}", p.color)
            } else {
                p.color.clone()
            },
            rationale: Some(format!("a {} {}", p.color, p.object)),
        },
        2 => {
            let truth = rng.random_bool(0.5);
            let object = if truth { &p.object } else { &other.object };
            Qa {
                question: format!("Does {} have a {}?", p.name, object),
                answer: if truth { "yes" } else { "no" }.into(),
                rationale: Some(strip(&s[1])),
            }
        }
        3 => Qa {
            question: format!("What is the {} of {} called?", p.animal, p.name),
            answer: p.pet.clone(),
            rationale: Some(strip(&s[2])),
        },
        4 => {
            let truth = rng.random_bool(0.5);
            let city = if truth { &p.city } else { &other.city };
            Qa {
                question: format!("Does {} live in {}?", p.name, city),
                answer: if truth { "yes" } else { "no" }.into(),
                rationale: Some(strip(&s[0])),
            }
        }
        _ => Qa {
            question: format!("What is the {} of {} called?", other.animal, p.name),
            answer: "unknown".into(),
            rationale: None,
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub num_docs: usize,
    pub turns_per_doc: usize,
    /// Rephrase some answers so they are not exact story substrings.
    pub free_form: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_docs: 20,
            turns_per_doc: 3,
            free_form: false,
            seed: 0,
        }
    }
}

/// Generates conversations about two people; questions ask about the first.
pub fn synthetic_corpus(config: &SyntheticConfig) -> Vec<CoqaDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.num_docs)
        .map(|d| {
            let main = person(&mut rng, None);
            let other = person(&mut rng, Some(&main));
            let mut parts: Vec<String> = sentences(&main)
                .into_iter()
                .chain(sentences(&other).into_iter().take(2))
                .collect();
            parts.shuffle(&mut rng);
            let story = parts.join(" ");
            let mut kinds: Vec<usize> = (0..6).collect();
            kinds.shuffle(&mut rng);
            let turns = kinds
                .into_iter()
                .cycle()
                .take(config.turns_per_doc)
                .enumerate()
                .map(|(i, kind)| {
                    let qa = make_qa(kind, &main, &other, &mut rng, config.free_form);
                    let (span_start, span_end, span_text) = match &qa.rationale {
                        Some(r) => {
                            let byte = story.find(r.as_str()).expect("rationale in story");
                            let s = story[..byte].chars().count();
                            (s as i64, (s + r.chars().count()) as i64, r.clone())
                        }
                        None => (-1, -1, String::new()),
                    };
                    Turn {
                        turn_id: i as u32 + 1,
                        question: qa.question,
                        answer: qa.answer,
                        span_start,
                        span_end,
                        span_text,
                    }
                })
                .collect();
            CoqaDocument {
                id: format!("syn{d:04}"),
                source: "synthetic".into(),
                story,
                turns,
                additional_answers: BTreeMap::new(),
            }
        })
        .collect()
}

/// Every text a vocabulary for the corpus should cover.
pub fn corpus_texts(docs: &[CoqaDocument]) -> Vec<String> {
    let mut out = Vec::new();
    for d in docs {
        out.push(d.story.clone());
        for t in &d.turns {
            out.push(t.question.clone());
            out.push(t.answer.clone());
        }
    }
    out
}
