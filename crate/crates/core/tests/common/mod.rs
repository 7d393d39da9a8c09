//! Seeded synthetic corpora shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use coach::corpus::{LabeledUtterance, SlotRegistry, SlotType, SplitSpec};
use coach::embeddings::EmbeddingTable;
use coach::model::ModelConfig;
use coach::rng::{indexed_rng, stream_rng, Stream};
use coach::trainer::{training_vocabulary, TrainConfig};
use rand::seq::SliceRandom;
use rand::Rng;

/// A pattern is a list of pieces: literal words or `{slot}` holes.
fn fill<R: Rng>(pattern: &str, values: &BTreeMap<&str, Vec<&str>>, domain: &str, rng: &mut R) -> LabeledUtterance {
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    for piece in pattern.split(' ') {
        if let Some(slot) = piece.strip_prefix('{').and_then(|p| p.strip_suffix('}')) {
            let value = values[slot].choose(rng).unwrap();
            for (k, w) in value.split(' ').enumerate() {
                tokens.push(w.to_owned());
                labels.push(if k == 0 { format!("B-{slot}") } else { format!("I-{slot}") });
            }
        } else {
            tokens.push(piece.to_owned());
            labels.push("O".to_owned());
        }
    }
    LabeledUtterance::new(tokens, labels, domain).unwrap()
}

/// The 50 words of the overfit corpus.
pub const OVERFIT_WORDS: [&str; 50] = [
    "please", "show", "me", "the", "weather", "in", "for", "play", "some", "by", "book", "a", "table", "at", "on",
    "find", "songs", "from", "what", "is", "it", "like", "with", "friends", "now", "paris", "london", "tokyo",
    "berlin", "madrid", "today", "tomorrow", "monday", "friday", "sunday", "adele", "queen", "drake", "prince",
    "bjork", "luigi", "sakura", "bistro", "noodle", "bar", "city", "name", "date", "artist", "restaurant",
];

/// 30 utterances over 4 slot types drawn from [`OVERFIT_WORDS`].
pub fn overfit_corpus(seed: u64) -> (Vec<LabeledUtterance>, SlotRegistry) {
    let values: BTreeMap<&str, Vec<&str>> = [
        ("city", vec!["paris", "london", "tokyo", "berlin", "madrid"]),
        ("date", vec!["today", "tomorrow", "monday", "friday", "sunday"]),
        ("artist", vec!["adele", "queen", "drake", "prince", "bjork"]),
        ("restaurant", vec!["luigi", "sakura bistro", "noodle bar", "luigi bar"]),
    ]
    .into();
    let patterns = [
        "please show me the weather in {city} for {date}",
        "what is the weather like in {city}",
        "play some songs by {artist}",
        "play {artist} now",
        "find songs by {artist} from {city}",
        "book a table at {restaurant} on {date}",
        "book a table at {restaurant} in {city} with friends",
        "find me a table at {restaurant}",
    ];
    let mut rng = stream_rng(seed, Stream::Synthetic);
    let utts = (0..30)
        .map(|i| fill(patterns[i % patterns.len()], &values, "assist", &mut rng))
        .collect();
    let mut reg = SlotRegistry::new();
    for (name, desc) in [("city", "city name"), ("date", "date"), ("artist", "artist name"), ("restaurant", "restaurant name")] {
        reg.insert("assist", SlotType::new(name, desc)).unwrap();
    }
    (utts, reg)
}

/// Three domains sharing `city`, `date` and the carrier "called"; each has
/// one exclusive slot, all described as "... name".
pub fn three_domain_corpora(seed: u64, per_domain: usize) -> (BTreeMap<String, Vec<LabeledUtterance>>, SlotRegistry) {
    let values: BTreeMap<&str, Vec<&str>> = [
        ("city", vec!["paris", "london", "tokyo", "berlin", "madrid", "rome", "oslo", "lima", "cairo", "dublin"]),
        ("date", vec!["today", "tomorrow", "monday", "friday", "next week", "this weekend", "tonight"]),
        ("playlist", vec!["chill vibes", "road trip", "morning mix", "deep focus", "summer hits", "rainy days"]),
        ("airline", vec!["sky jet", "blue air", "sun wings", "north star", "polar air"]),
        ("restaurant_name", vec!["golden fork", "green olive", "little saigon", "blue lagoon", "red lantern"]),
    ]
    .into();
    let domains: [(&str, &str, &str, [&str; 6]); 3] = [
        (
            "music",
            "playlist",
            "playlist name",
            [
                "play the playlist called {playlist}",
                "add this song to the playlist called {playlist}",
                "play music from {city} {date}",
                "find concerts in {city} on {date}",
                "shuffle the playlist called {playlist} {date}",
                "play songs popular in {city}",
            ],
        ),
        (
            "travel",
            "airline",
            "airline name",
            [
                "book a flight to {city} on {date}",
                "find the airline called {airline}",
                "book a flight with the airline called {airline} to {city}",
                "show flights to {city} {date}",
                "is the airline called {airline} flying {date}",
                "find hotels in {city}",
            ],
        ),
        (
            "dining",
            "restaurant_name",
            "restaurant name",
            [
                "book a table in {city} on {date}",
                "find the restaurant called {restaurant_name}",
                "reserve the restaurant called {restaurant_name} for {date}",
                "show restaurants in {city}",
                "is the restaurant called {restaurant_name} open {date}",
                "find food in {city} {date}",
            ],
        ),
    ];
    let mut reg = SlotRegistry::new();
    let mut corpora = BTreeMap::new();
    for (d, (domain, slot, desc, patterns)) in domains.iter().enumerate() {
        reg.insert(domain, SlotType::new("city", "city name")).unwrap();
        reg.insert(domain, SlotType::new("date", "date")).unwrap();
        reg.insert(domain, SlotType::new(*slot, desc)).unwrap();
        let mut rng = indexed_rng(seed, Stream::Synthetic, d as u64);
        let utts = (0..per_domain)
            .map(|i| fill(patterns[i % patterns.len()], &values, domain, &mut rng))
            .collect();
        corpora.insert(domain.to_string(), utts);
    }
    (corpora, reg)
}

/// Random-init embeddings over the split's training vocabulary.
pub fn random_table(split: &SplitSpec, reg: &SlotRegistry, word_dim: usize, char_dim: usize, seed: u64) -> EmbeddingTable {
    let words = training_vocabulary(&split.train, reg);
    EmbeddingTable::random(words, word_dim, char_dim, 512, &mut stream_rng(seed, Stream::Init)).unwrap()
}

/// Small configuration for tests.
pub fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 0.005,
        model: ModelConfig {
            hidden: 16,
            layers: 1,
            dropout: 0.0,
            ..ModelConfig::default()
        },
        batch_size: 8,
        seed,
        ..TrainConfig::default()
    }
}

/// A split that trains, validates and tests on the same utterances.
pub fn self_split(utts: Vec<LabeledUtterance>, seed: u64) -> SplitSpec {
    SplitSpec {
        train: utts.clone(),
        validation: utts.clone(),
        test: utts,
        target_domain: String::new(),
        source_slot_names: Default::default(),
        seed,
        few_shot: 0,
        warnings: vec![],
    }
}
