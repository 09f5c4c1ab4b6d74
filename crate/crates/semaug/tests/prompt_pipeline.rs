//! End-to-end curation pipeline on the shipped fixtures: similarity prune,
//! frequency prune, synonym merge, source-word exclusion, templating.

use std::collections::BTreeSet;

use semaug::prompt::{
    build_similarity_encoder, generate_prompts, load_rank_table, load_wordlist, merge_synonyms,
    prune_by_frequency, prune_by_similarity, MergeSpec, WordList, SOURCE_PROMPT,
    TARGET_PROMPT_TEMPLATE,
};

fn fixture(name: &str) -> String {
    format!("{}/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

const PINNED_INTERMEDIATE: [&str; 24] = [
    "draft", "easter", "elements", "depression", "wave", "quiet", "snow", "sunshine", "fog",
    "blast", "freeze", "breath", "wind", "atmosphere", "rainfall", "warming", "trade", "blow",
    "calm", "cyclone", "rain", "air", "low", "high",
];

fn run_pipeline() -> (WordList, WordList) {
    let hyponyms = load_wordlist(fixture("hyponyms_weather.txt")).unwrap();
    assert_eq!(hyponyms.len(), 175);
    let related: BTreeSet<String> = std::fs::read_to_string(fixture("weather_related_words.txt"))
        .unwrap()
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect();
    let bundle = build_similarity_encoder::<f32>(&hyponyms, "weather", &related, 7);
    let after_sim = prune_by_similarity(&hyponyms, "weather", 0.5, &bundle).unwrap();
    let ranks = load_rank_table(fixture("glove_ranks.txt")).unwrap();
    let after_freq = prune_by_frequency(&after_sim, &ranks, 10_000).unwrap();
    let merge = MergeSpec::load(fixture("merge_weather.json")).unwrap();
    let merged = merge_synonyms(&after_freq, &merge);
    (after_freq, merged)
}

#[test]
fn pipeline_reproduces_the_pinned_intermediate_list() {
    let (intermediate, _) = run_pipeline();
    assert_eq!(intermediate.words, PINNED_INTERMEDIATE);
}

#[test]
fn merge_and_exclusion_yield_the_final_weather_words() {
    let (_, merged) = run_pipeline();
    // sunshine names the source domain and is excluded after the merge
    let finals: Vec<String> = merged
        .words
        .iter()
        .filter(|w| *w != "sunshine")
        .cloned()
        .collect();
    assert!(merged.words.contains(&"sunshine".to_string()));
    let expected = load_wordlist(fixture("weather_words_final.txt")).unwrap();
    assert_eq!(finals, expected.words);
    let as_set: BTreeSet<&str> = finals.iter().map(|s| s.as_str()).collect();
    assert_eq!(
        as_set,
        BTreeSet::from(["snow", "fog", "cloudy", "rain", "stormy"])
    );
}

#[test]
fn curated_words_generate_fifteen_prompts() {
    let (_, merged) = run_pipeline();
    let weathers = WordList::new(
        merged.words.iter().filter(|w| *w != "sunshine").cloned(),
        "weathers",
    );
    let times = WordList::new(["day", "night", "evening"].map(String::from), "times");
    let set = generate_prompts(&weathers, &times, TARGET_PROMPT_TEMPLATE, SOURCE_PROMPT).unwrap();
    assert_eq!(set.m(), 15);
    for t in &set.targets {
        assert!(t.text.contains(&t.weather) && t.text.contains(&t.time));
        assert!(t.text.starts_with("an image taken on a "));
    }
    assert!(set
        .targets
        .iter()
        .any(|t| t.text == "an image taken on a rain night"));
}
