//! Domain-prompt curation: word-list ingestion, similarity and frequency
//! pruning, synonym merging, and prompt templating.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderBundle, EncoderConfig, Vocab};
use crate::error::{Error, Result};
use crate::nn::LinearLayer;
use crate::rng::{self, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default target-prompt template; `{weather}` and `{time}` are substituted.
pub const TARGET_PROMPT_TEMPLATE: &str = "an image taken on a {weather} {time}";
/// Default source-domain prompt.
pub const SOURCE_PROMPT: &str = "an image taken during the day";
/// Default times of day paired with the weather words.
pub const TIMES_OF_DAY: [&str; 3] = ["day", "night", "evening"];

/// Ordered, deduplicated lowercase word list with a stage label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordList {
    pub words: Vec<String>,
    pub provenance: String,
}

impl WordList {
    /// Lowercases, drops empties and deduplicates preserving first
    /// occurrence.
    pub fn new(words: impl IntoIterator<Item = String>, provenance: impl Into<String>) -> Self {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for w in words {
            let w = w.trim().to_lowercase();
            if w.is_empty() || seen.contains(&w) {
                continue;
            }
            seen.insert(w.clone());
            out.push(w);
        }
        WordList {
            words: out,
            provenance: provenance.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// One word or phrase per line; blank lines ignored.
pub fn load_wordlist(path: impl AsRef<Path>) -> Result<WordList> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "wordlist".into());
    Ok(WordList::new(text.lines().map(|l| l.to_string()), name))
}

/// word -> corpus frequency rank (1 = most frequent).
#[derive(Debug, Clone, Default)]
pub struct RankTable(pub BTreeMap<String, u32>);

pub fn load_rank_table(path: impl AsRef<Path>) -> Result<RankTable> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (word, rank) = line.rsplit_once(char::is_whitespace).ok_or_else(|| {
            Error::invalid(format!("rank table line {} lacks a rank", lineno + 1))
        })?;
        let rank: u32 = rank.trim().parse().map_err(|_| {
            Error::invalid(format!("rank table line {}: bad rank {rank:?}", lineno + 1))
        })?;
        map.insert(word.trim().to_lowercase(), rank);
    }
    Ok(RankTable(map))
}

/// Synonym folding: map words to canonical forms, drop ambiguous ones.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MergeSpec {
    pub replace_map: BTreeMap<String, String>,
    pub drop_set: BTreeSet<String>,
}

impl MergeSpec {
    pub fn validate(&self) -> Result<()> {
        for canonical in self.replace_map.values() {
            if self.drop_set.contains(canonical) {
                return Err(Error::invalid(format!(
                    "canonical word {canonical:?} is also in drop_set"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let spec: MergeSpec = serde_json::from_slice(&std::fs::read(path)?)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Keep the words whose embedding has cosine similarity >= `threshold` with
/// the anchor word; order preserved.
pub fn prune_by_similarity<T: Scalar>(
    words: &WordList,
    anchor: &str,
    threshold: f64,
    bundle: &EncoderBundle<T>,
) -> Result<WordList> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!(
            "similarity threshold {threshold} outside [-1, 1]"
        )));
    }
    let anchor_emb = bundle.encode_text(anchor)?;
    let mut kept = Vec::new();
    for w in &words.words {
        let e = bundle.encode_text(w)?;
        let cos = e.cosine_similarity(&anchor_emb)?.as_f64();
        if cos >= threshold {
            kept.push(w.clone());
        }
    }
    Ok(WordList::new(
        kept,
        format!("{} | similarity>={threshold} vs {anchor:?}", words.provenance),
    ))
}

/// Keep the words ranked within the top-k; words absent from the table drop.
pub fn prune_by_frequency(words: &WordList, ranks: &RankTable, top_k: u32) -> Result<WordList> {
    if top_k == 0 {
        return Err(Error::invalid("top_k must be positive"));
    }
    let kept = words
        .words
        .iter()
        .filter(|w| ranks.0.get(*w).is_some_and(|&r| r <= top_k))
        .cloned();
    Ok(WordList::new(
        kept,
        format!("{} | top-{top_k} frequency", words.provenance),
    ))
}

/// Apply the replace map (identity when unmapped), remove dropped words,
/// deduplicate preserving first appearance.
pub fn merge_synonyms(words: &WordList, spec: &MergeSpec) -> WordList {
    let mapped = words.words.iter().filter_map(|w| {
        if spec.drop_set.contains(w) {
            None
        } else {
            Some(spec.replace_map.get(w).unwrap_or(w).clone())
        }
    });
    WordList::new(mapped, format!("{} | merged", words.provenance))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetPrompt {
    pub id: usize,
    pub text: String,
    pub weather: String,
    pub time: String,
}

/// Source prompt plus the M curated target prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub source_prompt: String,
    pub targets: Vec<TargetPrompt>,
}

impl PromptSet {
    pub fn m(&self) -> usize {
        self.targets.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.targets.iter().enumerate() {
            if t.id != i + 1 {
                return Err(Error::invalid(format!(
                    "target ids must be 1..M in order, got {} at position {i}",
                    t.id
                )));
            }
            if t.text == self.source_prompt {
                return Err(Error::invalid(format!(
                    "target prompt {} equals the source prompt",
                    t.id
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let set: PromptSet = serde_json::from_slice(&std::fs::read(path)?)?;
        set.validate()?;
        Ok(set)
    }
}

/// Cartesian product of weather and time words, weather-major, substituted
/// into `template` (which must contain `{weather}` and `{time}` exactly
/// once each).
pub fn generate_prompts(
    weathers: &WordList,
    times: &WordList,
    template: &str,
    source_prompt: &str,
) -> Result<PromptSet> {
    for ph in ["{weather}", "{time}"] {
        if template.matches(ph).count() != 1 {
            return Err(Error::invalid(format!(
                "template must contain {ph} exactly once: {template:?}"
            )));
        }
    }
    if weathers.is_empty() || times.is_empty() {
        return Err(Error::invalid("weather and time lists must be non-empty"));
    }
    let mut targets = Vec::with_capacity(weathers.len() * times.len());
    for w in &weathers.words {
        for t in &times.words {
            let text = template.replace("{weather}", w).replace("{time}", t);
            targets.push(TargetPrompt {
                id: targets.len() + 1,
                text,
                weather: w.clone(),
                time: t.clone(),
            });
        }
    }
    let set = PromptSet {
        source_prompt: source_prompt.to_string(),
        targets,
    };
    set.validate()?;
    Ok(set)
}

/// Build a text-encoder bundle whose token table places `related` words near
/// the anchor (cosine in [0.55, 0.95]) and everything else far from it
/// (cosine in [0.05, 0.45]). Stands in for the relatedness knowledge of a
/// large pre-trained text encoder; the relatedness itself ships as data.
pub fn build_similarity_encoder<T: Scalar>(
    entries: &WordList,
    anchor: &str,
    related: &BTreeSet<String>,
    seed: u64,
) -> EncoderBundle<T> {
    let dim = 32usize;
    let vocab = Vocab::from_texts(
        entries
            .words
            .iter()
            .map(|s| s.as_str())
            .chain(std::iter::once(anchor)),
    );
    let cfg = EncoderConfig {
        token_dim: dim,
        embed_dim: dim,
        ..EncoderConfig::toy(seed)
    };
    let mut bundle = EncoderBundle::init(cfg, vocab);

    // identity projection so single-token cosines are exactly table cosines
    let mut ident = Tensor::zeros(&[dim, dim]);
    for i in 0..dim {
        ident.data_mut()[i * dim + i] = T::one();
    }
    bundle.text.proj = LinearLayer {
        w: ident,
        b: Tensor::zeros(&[dim]),
        din: dim,
        dout: dim,
    };

    let mut rng = stream(seed, "similarity-table");
    let anchor_lc = anchor.to_lowercase();
    // anchor direction: unit basis vector 0
    let mut axis = vec![T::zero(); dim];
    axis[0] = T::one();

    let vocab_tokens: Vec<String> = bundle.vocab.tokens().to_vec();
    let dt = dim;
    for (row, token) in vocab_tokens.iter().enumerate() {
        let target: Vec<T> = if token == &anchor_lc {
            axis.clone()
        } else {
            // random unit direction orthogonal to the anchor axis
            let mut g: Vec<T> = (0..dim).map(|_| rng::gaussian::<T>(&mut rng)).collect();
            g[0] = T::zero();
            let norm = g.iter().map(|&v| v * v).sum::<T>().sqrt();
            for v in g.iter_mut() {
                *v = *v / norm;
            }
            let cos = if related.contains(token) {
                rng::uniform::<T>(&mut rng, 0.55, 0.95)
            } else {
                rng::uniform::<T>(&mut rng, 0.05, 0.45)
            };
            let sin = (T::one() - cos * cos).sqrt();
            (0..dim).map(|i| axis[i] * cos + g[i] * sin).collect()
        };
        bundle.text.table.data_mut()[row * dt..(row + 1) * dt].copy_from_slice(&target);
    }
    bundle
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wl(words: &[&str]) -> WordList {
        WordList::new(words.iter().map(|s| s.to_string()), "test")
    }

    #[test]
    fn wordlist_dedups_and_lowercases() {
        let l = WordList::new(
            ["Snow", "snow", "fog", "", "  "].map(String::from),
            "t",
        );
        assert_eq!(l.words, ["snow", "fog"]);
    }

    #[test]
    fn load_wordlist_handles_blank_lines_and_empty_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.txt");
        std::fs::write(&p, "Snow\n\nsnow\nfog\n").unwrap();
        assert_eq!(load_wordlist(&p).unwrap().words, ["snow", "fog"]);
        std::fs::write(&p, "").unwrap();
        assert!(load_wordlist(&p).unwrap().is_empty());
        assert!(load_wordlist(dir.path().join("absent.txt")).is_err());
    }

    #[test]
    fn hyponym_fixture_has_175_entries() {
        let p = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/hyponyms_weather.txt");
        let l = load_wordlist(p).unwrap();
        assert_eq!(l.len(), 175);
    }

    #[test]
    fn similarity_prune_keeps_all_at_minus_one_and_keeps_anchor() {
        let words = wl(&["storm", "calm", "weather"]);
        let bundle =
            build_similarity_encoder::<f64>(&words, "weather", &BTreeSet::new(), 3);
        let kept = prune_by_similarity(&words, "weather", -1.0, &bundle).unwrap();
        assert_eq!(kept.words, words.words);
        let kept = prune_by_similarity(&words, "weather", 0.5, &bundle).unwrap();
        assert!(kept.words.contains(&"weather".to_string()));
        assert!(prune_by_similarity(&words, "weather", 1.5, &bundle).is_err());
    }

    #[test]
    fn similarity_prune_matches_brute_force_on_hand_set_table() {
        // five words with hand-set cosines against the anchor
        let words = wl(&["gale", "chair", "snow", "pencil", "mist"]);
        let related: BTreeSet<String> =
            ["gale", "snow", "mist"].map(String::from).into();
        let bundle = build_similarity_encoder::<f64>(&words, "weather", &related, 5);
        let kept = prune_by_similarity(&words, "weather", 0.5, &bundle).unwrap();

        // independent brute-force oracle: raw dot/norm arithmetic on the
        // encoder outputs, no shared similarity code path
        let anchor = bundle.encode_text("weather").unwrap();
        let oracle: Vec<String> = words
            .words
            .iter()
            .filter(|w| {
                let e = bundle.encode_text(w).unwrap();
                let dot: f64 = e.values.iter().zip(&anchor.values).map(|(a, b)| a * b).sum();
                let na: f64 = e.values.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb: f64 = anchor.values.iter().map(|v| v * v).sum::<f64>().sqrt();
                dot / (na * nb) >= 0.5
            })
            .cloned()
            .collect();
        assert_eq!(kept.words, oracle);
        assert_eq!(kept.words, ["gale", "snow", "mist"]);
    }

    #[test]
    fn frequency_prune_applies_rank_rule() {
        let mut ranks = RankTable::default();
        ranks.0.insert("a".into(), 1);
        ranks.0.insert("b".into(), 20_000);
        ranks.0.insert("c".into(), 5);
        let words = wl(&["a", "b", "c", "d"]);
        let kept = prune_by_frequency(&words, &ranks, 10_000).unwrap();
        assert_eq!(kept.words, ["a", "c"]);
        // all ranked within top_k -> unchanged
        let all = wl(&["a", "c"]);
        assert_eq!(prune_by_frequency(&all, &ranks, 5).unwrap().words, ["a", "c"]);
        assert!(prune_by_frequency(&words, &ranks, 0).is_err());
    }

    #[test]
    fn merge_applies_replacements_and_drops() {
        let mut spec = MergeSpec::default();
        spec.replace_map.insert("rainfall".into(), "rain".into());
        spec.drop_set.insert("blast".into());
        spec.validate().unwrap();
        assert_eq!(
            merge_synonyms(&wl(&["rainfall", "rain"]), &spec).words,
            ["rain"]
        );
        assert_eq!(merge_synonyms(&wl(&["blast", "fog"]), &spec).words, ["fog"]);
        let empty = MergeSpec::default();
        let l = wl(&["x", "y"]);
        assert_eq!(merge_synonyms(&l, &empty).words, l.words);
    }

    #[test]
    fn merge_spec_rejects_canonical_in_drop_set() {
        let mut spec = MergeSpec::default();
        spec.replace_map.insert("rainfall".into(), "rain".into());
        spec.drop_set.insert("rain".into());
        assert!(spec.validate().is_err());
    }

    #[test]
    fn prompts_cover_weather_major_product() {
        let weathers = wl(&["snow", "fog", "cloudy", "rain", "stormy"]);
        let times = wl(&["day", "night", "evening"]);
        let set =
            generate_prompts(&weathers, &times, TARGET_PROMPT_TEMPLATE, SOURCE_PROMPT).unwrap();
        assert_eq!(set.m(), 15);
        assert_eq!(set.targets[0].text, "an image taken on a snow day");
        // weather-major ordering: rain night is row 4 (rain), col 2 (night)
        let rain_night = &set.targets[3 * 3 + 1];
        assert_eq!(rain_night.text, "an image taken on a rain night");
        assert_eq!(set.source_prompt, "an image taken during the day");
        // 1x1 product
        let one = generate_prompts(&wl(&["fog"]), &wl(&["day"]), TARGET_PROMPT_TEMPLATE, SOURCE_PROMPT)
            .unwrap();
        assert_eq!(one.m(), 1);
        // malformed template
        assert!(generate_prompts(&weathers, &times, "no placeholders", SOURCE_PROMPT).is_err());
    }

    #[test]
    fn prompt_set_round_trips_as_json() {
        let set = generate_prompts(
            &wl(&["fog", "rain"]),
            &wl(&["day"]),
            TARGET_PROMPT_TEMPLATE,
            SOURCE_PROMPT,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("prompts.json");
        set.save(&p).unwrap();
        assert_eq!(PromptSet::load(&p).unwrap(), set);
    }

    #[test]
    fn threshold_monotonicity_on_fixture_words() {
        let words = load_wordlist(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/fixtures/hyponyms_weather.txt"
        ))
        .unwrap();
        let related: BTreeSet<String> = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/fixtures/weather_related_words.txt"
        ))
        .unwrap()
        .lines()
        .map(|s| s.trim().to_string())
        .collect();
        let bundle = build_similarity_encoder::<f64>(&words, "weather", &related, 7);
        let loose = prune_by_similarity(&words, "weather", 0.2, &bundle).unwrap();
        let tight = prune_by_similarity(&words, "weather", 0.7, &bundle).unwrap();
        for w in &tight.words {
            assert!(loose.words.contains(w), "{w} kept at 0.7 but not 0.2");
        }
    }

}
