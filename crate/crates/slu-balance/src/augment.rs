//! Seeded corpus generation from template grammars, and a noise model that
//! turns clean generated data into machine-translation-like synthetic data.
//!
//! Templates are whitespace token patterns where `<Type>` placeholders
//! expand to lexicon values (possibly multi-token, tagged B-/I- by
//! construction). Grammars ship as data files so new domains need no
//! rebuild; the built-in grammar models a notifications/reminders assistant
//! with seven high-frequency intents and three low-frequency ones.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Origin, Split, Utterance};
use crate::error::{Error, Result};
use crate::metrics::extract_chunks;
use crate::seeding::{mix_all, rng};

const TAG_TRAIN: u64 = 1;
const TAG_VAL: u64 = 2;
const TAG_TEST: u64 = 3;
const TAG_SYNTH_CONTENT: u64 = 4;
const TAG_SYNTH_NOISE: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentSpec {
    pub name: String,
    pub templates: Vec<String>,
    /// Intent-local lexicons; merged over the grammar-wide ones.
    #[serde(default)]
    pub slot_value_lexicons: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub train_count: usize,
    #[serde(default)]
    pub val_count: usize,
    #[serde(default)]
    pub test_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub seed: u64,
    /// Lexicons shared by every intent (intent-local entries win).
    #[serde(default)]
    pub lexicons: BTreeMap<String, Vec<String>>,
    pub intents: Vec<IntentSpec>,
}

fn default_label_noise() -> f64 {
    0.15
}
fn default_token_noise() -> f64 {
    0.10
}
fn default_intent_noise() -> f64 {
    0.02
}

/// Corruption probabilities for synthetic data: per-chunk type replacement,
/// per-O-token replacement, and per-utterance intent relabeling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(default = "default_label_noise")]
    pub label_noise: f64,
    #[serde(default = "default_token_noise")]
    pub token_noise: f64,
    #[serde(default = "default_intent_noise")]
    pub intent_noise: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            label_noise: default_label_noise(),
            token_noise: default_token_noise(),
            intent_noise: default_intent_noise(),
        }
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec {
            label_noise: 0.0,
            token_noise: 0.0,
            intent_noise: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("label_noise", self.label_noise),
            ("token_noise", self.token_noise),
            ("intent_noise", self.intent_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn placeholder(token: &str) -> Option<&str> {
    token
        .strip_prefix('<')
        .and_then(|t| t.strip_suffix('>'))
        .filter(|t| !t.is_empty())
}

impl GeneratorSpec {
    fn merged_lexicons<'a>(&'a self, intent: &'a IntentSpec) -> BTreeMap<&'a str, &'a Vec<String>> {
        let mut merged: BTreeMap<&str, &Vec<String>> = self
            .lexicons
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .collect();
        for (k, v) in &intent.slot_value_lexicons {
            merged.insert(k.as_str(), v);
        }
        merged
    }

    pub fn validate(&self) -> Result<()> {
        if self.intents.is_empty() {
            return Err(Error::Config("generator has no intents".into()));
        }
        let mut seen = BTreeSet::new();
        for intent in &self.intents {
            if !seen.insert(&intent.name) {
                return Err(Error::Config(format!("duplicate intent `{}`", intent.name)));
            }
            let needs_templates =
                intent.train_count + intent.val_count + intent.test_count > 0;
            if needs_templates && intent.templates.is_empty() {
                return Err(Error::Config(format!(
                    "intent `{}` requests utterances but has no templates",
                    intent.name
                )));
            }
            let lexicons = self.merged_lexicons(intent);
            for template in &intent.templates {
                if template.split_whitespace().next().is_none() {
                    return Err(Error::Config(format!(
                        "intent `{}` has an empty template",
                        intent.name
                    )));
                }
                for token in template.split_whitespace() {
                    if let Some(ty) = placeholder(token) {
                        match lexicons.get(ty) {
                            Some(values) if !values.is_empty() => {}
                            _ => {
                                return Err(Error::Config(format!(
                                    "placeholder <{ty}> in intent `{}` has no lexicon values",
                                    intent.name
                                )))
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Every slot type any intent can produce.
    fn slot_type_pool(&self) -> Vec<String> {
        let mut pool: BTreeSet<String> = self.lexicons.keys().cloned().collect();
        for intent in &self.intents {
            pool.extend(intent.slot_value_lexicons.keys().cloned());
        }
        pool.into_iter().collect()
    }

    /// Every surface token the grammar can emit (template literals plus
    /// lexicon value words).
    fn token_pool(&self) -> Vec<String> {
        let mut pool: BTreeSet<String> = BTreeSet::new();
        let intent_values = self
            .intents
            .iter()
            .flat_map(|i| i.slot_value_lexicons.values());
        for values in self.lexicons.values().chain(intent_values) {
            for value in values {
                pool.extend(value.split_whitespace().map(str::to_string));
            }
        }
        for intent in &self.intents {
            for template in &intent.templates {
                pool.extend(
                    template
                        .split_whitespace()
                        .filter(|t| placeholder(t).is_none())
                        .map(str::to_string),
                );
            }
        }
        pool.into_iter().collect()
    }
}

fn realize(
    template: &str,
    lexicons: &BTreeMap<&str, &Vec<String>>,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (Vec<String>, Vec<String>) {
    let mut tokens = Vec::new();
    let mut slots = Vec::new();
    for piece in template.split_whitespace() {
        match placeholder(piece) {
            Some(ty) => {
                let values = lexicons[ty];
                let value = &values[rng.gen_range(0..values.len())];
                for (j, word) in value.split_whitespace().enumerate() {
                    tokens.push(word.to_string());
                    slots.push(if j == 0 {
                        format!("B-{ty}")
                    } else {
                        format!("I-{ty}")
                    });
                }
            }
            None => {
                tokens.push(piece.to_string());
                slots.push("O".to_string());
            }
        }
    }
    (tokens, slots)
}

fn generate_split(spec: &GeneratorSpec, split: Split, split_tag: u64) -> Result<Corpus> {
    let mut utterances = Vec::new();
    let mut slot_vocab: BTreeSet<String> = BTreeSet::new();
    for (index, intent) in spec.intents.iter().enumerate() {
        let count = match split {
            Split::Train => intent.train_count,
            Split::Validation => intent.val_count,
            Split::Test => intent.test_count,
        };
        if count == 0 {
            continue;
        }
        let lexicons = spec.merged_lexicons(intent);
        let mut stream = rng(mix_all(spec.seed, &[split_tag, index as u64]));
        for _ in 0..count {
            let template = &intent.templates[stream.gen_range(0..intent.templates.len())];
            let (tokens, slots) = realize(template, &lexicons, &mut stream);
            slot_vocab.extend(slots.iter().cloned());
            utterances.push(Utterance {
                tokens,
                intent: intent.name.clone(),
                slots,
                origin: Origin::Realistic,
            });
        }
    }
    if !utterances.is_empty() {
        slot_vocab.insert("O".to_string());
    }
    Corpus::with_vocab(
        utterances,
        spec.intents.iter().map(|i| i.name.clone()).collect(),
        slot_vocab.into_iter().collect(),
        split,
    )
}

/// Generate train/validation/test corpora with exactly the per-intent counts
/// the spec requests. Listed intents appear in the vocabularies even with a
/// zero count. Deterministic under the spec seed.
pub fn generate_corpus(spec: &GeneratorSpec) -> Result<(Corpus, Corpus, Corpus)> {
    spec.validate()?;
    Ok((
        generate_split(spec, Split::Train, TAG_TRAIN)?,
        generate_split(spec, Split::Validation, TAG_VAL)?,
        generate_split(spec, Split::Test, TAG_TEST)?,
    ))
}

/// Generate `counts[intent]` synthetic utterances per intent and push them
/// through three independent noise channels. Content randomness and noise
/// randomness use separate streams, so the all-zero NoiseSpec output IS the
/// clean generation for a seed. BIO validity is preserved: type replacement
/// retags whole chunks in place.
pub fn generate_synthetic(
    spec: &GeneratorSpec,
    noise: &NoiseSpec,
    counts: &BTreeMap<String, usize>,
) -> Result<Corpus> {
    spec.validate()?;
    noise.validate()?;
    let type_pool = spec.slot_type_pool();
    let token_pool = spec.token_pool();
    let intent_names: Vec<String> = spec.intents.iter().map(|i| i.name.clone()).collect();

    let mut utterances = Vec::new();
    let mut slot_vocab: BTreeSet<String> = BTreeSet::new();
    for (name, &count) in counts {
        let index = spec
            .intents
            .iter()
            .position(|i| &i.name == name)
            .ok_or_else(|| Error::Config(format!("intent `{name}` not covered by generator")))?;
        if count == 0 {
            continue;
        }
        let intent = &spec.intents[index];
        if intent.templates.is_empty() {
            return Err(Error::Config(format!(
                "intent `{name}` requests synthetic utterances but has no templates"
            )));
        }
        let lexicons = spec.merged_lexicons(intent);
        let mut content = rng(mix_all(spec.seed, &[TAG_SYNTH_CONTENT, index as u64]));
        let mut corruption = rng(mix_all(spec.seed, &[TAG_SYNTH_NOISE, index as u64]));
        for _ in 0..count {
            let template = &intent.templates[content.gen_range(0..intent.templates.len())];
            let (mut tokens, mut slots) = realize(template, &lexicons, &mut content);
            let mut label = intent.name.clone();

            // Chunk-type replacement.
            for chunk in extract_chunks(&slots) {
                if corruption.gen::<f64>() < noise.label_noise {
                    let alternatives: Vec<&String> =
                        type_pool.iter().filter(|t| **t != chunk.kind).collect();
                    if alternatives.is_empty() {
                        continue;
                    }
                    let replacement = alternatives[corruption.gen_range(0..alternatives.len())];
                    for (offset, slot) in slots[chunk.start..chunk.end].iter_mut().enumerate() {
                        *slot = if offset == 0 {
                            format!("B-{replacement}")
                        } else {
                            format!("I-{replacement}")
                        };
                    }
                }
            }
            // Carrier-token replacement outside chunks.
            for (token, slot) in tokens.iter_mut().zip(&slots) {
                if slot == "O" && corruption.gen::<f64>() < noise.token_noise {
                    *token = token_pool[corruption.gen_range(0..token_pool.len())].clone();
                }
            }
            // Intent relabeling.
            if corruption.gen::<f64>() < noise.intent_noise {
                let alternatives: Vec<&String> =
                    intent_names.iter().filter(|n| **n != label).collect();
                if !alternatives.is_empty() {
                    label = alternatives[corruption.gen_range(0..alternatives.len())].clone();
                }
            }

            slot_vocab.extend(slots.iter().cloned());
            utterances.push(Utterance {
                tokens,
                intent: label,
                slots,
                origin: Origin::Synthetic,
            });
        }
    }
    if !utterances.is_empty() {
        slot_vocab.insert("O".to_string());
    }
    Corpus::with_vocab(
        utterances,
        intent_names,
        slot_vocab.into_iter().collect(),
        Split::Train,
    )
}

/// Everything one generation run needs: the grammar, the noise model, and
/// which intents get how much synthetic data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub generator: GeneratorSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub synthetic_counts: BTreeMap<String, usize>,
}

pub fn load_generation_config(path: &Path) -> Result<GenerationConfig> {
    let json = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&json).map_err(|e| Error::MalformedRecord {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })
}

/// Built-in notifications/reminders grammar: seven head intents at 2,000
/// training utterances each and three long-tail intents at 50/20/0, with
/// synthetic counts of 400/160/55 for the tail.
pub fn notifications_config() -> GenerationConfig {
    serde_json::from_str(include_str!("../data/notifications_domain.json"))
        .expect("built-in grammar parses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::validate_bio;

    fn small_spec() -> GeneratorSpec {
        let mut lexicons = BTreeMap::new();
        lexicons.insert(
            "Thing".to_string(),
            vec!["red box".to_string(), "cat".to_string(), "old lamp".to_string()],
        );
        lexicons.insert(
            "Place".to_string(),
            vec!["home".to_string(), "the office".to_string()],
        );
        GeneratorSpec {
            seed: 42,
            lexicons,
            intents: vec![
                IntentSpec {
                    name: "Find".to_string(),
                    templates: vec![
                        "find the <Thing>".to_string(),
                        "find the <Thing> at <Place>".to_string(),
                    ],
                    slot_value_lexicons: BTreeMap::new(),
                    train_count: 30,
                    val_count: 5,
                    test_count: 10,
                },
                IntentSpec {
                    name: "Drop".to_string(),
                    templates: vec!["drop the <Thing>".to_string()],
                    slot_value_lexicons: BTreeMap::new(),
                    train_count: 12,
                    val_count: 2,
                    test_count: 4,
                },
                IntentSpec {
                    name: "Empty".to_string(),
                    templates: vec!["nothing here".to_string()],
                    slot_value_lexicons: BTreeMap::new(),
                    train_count: 0,
                    val_count: 0,
                    test_count: 0,
                },
            ],
        }
    }

    #[test]
    fn generated_histograms_match_requested_counts() {
        let (train, val, test) = generate_corpus(&small_spec()).unwrap();
        let h = train.class_histogram();
        assert_eq!(h.counts["Find"], 30);
        assert_eq!(h.counts["Drop"], 12);
        assert_eq!(h.counts["Empty"], 0);
        assert_eq!(val.class_histogram().counts["Find"], 5);
        assert_eq!(test.class_histogram().counts["Drop"], 4);
    }

    #[test]
    fn zero_count_intent_still_in_vocab() {
        let (train, _, _) = generate_corpus(&small_spec()).unwrap();
        assert!(train.intent_vocab.contains(&"Empty".to_string()));
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, _, _) = generate_corpus(&small_spec()).unwrap();
        let (b, _, _) = generate_corpus(&small_spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generated_utterances_are_bio_valid_with_spans() {
        let (train, _, _) = generate_corpus(&small_spec()).unwrap();
        let mut saw_multiword = false;
        for utt in &train.utterances {
            validate_bio(&utt.slots).unwrap();
            if utt.slots.iter().any(|t| t.starts_with("I-")) {
                saw_multiword = true;
            }
        }
        assert!(saw_multiword, "lexicons include multi-token values");
    }

    #[test]
    fn positive_count_without_templates_is_an_error() {
        let mut spec = small_spec();
        spec.intents[0].templates.clear();
        assert!(matches!(generate_corpus(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn placeholder_without_lexicon_is_an_error() {
        let mut spec = small_spec();
        spec.intents[0].templates.push("find the <Ghost>".to_string());
        assert!(matches!(generate_corpus(&spec), Err(Error::Config(_))));
    }

    fn synth_counts(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn zero_noise_synthetic_is_clean_and_deterministic() {
        let spec = small_spec();
        let counts = synth_counts(&[("Find", 20), ("Drop", 8)]);
        let a = generate_synthetic(&spec, &NoiseSpec::none(), &counts).unwrap();
        let b = generate_synthetic(&spec, &NoiseSpec::none(), &counts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_histogram().counts["Find"], 20);
        assert_eq!(a.class_histogram().counts["Drop"], 8);
        for utt in &a.utterances {
            assert_eq!(utt.origin, Origin::Synthetic);
            validate_bio(&utt.slots).unwrap();
        }
    }

    #[test]
    fn full_label_noise_flips_every_chunk_type() {
        let spec = small_spec();
        let counts = synth_counts(&[("Find", 25)]);
        let clean = generate_synthetic(&spec, &NoiseSpec::none(), &counts).unwrap();
        let noisy = generate_synthetic(
            &spec,
            &NoiseSpec {
                label_noise: 1.0,
                token_noise: 0.0,
                intent_noise: 0.0,
            },
            &counts,
        )
        .unwrap();
        assert_eq!(clean.len(), noisy.len());
        let mut chunks_seen = 0;
        for (c, n) in clean.utterances.iter().zip(&noisy.utterances) {
            assert_eq!(c.tokens, n.tokens);
            let clean_chunks = extract_chunks(&c.slots);
            let noisy_chunks = extract_chunks(&n.slots);
            assert_eq!(clean_chunks.len(), noisy_chunks.len());
            for (cc, nc) in clean_chunks.iter().zip(&noisy_chunks) {
                assert_eq!((cc.start, cc.end), (nc.start, nc.end));
                assert_ne!(cc.kind, nc.kind);
                chunks_seen += 1;
            }
            validate_bio(&n.slots).unwrap();
        }
        assert!(chunks_seen > 0);
    }

    #[test]
    fn intent_noise_relabels_within_grammar() {
        let spec = small_spec();
        let counts = synth_counts(&[("Find", 200)]);
        let noisy = generate_synthetic(
            &spec,
            &NoiseSpec {
                label_noise: 0.0,
                token_noise: 0.0,
                intent_noise: 1.0,
            },
            &counts,
        )
        .unwrap();
        for utt in &noisy.utterances {
            assert_ne!(utt.intent, "Find");
            assert!(noisy.intent_vocab.contains(&utt.intent));
        }
    }

    #[test]
    fn chunk_corruption_rate_tracks_label_noise() {
        let spec = small_spec();
        let counts = synth_counts(&[("Find", 8000)]);
        let clean = generate_synthetic(&spec, &NoiseSpec::none(), &counts).unwrap();
        let noise = NoiseSpec {
            label_noise: 0.15,
            token_noise: 0.0,
            intent_noise: 0.0,
        };
        let noisy = generate_synthetic(&spec, &noise, &counts).unwrap();
        let mut total = 0usize;
        let mut corrupted = 0usize;
        for (c, n) in clean.utterances.iter().zip(&noisy.utterances) {
            for (cc, nc) in extract_chunks(&c.slots).iter().zip(&extract_chunks(&n.slots)[..]) {
                total += 1;
                corrupted += usize::from(cc.kind != nc.kind);
            }
        }
        assert!(total >= 10_000, "need at least 10k chunks, got {total}");
        let rate = corrupted as f64 / total as f64;
        assert!(
            (rate - 0.15).abs() <= 0.02,
            "corruption rate {rate} outside 0.15 +/- 0.02"
        );
    }

    #[test]
    fn unknown_intent_in_counts_is_an_error() {
        let spec = small_spec();
        let counts = synth_counts(&[("Ghost", 5)]);
        assert!(matches!(
            generate_synthetic(&spec, &NoiseSpec::none(), &counts),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn builtin_grammar_parses_and_validates() {
        let config = notifications_config();
        config.generator.validate().unwrap();
        assert_eq!(config.generator.intents.len(), 10);
        let heads = config
            .generator
            .intents
            .iter()
            .filter(|i| i.train_count == 2000)
            .count();
        assert_eq!(heads, 7);
        assert_eq!(config.synthetic_counts.len(), 3);
    }
}
