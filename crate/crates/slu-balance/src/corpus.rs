//! Corpus loading, validation, splitting and class histograms.
//!
//! Corpora live on disk as line-delimited JSON, one utterance per line with
//! `tokens`, `intent`, `slots` and `origin` fields. Slot tags use the BIO
//! scheme and are validated strictly on construction; label vocabularies are
//! kept lexicographically sorted so label indices are reproducible across
//! platforms.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

/// Provenance of an utterance: collected data vs. generated data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    #[default]
    Realistic,
    Synthetic,
}

/// Which partition a corpus plays in an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// A single pretokenized query with its intent label and BIO slot tags.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub tokens: Vec<String>,
    pub intent: String,
    pub slots: Vec<String>,
    #[serde(default)]
    pub origin: Origin,
}

impl Utterance {
    pub fn new(tokens: &[&str], intent: &str, slots: &[&str]) -> Self {
        Utterance {
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
            intent: intent.to_string(),
            slots: slots.iter().map(|t| t.to_string()).collect(),
            origin: Origin::Realistic,
        }
    }
}

/// Parsed view of one BIO tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum TagKind<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

/// `O`, `B-<type>` or `I-<type>` with a nonempty type; anything else is None.
pub(crate) fn parse_tag(tag: &str) -> Option<TagKind<'_>> {
    if tag == "O" {
        return Some(TagKind::Outside);
    }
    if let Some(ty) = tag.strip_prefix("B-") {
        if !ty.is_empty() {
            return Some(TagKind::Begin(ty));
        }
    }
    if let Some(ty) = tag.strip_prefix("I-") {
        if !ty.is_empty() {
            return Some(TagKind::Inside(ty));
        }
    }
    None
}

/// Strict BIO check: an `I-<type>` tag is only legal immediately after
/// `B-<type>` or `I-<type>` of the same type. Returns the offending position
/// and a message on failure.
pub fn validate_bio(slots: &[String]) -> std::result::Result<(), (usize, String)> {
    let mut open: Option<&str> = None;
    for (pos, tag) in slots.iter().enumerate() {
        match parse_tag(tag) {
            None => return Err((pos, format!("unrecognized tag `{tag}`"))),
            Some(TagKind::Outside) => open = None,
            Some(TagKind::Begin(ty)) => open = Some(ty),
            Some(TagKind::Inside(ty)) => {
                if open != Some(ty) {
                    return Err((pos, format!("`{tag}` does not continue a `{ty}` chunk")));
                }
            }
        }
    }
    Ok(())
}

fn validate_utterance(utt: &Utterance, index: usize) -> Result<()> {
    if utt.tokens.is_empty() {
        return Err(Error::EmptyInput("utterance has no tokens"));
    }
    if utt.tokens.len() != utt.slots.len() {
        return Err(Error::LengthMismatch {
            index,
            tokens: utt.tokens.len(),
            slots: utt.slots.len(),
        });
    }
    validate_bio(&utt.slots).map_err(|(position, message)| Error::BioViolation {
        index,
        position,
        message,
    })
}

/// A validated, split-aware collection of utterances. The single source of
/// truth for label vocabularies and class distributions; immutable after
/// construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    /// Sorted, deduplicated intent labels.
    pub intent_vocab: Vec<String>,
    /// Sorted, deduplicated BIO tags; contains `O` whenever the corpus is nonempty.
    pub slot_vocab: Vec<String>,
    pub split: Split,
}

/// Per-intent utterance counts over a corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub counts: BTreeMap<String, usize>,
    pub total: usize,
}

impl Corpus {
    /// Build a corpus deriving both vocabularies from the observed labels.
    pub fn from_utterances(utterances: Vec<Utterance>, split: Split) -> Result<Self> {
        let mut intents: Vec<String> = Vec::new();
        let mut slots: Vec<String> = Vec::new();
        for (index, utt) in utterances.iter().enumerate() {
            validate_utterance(utt, index)?;
            intents.push(utt.intent.clone());
            slots.extend(utt.slots.iter().cloned());
        }
        if !utterances.is_empty() {
            slots.push("O".to_string());
        }
        intents.sort();
        intents.dedup();
        slots.sort();
        slots.dedup();
        Ok(Corpus {
            utterances,
            intent_vocab: intents,
            slot_vocab: slots,
            split,
        })
    }

    /// Build a corpus with explicit vocabularies (which may be supersets of
    /// the observed labels, e.g. for intents with zero instances).
    pub fn with_vocab(
        utterances: Vec<Utterance>,
        mut intent_vocab: Vec<String>,
        mut slot_vocab: Vec<String>,
        split: Split,
    ) -> Result<Self> {
        intent_vocab.sort();
        intent_vocab.dedup();
        slot_vocab.sort();
        slot_vocab.dedup();
        for (index, utt) in utterances.iter().enumerate() {
            validate_utterance(utt, index)?;
            if intent_vocab.binary_search(&utt.intent).is_err() {
                return Err(Error::UnknownLabel(utt.intent.clone()));
            }
            for tag in &utt.slots {
                if slot_vocab.binary_search(tag).is_err() {
                    return Err(Error::UnknownLabel(tag.clone()));
                }
            }
        }
        Ok(Corpus {
            utterances,
            intent_vocab,
            slot_vocab,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Count utterances per intent. Every vocabulary entry is present in the
    /// result, possibly with a zero count.
    pub fn class_histogram(&self) -> ClassHistogram {
        let mut counts: BTreeMap<String, usize> = self
            .intent_vocab
            .iter()
            .map(|intent| (intent.clone(), 0))
            .collect();
        for utt in &self.utterances {
            *counts.entry(utt.intent.clone()).or_insert(0) += 1;
        }
        let total = counts.values().sum();
        ClassHistogram { counts, total }
    }

    /// Deterministic seeded partition into train/validation/test. Children
    /// share the parent vocabularies; sizes are within one of the rounded
    /// fractions.
    pub fn split_corpus(
        &self,
        fractions: (f64, f64, f64),
        seed: u64,
    ) -> Result<(Corpus, Corpus, Corpus)> {
        let (ft, fv, fe) = fractions;
        for f in [ft, fv, fe] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("split fraction {f} outside [0, 1]")));
            }
        }
        if (ft + fv + fe - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions sum to {}, expected 1.0",
                ft + fv + fe
            )));
        }
        let n = self.utterances.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeding::rng(seed));
        let n_train = ((n as f64) * ft).round() as usize;
        let n_val = (((n as f64) * fv).round() as usize).min(n - n_train.min(n));
        let n_train = n_train.min(n);
        let take = |range: std::ops::Range<usize>, split: Split| -> Corpus {
            Corpus {
                utterances: order[range]
                    .iter()
                    .map(|&i| self.utterances[i].clone())
                    .collect(),
                intent_vocab: self.intent_vocab.clone(),
                slot_vocab: self.slot_vocab.clone(),
                split,
            }
        };
        Ok((
            take(0..n_train, Split::Train),
            take(n_train..n_train + n_val, Split::Validation),
            take(n_train + n_val..n, Split::Test),
        ))
    }

    /// Concatenate another corpus onto this one, unioning the vocabularies.
    /// Origins are preserved; the result keeps this corpus's split role.
    pub fn merge(&self, extra: &Corpus) -> Corpus {
        let mut utterances = self.utterances.clone();
        utterances.extend(extra.utterances.iter().cloned());
        let mut intent_vocab = self.intent_vocab.clone();
        intent_vocab.extend(extra.intent_vocab.iter().cloned());
        intent_vocab.sort();
        intent_vocab.dedup();
        let mut slot_vocab = self.slot_vocab.clone();
        slot_vocab.extend(extra.slot_vocab.iter().cloned());
        slot_vocab.sort();
        slot_vocab.dedup();
        Corpus {
            utterances,
            intent_vocab,
            slot_vocab,
            split: self.split,
        }
    }
}

/// Read a line-delimited record file into a validated corpus. Vocabularies
/// are derived from the observed labels.
pub fn load_corpus(path: &Path, split: Split) -> Result<Corpus> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut utterances = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let utt: Utterance = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        utterances.push(utt);
    }
    Corpus::from_utterances(utterances, split)
}

/// Write a corpus as canonical line-delimited records (all fields present,
/// fixed field order). `load_corpus` of the result reproduces the utterances
/// exactly.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut writer = BufWriter::new(file);
    for utt in &corpus.utterances {
        let line = serde_json::to_string(utt).expect("utterance serializes");
        writer
            .write_all(line.as_bytes())
            .and_then(|_| writer.write_all(b"\n"))
            .map_err(|source| Error::Io {
                path: path.to_path_buf(),
                source,
            })?;
    }
    writer.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn write_lines(dir: &TempDir, name: &str, lines: &[&str]) -> std::path::PathBuf {
        let path = dir.path().join(name);
        std::fs::write(&path, lines.join("\n")).unwrap();
        path
    }

    #[test]
    fn load_single_record() {
        let dir = TempDir::new().unwrap();
        let path = write_lines(
            &dir,
            "one.jsonl",
            &[r#"{"tokens":["play","volbeat"],"intent":"PlayMusic","slots":["O","B-Artist"]}"#],
        );
        let corpus = load_corpus(&path, Split::Train).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus.intent_vocab, vec!["PlayMusic"]);
        assert_eq!(corpus.slot_vocab, vec!["B-Artist", "O"]);
        assert_eq!(corpus.utterances[0].origin, Origin::Realistic);
    }

    #[test]
    fn load_empty_file() {
        let dir = TempDir::new().unwrap();
        let path = write_lines(&dir, "empty.jsonl", &[]);
        let corpus = load_corpus(&path, Split::Train).unwrap();
        assert_eq!(corpus.len(), 0);
        assert!(corpus.intent_vocab.is_empty());
        assert!(corpus.slot_vocab.is_empty());
    }

    #[test]
    fn load_rejects_dangling_inside_tag() {
        let dir = TempDir::new().unwrap();
        let path = write_lines(
            &dir,
            "bad.jsonl",
            &[r#"{"tokens":["volbeat","now"],"intent":"PlayMusic","slots":["I-Artist","O"]}"#],
        );
        match load_corpus(&path, Split::Train) {
            Err(Error::BioViolation {
                index, position, ..
            }) => {
                assert_eq!(index, 0);
                assert_eq!(position, 0);
            }
            other => panic!("expected BIO violation, got {other:?}"),
        }
    }

    #[test]
    fn load_reports_malformed_line_number() {
        let dir = TempDir::new().unwrap();
        let path = write_lines(
            &dir,
            "bad.jsonl",
            &[
                r#"{"tokens":["hi"],"intent":"Greet","slots":["O"]}"#,
                r#"{"tokens": not json"#,
            ],
        );
        match load_corpus(&path, Split::Train) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed record, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_length_mismatch() {
        let dir = TempDir::new().unwrap();
        let path = write_lines(
            &dir,
            "bad.jsonl",
            &[r#"{"tokens":["a","b"],"intent":"X","slots":["O"]}"#],
        );
        assert!(matches!(
            load_corpus(&path, Split::Train),
            Err(Error::LengthMismatch { index: 0, .. })
        ));
    }

    #[test]
    fn histogram_counts_and_zero_classes() {
        let utts = vec![
            Utterance::new(&["a"], "A", &["O"]),
            Utterance::new(&["b"], "A", &["O"]),
            Utterance::new(&["c"], "B", &["O"]),
        ];
        let corpus = Corpus::with_vocab(
            utts,
            vec!["A".into(), "B".into(), "C".into()],
            vec!["O".into()],
            Split::Train,
        )
        .unwrap();
        let hist = corpus.class_histogram();
        assert_eq!(hist.counts["A"], 2);
        assert_eq!(hist.counts["B"], 1);
        assert_eq!(hist.counts["C"], 0);
        assert_eq!(hist.total, 3);
    }

    #[test]
    fn histogram_of_empty_corpus_with_vocab() {
        let corpus =
            Corpus::with_vocab(vec![], vec!["A".into()], vec!["O".into()], Split::Train).unwrap();
        let hist = corpus.class_histogram();
        assert_eq!(hist.counts["A"], 0);
        assert_eq!(hist.total, 0);
    }

    fn numbered(n: usize) -> Corpus {
        let utts = (0..n)
            .map(|i| Utterance::new(&[&format!("tok{i}")], "X", &["O"]))
            .collect();
        Corpus::from_utterances(utts, Split::Train).unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let corpus = numbered(100);
        let (tr, va, te) = corpus.split_corpus((0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
        assert_eq!(tr.intent_vocab, corpus.intent_vocab);
        let (tr2, va2, te2) = corpus.split_corpus((0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(tr.utterances, tr2.utterances);
        assert_eq!(va.utterances, va2.utterances);
        assert_eq!(te.utterances, te2.utterances);
        // Disjoint partition: multisets union back to the corpus.
        let mut all: Vec<_> = tr
            .utterances
            .iter()
            .chain(&va.utterances)
            .chain(&te.utterances)
            .map(|u| u.tokens[0].clone())
            .collect();
        all.sort();
        let mut expect: Vec<_> = corpus
            .utterances
            .iter()
            .map(|u| u.tokens[0].clone())
            .collect();
        expect.sort();
        assert_eq!(all, expect);
    }

    #[test]
    fn split_single_utterance_all_train() {
        let corpus = numbered(1);
        let (tr, va, te) = corpus.split_corpus((1.0, 0.0, 0.0), 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (1, 0, 0));
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let corpus = numbered(4);
        assert!(corpus.split_corpus((0.8, 0.3, 0.1), 1).is_err());
        assert!(corpus.split_corpus((1.2, -0.1, -0.1), 1).is_err());
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let base = numbered(3);
        let empty = Corpus::from_utterances(vec![], Split::Train).unwrap();
        let merged = base.merge(&empty);
        assert_eq!(merged.utterances, base.utterances);
        assert_eq!(merged.intent_vocab, base.intent_vocab);
    }

    #[test]
    fn merge_grows_vocab_by_new_intent() {
        let base = numbered(2);
        let extra = Corpus::from_utterances(
            vec![Utterance::new(&["z"], "Y", &["O"])],
            Split::Train,
        )
        .unwrap();
        let merged = base.merge(&extra);
        assert_eq!(merged.intent_vocab, vec!["X".to_string(), "Y".to_string()]);
        assert_eq!(merged.len(), 3);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = TempDir::new().unwrap();
        let utts = vec![
            Utterance::new(&["play", "volbeat"], "PlayMusic", &["O", "B-Artist"]),
            Utterance {
                origin: Origin::Synthetic,
                ..Utterance::new(&["stop"], "Stop", &["O"])
            },
        ];
        let corpus = Corpus::from_utterances(utts, Split::Train).unwrap();
        let path = dir.path().join("c.jsonl");
        save_corpus(&corpus, &path).unwrap();
        let loaded = load_corpus(&path, Split::Train).unwrap();
        assert_eq!(loaded, corpus);
        // Saving a loaded file reproduces the bytes exactly.
        let path2 = dir.path().join("c2.jsonl");
        save_corpus(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn bio_validation_matches_reference_grammar() {
        // Exhaustive over length <= 4 with two slot types: a sequence is
        // valid iff it matches (O | B-x I-x* )* as a regular expression.
        let tags = ["O", "B-a", "I-a", "B-b", "I-b"];
        let encode = |tag: &str| match tag {
            "O" => 'o',
            "B-a" => 'A',
            "I-a" => 'a',
            "B-b" => 'B',
            "I-b" => 'b',
            _ => unreachable!(),
        };
        let re = regex::Regex::new(r"^(o|Aa*|Bb*)*$").unwrap();
        let mut checked = 0usize;
        for len in 0..=4usize {
            let mut idx = vec![0usize; len];
            loop {
                let seq: Vec<String> = idx.iter().map(|&i| tags[i].to_string()).collect();
                let encoded: String = seq.iter().map(|t| encode(t)).collect();
                let reference = re.is_match(&encoded);
                let ours = validate_bio(&seq).is_ok();
                assert_eq!(ours, reference, "disagreement on {seq:?}");
                checked += 1;
                // odometer increment
                let mut pos = 0;
                loop {
                    if pos == len {
                        break;
                    }
                    idx[pos] += 1;
                    if idx[pos] < tags.len() {
                        break;
                    }
                    idx[pos] = 0;
                    pos += 1;
                }
                if pos == len {
                    break;
                }
            }
        }
        assert_eq!(checked, 1 + 5 + 25 + 125 + 625);
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_utterance() -> impl Strategy<Value = Utterance> {
        let token = prop::sample::select(vec!["play", "stop", "music", "by", "volbeat", "the"]);
        let intent = prop::sample::select(vec!["A", "B", "C"]);
        // Build tags chunk-wise so they are valid by construction.
        let piece = prop::sample::select(vec![
            vec!["O"],
            vec!["B-x"],
            vec!["B-x", "I-x"],
            vec!["B-y", "I-y", "I-y"],
        ]);
        (prop::collection::vec(piece, 1..4), intent).prop_flat_map(move |(pieces, intent)| {
            let tags: Vec<String> = pieces.concat().iter().map(|s| s.to_string()).collect();
            let len = tags.len();
            (prop::collection::vec(token.clone(), len..=len),).prop_map(move |(tokens,)| {
                Utterance {
                    tokens: tokens.iter().map(|s| s.to_string()).collect(),
                    intent: intent.to_string(),
                    slots: tags.clone(),
                    origin: Origin::Realistic,
                }
            })
        })
    }

    proptest! {
        #[test]
        fn round_trip_identity(utts in prop::collection::vec(arb_utterance(), 0..12)) {
            let corpus = Corpus::from_utterances(utts, Split::Train).unwrap();
            let dir = tempfile::TempDir::new().unwrap();
            let path = dir.path().join("c.jsonl");
            save_corpus(&corpus, &path).unwrap();
            let loaded = load_corpus(&path, Split::Train).unwrap();
            prop_assert_eq!(loaded, corpus);
        }

        #[test]
        fn histogram_additive_under_merge(
            a in prop::collection::vec(arb_utterance(), 0..10),
            b in prop::collection::vec(arb_utterance(), 0..10),
        ) {
            let ca = Corpus::from_utterances(a, Split::Train).unwrap();
            let cb = Corpus::from_utterances(b, Split::Train).unwrap();
            let merged = ca.merge(&cb);
            let (ha, hb, hm) = (ca.class_histogram(), cb.class_histogram(), merged.class_histogram());
            prop_assert_eq!(hm.total, ha.total + hb.total);
            for (intent, count) in &hm.counts {
                let expect = ha.counts.get(intent).copied().unwrap_or(0)
                    + hb.counts.get(intent).copied().unwrap_or(0);
                prop_assert_eq!(*count, expect);
            }
        }
    }
}
