//! Batch generation: uniform-random epochs, class-balanced epochs and random
//! over-sampling. All three are pure functions of (corpus, config, seed).
//!
//! The class-balanced generator draws the same number of instances per
//! nonempty intent class into every batch and stops an epoch once the total
//! number of generated instances exceeds the size of the training set it
//! draws from, so epochs stay comparable to plain random epochs on large
//! corpora.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::seeding;

/// Which batch generator a task uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Random,
    ClassBalanced,
    OverSampled,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Regime::Random => write!(f, "random"),
            Regime::ClassBalanced => write!(f, "class-balanced"),
            Regime::OverSampled => write!(f, "over-sampled"),
        }
    }
}

/// Which task a batch feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskTag {
    Primary,
    Auxiliary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub seed: u64,
    pub regime: Regime,
}

impl SamplerConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// A batch of corpus indices with provenance. Indices refer to the corpus
/// the batch was sampled from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub task: TaskTag,
    pub index_in_epoch: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// One epoch of a seeded permutation chunked into batches; every utterance
/// appears exactly once, the last batch may be smaller.
pub fn random_epoch(corpus: &Corpus, cfg: &SamplerConfig, task: TaskTag) -> Result<Vec<Batch>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyInput("random_epoch over empty corpus"));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut seeding::rng(cfg.seed));
    Ok(order
        .chunks(cfg.batch_size)
        .enumerate()
        .map(|(index_in_epoch, chunk)| Batch {
            indices: chunk.to_vec(),
            task,
            index_in_epoch,
        })
        .collect())
}

/// Class-balanced epoch. Every batch holds exactly `batch_size` instances
/// with per-class counts within one of each other over the nonempty classes;
/// batches keep coming while the cumulative instance count is at most the
/// corpus size, so the epoch total lands in (N, N + batch_size].
pub fn cbg_epoch(corpus: &Corpus, cfg: &SamplerConfig, task: TaskTag) -> Result<Vec<Batch>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyInput("cbg_epoch over empty corpus"));
    }
    // Nonempty classes in vocabulary order; zero-count classes are skipped.
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); corpus.intent_vocab.len()];
    for (i, utt) in corpus.utterances.iter().enumerate() {
        let class = corpus
            .intent_vocab
            .binary_search(&utt.intent)
            .expect("corpus invariant: intent in vocab");
        members[class].push(i);
    }
    let classes: Vec<&Vec<usize>> = members.iter().filter(|m| !m.is_empty()).collect();
    if classes.is_empty() {
        return Err(Error::EmptyInput("cbg_epoch with all classes empty"));
    }

    let b = cfg.batch_size;
    let k = classes.len();
    let per_class = b / k;
    let remainder = b - per_class * k;
    let mut rng = seeding::rng(cfg.seed);
    let n = corpus.len();

    let mut batches = Vec::new();
    let mut emitted = 0usize;
    while emitted <= n {
        // Fresh per-batch choice of which classes receive one extra instance.
        let mut topup: Vec<usize> = (0..k).collect();
        topup.shuffle(&mut rng);
        let extra: BTreeSet<usize> = topup[..remainder].iter().copied().collect();

        let mut indices = Vec::with_capacity(b);
        for (ci, class_members) in classes.iter().enumerate() {
            let need = per_class + usize::from(extra.contains(&ci));
            if need == 0 {
                continue;
            }
            if class_members.len() >= need {
                // Distinct draws when the class is large enough.
                for pick in rand::seq::index::sample(&mut rng, class_members.len(), need) {
                    indices.push(class_members[pick]);
                }
            } else {
                // Small classes are sampled with replacement.
                for _ in 0..need {
                    indices.push(class_members[rng.gen_range(0..class_members.len())]);
                }
            }
        }
        debug_assert_eq!(indices.len(), b);
        batches.push(Batch {
            indices,
            task,
            index_in_epoch: batches.len(),
        });
        emitted += b;
    }
    Ok(batches)
}

/// Random over-sampling: duplicate instances of every nonempty class until
/// its count matches the head class. Original instances are all retained;
/// zero-count classes stay at zero.
pub fn oversample(corpus: &Corpus, seed: u64) -> Result<Corpus> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("oversample over empty corpus"));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); corpus.intent_vocab.len()];
    for (i, utt) in corpus.utterances.iter().enumerate() {
        let class = corpus
            .intent_vocab
            .binary_search(&utt.intent)
            .expect("corpus invariant: intent in vocab");
        members[class].push(i);
    }
    let head = members.iter().map(Vec::len).max().unwrap_or(0);
    let mut rng = seeding::rng(seed);
    let mut utterances = corpus.utterances.clone();
    for class_members in members.iter().filter(|m| !m.is_empty()) {
        for _ in 0..head - class_members.len() {
            let pick = class_members[rng.gen_range(0..class_members.len())];
            utterances.push(corpus.utterances[pick].clone());
        }
    }
    Corpus::with_vocab(
        utterances,
        corpus.intent_vocab.clone(),
        corpus.slot_vocab.clone(),
        corpus.split,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Split, Utterance};

    fn corpus_with_counts(counts: &[(&str, usize)]) -> Corpus {
        let mut utts = Vec::new();
        for (intent, n) in counts {
            for i in 0..*n {
                utts.push(Utterance::new(&[&format!("{intent}{i}")], intent, &["O"]));
            }
        }
        let vocab: Vec<String> = counts.iter().map(|(i, _)| i.to_string()).collect();
        Corpus::with_vocab(utts, vocab, vec!["O".into()], Split::Train).unwrap()
    }

    fn cfg(batch_size: usize, seed: u64, regime: Regime) -> SamplerConfig {
        SamplerConfig {
            batch_size,
            seed,
            regime,
        }
    }

    fn class_counts(corpus: &Corpus, batch: &Batch) -> std::collections::BTreeMap<String, usize> {
        let mut counts = std::collections::BTreeMap::new();
        for &i in &batch.indices {
            *counts
                .entry(corpus.utterances[i].intent.clone())
                .or_insert(0) += 1;
        }
        counts
    }

    #[test]
    fn random_epoch_chunk_sizes() {
        let corpus = corpus_with_counts(&[("A", 10)]);
        let batches = random_epoch(&corpus, &cfg(4, 1, Regime::Random), TaskTag::Primary).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Batch::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(batches[2].index_in_epoch, 2);
    }

    #[test]
    fn random_epoch_is_a_permutation() {
        let corpus = corpus_with_counts(&[("A", 4)]);
        let batches = random_epoch(&corpus, &cfg(4, 9, Regime::Random), TaskTag::Primary).unwrap();
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn random_epoch_seed_contract() {
        let corpus = corpus_with_counts(&[("A", 16)]);
        let one = random_epoch(&corpus, &cfg(4, 1, Regime::Random), TaskTag::Primary).unwrap();
        let two = random_epoch(&corpus, &cfg(4, 2, Regime::Random), TaskTag::Primary).unwrap();
        let one_again = random_epoch(&corpus, &cfg(4, 1, Regime::Random), TaskTag::Primary).unwrap();
        assert_eq!(one, one_again);
        assert_ne!(one, two);
    }

    #[test]
    fn random_epoch_rejects_empty() {
        let corpus = Corpus::from_utterances(vec![], Split::Train).unwrap();
        assert!(random_epoch(&corpus, &cfg(4, 1, Regime::Random), TaskTag::Primary).is_err());
    }

    #[test]
    fn cbg_divisible_batch_is_exactly_balanced() {
        let corpus = corpus_with_counts(&[("A", 5), ("B", 7), ("C", 9)]);
        let batches =
            cbg_epoch(&corpus, &cfg(6, 3, Regime::ClassBalanced), TaskTag::Auxiliary).unwrap();
        for batch in &batches {
            let counts = class_counts(&corpus, batch);
            assert_eq!(counts["A"], 2);
            assert_eq!(counts["B"], 2);
            assert_eq!(counts["C"], 2);
        }
    }

    #[test]
    fn cbg_remainder_rule() {
        // 10 classes, b = 64: 6 per class plus one extra for 4 classes.
        let counts: Vec<(String, usize)> = (0..10).map(|i| (format!("C{i}"), 20)).collect();
        let counts_ref: Vec<(&str, usize)> =
            counts.iter().map(|(s, n)| (s.as_str(), *n)).collect();
        let corpus = corpus_with_counts(&counts_ref);
        let batches =
            cbg_epoch(&corpus, &cfg(64, 11, Regime::ClassBalanced), TaskTag::Primary).unwrap();
        for batch in &batches {
            assert_eq!(batch.len(), 64);
            let per_class = class_counts(&corpus, batch);
            let sixes = per_class.values().filter(|&&c| c == 6).count();
            let sevens = per_class.values().filter(|&&c| c == 7).count();
            assert_eq!((sixes, sevens), (6, 4), "counts {per_class:?}");
        }
    }

    #[test]
    fn cbg_epoch_cap_trace() {
        // 100 instances, b = 30: sizes after batches 30, 60, 90 are <= 100 so a
        // fourth batch is generated, then 120 > 100 stops the epoch.
        let corpus = corpus_with_counts(&[("A", 50), ("B", 30), ("C", 20)]);
        let batches =
            cbg_epoch(&corpus, &cfg(30, 5, Regime::ClassBalanced), TaskTag::Primary).unwrap();
        assert_eq!(batches.len(), 4);
        let total: usize = batches.iter().map(Batch::len).sum();
        assert_eq!(total, 120);
    }

    #[test]
    fn cbg_skips_zero_count_classes() {
        let corpus = corpus_with_counts(&[("A", 8), ("B", 0), ("C", 8)]);
        let batches =
            cbg_epoch(&corpus, &cfg(4, 2, Regime::ClassBalanced), TaskTag::Primary).unwrap();
        for batch in &batches {
            let counts = class_counts(&corpus, batch);
            assert!(!counts.contains_key("B"));
            assert_eq!(counts["A"], 2);
            assert_eq!(counts["C"], 2);
        }
    }

    #[test]
    fn cbg_all_classes_empty_errors() {
        let corpus =
            Corpus::with_vocab(vec![], vec!["A".into()], vec!["O".into()], Split::Train).unwrap();
        assert!(matches!(
            cbg_epoch(&corpus, &cfg(4, 2, Regime::ClassBalanced), TaskTag::Primary),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn cbg_balance_property_random_configs() {
        let mut rng = crate::seeding::rng(77);
        for trial in 0..30 {
            let k = 1 + rng.gen_range(0..6);
            let counts: Vec<(String, usize)> = (0..k)
                .map(|i| (format!("C{i}"), 1 + rng.gen_range(0..40)))
                .collect();
            let counts_ref: Vec<(&str, usize)> =
                counts.iter().map(|(s, n)| (s.as_str(), *n)).collect();
            let corpus = corpus_with_counts(&counts_ref);
            let b = 1 + rng.gen_range(0..20);
            let batches = cbg_epoch(
                &corpus,
                &cfg(b, 1000 + trial, Regime::ClassBalanced),
                TaskTag::Primary,
            )
            .unwrap();
            let n = corpus.len();
            let total: usize = batches.iter().map(Batch::len).sum();
            assert!(total > n && total <= n + b, "cap violated: N={n} b={b} T={total}");
            assert_eq!(total % b, 0);
            for batch in &batches {
                assert_eq!(batch.len(), b);
                let per_class = class_counts(&corpus, batch);
                let max = per_class.values().copied().max().unwrap();
                // min over nonempty classes of the batch count (absent => 0).
                let min = corpus
                    .intent_vocab
                    .iter()
                    .filter(|c| corpus.utterances.iter().any(|u| &&u.intent == c))
                    .map(|c| per_class.get(c).copied().unwrap_or(0))
                    .min()
                    .unwrap();
                assert!(max - min <= 1, "imbalance {per_class:?} for b={b}");
            }
        }
    }

    #[test]
    fn oversample_levels_counts_to_head() {
        let corpus = corpus_with_counts(&[("A", 100), ("B", 10), ("C", 1)]);
        let upsampled = oversample(&corpus, 4).unwrap();
        let hist = upsampled.class_histogram();
        assert_eq!(hist.counts["A"], 100);
        assert_eq!(hist.counts["B"], 100);
        assert_eq!(hist.counts["C"], 100);
        assert_eq!(hist.total, 300);
        // Originals retained as a prefix.
        assert_eq!(&upsampled.utterances[..corpus.len()], &corpus.utterances[..]);
    }

    #[test]
    fn oversample_uniform_is_identity() {
        let corpus = corpus_with_counts(&[("A", 5), ("B", 5)]);
        let upsampled = oversample(&corpus, 4).unwrap();
        assert_eq!(upsampled, corpus);
    }

    #[test]
    fn oversample_keeps_zero_classes_at_zero() {
        let corpus = corpus_with_counts(&[("A", 3), ("B", 0)]);
        let upsampled = oversample(&corpus, 4).unwrap();
        let hist = upsampled.class_histogram();
        assert_eq!(hist.counts["A"], 3);
        assert_eq!(hist.counts["B"], 0);
    }

    #[test]
    fn epoch_cap_property_random_pairs() {
        let mut rng = crate::seeding::rng(99);
        for trial in 0..50 {
            let n = 1 + rng.gen_range(0..400);
            let b = 1 + rng.gen_range(0..64);
            let corpus = corpus_with_counts(&[("A", n)]);
            let batches = cbg_epoch(
                &corpus,
                &cfg(b, trial, Regime::ClassBalanced),
                TaskTag::Primary,
            )
            .unwrap();
            let total: usize = batches.iter().map(Batch::len).sum();
            assert!(total > n, "N={n} b={b} T={total}");
            assert!(total <= n + b, "N={n} b={b} T={total}");
            assert_eq!(total % b, 0);
        }
    }
}
