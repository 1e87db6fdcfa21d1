//! Semantic error rate, intent accuracy, chunk-level slot F1, per-group
//! aggregation and relative-change reporting.
//!
//! SemER counts intent and slot errors jointly against a per-utterance
//! denominator of (reference slot chunks + 1); a corpus- or group-level
//! figure is the error-count-weighted aggregate Σ errors / Σ denominators,
//! not a mean of per-utterance ratios.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{parse_tag, Corpus, TagKind, Utterance};
use crate::error::{Error, Result};
use crate::model::Model;

/// A typed span extracted from a BIO sequence; `end` is exclusive.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SlotChunk {
    pub kind: String,
    pub start: usize,
    pub end: usize,
}

/// Deterministic, total chunk extraction. Valid BIO yields the usual chunks;
/// an `I-` tag that does not continue a chunk opens a new one, so predicted
/// sequences never need repair.
pub fn extract_chunks(tags: &[String]) -> Vec<SlotChunk> {
    let mut chunks = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let parsed = parse_tag(tag);
        let continues = matches!(
            (&parsed, &open),
            (Some(TagKind::Inside(ty)), Some((open_ty, _))) if ty == open_ty
        );
        if continues {
            continue;
        }
        if let Some((kind, start)) = open.take() {
            chunks.push(SlotChunk {
                kind,
                start,
                end: i,
            });
        }
        match parsed {
            Some(TagKind::Begin(ty)) | Some(TagKind::Inside(ty)) => {
                open = Some((ty.to_string(), i));
            }
            _ => {}
        }
    }
    if let Some((kind, start)) = open {
        chunks.push(SlotChunk {
            kind,
            start,
            end: tags.len(),
        });
    }
    chunks
}

/// Error count and denominator for one utterance.
///
/// denominator = |reference chunks| + 1. errors = intent mismatch (0/1)
/// plus slot errors, where chunks matching exactly on (type, span) are
/// correct, span-aligned type mismatches count once as a substitution, and
/// every remaining unmatched chunk on either side counts one.
pub fn semer(
    reference: &Utterance,
    hyp_intent: &str,
    hyp_tags: &[String],
) -> Result<(usize, usize)> {
    if hyp_tags.len() != reference.tokens.len() {
        return Err(Error::Shape(format!(
            "{} hypothesis tags for {} reference tokens",
            hyp_tags.len(),
            reference.tokens.len()
        )));
    }
    let ref_chunks = extract_chunks(&reference.slots);
    let hyp_chunks = extract_chunks(hyp_tags);
    let denominator = ref_chunks.len() + 1;

    let mut errors = usize::from(reference.intent != hyp_intent);

    // Greedy matching: pair identical (type, span) chunks first, then pair
    // leftovers that share a span as single substitution errors. Spans on
    // one side never overlap, so the pairing is unambiguous.
    let mut hyp_used = vec![false; hyp_chunks.len()];
    let mut ref_open = Vec::new();
    for chunk in &ref_chunks {
        match hyp_chunks
            .iter()
            .position(|h| h == chunk)
        {
            Some(j) => hyp_used[j] = true,
            None => ref_open.push(chunk),
        }
    }
    for chunk in ref_open {
        let span_match = hyp_chunks
            .iter()
            .enumerate()
            .position(|(j, h)| !hyp_used[j] && (h.start, h.end) == (chunk.start, chunk.end));
        match span_match {
            Some(j) => {
                // Same span, necessarily a different type: one substitution.
                hyp_used[j] = true;
                errors += 1;
            }
            None => errors += 1, // deletion
        }
    }
    errors += hyp_used.iter().filter(|&&used| !used).count(); // insertions
    Ok((errors, denominator))
}

/// Micro-averaged chunk F1 over aligned reference/hypothesis tag sequences.
pub fn slot_f1(references: &[Vec<String>], hypotheses: &[Vec<String>]) -> Result<f64> {
    if references.len() != hypotheses.len() {
        return Err(Error::Shape(format!(
            "{} references vs {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    let mut matches = 0usize;
    let mut ref_total = 0usize;
    let mut hyp_total = 0usize;
    for (r, h) in references.iter().zip(hypotheses) {
        let ref_chunks: BTreeSet<SlotChunk> = extract_chunks(r).into_iter().collect();
        let hyp_chunks: BTreeSet<SlotChunk> = extract_chunks(h).into_iter().collect();
        matches += ref_chunks.intersection(&hyp_chunks).count();
        ref_total += ref_chunks.len();
        hyp_total += hyp_chunks.len();
    }
    let precision = if hyp_total > 0 {
        matches as f64 / hyp_total as f64
    } else {
        0.0
    };
    let recall = if ref_total > 0 {
        matches as f64 / ref_total as f64
    } else {
        0.0
    };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// 100 · (method − baseline) / baseline; negative means the method improved.
pub fn relative_change(baseline_semer: f64, method_semer: f64) -> Result<f64> {
    if baseline_semer <= 0.0 {
        return Err(Error::Config(format!(
            "relative change needs a positive baseline, got {baseline_semer}"
        )));
    }
    Ok(100.0 * (method_semer - baseline_semer) / baseline_semer)
}

/// Per-intent SemER with utterance counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentEval {
    pub semer: f64,
    pub n: usize,
    pub errors: usize,
    pub denominator: usize,
}

/// Evaluation summary over a corpus: SemER per reference intent, per intent
/// group, overall intent accuracy and chunk F1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_intent: BTreeMap<String, IntentEval>,
    pub group_semer: BTreeMap<String, f64>,
    pub group_n: BTreeMap<String, usize>,
    pub intent_accuracy: f64,
    pub slot_f1: f64,
    pub overall_semer: f64,
    pub n: usize,
}

/// Run the model over a corpus and aggregate SemER by the reference intent,
/// by configured groups, plus overall accuracy and F1.
pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    groups: &BTreeMap<String, BTreeSet<String>>,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("evaluate over empty corpus"));
    }
    let predictions: Vec<Result<(String, Vec<String>)>> = corpus
        .utterances
        .par_iter()
        .map(|utt| model.predict(&utt.tokens))
        .collect();

    let mut per_intent: BTreeMap<String, IntentEval> = BTreeMap::new();
    let mut correct = 0usize;
    let mut total_errors = 0usize;
    let mut total_denominator = 0usize;
    let mut references = Vec::with_capacity(corpus.len());
    let mut hypotheses = Vec::with_capacity(corpus.len());

    for (utt, prediction) in corpus.utterances.iter().zip(predictions) {
        let (hyp_intent, hyp_tags) = prediction?;
        let (errors, denominator) = semer(utt, &hyp_intent, &hyp_tags)?;
        let entry = per_intent.entry(utt.intent.clone()).or_insert(IntentEval {
            semer: 0.0,
            n: 0,
            errors: 0,
            denominator: 0,
        });
        entry.n += 1;
        entry.errors += errors;
        entry.denominator += denominator;
        total_errors += errors;
        total_denominator += denominator;
        correct += usize::from(hyp_intent == utt.intent);
        references.push(utt.slots.clone());
        hypotheses.push(hyp_tags);
    }
    for stats in per_intent.values_mut() {
        stats.semer = stats.errors as f64 / stats.denominator as f64;
    }

    let mut group_semer = BTreeMap::new();
    let mut group_n = BTreeMap::new();
    for (name, members) in groups {
        let mut errors = 0usize;
        let mut denominator = 0usize;
        let mut n = 0usize;
        for (intent, stats) in &per_intent {
            if members.contains(intent) {
                errors += stats.errors;
                denominator += stats.denominator;
                n += stats.n;
            }
        }
        let semer = if denominator > 0 {
            errors as f64 / denominator as f64
        } else {
            0.0
        };
        group_semer.insert(name.clone(), semer);
        group_n.insert(name.clone(), n);
    }

    Ok(EvalReport {
        per_intent,
        group_semer,
        group_n,
        intent_accuracy: correct as f64 / corpus.len() as f64,
        slot_f1: slot_f1(&references, &hypotheses)?,
        overall_semer: total_errors as f64 / total_denominator as f64,
        n: corpus.len(),
    })
}

/// One line of a report file in the line-delimited record format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportRecord {
    Intent {
        intent: String,
        semer: f64,
        n: usize,
        errors: usize,
        denominator: usize,
    },
    Group {
        group: String,
        semer: f64,
        n: usize,
    },
    Overall {
        semer: f64,
        intent_accuracy: f64,
        slot_f1: f64,
        n: usize,
    },
}

impl EvalReport {
    pub fn to_records(&self) -> Vec<ReportRecord> {
        let mut records = Vec::new();
        for (intent, stats) in &self.per_intent {
            records.push(ReportRecord::Intent {
                intent: intent.clone(),
                semer: stats.semer,
                n: stats.n,
                errors: stats.errors,
                denominator: stats.denominator,
            });
        }
        for (group, &semer) in &self.group_semer {
            records.push(ReportRecord::Group {
                group: group.clone(),
                semer,
                n: self.group_n[group],
            });
        }
        records.push(ReportRecord::Overall {
            semer: self.overall_semer,
            intent_accuracy: self.intent_accuracy,
            slot_f1: self.slot_f1,
            n: self.n,
        });
        records
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut writer = BufWriter::new(file);
        for record in self.to_records() {
            let line = serde_json::to_string(&record).expect("record serializes");
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

    pub fn read(path: &Path) -> Result<EvalReport> {
        let file = File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut report = EvalReport {
            per_intent: BTreeMap::new(),
            group_semer: BTreeMap::new(),
            group_n: BTreeMap::new(),
            intent_accuracy: 0.0,
            slot_f1: 0.0,
            overall_semer: 0.0,
            n: 0,
        };
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| Error::Io {
                path: path.to_path_buf(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ReportRecord =
                serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: e.to_string(),
                })?;
            match record {
                ReportRecord::Intent {
                    intent,
                    semer,
                    n,
                    errors,
                    denominator,
                } => {
                    report.per_intent.insert(
                        intent,
                        IntentEval {
                            semer,
                            n,
                            errors,
                            denominator,
                        },
                    );
                }
                ReportRecord::Group { group, semer, n } => {
                    report.group_semer.insert(group.clone(), semer);
                    report.group_n.insert(group, n);
                }
                ReportRecord::Overall {
                    semer,
                    intent_accuracy,
                    slot_f1,
                    n,
                } => {
                    report.overall_semer = semer;
                    report.intent_accuracy = intent_accuracy;
                    report.slot_f1 = slot_f1;
                    report.n = n;
                }
            }
        }
        Ok(report)
    }
}
