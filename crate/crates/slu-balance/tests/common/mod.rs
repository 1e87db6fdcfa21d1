//! Independent oracles shared by the integration and acceptance suites.
//! These deliberately re-derive expected values by brute force or by a
//! different algebraic route than the implementations they check.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use slu_balance::corpus::Utterance;
use slu_balance::model::{EncodedUtterance, Model, Task};
use slu_balance::tensor::Tensor;

/// All K^L tag sequences of a given length.
pub fn enumerate_sequences(length: usize, num_tags: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = vec![0usize; length];
    loop {
        out.push(current.clone());
        let mut pos = 0;
        loop {
            if pos == length {
                return out;
            }
            current[pos] += 1;
            if current[pos] < num_tags {
                break;
            }
            current[pos] = 0;
            pos += 1;
        }
    }
}

/// Chain score computed independently of the library: all emissions first,
/// then begin/interior/end transitions.
pub fn oracle_path_score(transitions: &Tensor, emissions: &Tensor, tags: &[usize]) -> f64 {
    let k = emissions.cols;
    let mut total = 0.0;
    for (i, &t) in tags.iter().enumerate() {
        total += emissions.get(i, t);
    }
    total += transitions.get(k, tags[0]);
    for pair in tags.windows(2) {
        total += transitions.get(pair[0], pair[1]);
    }
    total + transitions.get(tags[tags.len() - 1], k + 1)
}

/// log Z by brute force over every sequence.
pub fn oracle_log_partition(transitions: &Tensor, emissions: &Tensor) -> f64 {
    let scores: Vec<f64> = enumerate_sequences(emissions.rows, emissions.cols)
        .iter()
        .map(|tags| oracle_path_score(transitions, emissions, tags))
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

/// Independent chunker: a chunk starts wherever a typed tag does not
/// continue the previous position's type, and runs while I-of-type follows.
pub fn oracle_chunks(tags: &[String]) -> BTreeSet<(String, usize, usize)> {
    fn tag_type(tag: &str) -> Option<(&str, bool)> {
        if let Some(t) = tag.strip_prefix("B-") {
            return (!t.is_empty()).then_some((t, true));
        }
        if let Some(t) = tag.strip_prefix("I-") {
            return (!t.is_empty()).then_some((t, false));
        }
        None
    }
    let mut chunks = BTreeSet::new();
    let mut i = 0;
    while i < tags.len() {
        match tag_type(&tags[i]) {
            None => i += 1,
            Some((ty, _)) => {
                let start = i;
                i += 1;
                while i < tags.len() && tag_type(&tags[i]) == Some((ty, false)) {
                    i += 1;
                }
                chunks.insert((ty.to_string(), start, i));
            }
        }
    }
    chunks
}

/// SemER by set algebra: |symmetric difference| minus one per span present
/// on both sides of it (a substitution appears in the difference twice but
/// counts once), plus the intent mismatch.
pub fn oracle_semer(
    reference: &Utterance,
    hyp_intent: &str,
    hyp_tags: &[String],
) -> (usize, usize) {
    let ref_chunks = oracle_chunks(&reference.slots);
    let hyp_chunks = oracle_chunks(hyp_tags);
    let ref_only: BTreeSet<_> = ref_chunks.difference(&hyp_chunks).cloned().collect();
    let hyp_only: BTreeSet<_> = hyp_chunks.difference(&ref_chunks).cloned().collect();
    let ref_spans: BTreeSet<(usize, usize)> =
        ref_only.iter().map(|(_, s, e)| (*s, *e)).collect();
    let hyp_spans: BTreeSet<(usize, usize)> =
        hyp_only.iter().map(|(_, s, e)| (*s, *e)).collect();
    let substitutions = ref_spans.intersection(&hyp_spans).count();
    let errors = usize::from(reference.intent != hyp_intent) + ref_only.len() + hyp_only.len()
        - substitutions;
    (errors, ref_chunks.len() + 1)
}

/// Random valid BIO sequence over a few slot types.
pub fn random_bio(rng: &mut ChaCha8Rng, length: usize, types: &[&str]) -> Vec<String> {
    let mut tags = Vec::with_capacity(length);
    while tags.len() < length {
        if rng.gen::<f64>() < 0.45 {
            let ty = types[rng.gen_range(0..types.len())];
            let span = 1 + rng.gen_range(0..3usize.min(length - tags.len()));
            tags.push(format!("B-{ty}"));
            for _ in 1..span {
                tags.push(format!("I-{ty}"));
            }
        } else {
            tags.push("O".to_string());
        }
    }
    tags
}

/// Central finite differences against the analytic gradient for every entry
/// of every parameter. Returns the worst relative error observed.
pub fn finite_difference_check(
    model: &mut Model,
    task: Task,
    batch_utts: &[EncodedUtterance],
    train_mode: bool,
    seed: u64,
    step: f64,
    tolerance: f64,
) -> f64 {
    let batch: Vec<&EncodedUtterance> = batch_utts.iter().collect();
    let (_, grads) = model
        .joint_loss(task, &batch, None, train_mode, seed)
        .expect("loss computes");
    let mut worst = 0.0f64;
    for id in 0..model.num_params() {
        let (rows, cols) = model.params().shape(id);
        for k in 0..rows * cols {
            let original = model.params().get(id).data[k];

            model.params_mut().tensor_mut(id).data[k] = original + step;
            let plus = model
                .joint_loss(task, &batch, None, train_mode, seed)
                .expect("loss computes")
                .0;
            model.params_mut().tensor_mut(id).data[k] = original - step;
            let minus = model
                .joint_loss(task, &batch, None, train_mode, seed)
                .expect("loss computes")
                .0;
            model.params_mut().tensor_mut(id).data[k] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grads.dense[id]
                .as_ref()
                .map(|g| g.data[k])
                .unwrap_or(0.0);
            let scale = analytic.abs().max(numeric.abs());
            let error = if scale < 1e-6 {
                (analytic - numeric).abs()
            } else {
                (analytic - numeric).abs() / scale
            };
            assert!(
                error <= tolerance,
                "parameter `{}`[{k}]: analytic {analytic} vs numeric {numeric} (err {error})",
                model.params().name(id)
            );
            worst = worst.max(error);
        }
    }
    worst
}
