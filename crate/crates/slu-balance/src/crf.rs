//! Linear-chain CRF over K emission tags with virtual begin/end states.
//!
//! The transition matrix has shape (K+2)×(K+2); row/column K is the virtual
//! begin state and K+1 the virtual end state, so start and end preferences
//! are learnable. A tag path y scores
//!
//!   score(y) = Σ_i emissions[i][y_i] + T[BOS][y_1]
//!            + Σ_i T[y_i][y_{i+1}] + T[y_L][EOS]
//!
//! and the log-partition is computed by the forward algorithm in log space.

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Tensor};

pub fn bos(num_tags: usize) -> usize {
    num_tags
}

pub fn eos(num_tags: usize) -> usize {
    num_tags + 1
}

fn check_shapes(transitions: &Tensor, emissions: &Tensor) -> Result<usize> {
    let k = emissions.cols;
    if emissions.rows == 0 {
        return Err(Error::EmptyInput("crf over zero-length sequence"));
    }
    if transitions.rows != k + 2 || transitions.cols != k + 2 {
        return Err(Error::Shape(format!(
            "crf transitions {}x{} do not match {} tags",
            transitions.rows, transitions.cols, k
        )));
    }
    Ok(k)
}

/// Path score under the chain scoring rule.
pub fn score(transitions: &Tensor, emissions: &Tensor, tags: &[usize]) -> Result<f64> {
    let k = check_shapes(transitions, emissions)?;
    if tags.len() != emissions.rows {
        return Err(Error::Shape(format!(
            "{} tags for {} emission rows",
            tags.len(),
            emissions.rows
        )));
    }
    let mut total = transitions.get(bos(k), tags[0]);
    for (i, &tag) in tags.iter().enumerate() {
        total += emissions.get(i, tag);
        if i + 1 < tags.len() {
            total += transitions.get(tag, tags[i + 1]);
        }
    }
    total += transitions.get(tags[tags.len() - 1], eos(k));
    Ok(total)
}

/// Forward algorithm in log space; returns log Z and the alpha lattice
/// (alphas[t][j] = log-sum over prefixes ending in tag j at position t).
pub fn log_partition_with_alphas(
    transitions: &Tensor,
    emissions: &Tensor,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let k = check_shapes(transitions, emissions)?;
    let length = emissions.rows;
    let mut alphas = vec![vec![0.0; k]; length];
    for j in 0..k {
        alphas[0][j] = transitions.get(bos(k), j) + emissions.get(0, j);
    }
    let mut scratch = vec![0.0; k];
    for t in 1..length {
        for j in 0..k {
            for (i, s) in scratch.iter_mut().enumerate() {
                *s = alphas[t - 1][i] + transitions.get(i, j);
            }
            alphas[t][j] = log_sum_exp(&scratch) + emissions.get(t, j);
        }
    }
    let finals: Vec<f64> = (0..k)
        .map(|j| alphas[length - 1][j] + transitions.get(j, eos(k)))
        .collect();
    Ok((log_sum_exp(&finals), alphas))
}

pub fn log_partition(transitions: &Tensor, emissions: &Tensor) -> Result<f64> {
    Ok(log_partition_with_alphas(transitions, emissions)?.0)
}

/// log P(tags | emissions) = score − log Z. Always ≤ 0 up to rounding.
pub fn log_likelihood(transitions: &Tensor, emissions: &Tensor, tags: &[usize]) -> Result<f64> {
    Ok(score(transitions, emissions, tags)? - log_partition(transitions, emissions)?)
}

/// Gradients of the log-likelihood with respect to emissions and
/// transitions, computed by forward–backward: observed features minus
/// expected features under the model.
pub fn log_likelihood_grads(
    transitions: &Tensor,
    emissions: &Tensor,
    tags: &[usize],
) -> Result<(Tensor, Tensor)> {
    let k = check_shapes(transitions, emissions)?;
    let length = emissions.rows;
    if tags.len() != length {
        return Err(Error::Shape(format!(
            "{} tags for {} emission rows",
            tags.len(),
            length
        )));
    }
    let (log_z, alphas) = log_partition_with_alphas(transitions, emissions)?;

    // Backward lattice: betas[t][i] = log-sum over suffixes starting after
    // tag i at position t (including the transition into EOS).
    let mut betas = vec![vec![0.0; k]; length];
    for i in 0..k {
        betas[length - 1][i] = transitions.get(i, eos(k));
    }
    let mut scratch = vec![0.0; k];
    for t in (0..length - 1).rev() {
        for i in 0..k {
            for (j, s) in scratch.iter_mut().enumerate() {
                *s = transitions.get(i, j) + emissions.get(t + 1, j) + betas[t + 1][j];
            }
            betas[t][i] = log_sum_exp(&scratch);
        }
    }

    // d ll / d emissions[t][j] = 1{y_t = j} − P(y_t = j)
    let mut d_emissions = Tensor::zeros(length, k);
    for t in 0..length {
        for j in 0..k {
            let marginal = (alphas[t][j] + betas[t][j] - log_z).exp();
            let observed = if tags[t] == j { 1.0 } else { 0.0 };
            d_emissions.set(t, j, observed - marginal);
        }
    }

    // d ll / d T = observed transition counts − expected transition counts.
    let mut d_transitions = Tensor::zeros(k + 2, k + 2);
    // Begin / end rows.
    for j in 0..k {
        let p_first = (alphas[0][j] + betas[0][j] - log_z).exp();
        let observed = if tags[0] == j { 1.0 } else { 0.0 };
        d_transitions.set(bos(k), j, observed - p_first);

        let p_last = (alphas[length - 1][j] + transitions.get(j, eos(k)) - log_z).exp();
        let observed = if tags[length - 1] == j { 1.0 } else { 0.0 };
        d_transitions.set(j, eos(k), observed - p_last);
    }
    // Interior transitions.
    for t in 0..length - 1 {
        for i in 0..k {
            for j in 0..k {
                let pair = (alphas[t][i]
                    + transitions.get(i, j)
                    + emissions.get(t + 1, j)
                    + betas[t + 1][j]
                    - log_z)
                    .exp();
                let observed = if tags[t] == i && tags[t + 1] == j {
                    1.0
                } else {
                    0.0
                };
                let cur = d_transitions.get(i, j);
                d_transitions.set(i, j, cur + observed - pair);
            }
        }
    }
    Ok((d_emissions, d_transitions))
}

/// Max-scoring tag sequence. Ties break toward the lowest tag index at every
/// backtracking step; the returned score is the chain score of the decoded
/// path.
pub fn viterbi(transitions: &Tensor, emissions: &Tensor) -> Result<(Vec<usize>, f64)> {
    let k = check_shapes(transitions, emissions)?;
    let length = emissions.rows;
    let mut delta = vec![vec![0.0; k]; length];
    let mut back = vec![vec![0usize; k]; length];
    for j in 0..k {
        delta[0][j] = transitions.get(bos(k), j) + emissions.get(0, j);
    }
    for t in 1..length {
        for j in 0..k {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0usize;
            for i in 0..k {
                let cand = delta[t - 1][i] + transitions.get(i, j);
                if cand > best {
                    best = cand;
                    best_i = i;
                }
            }
            delta[t][j] = best + emissions.get(t, j);
            back[t][j] = best_i;
        }
    }
    let mut best = f64::NEG_INFINITY;
    let mut best_j = 0usize;
    for j in 0..k {
        let cand = delta[length - 1][j] + transitions.get(j, eos(k));
        if cand > best {
            best = cand;
            best_j = j;
        }
    }
    let mut tags = vec![0usize; length];
    tags[length - 1] = best_j;
    for t in (1..length).rev() {
        tags[t - 1] = back[t][tags[t]];
    }
    let path_score = score(transitions, emissions, &tags)?;
    Ok((tags, path_score))
}
