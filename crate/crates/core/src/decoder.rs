//! Inner-product decoder, interaction likelihoods and top-K ranking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{bernoulli_log_likelihood_value, Tape, Tensor, Var, PROB_FLOOR};

/// Likelihood of the observed interaction row given preference scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    /// Independent Bernoulli per item with success probability `σ(e)`.
    #[default]
    Logistic,
    /// `Σ_v y_v · log softmax(e)_v`.
    Multinomial,
}

/// `⟨u, v⟩`.
pub fn score(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension {
            op: "score",
            lhs: vec![u.len()],
            rhs: vec![v.len()],
        });
    }
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum())
}

/// Dense `users · itemsᵀ` score matrix.
pub fn score_matrix(users: &Tensor, items: &Tensor) -> Result<Tensor> {
    users.matmul_nt(items)
}

fn check_binary(op: &'static str, y: &[f64]) -> Result<()> {
    match y.iter().find(|&&t| t != 0.0 && t != 1.0) {
        Some(t) => Err(Error::invalid(op, format!("target {t} is not 0 or 1"))),
        None => Ok(()),
    }
}

fn check_len(op: &'static str, y: &[f64], e: &[f64]) -> Result<()> {
    if y.len() != e.len() {
        return Err(Error::Dimension {
            op,
            lhs: vec![y.len()],
            rhs: vec![e.len()],
        });
    }
    Ok(())
}

/// Logistic log-likelihood of one interaction row, each probability floored
/// at [`PROB_FLOOR`].
pub fn log_likelihood(y: &[f64], e: &[f64]) -> Result<f64> {
    check_len("log_likelihood", y, e)?;
    check_binary("log_likelihood", y)?;
    Ok(bernoulli_log_likelihood_value(e, y))
}

/// Multinomial log-likelihood `Σ y · log softmax(e)`, floored like
/// [`log_likelihood`].
pub fn multinomial_log_likelihood(y: &[f64], e: &[f64]) -> Result<f64> {
    check_len("multinomial_log_likelihood", y, e)?;
    check_binary("multinomial_log_likelihood", y)?;
    let probs = crate::numeric::softmax(e)?;
    Ok(y
        .iter()
        .zip(probs)
        .map(|(&t, p)| t * p.max(PROB_FLOOR).ln())
        .sum())
}

/// Summed reconstruction log-likelihood of a `[batch, items]` logit matrix.
pub fn reconstruction(
    tape: &mut Tape,
    likelihood: Likelihood,
    logits: Var,
    targets: &Tensor,
) -> Result<Var> {
    match likelihood {
        Likelihood::Logistic => tape.bernoulli_log_likelihood(logits, targets.clone()),
        Likelihood::Multinomial => {
            check_binary("reconstruction", targets.data())?;
            let logp = tape.log_softmax(logits)?;
            let picked = tape.mask_mul(logp, targets.clone())?;
            Ok(tape.sum(picked))
        }
    }
}

/// Items ordered by descending score, ties by ascending item id.
///
/// `exclude` must be sorted; its items are left out of the ranking.
pub fn rank_items(scores: &Tensor, user: usize, exclude: &[usize]) -> Result<Vec<usize>> {
    if user >= scores.rows() {
        return Err(Error::Lookup { kind: "user", id: user });
    }
    let row = scores.row(user);
    let mut items: Vec<usize> = (0..row.len())
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    items.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    Ok(items)
}

/// The first `k` items of [`rank_items`], selected without a full sort.
pub fn top_k_items(scores: &Tensor, user: usize, exclude: &[usize], k: usize) -> Result<Vec<usize>> {
    if user >= scores.rows() {
        return Err(Error::Lookup { kind: "user", id: user });
    }
    let row = scores.row(user);
    let mut items: Vec<usize> = (0..row.len())
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
    if k < items.len() {
        items.select_nth_unstable_by(k, cmp);
        items.truncate(k);
    }
    items.sort_by(cmp);
    Ok(items)
}
