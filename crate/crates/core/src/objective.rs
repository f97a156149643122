//! Clean and counterfactual evidence lower bounds and their mixture.
//!
//! Both bounds are averaged over the users of a batch. The item KL is
//! charged in proportion `|B| / n_users`, so one pass over all user batches
//! pays it exactly once.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::decoder::{self, Likelihood};
use crate::encoder::Posterior;
use crate::error::{ConfigIssue, Error, Result};
use crate::numeric::{logistic, StreamRng, Tape, Tensor, Var};

/// Distribution of the intervened preference scores `e′`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CounterfactualDist {
    Normal { mean: f64, std: f64 },
    Uniform { low: f64, high: f64 },
}

impl Default for CounterfactualDist {
    fn default() -> Self {
        CounterfactualDist::Normal { mean: 0.0, std: 1.0 }
    }
}

impl CounterfactualDist {
    pub fn issues(&self, prefix: &str) -> Vec<ConfigIssue> {
        let bad = match *self {
            CounterfactualDist::Normal { mean, std } => {
                !mean.is_finite() || !std.is_finite() || std < 0.0
            }
            CounterfactualDist::Uniform { low, high } => {
                !low.is_finite() || !high.is_finite() || low > high
            }
        };
        if bad {
            vec![ConfigIssue {
                path: format!("{prefix}distribution"),
                message: "need finite parameters with std >= 0 or low <= high".into(),
            }]
        } else {
            Vec::new()
        }
    }

    fn sample(&self, r: &mut StreamRng) -> f64 {
        match *self {
            CounterfactualDist::Normal { mean, std } if std > 0.0 => {
                Normal::new(mean, std).expect("validated").sample(r)
            }
            CounterfactualDist::Normal { mean, .. } => mean,
            CounterfactualDist::Uniform { low, high } if high > low => {
                Uniform::new(low, high).expect("validated").sample(r)
            }
            CounterfactualDist::Uniform { low, .. } => low,
        }
    }
}

/// Which value the preference vector is forced to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InterventionSpec {
    /// `do(e = o)`: keep the observed value.
    Clean,
    /// `do(e = e′)` with `e′` drawn from the given distribution.
    Counterfactual(CounterfactualDist),
}

/// The users of one training step and their observed interaction rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub users: Vec<usize>,
    /// `[|users|, n_items]`, entries in `{0, 1}`.
    pub targets: Tensor,
}

impl Batch {
    pub fn new(users: Vec<usize>, items_by_user: &[Vec<usize>], n_items: usize) -> Result<Self> {
        let mut targets = Tensor::zeros(&[users.len(), n_items]);
        for (row, &u) in users.iter().enumerate() {
            let items = items_by_user
                .get(u)
                .ok_or(Error::Lookup { kind: "user", id: u })?;
            for &i in items {
                if i >= n_items {
                    return Err(Error::Lookup { kind: "item", id: i });
                }
                targets.row_mut(row)[i] = 1.0;
            }
        }
        Ok(Self { users, targets })
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// A batch after `do(e = e′)`: intervened scores and the targets they imply.
#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualBatch {
    pub users: Vec<usize>,
    pub scores: Tensor,
    pub targets: Tensor,
}

/// Replaces every score of the batch by an independent `e′` and draws
/// `y′ ~ Bernoulli(σ(e′))` for each entry.
pub fn make_counterfactual(
    batch: &Batch,
    spec: InterventionSpec,
    r: &mut StreamRng,
) -> Result<CounterfactualBatch> {
    let InterventionSpec::Counterfactual(dist) = spec else {
        return Err(Error::invalid(
            "make_counterfactual",
            "intervention spec is not counterfactual",
        ));
    };
    let shape = batch.targets.shape().to_vec();
    let n: usize = shape.iter().product();
    let mut scores = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let e = dist.sample(r);
        let y = if r.random::<f64>() < logistic(e) { 1.0 } else { 0.0 };
        scores.push(e);
        targets.push(y);
    }
    Ok(CounterfactualBatch {
        users: batch.users.clone(),
        scores: Tensor::new(shape.clone(), scores)?,
        targets: Tensor::new(shape, targets)?,
    })
}

/// Standard-normal draws for one reparameterised sample of the batch users
/// and of every item.
#[derive(Clone, Debug, PartialEq)]
pub struct ReparamNoise {
    pub users: Tensor,
    pub items: Tensor,
}

/// Tape handles for the terms of one ELBO.
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    /// Reconstruction per batch user.
    pub recon: Var,
    /// KL per batch user (user KL plus the batch's share of the item KL).
    pub kl: Var,
    pub elbo: Var,
}

/// KL of the batch users' posteriors plus `|B| / n_users` of the item KL,
/// divided by `|B|`.
pub fn kl_term(tape: &mut Tape, post: &Posterior, users: &[usize], n_users: usize) -> Result<Var> {
    if users.is_empty() {
        return Err(Error::invalid("kl_term", "empty batch"));
    }
    let mu_u = tape.gather_rows(post.user.mu, users)?;
    let var_u = tape.gather_rows(post.user.var, users)?;
    let kl_u = tape.kl_diag_normal(mu_u, var_u)?;
    let kl_v = tape.kl_diag_normal(post.item.mu, post.item.var)?;
    let b = users.len() as f64;
    let kl_u = tape.scale(kl_u, 1.0 / b);
    let kl_v = tape.scale(kl_v, 1.0 / n_users as f64);
    tape.add(kl_u, kl_v)
}

fn combine(tape: &mut Tape, recon: Var, kl: Var) -> Result<ElboTerms> {
    let elbo = tape.sub(recon, kl)?;
    Ok(ElboTerms { recon, kl, elbo })
}

/// `E_q[log p(y | e, do(e = o))] − KL`, the expectation estimated with one
/// reparameterised sample per entry of `noise`.
pub fn elbo_clean(
    tape: &mut Tape,
    likelihood: Likelihood,
    post: &Posterior,
    batch: &Batch,
    noise: &[ReparamNoise],
    n_users: usize,
) -> Result<ElboTerms> {
    if noise.is_empty() {
        return Err(Error::invalid("elbo_clean", "need at least one sample"));
    }
    let mu = tape.gather_rows(post.user.mu, &batch.users)?;
    let sigma = tape.gather_rows(post.user.sigma, &batch.users)?;
    let mut total: Option<Var> = None;
    for eps in noise {
        let u = tape.gaussian_sample(mu, sigma, eps.users.clone())?;
        let v = tape.gaussian_sample(post.item.mu, post.item.sigma, eps.items.clone())?;
        let logits = tape.matmul_nt(u, v)?;
        let r = decoder::reconstruction(tape, likelihood, logits, &batch.targets)?;
        total = Some(match total {
            Some(t) => tape.add(t, r)?,
            None => r,
        });
    }
    let scale = 1.0 / (noise.len() * batch.len()) as f64;
    let recon = tape.scale(total.expect("non-empty"), scale);
    let kl = kl_term(tape, post, &batch.users, n_users)?;
    combine(tape, recon, kl)
}

/// `log p(y′ | do(e = e′)) − KL`. The intervention cuts `e` off from the
/// encoder, so the reconstruction is a constant of the drawn batch.
pub fn elbo_counterfactual(
    tape: &mut Tape,
    likelihood: Likelihood,
    post: &Posterior,
    batch: &CounterfactualBatch,
    n_users: usize,
) -> Result<ElboTerms> {
    let scores = tape.constant(batch.scores.clone());
    let r = decoder::reconstruction(tape, likelihood, scores, &batch.targets)?;
    let recon = tape.scale(r, 1.0 / batch.users.len().max(1) as f64);
    let kl = kl_term(tape, post, &batch.users, n_users)?;
    combine(tape, recon, kl)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::config("lambda", format!("{lambda} outside [0, 1]")))
    }
}

/// `λ·clean + (1−λ)·cf` on plain values.
pub fn loss_augmented(elbo_clean: f64, elbo_cf: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(lambda * elbo_clean + (1.0 - lambda) * elbo_cf)
}

/// Tape version of [`loss_augmented`]. Without a counterfactual term the
/// clean ELBO is returned unchanged.
pub fn augment(tape: &mut Tape, clean: Var, cf: Option<Var>, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    match cf {
        None => Ok(clean),
        Some(cf) => {
            let a = tape.scale(clean, lambda);
            let b = tape.scale(cf, 1.0 - lambda);
            tape.add(a, b)
        }
    }
}

/// Scalar values of one step's objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub elbo_clean: f64,
    pub elbo_cf: Option<f64>,
    pub total: f64,
    pub lambda: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::GaussianHead;
    use crate::numeric::rng::{self, Stream};

    fn posterior(tape: &mut Tape, mu_u: Tensor, var_u: Tensor, mu_v: Tensor, var_v: Tensor) -> Posterior {
        let mut head = |mu: Tensor, var: Tensor| {
            let sigma = var.map(f64::sqrt);
            GaussianHead {
                mu: tape.param(mu),
                var: tape.param(var),
                sigma: tape.param(sigma),
            }
        };
        let user = head(mu_u, var_u);
        let item = head(mu_v, var_v);
        Posterior {
            layers: Vec::new(),
            hidden: user.mu,
            user,
            item,
        }
    }

    fn toy() -> (Tensor, Tensor, Tensor, Tensor, Batch) {
        let mu_u = Tensor::matrix(2, 2, vec![0.5, 0.1, 0.0, 0.3]).unwrap();
        let var_u = Tensor::matrix(2, 2, vec![1.0, 1.5, 2.0, 1.2]).unwrap();
        let mu_v = Tensor::matrix(3, 2, vec![0.2, 0.4, 0.0, 0.0, 0.7, 0.1]).unwrap();
        let var_v = Tensor::matrix(3, 2, vec![1.1, 1.0, 1.3, 1.0, 1.0, 1.7]).unwrap();
        let batch = Batch::new(vec![0, 1], &[vec![0, 2], vec![1]], 3).unwrap();
        (mu_u, var_u, mu_v, var_v, batch)
    }

    #[test]
    fn clean_elbo_matches_componentwise_oracle() {
        let (mu_u, var_u, mu_v, var_v, batch) = toy();
        let eps_u = Tensor::matrix(2, 2, vec![0.3, -0.2, 1.0, 0.5]).unwrap();
        let eps_v = Tensor::matrix(3, 2, vec![-0.1, 0.4, 0.0, 0.9, -1.2, 0.2]).unwrap();
        let mut tape = Tape::new();
        let post = posterior(&mut tape, mu_u.clone(), var_u.clone(), mu_v.clone(), var_v.clone());
        let noise = [ReparamNoise { users: eps_u.clone(), items: eps_v.clone() }];
        let terms = elbo_clean(&mut tape, Likelihood::Logistic, &post, &batch, &noise, 4).unwrap();

        let draw = |mu: &Tensor, var: &Tensor, eps: &Tensor, r: usize| -> Vec<f64> {
            (0..2).map(|c| mu.at(r, c) + var.at(r, c).sqrt() * eps.at(r, c)).collect()
        };
        let mut recon = 0.0;
        for u in 0..2 {
            let uu = draw(&mu_u, &var_u, &eps_u, u);
            let e: Vec<f64> = (0..3)
                .map(|v| decoder::score(&uu, &draw(&mu_v, &var_v, &eps_v, v)).unwrap())
                .collect();
            recon += decoder::log_likelihood(batch.targets.row(u), &e).unwrap();
        }
        let kl_u = crate::numeric::kl_diag_normal(mu_u.data(), var_u.data()).unwrap();
        let kl_v = crate::numeric::kl_diag_normal(mu_v.data(), var_v.data()).unwrap();
        let oracle = (recon - kl_u - kl_v * 2.0 / 4.0) / 2.0;
        let got = tape.value(terms.elbo).item().unwrap();
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
        assert!(got <= tape.value(terms.recon).item().unwrap());
    }

    #[test]
    fn standard_posterior_has_zero_kl() {
        let mut tape = Tape::new();
        let post = posterior(
            &mut tape,
            Tensor::zeros(&[2, 2]),
            Tensor::ones(&[2, 2]),
            Tensor::zeros(&[3, 2]),
            Tensor::ones(&[3, 2]),
        );
        let (.., batch) = toy();
        let noise = [ReparamNoise { users: Tensor::zeros(&[2, 2]), items: Tensor::zeros(&[3, 2]) }];
        let t = elbo_clean(&mut tape, Likelihood::Logistic, &post, &batch, &noise, 2).unwrap();
        assert_eq!(tape.value(t.kl).item().unwrap(), 0.0);
        assert_eq!(tape.value(t.elbo).item().unwrap(), tape.value(t.recon).item().unwrap());
    }

    #[test]
    fn counterfactual_shapes_and_point_mass() {
        let (.., batch) = toy();
        let mut r = rng::stream(0, Stream::Counterfactual, &[]);
        let cf = make_counterfactual(
            &batch,
            InterventionSpec::Counterfactual(CounterfactualDist::default()),
            &mut r,
        )
        .unwrap();
        assert_eq!(cf.scores.shape(), batch.targets.shape());
        assert!(make_counterfactual(&batch, InterventionSpec::Clean, &mut r).is_err());

        let big = Batch::new(vec![0; 100], &[vec![]], 100).unwrap();
        let point = InterventionSpec::Counterfactual(CounterfactualDist::Normal { mean: 0.0, std: 0.0 });
        let cf = make_counterfactual(&big, point, &mut r).unwrap();
        assert!(cf.scores.data().iter().all(|&e| e == 0.0));
        let mean = cf.targets.sum() / 1e4;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
    }

    #[test]
    fn counterfactual_target_rate_follows_logistic() {
        let big = Batch::new(vec![0; 100], &[vec![]], 100).unwrap();
        let spec = InterventionSpec::Counterfactual(CounterfactualDist::Uniform { low: 1.0, high: 1.0 });
        let mut r = rng::stream(5, Stream::Counterfactual, &[]);
        let cf = make_counterfactual(&big, spec, &mut r).unwrap();
        let mean = cf.targets.sum() / 1e4;
        assert!((mean - 0.731_058_578_6).abs() < 0.01, "{mean}");
        let again = make_counterfactual(&big, spec, &mut rng::stream(5, Stream::Counterfactual, &[])).unwrap();
        assert_eq!(again, cf);
    }

    #[test]
    fn counterfactual_elbo_is_severed_from_means_and_shares_kl() {
        let (mu_u, var_u, mu_v, var_v, batch) = toy();
        let mut tape = Tape::new();
        let post = posterior(&mut tape, mu_u.clone(), var_u, mu_v, var_v);
        let mut r = rng::stream(1, Stream::Counterfactual, &[]);
        let cf = make_counterfactual(
            &batch,
            InterventionSpec::Counterfactual(CounterfactualDist::default()),
            &mut r,
        )
        .unwrap();
        let noise = [ReparamNoise { users: Tensor::zeros(&[2, 2]), items: Tensor::zeros(&[3, 2]) }];
        let clean = elbo_clean(&mut tape, Likelihood::Logistic, &post, &batch, &noise, 2).unwrap();
        let cft = elbo_counterfactual(&mut tape, Likelihood::Logistic, &post, &cf, 2).unwrap();
        assert_eq!(tape.value(clean.kl), tape.value(cft.kl));

        let oracle: f64 = (0..2)
            .map(|u| decoder::log_likelihood(cf.targets.row(u), cf.scores.row(u)).unwrap())
            .sum::<f64>()
            / 2.0;
        assert!((tape.value(cft.recon).item().unwrap() - oracle).abs() < 1e-12);

        let g = tape.backward(cft.recon).unwrap();
        assert!(g.get(post.user.mu).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(g.get(post.item.mu).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lambda_mixing() {
        assert_eq!(loss_augmented(-2.0, -4.0, 0.5).unwrap(), -3.0);
        assert_eq!(loss_augmented(-2.0, -4.0, 1.0).unwrap(), -2.0);
        assert_eq!(loss_augmented(-2.0, -4.0, 0.0).unwrap(), -4.0);
        assert!(matches!(loss_augmented(-2.0, -4.0, 1.5), Err(Error::Config(_))));
        assert!(loss_augmented(-1.0, -4.0, 0.3).unwrap() > loss_augmented(-2.0, -4.0, 0.3).unwrap());
    }
}
