//! Optimisation loop, early stopping, checkpoints and the matrix
//! factorisation baseline.
//!
//! Every random draw of a run comes from a stream addressed by the seed and
//! the `(epoch, batch)` position, so a run resumed from a checkpoint replays
//! exactly the numbers an uninterrupted run would have used.

mod checkpoint;
mod grid;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SplitDataset;
use crate::decoder::{self, Likelihood};
use crate::encoder::{self, EncoderConfig, EncoderGraph, ForwardDraws};
use crate::error::{ConfigIssue, Error, Result};
use crate::eval;
use crate::numeric::rng::{self, Stream};
use crate::numeric::{AdamState, BoundParams, ModelParams, Tape, Tensor, Var};
use crate::objective::{
    self, Batch, CounterfactualBatch, CounterfactualDist, ElboTerms, InterventionSpec, LossBreakdown, ReparamNoise,
};

pub use checkpoint::{config_hash, Checkpoint, DataSource, CHECKPOINT_MANIFEST, OPTIMIZER_FILE, PARAMS_DIR};
pub(crate) use grid::parallel_map;
pub use grid::{grid_search, GridResult, GridRow, GridSpace};

pub const VALIDATION_K: usize = 10;
pub const LOG_HEADER: &str = "epoch,elbo_clean,elbo_cf,kl,recon,total,val_precision@10";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Cngcf,
    Mf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CounterfactualConfig {
    pub enabled: bool,
    pub distribution: CounterfactualDist,
}

impl Default for CounterfactualConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            distribution: CounterfactualDist::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2_weight: f64,
    pub dropout: f64,
    /// Users per step (pairs per step for the baseline).
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lambda: f64,
    pub elbo_samples: usize,
    pub likelihood: Likelihood,
    pub counterfactual: CounterfactualConfig,
    pub encoder: EncoderConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            l2_weight: 0.01,
            dropout: 0.4,
            batch_size: 1024,
            max_epochs: 400,
            patience: 20,
            lambda: 0.5,
            elbo_samples: 1,
            likelihood: Likelihood::Logistic,
            counterfactual: CounterfactualConfig::default(),
            encoder: EncoderConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn issues(&self, prefix: &str) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut push = |field: &str, message: String| {
            out.push(ConfigIssue {
                path: format!("{prefix}{field}"),
                message,
            })
        };
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            push("learning_rate", format!("must be a finite value >= 0, got {}", self.learning_rate));
        }
        if !(self.l2_weight >= 0.0 && self.l2_weight.is_finite()) {
            push("l2_weight", format!("must be a finite value >= 0, got {}", self.l2_weight));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            push("dropout", format!("must lie in [0, 1), got {}", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            push("lambda", format!("must lie in [0, 1], got {}", self.lambda));
        }
        for (field, v) in [
            ("batch_size", self.batch_size),
            ("patience", self.patience),
            ("elbo_samples", self.elbo_samples),
        ] {
            if v == 0 {
                push(field, "must be positive".into());
            }
        }
        out.extend(
            self.counterfactual
                .distribution
                .issues(&format!("{prefix}counterfactual.")),
        );
        out.extend(self.encoder.issues(&format!("{prefix}encoder.")));
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues("");
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }
}

/// One row of the training log; values are per-user epoch averages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub elbo_clean: f64,
    pub elbo_cf: Option<f64>,
    pub kl: f64,
    pub recon: f64,
    pub total: f64,
    pub val_precision: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let cf = self.elbo_cf.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.elbo_clean, cf, self.kl, self.recon, self.total, self.val_precision
        )
    }
}

pub fn write_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let num = |s: &str| -> Result<f64> {
        s.parse().map_err(|_| Error::Load {
            path: path.to_path_buf(),
            reason: format!("bad number `{s}`"),
        })
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 7 {
            return Err(Error::Load {
                path: path.to_path_buf(),
                reason: format!("expected 7 columns, got {}", rec.len()),
            });
        }
        out.push(EpochLog {
            epoch: num(&rec[0])? as usize,
            elbo_clean: num(&rec[1])?,
            elbo_cf: if rec[2].is_empty() { None } else { Some(num(&rec[2])?) },
            kl: num(&rec[3])?,
            recon: num(&rec[4])?,
            total: num(&rec[5])?,
            val_precision: num(&rec[6])?,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

/// Result of a finished run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation precision.
    pub best: Checkpoint,
    /// State after the final epoch; resume from here.
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
    pub stop: StopReason,
}

/// Fixed per-run structures derived from the split.
struct Prepared {
    topo: Option<EncoderGraph>,
    train_by_user: Vec<Vec<usize>>,
    val_by_user: Vec<Vec<usize>>,
    n_users: usize,
    n_items: usize,
}

/// Epoch-by-epoch training state.
pub struct Trainer<'a> {
    split: &'a SplitDataset,
    cfg: TrainConfig,
    kind: ModelKind,
    prep: Prepared,
    params: ModelParams,
    adam: AdamState,
    epoch: usize,
    best_params: ModelParams,
    best_val: Option<f64>,
    bad_epochs: usize,
    log: Vec<EpochLog>,
}

fn mf_init(seed: u64, n_users: usize, n_items: usize, d: usize) -> ModelParams {
    let mut p = ModelParams::new();
    p.insert("mf.user", encoder::small_normal(seed, "mf.user", n_users, d, 0.1));
    p.insert("mf.item", encoder::small_normal(seed, "mf.item", n_items, d, 0.1));
    p
}

impl<'a> Trainer<'a> {
    pub fn new(split: &'a SplitDataset, cfg: TrainConfig, kind: ModelKind) -> Result<Self> {
        cfg.validate()?;
        let prep = Self::prepare(split, kind)?;
        let params = match (&prep.topo, kind) {
            (Some(topo), ModelKind::Cngcf) => encoder::init_params(&cfg.encoder, topo, cfg.seed),
            _ => mf_init(cfg.seed, prep.n_users, prep.n_items, cfg.encoder.repr_dim),
        };
        let adam = AdamState::new(cfg.learning_rate, &params.to_vec());
        Ok(Self {
            split,
            best_params: params.clone(),
            cfg,
            kind,
            prep,
            params,
            adam,
            epoch: 0,
            best_val: None,
            bad_epochs: 0,
            log: Vec::new(),
        })
    }

    /// Continues from `last`, keeping `best` as the incumbent; `log` holds the
    /// rows already written for the run.
    pub fn resume(
        split: &'a SplitDataset,
        last: Checkpoint,
        best: &Checkpoint,
        log: Vec<EpochLog>,
    ) -> Result<Self> {
        last.config.validate()?;
        if last.params.len() != best.params.len() {
            return Err(Error::Consistency("best and last checkpoints disagree".into()));
        }
        let prep = Self::prepare(split, last.kind)?;
        Ok(Self {
            split,
            cfg: last.config,
            kind: last.kind,
            prep,
            params: last.params,
            adam: last.optimizer,
            epoch: last.epoch,
            best_params: best.params.clone(),
            best_val: last.best_val_precision,
            bad_epochs: last.bad_epochs,
            log,
        })
    }

    fn prepare(split: &SplitDataset, kind: ModelKind) -> Result<Prepared> {
        let g = &split.graph;
        if split.train.is_empty() {
            return Err(Error::EmptyDataset("no training interactions".into()));
        }
        let topo = match kind {
            ModelKind::Cngcf => Some(EncoderGraph::new(g, &split.train)?),
            ModelKind::Mf => None,
        };
        Ok(Prepared {
            topo,
            train_by_user: split.train_by_user(),
            val_by_user: split.validation_by_user(),
            n_users: g.n_users(),
            n_items: g.n_items(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.max_epochs || self.bad_epochs >= self.cfg.patience
    }

    fn checkpoint(&self, params: &ModelParams) -> Checkpoint {
        Checkpoint {
            kind: self.kind,
            params: params.clone(),
            optimizer: self.adam.clone(),
            epoch: self.epoch,
            best_val_precision: self.best_val,
            bad_epochs: self.bad_epochs,
            config: self.cfg.clone(),
            source: None,
        }
    }

    pub fn last_checkpoint(&self) -> Checkpoint {
        self.checkpoint(&self.params)
    }

    pub fn best_checkpoint(&self) -> Checkpoint {
        self.checkpoint(&self.best_params)
    }

    /// Score matrix of the current parameters.
    pub fn scores(&self) -> Result<Tensor> {
        model_scores(self.kind, &self.cfg, self.prep.topo.as_ref(), &self.params)
    }

    /// Runs one epoch and appends its log row.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let e = self.epoch as u64;
        let mut row = match self.kind {
            ModelKind::Cngcf => self.cngcf_epoch(e)?,
            ModelKind::Mf => self.mf_epoch(e)?,
        };
        let scores = self.scores()?;
        let val = eval::mean_precision_at_k(
            &scores,
            &self.prep.train_by_user,
            &self.prep.val_by_user,
            VALIDATION_K,
        )?;
        row.val_precision = val;
        self.epoch += 1;
        row.epoch = self.epoch;
        if self.best_val.is_none_or(|b| val > b) {
            self.best_val = Some(val);
            self.best_params = self.params.clone();
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        log::info!(
            "epoch {} total {:.5} kl {:.5} val_p@10 {:.4}",
            row.epoch,
            row.total,
            row.kl,
            val
        );
        self.log.push(row);
        Ok(row)
    }

    /// Trains until patience runs out or `max_epochs` is reached.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while !self.is_finished() {
            self.run_epoch()?;
        }
        let stop = if self.bad_epochs >= self.cfg.patience {
            StopReason::Patience
        } else {
            StopReason::MaxEpochs
        };
        Ok(TrainOutcome {
            best: self.best_checkpoint(),
            last: self.last_checkpoint(),
            log: self.log,
            stop,
        })
    }

    fn apply(&mut self, grads: Vec<Tensor>) -> Result<()> {
        let mut values = self.params.to_vec();
        self.adam.step(&mut values, &grads)?;
        self.params.assign(values)
    }

    fn finite(&self, tape: &Tape, v: Var, batch: usize, term: &'static str) -> Result<f64> {
        let x = tape.value(v).item()?;
        if x.is_finite() {
            Ok(x)
        } else {
            Err(Error::NonFiniteLoss {
                epoch: self.epoch + 1,
                batch,
                term,
            })
        }
    }

    fn cngcf_epoch(&mut self, e: u64) -> Result<EpochLog> {
        let cfg = self.cfg.clone();
        let n_users = self.prep.n_users;
        let n_items = self.prep.n_items;
        let mut users: Vec<usize> = (0..n_users)
            .filter(|&u| !self.prep.train_by_user[u].is_empty())
            .collect();
        users.shuffle(&mut rng::stream(cfg.seed, Stream::Shuffle, &[e]));

        let mut acc = LossBreakdown { lambda: cfg.lambda, ..Default::default() };
        let mut acc_cf = 0.0;
        let mut seen = 0usize;
        for (b, chunk) in users.chunks(cfg.batch_size).enumerate() {
            let bi = b as u64;
            let topo = self.prep.topo.as_ref().expect("cngcf has a topology");
            let batch = Batch::new(chunk.to_vec(), &self.prep.train_by_user, n_items)?;
            let draws = StepDraws::sample(&cfg, topo, &batch, n_items, e, bi)?;
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, true);
            let StepLoss { clean, cf, total, loss } =
                cngcf_loss(&mut tape, &cfg, topo, &bound, &batch, &draws, n_users)?;

            let w = batch.len() as f64;
            acc.recon += w * self.finite(&tape, clean.recon, b, "reconstruction")?;
            acc.kl += w * self.finite(&tape, clean.kl, b, "kl")?;
            acc.elbo_clean += w * self.finite(&tape, clean.elbo, b, "elbo_clean")?;
            if let Some(cf) = cf {
                acc_cf += w * self.finite(&tape, cf.elbo, b, "elbo_counterfactual")?;
            }
            acc.total += w * self.finite(&tape, total, b, "total")?;
            self.finite(&tape, loss, b, "regularised loss")?;
            seen += batch.len();

            let mut grads = tape.backward(loss)?;
            let grads = bound.collect_grads(&tape, &mut grads);
            self.apply(grads)?;
        }
        let n = seen.max(1) as f64;
        Ok(EpochLog {
            epoch: 0,
            elbo_clean: acc.elbo_clean / n,
            elbo_cf: cfg.counterfactual.enabled.then_some(acc_cf / n),
            kl: acc.kl / n,
            recon: acc.recon / n,
            total: acc.total / n,
            val_precision: 0.0,
        })
    }

    fn mf_epoch(&mut self, e: u64) -> Result<EpochLog> {
        let cfg = self.cfg.clone();
        let n_items = self.prep.n_items;
        let mut nr = rng::stream(cfg.seed, Stream::Negatives, &[e]);
        let mut triples: Vec<(usize, usize, usize)> = Vec::with_capacity(self.split.train.len());
        for &(u, i) in &self.split.train {
            let own = &self.prep.train_by_user[u];
            if own.len() >= n_items {
                continue;
            }
            let j = loop {
                let j = nr.random_range(0..n_items);
                if own.binary_search(&j).is_err() {
                    break j;
                }
            };
            triples.push((u, i, j));
        }
        triples.shuffle(&mut rng::stream(cfg.seed, Stream::Shuffle, &[e]));

        let mut sum_ll = 0.0;
        for (b, chunk) in triples.chunks(cfg.batch_size).enumerate() {
            let us: Vec<usize> = chunk.iter().map(|t| t.0).collect();
            let is: Vec<usize> = chunk.iter().map(|t| t.1).collect();
            let js: Vec<usize> = chunk.iter().map(|t| t.2).collect();
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, true);
            let (pu, pv) = (bound.get("mf.user")?, bound.get("mf.item")?);
            let u = tape.gather_rows(pu, &us)?;
            let vi = tape.gather_rows(pv, &is)?;
            let vj = tape.gather_rows(pv, &js)?;
            let diff = tape.sub(vi, vj)?;
            let prod = tape.mul(u, diff)?;
            let margin = tape.row_sum(prod);
            let ll = tape.log_sigmoid(margin);
            let mean_ll = tape.mean(ll);
            let neg = tape.scale(mean_ll, -1.0);
            let loss = if cfg.l2_weight > 0.0 {
                let sq = bound.sum_squares(&mut tape)?;
                let pen = tape.scale(sq, cfg.l2_weight);
                tape.add(neg, pen)?
            } else {
                neg
            };
            sum_ll += chunk.len() as f64 * self.finite(&tape, mean_ll, b, "pairwise log-likelihood")?;
            self.finite(&tape, loss, b, "regularised loss")?;
            let mut grads = tape.backward(loss)?;
            let grads = bound.collect_grads(&tape, &mut grads);
            self.apply(grads)?;
        }
        let mean = sum_ll / triples.len().max(1) as f64;
        Ok(EpochLog {
            epoch: 0,
            elbo_clean: mean,
            elbo_cf: None,
            kl: 0.0,
            recon: mean,
            total: mean,
            val_precision: 0.0,
        })
    }
}

/// Every random quantity consumed by one CNGCF optimisation step.
#[derive(Clone, Debug)]
pub struct StepDraws {
    pub forward: ForwardDraws,
    pub noise: Vec<ReparamNoise>,
    pub counterfactual: Option<CounterfactualBatch>,
}

impl StepDraws {
    /// Draws for batch `b` of epoch `e`, each from its own stream so that
    /// switching the counterfactual term off leaves the others untouched.
    pub fn sample(
        cfg: &TrainConfig,
        topo: &EncoderGraph,
        batch: &Batch,
        n_items: usize,
        e: u64,
        b: u64,
    ) -> Result<Self> {
        let forward = ForwardDraws::sample(&cfg.encoder, topo, cfg.dropout, cfg.seed, e, b)?;
        let d = cfg.encoder.repr_dim;
        let mut nr = rng::stream(cfg.seed, Stream::Reparam, &[e, b]);
        let noise = (0..cfg.elbo_samples)
            .map(|_| ReparamNoise {
                users: rng::standard_normal(&mut nr, &[batch.len(), d]),
                items: rng::standard_normal(&mut nr, &[n_items, d]),
            })
            .collect();
        let counterfactual = if cfg.counterfactual.enabled {
            let mut cr = rng::stream(cfg.seed, Stream::Counterfactual, &[e, b]);
            let spec = InterventionSpec::Counterfactual(cfg.counterfactual.distribution);
            Some(objective::make_counterfactual(batch, spec, &mut cr)?)
        } else {
            None
        };
        Ok(Self { forward, noise, counterfactual })
    }
}

/// Tape handles of one step's objective.
#[derive(Clone, Copy, Debug)]
pub struct StepLoss {
    pub clean: ElboTerms,
    pub cf: Option<ElboTerms>,
    /// Augmented ELBO.
    pub total: Var,
    /// `−total + l2 · Σθ²`, the quantity minimised.
    pub loss: Var,
}

/// Builds the regularised training objective of one user batch.
pub fn cngcf_loss(
    tape: &mut Tape,
    cfg: &TrainConfig,
    topo: &EncoderGraph,
    params: &BoundParams,
    batch: &Batch,
    draws: &StepDraws,
    n_users: usize,
) -> Result<StepLoss> {
    let post = encoder::encode(tape, &cfg.encoder, topo, params, &draws.forward)?;
    let clean = objective::elbo_clean(tape, cfg.likelihood, &post, batch, &draws.noise, n_users)?;
    let cf = match &draws.counterfactual {
        Some(c) => Some(objective::elbo_counterfactual(tape, cfg.likelihood, &post, c, n_users)?),
        None => None,
    };
    let total = objective::augment(tape, clean.elbo, cf.map(|t| t.elbo), cfg.lambda)?;
    let neg = tape.scale(total, -1.0);
    let loss = if cfg.l2_weight > 0.0 {
        let sq = params.sum_squares(tape)?;
        let pen = tape.scale(sq, cfg.l2_weight);
        tape.add(neg, pen)?
    } else {
        neg
    };
    Ok(StepLoss { clean, cf, total, loss })
}

/// `[n_users, n_items]` preference scores of a model in evaluation mode.
pub fn model_scores(
    kind: ModelKind,
    cfg: &TrainConfig,
    topo: Option<&EncoderGraph>,
    params: &ModelParams,
) -> Result<Tensor> {
    match kind {
        ModelKind::Cngcf => {
            let topo = topo.ok_or_else(|| Error::Consistency("missing encoder graph".into()))?;
            let reps = encoder::encode_eval(&cfg.encoder, topo, params)?;
            decoder::score_matrix(&reps.users, &reps.items)
        }
        ModelKind::Mf => decoder::score_matrix(params.get("mf.user")?, params.get("mf.item")?),
    }
}

/// Scores of a checkpoint on the split it was trained on.
pub fn checkpoint_scores(ckpt: &Checkpoint, split: &SplitDataset) -> Result<Tensor> {
    let topo = match ckpt.kind {
        ModelKind::Cngcf => Some(EncoderGraph::new(&split.graph, &split.train)?),
        ModelKind::Mf => None,
    };
    model_scores(ckpt.kind, &ckpt.config, topo.as_ref(), &ckpt.params)
}

/// Trains CNGCF from scratch.
pub fn train(split: &SplitDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(split, cfg.clone(), ModelKind::Cngcf)?.run()
}

/// Trains the pairwise-ranking matrix factorisation baseline with factor
/// size `cfg.encoder.repr_dim`.
pub fn train_mf_baseline(split: &SplitDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(split, cfg.clone(), ModelKind::Mf)?.run()
}

pub const BEST_DIR: &str = "best";
pub const LAST_DIR: &str = "last";
pub const LOG_FILE: &str = "training_log.csv";

/// Writes `best/`, `last/` and the training log under `dir`.
pub fn save_run(dir: &Path, outcome: &TrainOutcome, source: Option<&DataSource>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (sub, ck) in [(BEST_DIR, &outcome.best), (LAST_DIR, &outcome.last)] {
        let mut ck = ck.clone();
        ck.source = source.cloned();
        ck.save(&dir.join(sub))?;
    }
    write_log(&dir.join(LOG_FILE), &outcome.log)
}

/// Reloads a run directory written by [`save_run`] and continues training.
pub fn resume_run(dir: &Path, split: &SplitDataset) -> Result<TrainOutcome> {
    let last = Checkpoint::load(&dir.join(LAST_DIR))?;
    let best = Checkpoint::load(&dir.join(BEST_DIR))?;
    let log = read_log(&dir.join(LOG_FILE))?;
    Trainer::resume(split, last, &best, log)?.run()
}
