//! Top-K ranking metrics, evaluation reports, ablations and sweeps.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::SplitDataset;
use crate::decoder;
use crate::encoder::EncoderVariant;
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::trainer::{self, parallel_map, Checkpoint, ModelKind, TrainConfig, Trainer};

pub const DEFAULT_KS: [usize; 2] = [10, 20];

fn check_ranked(op: &'static str, ranked: &[usize], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid(op, "k must be at least 1"));
    }
    let mut seen = HashSet::with_capacity(ranked.len());
    for &i in ranked {
        if !seen.insert(i) {
            return Err(Error::invalid(op, format!("item {i} ranked twice")));
        }
    }
    Ok(())
}

fn hits(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> usize {
    ranked.iter().take(k).filter(|i| relevant.contains(i)).count()
}

/// `(|top-k ∩ R| / k, |top-k ∩ R| / |R|)`. Recall is 0 when `R` is empty;
/// evaluation skips such users before calling this.
pub fn precision_recall_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> Result<(f64, f64)> {
    check_ranked("precision_recall_at_k", ranked, k)?;
    let h = hits(ranked, relevant, k) as f64;
    let recall = if relevant.is_empty() { 0.0 } else { h / relevant.len() as f64 };
    Ok((h / k as f64, recall))
}

/// Binary-relevance NDCG with a `log2(rank + 1)` discount.
pub fn ndcg_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> Result<f64> {
    check_ranked("ndcg_at_k", ranked, k)?;
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(pos, _)| 1.0 / (pos as f64 + 2.0).log2())
        .sum();
    let idcg: f64 = (0..k.min(relevant.len()))
        .map(|pos| 1.0 / (pos as f64 + 2.0).log2())
        .sum();
    Ok(if idcg > 0.0 { dcg / idcg } else { 0.0 })
}

/// Mean Precision@k over users with a non-empty `relevant` list, ranking
/// every item outside `exclude`.
pub fn mean_precision_at_k(
    scores: &Tensor,
    exclude: &[Vec<usize>],
    relevant: &[Vec<usize>],
    k: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (u, rel) in relevant.iter().enumerate() {
        if rel.is_empty() {
            continue;
        }
        let top = decoder::top_k_items(scores, u, &exclude[u], k)?;
        let rel: HashSet<usize> = rel.iter().copied().collect();
        total += precision_recall_at_k(&top, &rel, k)?.0;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: usize,
    /// Aligned with [`EvalReport::ks`].
    pub metrics: Vec<MetricSet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    /// Per-K averages over evaluated users, keyed by K.
    pub metrics: BTreeMap<usize, MetricSet>,
    pub n_evaluated: usize,
    /// Users without held-out interactions.
    pub n_skipped: usize,
    pub per_user: Vec<UserMetrics>,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub dataset: Option<String>,
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Result<MetricSet> {
        self.metrics
            .get(&k)
            .copied()
            .ok_or_else(|| Error::invalid("EvalReport::at", format!("K={k} was not evaluated")))
    }

    /// Aligned plain-text table, one row per K.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:>4}  {:>10}  {:>10}  {:>10}\n", "K", "precision", "recall", "ndcg");
        for (k, m) in &self.metrics {
            let _ = writeln!(s, "{k:>4}  {:>10.6}  {:>10.6}  {:>10.6}", m.precision, m.recall, m.ndcg);
        }
        let _ = writeln!(s, "users evaluated: {}, skipped: {}", self.n_evaluated, self.n_skipped);
        s
    }
}

fn check_ks(ks: &[usize]) -> Result<Vec<usize>> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::config("eval.ks", "need at least one K, each >= 1"));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    Ok(ks)
}

/// Ranks every item outside `exclude[u]` for each user with a non-empty
/// `relevant[u]` and averages the metrics at each K.
pub fn evaluate_scores(
    scores: &Tensor,
    exclude: &[Vec<usize>],
    relevant: &[Vec<usize>],
    ks: &[usize],
) -> Result<EvalReport> {
    let ks = check_ks(ks)?;
    let kmax = *ks.last().expect("non-empty");
    let mut per_user = Vec::new();
    let mut skipped = 0;
    for (u, rel) in relevant.iter().enumerate() {
        if rel.is_empty() {
            skipped += 1;
            continue;
        }
        let ex = exclude.get(u).map(Vec::as_slice).unwrap_or(&[]);
        let top = decoder::top_k_items(scores, u, ex, kmax)?;
        let rel: HashSet<usize> = rel.iter().copied().collect();
        let metrics = ks
            .iter()
            .map(|&k| {
                let (precision, recall) = precision_recall_at_k(&top, &rel, k)?;
                let ndcg = ndcg_at_k(&top, &rel, k)?;
                Ok(MetricSet { precision, recall, ndcg })
            })
            .collect::<Result<Vec<_>>>()?;
        per_user.push(UserMetrics { user: u, metrics });
    }
    let n = per_user.len();
    let mut metrics = BTreeMap::new();
    for (j, &k) in ks.iter().enumerate() {
        let mut m = MetricSet::default();
        for row in &per_user {
            m.precision += row.metrics[j].precision;
            m.recall += row.metrics[j].recall;
            m.ndcg += row.metrics[j].ndcg;
        }
        if n > 0 {
            m.precision /= n as f64;
            m.recall /= n as f64;
            m.ndcg /= n as f64;
        }
        metrics.insert(k, m);
    }
    Ok(EvalReport {
        ks,
        metrics,
        n_evaluated: n,
        n_skipped: skipped,
        per_user,
        config_hash: None,
        seed: None,
        dataset: None,
    })
}

/// Test-split evaluation of a score matrix, excluding training items.
pub fn evaluate(scores: &Tensor, split: &SplitDataset, ks: &[usize]) -> Result<EvalReport> {
    evaluate_scores(scores, &split.train_by_user(), &split.test_by_user(), ks)
}

/// Test-split evaluation of a checkpoint.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, split: &SplitDataset, ks: &[usize]) -> Result<EvalReport> {
    let scores = trainer::checkpoint_scores(ckpt, split)?;
    let mut report = evaluate(&scores, split, ks)?;
    report.config_hash = Some(ckpt.config_hash());
    report.seed = Some(ckpt.config.seed);
    report.dataset = ckpt.source.as_ref().map(|s| s.dir.display().to_string());
    Ok(report)
}

/// Expected Precision@k of a uniformly random ranking: the mean over test
/// users of `|R_u| / |candidates_u|`, when every user has at least `k`
/// candidates.
pub fn random_ranker_precision(split: &SplitDataset) -> f64 {
    let n_items = split.graph.n_items();
    let train = split.train_by_user();
    let test = split.test_by_user();
    let mut total = 0.0;
    let mut n = 0;
    for (u, rel) in test.iter().enumerate() {
        if rel.is_empty() {
            continue;
        }
        total += rel.len() as f64 / (n_items - train[u].len()) as f64;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Model configurations compared in an ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoCausalMessages,
    NoCounterfactual,
    GcnEncoder,
    MfBaseline,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoCausalMessages,
        Variant::NoCounterfactual,
        Variant::GcnEncoder,
        Variant::MfBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCausalMessages => "no_causal_messages",
            Variant::NoCounterfactual => "no_counterfactual",
            Variant::GcnEncoder => "gcn_encoder",
            Variant::MfBaseline => "mf_baseline",
        }
    }

    pub fn configure(self, base: &TrainConfig) -> (ModelKind, TrainConfig) {
        let mut cfg = base.clone();
        let kind = match self {
            Variant::Full => ModelKind::Cngcf,
            Variant::NoCausalMessages => {
                cfg.encoder.causal_messages = false;
                ModelKind::Cngcf
            }
            Variant::NoCounterfactual => {
                cfg.counterfactual.enabled = false;
                ModelKind::Cngcf
            }
            Variant::GcnEncoder => {
                cfg.encoder.variant = EncoderVariant::Gcn;
                ModelKind::Cngcf
            }
            Variant::MfBaseline => ModelKind::Mf,
        };
        (kind, cfg)
    }
}

/// Trains one model kind and evaluates its best checkpoint on the test split.
pub fn train_and_evaluate(
    split: &SplitDataset,
    kind: ModelKind,
    cfg: &TrainConfig,
    ks: &[usize],
) -> Result<EvalReport> {
    let out = Trainer::new(split, cfg.clone(), kind)?.run()?;
    evaluate_checkpoint(&out.best, split, ks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: BTreeMap<usize, MetricSet>,
    /// `variant − full` for each metric; `None` when the full model was not
    /// part of the run.
    pub delta: Option<BTreeMap<usize, MetricSet>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub ks: Vec<usize>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant");
        for prefix in ["", "delta_"] {
            for k in &self.ks {
                for m in ["precision", "recall", "ndcg"] {
                    let _ = write!(s, ",{prefix}{m}@{k}");
                }
            }
        }
        s.push('\n');
        for row in &self.rows {
            s.push_str(row.variant.name());
            for k in &self.ks {
                let m = row.metrics[k];
                let _ = write!(s, ",{},{},{}", m.precision, m.recall, m.ndcg);
            }
            for k in &self.ks {
                match &row.delta {
                    Some(d) => {
                        let m = d[k];
                        let _ = write!(s, ",{},{},{}", m.precision, m.recall, m.ndcg);
                    }
                    None => s.push_str(",,,"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Trains and evaluates each variant with the same base config and seed.
pub fn run_ablations(
    split: &SplitDataset,
    base: &TrainConfig,
    variants: &[Variant],
    ks: &[usize],
    jobs: usize,
) -> Result<AblationTable> {
    let ks = check_ks(ks)?;
    let reports = parallel_map(variants, jobs, |_, &v| {
        let (kind, cfg) = v.configure(base);
        train_and_evaluate(split, kind, &cfg, &ks)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let full = variants
        .iter()
        .position(|&v| v == Variant::Full)
        .map(|i| reports[i].metrics.clone());
    let rows = variants
        .iter()
        .zip(reports)
        .map(|(&variant, r)| {
            let delta = full.as_ref().map(|f| {
                r.metrics
                    .iter()
                    .map(|(k, m)| {
                        let b = f[k];
                        let d = MetricSet {
                            precision: m.precision - b.precision,
                            recall: m.recall - b.recall,
                            ndcg: m.ndcg - b.ndcg,
                        };
                        (*k, d)
                    })
                    .collect()
            });
            AblationRow { variant, metrics: r.metrics, delta }
        })
        .collect();
    Ok(AblationTable { ks, rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Representation size `d`.
    EmbeddingSize,
    Dropout,
}

impl SweepAxis {
    pub fn apply(self, base: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        match self {
            SweepAxis::EmbeddingSize => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(Error::config("sweep.values", format!("embedding size {value} is not a positive integer")));
                }
                cfg.encoder.repr_dim = value as usize;
            }
            SweepAxis::Dropout => cfg.dropout = value,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
}

pub const SWEEP_K: usize = 10;

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("value,precision@10,recall@10,ndcg@10\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.value, r.precision, r.recall, r.ndcg);
    }
    s
}

/// Trains and evaluates CNGCF at each value of one hyperparameter.
pub fn sweep(
    split: &SplitDataset,
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[f64],
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::config("sweep.values", "no values to sweep"));
    }
    let cfgs = values
        .iter()
        .map(|&v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    parallel_map(&cfgs, jobs, |i, cfg| {
        let r = train_and_evaluate(split, ModelKind::Cngcf, cfg, &[SWEEP_K])?;
        let m = r.at(SWEEP_K)?;
        Ok(SweepRow {
            value: values[i],
            precision: m.precision,
            recall: m.recall,
            ndcg: m.ndcg,
        })
    })
    .into_iter()
    .collect()
}
