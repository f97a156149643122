//! Synthetic interaction data with a known preference structure.
//!
//! Generation runs in four stages, each drawing from its own random stream:
//! observed node features, causal neighbor lists, latent preference vectors,
//! and finally per-user top-k interactions.

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution};
use serde::{Deserialize, Serialize};

use crate::dataset::{self, DatasetManifest, InteractionGraph, NodeRef};
use crate::error::{ConfigIssue, Error, Result};
use crate::numeric::rng::{self, Stream, StreamRng};
use crate::numeric::{softmax, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_causal_neighbors: usize,
    pub latent_dim: usize,
    pub k_range: [usize; 2],
    pub n_exogenous: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 1000,
            n_items: 1000,
            n_causal_neighbors: 10,
            latent_dim: 16,
            k_range: [20, 100],
            n_exogenous: 4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn issues(&self, prefix: &str) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut push = |field: &str, msg: String| {
            out.push(ConfigIssue {
                path: format!("{prefix}{field}"),
                message: msg,
            })
        };
        if self.n_causal_neighbors >= self.n_users || self.n_causal_neighbors >= self.n_items {
            push(
                "n_causal_neighbors",
                format!(
                    "must be below n_users ({}) and n_items ({})",
                    self.n_users, self.n_items
                ),
            );
        }
        let [lo, hi] = self.k_range;
        if lo < 1 || hi > self.n_items || lo > hi {
            push(
                "k_range",
                format!("need 1 <= min <= max <= n_items ({}), got [{lo}, {hi}]", self.n_items),
            );
        }
        if self.latent_dim == 0 {
            push("latent_dim", "must be positive".into());
        }
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

    fn rng(&self, stream: Stream) -> StreamRng {
        rng::stream(self.seed, stream, &[])
    }
}

/// Observed features plus the exogenous noise columns of every node.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthFeatures {
    /// `[gender ∈ {0,1}, income ∈ [0, 1000]]` per user.
    pub user: Tensor,
    /// `[type, brand, location]`, each in `{0,1}`, per item.
    pub item: Tensor,
    pub user_exogenous: Tensor,
    pub item_exogenous: Tensor,
}

pub fn generate_features(cfg: &SynthConfig) -> SynthFeatures {
    let mut r = cfg.rng(Stream::SynthFeatures);
    let coin = Bernoulli::new(0.5).expect("valid probability");
    let flip = |r: &mut StreamRng| if coin.sample(r) { 1.0 } else { 0.0 };

    let mut user = Vec::with_capacity(cfg.n_users * 2);
    for _ in 0..cfg.n_users {
        user.push(flip(&mut r));
        user.push(r.random_range(0.0..=1000.0));
    }
    let mut item = Vec::with_capacity(cfg.n_items * 3);
    for _ in 0..cfg.n_items * 3 {
        item.push(flip(&mut r));
    }
    let user_exogenous = rng::standard_normal(&mut r, &[cfg.n_users, cfg.n_exogenous]);
    let item_exogenous = rng::standard_normal(&mut r, &[cfg.n_items, cfg.n_exogenous]);
    SynthFeatures {
        user: Tensor::matrix(cfg.n_users, 2, user).expect("sized above"),
        item: Tensor::matrix(cfg.n_items, 3, item).expect("sized above"),
        user_exogenous,
        item_exogenous,
    }
}

/// Users get `N_c` distinct random peers; items get the `N_c` nearest items
/// in feature space (Euclidean, ties by ascending id).
pub fn sample_causal_neighbors(
    cfg: &SynthConfig,
    features: &SynthFeatures,
) -> (Vec<Vec<NodeRef>>, Vec<Vec<NodeRef>>) {
    let mut r = cfg.rng(Stream::SynthNeighbors);
    let nc = cfg.n_causal_neighbors;
    let users = (0..cfg.n_users)
        .map(|u| {
            index::sample(&mut r, cfg.n_users - 1, nc)
                .into_iter()
                .map(|k| NodeRef::User(if k >= u { k + 1 } else { k }))
                .collect()
        })
        .collect();
    let items = (0..cfg.n_items)
        .map(|v| {
            nearest_items(&features.item, v, nc)
                .into_iter()
                .map(NodeRef::Item)
                .collect()
        })
        .collect();
    (users, items)
}

fn nearest_items(feats: &Tensor, target: usize, n: usize) -> Vec<usize> {
    let t = feats.row(target);
    let mut ranked: Vec<(f64, usize)> = (0..feats.rows())
        .filter(|&j| j != target)
        .map(|j| {
            let d2: f64 = feats.row(j).iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2.sqrt(), j)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().take(n).map(|(_, j)| j).collect()
}

/// Ground-truth latent vectors and the dense score matrix `y_uv = ⟨u, v⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct Preferences {
    pub user_latent: Tensor,
    pub item_latent: Tensor,
    pub scores: Tensor,
}

pub fn estimate_preferences(cfg: &SynthConfig, r: &mut StreamRng) -> Preferences {
    let user_latent = rng::standard_normal(r, &[cfg.n_users, cfg.latent_dim]);
    let item_latent = rng::standard_normal(r, &[cfg.n_items, cfg.latent_dim]);
    let scores = user_latent.matmul_nt(&item_latent).expect("latent dims agree");
    Preferences {
        user_latent,
        item_latent,
        scores,
    }
}

/// Per-user interactions from a score matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledInteractions {
    pub pairs: Vec<(usize, usize)>,
    /// Softmax-normalised score of each selected pair, aligned with `pairs`.
    pub normalized: Vec<f64>,
}

/// For each user: softmax the score row, draw `k` uniformly from `k_range`,
/// and keep the `k` best items. Ordering is taken on raw scores, which the
/// softmax preserves; ties go to the lower item id.
pub fn sample_interactions(
    cfg: &SynthConfig,
    scores: &Tensor,
    r: &mut StreamRng,
) -> Result<SampledInteractions> {
    let [lo, hi] = cfg.k_range;
    let mut pairs = Vec::new();
    let mut normalized = Vec::new();
    for u in 0..scores.rows() {
        let row = scores.row(u);
        let probs = softmax(row)?;
        let k = r.random_range(lo..=hi).min(row.len());
        for i in top_k(row, k) {
            pairs.push((u, i));
            normalized.push(probs[i]);
        }
    }
    Ok(SampledInteractions { pairs, normalized })
}

/// Indices of the `k` largest values, ties by ascending index, returned in
/// ascending index order.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Everything one generation run produces.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub graph: InteractionGraph,
    pub features: SynthFeatures,
    pub preferences: Preferences,
    pub interactions: SampledInteractions,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let features = generate_features(cfg);
    let (user_adj, item_adj) = sample_causal_neighbors(cfg, &features);
    let preferences = estimate_preferences(cfg, &mut cfg.rng(Stream::SynthPreferences));
    let interactions = sample_interactions(
        cfg,
        &preferences.scores,
        &mut cfg.rng(Stream::SynthInteractions),
    )?;
    let graph = InteractionGraph::new(
        cfg.n_users,
        cfg.n_items,
        features.user.clone(),
        features.item.clone(),
        interactions.pairs.iter().copied(),
        user_adj,
        item_adj,
    )?;
    Ok(SynthDataset {
        config: cfg.clone(),
        graph,
        features,
        preferences,
        interactions,
    })
}

pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const USER_LATENT_FILE: &str = "user_latent.csv";
pub const ITEM_LATENT_FILE: &str = "item_latent.csv";

impl SynthDataset {
    /// Canonical dump plus ground truth: per-pair scores, latent vectors and
    /// exogenous draws.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut manifest = DatasetManifest::for_graph(&self.graph);
        manifest.seed = Some(self.config.seed);
        manifest.extra = serde_json::json!({ "synth_config": self.config });
        dataset::dump(&self.graph, dir, &manifest)?;

        let mut gt = String::from("user_id,item_id,score,normalized_score\n");
        for (&(u, i), p) in self.interactions.pairs.iter().zip(&self.interactions.normalized) {
            gt.push_str(&format!("{u},{i},{},{p}\n", self.preferences.scores.at(u, i)));
        }
        dataset::write_file(&dir.join(GROUND_TRUTH_FILE), &gt)?;
        write_matrix(&dir.join(USER_LATENT_FILE), &self.preferences.user_latent)?;
        write_matrix(&dir.join(ITEM_LATENT_FILE), &self.preferences.item_latent)?;
        write_matrix(&dir.join("user_exogenous.csv"), &self.features.user_exogenous)?;
        write_matrix(&dir.join("item_exogenous.csv"), &self.features.item_exogenous)
    }
}

fn write_matrix(path: &Path, t: &Tensor) -> Result<()> {
    let mut s = String::from("id");
    for k in 1..=t.cols() {
        s.push_str(&format!(",f{k}"));
    }
    s.push('\n');
    for r in 0..t.rows() {
        s.push_str(&r.to_string());
        for v in t.row(r) {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    dataset::write_file(path, &s)
}

/// Reads a matrix written by [`SynthDataset::write`] (rows in id order).
pub fn read_matrix(path: &Path) -> Result<Tensor> {
    let mut rdr = csv::Reader::from_path(path)?;
    let cols = rdr.headers()?.len().saturating_sub(1);
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        for f in rec.iter().skip(1) {
            data.push(f.parse::<f64>().map_err(|_| Error::Load {
                path: path.to_path_buf(),
                reason: format!("`{f}` is not a number"),
            })?);
        }
        rows += 1;
    }
    Tensor::matrix(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_users: 60,
            n_items: 40,
            k_range: [5, 12],
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn discrete_and_continuous_ranges() {
        let f = generate_features(&small());
        for r in 0..f.user.rows() {
            assert!(matches!(f.user.at(r, 0), x if x == 0.0 || x == 1.0));
            assert!((0.0..=1000.0).contains(&f.user.at(r, 1)));
        }
        assert!(f.item.data().iter().all(|&x| x == 0.0 || x == 1.0));
        assert_eq!(f.user_exogenous.shape(), &[60, 4]);
    }

    #[test]
    fn exogenous_mean_near_zero() {
        let cfg = SynthConfig { n_users: 1000, n_items: 20, k_range: [1, 5], ..Default::default() };
        let f = generate_features(&cfg);
        for c in 0..4 {
            let mean: f64 = (0..1000).map(|r| f.user_exogenous.at(r, c)).sum::<f64>() / 1000.0;
            assert!(mean.abs() < 0.15, "column {c} mean {mean}");
        }
    }

    #[test]
    fn neighbor_lists_have_exact_length_and_no_self() {
        let cfg = small();
        let f = generate_features(&cfg);
        let (u, i) = sample_causal_neighbors(&cfg, &f);
        for (k, l) in u.iter().enumerate() {
            assert_eq!(l.len(), 10);
            assert!(!l.contains(&NodeRef::User(k)));
            let mut d = l.clone();
            d.sort();
            d.dedup();
            assert_eq!(d.len(), 10);
        }
        for (k, l) in i.iter().enumerate() {
            assert_eq!(l.len(), 10);
            assert!(!l.contains(&NodeRef::Item(k)));
        }
    }

    #[test]
    fn item_neighbors_match_all_pairs_oracle() {
        let cfg = SynthConfig { n_users: 30, n_items: 20, k_range: [1, 5], seed: 9, ..Default::default() };
        let f = generate_features(&cfg);
        let (_, items) = sample_causal_neighbors(&cfg, &f);
        for v in 0..20 {
            // all-pairs squared distances; sqrt is monotone
            let mut all: Vec<(f64, usize)> = Vec::new();
            for j in 0..20 {
                if j == v {
                    continue;
                }
                let mut d = 0.0;
                for c in 0..3 {
                    let diff = f.item.at(v, c) - f.item.at(j, c);
                    d += diff * diff;
                }
                all.push((d, j));
            }
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<NodeRef> = all.iter().take(10).map(|p| NodeRef::Item(p.1)).collect();
            assert_eq!(items[v], want);
        }
    }

    #[test]
    fn preference_scores_are_inner_products() {
        let cfg = small();
        let p = estimate_preferences(&cfg, &mut cfg.rng(Stream::SynthPreferences));
        assert_eq!(p.scores.shape(), &[60, 40]);
        for (u, i) in [(0, 0), (5, 7), (59, 39), (12, 3), (33, 20), (1, 38), (40, 1), (7, 7), (18, 29), (50, 11)] {
            let mut dot = 0.0;
            for k in 0..cfg.latent_dim {
                dot += p.user_latent.at(u, k) * p.item_latent.at(i, k);
            }
            assert!((p.scores.at(u, i) - dot).abs() < 1e-12);
        }
        let mut zeroed = p.item_latent.clone();
        zeroed.row_mut(4).iter_mut().for_each(|x| *x = 0.0);
        let s = p.user_latent.matmul_nt(&zeroed).unwrap();
        assert!((0..60).all(|u| s.at(u, 4) == 0.0));
    }

    #[test]
    fn interaction_counts_within_range() {
        let d = generate(&small()).unwrap();
        let by_user = d.graph.items_by_user();
        assert!(by_user.iter().all(|l| (5..=12).contains(&l.len())));
    }

    #[test]
    fn top_k_matches_full_sort() {
        let row = [0.3, -1.2, 2.5, 0.3, 1.1];
        // full descending sort by hand: 2 (2.5), 4 (1.1), 0 (0.3), 3 (0.3), 1
        assert_eq!(top_k(&row, 3), vec![0, 2, 4]);
        assert_eq!(top_k(&row, 4), vec![0, 2, 3, 4]);
        let soft = softmax(&row).unwrap();
        assert_eq!(top_k(&soft, 3), top_k(&row, 3));
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = SynthConfig { seed: 4, ..small() };
        assert_ne!(generate(&small()).unwrap().graph, generate(&other).unwrap().graph);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SynthConfig { n_users: 10, n_causal_neighbors: 10, ..small() };
        assert!(cfg.validate().is_err());
        let cfg = SynthConfig { k_range: [0, 10], ..small() };
        assert!(cfg.validate().is_err());
    }
}
