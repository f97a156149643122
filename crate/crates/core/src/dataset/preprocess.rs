use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{InteractionGraph, NodeRef, SplitDataset};
use crate::error::{Error, Result};
use crate::numeric::rng::{self, Stream};

pub const DEFAULT_NEIGHBOR_CAP: usize = 50;

/// `|interactions| / (n_users · n_items)`; zero for an empty node set.
pub fn density(graph: &InteractionGraph) -> f64 {
    let cells = graph.n_users() * graph.n_items();
    if cells == 0 {
        return 0.0;
    }
    graph.interactions().len() as f64 / cells as f64
}

/// Ranks weighted candidates (heaviest first, then ascending node) and keeps
/// the first `cap`, skipping anything already present.
fn fill(existing: &[NodeRef], candidates: BTreeMap<NodeRef, usize>, cap: usize) -> Vec<NodeRef> {
    let mut out: Vec<NodeRef> = existing.iter().copied().take(cap).collect();
    let mut ranked: Vec<(NodeRef, usize)> = candidates
        .into_iter()
        .filter(|(n, _)| !existing.contains(n))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    out.extend(ranked.into_iter().map(|(n, _)| n).take(cap.saturating_sub(out.len())));
    out
}

/// Co-interaction neighbors: users sharing an item, items sharing a user,
/// plus the directly interacted counterpart nodes.
///
/// Same-type neighbors are weighted by their co-count, direct interactions by
/// one. Existing adjacency entries are kept in front of derived ones and each
/// list is capped at `cap`.
pub fn derive_co_interaction_neighbors(
    graph: &InteractionGraph,
    cap: usize,
) -> Result<InteractionGraph> {
    let items_of = graph.items_by_user();
    let users_of = graph.users_by_item();

    let user_adj = (0..graph.n_users())
        .map(|u| {
            let mut cand: BTreeMap<NodeRef, usize> = BTreeMap::new();
            for &i in &items_of[u] {
                cand.insert(NodeRef::Item(i), 1);
                for &v in &users_of[i] {
                    if v != u {
                        *cand.entry(NodeRef::User(v)).or_insert(0) += 1;
                    }
                }
            }
            fill(&graph.user_causal_adj()[u], cand, cap)
        })
        .collect();
    let item_adj = (0..graph.n_items())
        .map(|i| {
            let mut cand: BTreeMap<NodeRef, usize> = BTreeMap::new();
            for &u in &users_of[i] {
                cand.insert(NodeRef::User(u), 1);
                for &j in &items_of[u] {
                    if j != i {
                        *cand.entry(NodeRef::Item(j)).or_insert(0) += 1;
                    }
                }
            }
            fill(&graph.item_causal_adj()[i], cand, cap)
        })
        .collect();
    graph.clone().with_adjacency(user_adj, item_adj)
}

/// Iteratively drops users and items with fewer than `k` interactions until
/// every survivor has at least `k`. An empty result is returned as-is.
pub fn k_core_filter(graph: &InteractionGraph, k: usize) -> Result<InteractionGraph> {
    if k == 0 {
        return Err(Error::config("k_core", "k must be at least 1"));
    }
    let mut keep_u = vec![true; graph.n_users()];
    let mut keep_i = vec![true; graph.n_items()];
    let mut pairs: Vec<(usize, usize)> = graph.interactions().to_vec();
    loop {
        let mut du = vec![0usize; graph.n_users()];
        let mut di = vec![0usize; graph.n_items()];
        for &(u, i) in &pairs {
            du[u] += 1;
            di[i] += 1;
        }
        let mut changed = false;
        for (u, keep) in keep_u.iter_mut().enumerate() {
            if *keep && du[u] < k {
                *keep = false;
                changed = true;
            }
        }
        for (i, keep) in keep_i.iter_mut().enumerate() {
            if *keep && di[i] < k {
                *keep = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        pairs.retain(|&(u, i)| keep_u[u] && keep_i[i]);
    }
    let out = graph.restrict(&keep_u, &keep_i, &pairs)?;
    if out.is_empty() {
        log::warn!("{k}-core filtering removed every interaction");
    }
    Ok(out)
}

/// Fractions of each user's interactions assigned to train, validation and
/// test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            validation: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::config("split", "each ratio must lie in [0, 1]"));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config("split", format!("ratios sum to {total}, not 1")));
        }
        Ok(())
    }
}

/// Per-user stratified random split.
///
/// Each user's items are shuffled with a per-user stream, then cut into
/// validation and test counts obtained by rounding the cumulative expected
/// totals. Every per-user count is therefore the floor or ceiling of its
/// exact share while global totals stay within one of the target. Users with
/// at least one interaction always keep one in train.
pub fn split(graph: &InteractionGraph, ratios: SplitRatios, seed: u64) -> Result<SplitDataset> {
    ratios.validate()?;
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    let (mut cum_n, mut cum_val, mut cum_test) = (0usize, 0usize, 0usize);
    for (u, mut items) in graph.items_by_user().into_iter().enumerate() {
        let n = items.len();
        if n == 0 {
            continue;
        }
        let mut r = rng::stream(seed, Stream::Split, &[u as u64]);
        items.shuffle(&mut r);
        cum_n += n;
        let target_val = (cum_n as f64 * ratios.validation).round() as usize;
        let target_test = (cum_n as f64 * ratios.test).round() as usize;
        let mut n_val = target_val.saturating_sub(cum_val);
        let mut n_test = target_test.saturating_sub(cum_test);
        while n_val + n_test > n - 1 {
            if n_test >= n_val && n_test > 0 {
                n_test -= 1;
            } else {
                n_val -= 1;
            }
        }
        cum_val += n_val;
        cum_test += n_test;
        let n_train = n - n_val - n_test;
        train.extend(items[..n_train].iter().map(|&i| (u, i)));
        validation.extend(items[n_train..n_train + n_val].iter().map(|&i| (u, i)));
        test.extend(items[n_train + n_val..].iter().map(|&i| (u, i)));
    }
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();
    Ok(SplitDataset {
        graph: graph.clone(),
        train,
        validation,
        test,
    })
}
