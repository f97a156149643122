//! Interaction graph data model, ingestion and preprocessing.

mod ingest;
mod preprocess;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub use ingest::{dump, ingest, load_dump, DatasetManifest, IngestSources, MANIFEST_FILE};
pub(crate) use ingest::write_file;
pub use preprocess::{
    density, derive_co_interaction_neighbors, k_core_filter, split, SplitRatios,
    DEFAULT_NEIGHBOR_CAP,
};

/// Endpoint of a causal adjacency edge.
///
/// Ordering puts every user before every item, which is the tie-break order
/// used when neighbor lists are ranked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeRef {
    User(usize),
    Item(usize),
}

/// Users, items, their features, positive interactions and per-node causal
/// adjacency lists. Ids are dense and 0-based; the original ids live in
/// [`InteractionGraph::user_ids`] / [`InteractionGraph::item_ids`].
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionGraph {
    n_users: usize,
    n_items: usize,
    user_features: Tensor,
    item_features: Tensor,
    interactions: Vec<(usize, usize)>,
    user_causal_adj: Vec<Vec<NodeRef>>,
    item_causal_adj: Vec<Vec<NodeRef>>,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
}

impl InteractionGraph {
    /// Builds a graph and checks every structural invariant.
    ///
    /// Interactions are sorted and deduplicated. Adjacency lists must not
    /// contain duplicates or self-loops.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_users: usize,
        n_items: usize,
        user_features: Tensor,
        item_features: Tensor,
        interactions: impl IntoIterator<Item = (usize, usize)>,
        user_causal_adj: Vec<Vec<NodeRef>>,
        item_causal_adj: Vec<Vec<NodeRef>>,
    ) -> Result<Self> {
        let user_ids = (0..n_users).map(|i| i.to_string()).collect();
        let item_ids = (0..n_items).map(|i| i.to_string()).collect();
        Self::with_ids(
            user_features,
            item_features,
            interactions,
            user_causal_adj,
            item_causal_adj,
            user_ids,
            item_ids,
        )
    }

    pub fn with_ids(
        user_features: Tensor,
        item_features: Tensor,
        interactions: impl IntoIterator<Item = (usize, usize)>,
        user_causal_adj: Vec<Vec<NodeRef>>,
        item_causal_adj: Vec<Vec<NodeRef>>,
        user_ids: Vec<String>,
        item_ids: Vec<String>,
    ) -> Result<Self> {
        let (n_users, n_items) = (user_ids.len(), item_ids.len());
        let set: BTreeSet<(usize, usize)> = interactions.into_iter().collect();
        let graph = Self {
            n_users,
            n_items,
            user_features,
            item_features,
            interactions: set.into_iter().collect(),
            user_causal_adj,
            item_causal_adj,
            user_ids,
            item_ids,
        };
        graph.validate()?;
        Ok(graph)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Consistency(msg));
        if self.user_features.rank() != 2 || self.user_features.rows() != self.n_users {
            return bad(format!(
                "user feature matrix {:?} does not have {} rows",
                self.user_features.shape(),
                self.n_users
            ));
        }
        if self.item_features.rank() != 2 || self.item_features.rows() != self.n_items {
            return bad(format!(
                "item feature matrix {:?} does not have {} rows",
                self.item_features.shape(),
                self.n_items
            ));
        }
        if !self.user_features.is_finite() || !self.item_features.is_finite() {
            return bad("non-finite feature value".into());
        }
        if let Some(&(u, i)) = self
            .interactions
            .iter()
            .find(|&&(u, i)| u >= self.n_users || i >= self.n_items)
        {
            return bad(format!("interaction ({u}, {i}) references an unknown node"));
        }
        if self.user_causal_adj.len() != self.n_users || self.item_causal_adj.len() != self.n_items
        {
            return bad("adjacency list count does not match node count".into());
        }
        let lists = self
            .user_causal_adj
            .iter()
            .enumerate()
            .map(|(u, l)| (NodeRef::User(u), l))
            .chain(
                self.item_causal_adj
                    .iter()
                    .enumerate()
                    .map(|(i, l)| (NodeRef::Item(i), l)),
            );
        for (owner, list) in lists {
            let mut seen = BTreeSet::new();
            for &n in list {
                if n == owner {
                    return bad(format!("self-loop on {owner:?}"));
                }
                if !self.contains(n) {
                    return bad(format!("{owner:?} lists unknown neighbor {n:?}"));
                }
                if !seen.insert(n) {
                    return bad(format!("{owner:?} lists {n:?} twice"));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, node: NodeRef) -> bool {
        match node {
            NodeRef::User(u) => u < self.n_users,
            NodeRef::Item(i) => i < self.n_items,
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn user_features(&self) -> &Tensor {
        &self.user_features
    }

    pub fn item_features(&self) -> &Tensor {
        &self.item_features
    }

    /// Positive pairs, sorted by `(user, item)`.
    pub fn interactions(&self) -> &[(usize, usize)] {
        &self.interactions
    }

    pub fn user_causal_adj(&self) -> &[Vec<NodeRef>] {
        &self.user_causal_adj
    }

    pub fn item_causal_adj(&self) -> &[Vec<NodeRef>] {
        &self.item_causal_adj
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn items_by_user(&self) -> Vec<Vec<usize>> {
        group_by_user(self.n_users, &self.interactions)
    }

    pub fn users_by_item(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_items];
        for &(u, i) in &self.interactions {
            out[i].push(u);
        }
        out
    }

    pub fn degrees(&self) -> (Vec<usize>, Vec<usize>) {
        let mut du = vec![0; self.n_users];
        let mut di = vec![0; self.n_items];
        for &(u, i) in &self.interactions {
            du[u] += 1;
            di[i] += 1;
        }
        (du, di)
    }

    /// Replaces both adjacency tables, re-checking invariants.
    pub fn with_adjacency(
        mut self,
        user_causal_adj: Vec<Vec<NodeRef>>,
        item_causal_adj: Vec<Vec<NodeRef>>,
    ) -> Result<Self> {
        self.user_causal_adj = user_causal_adj;
        self.item_causal_adj = item_causal_adj;
        self.validate()?;
        Ok(self)
    }

    /// Keeps the flagged nodes and the given interactions, remapping ids
    /// densely in their original order.
    pub(crate) fn restrict(
        &self,
        keep_users: &[bool],
        keep_items: &[bool],
        interactions: &[(usize, usize)],
    ) -> Result<Self> {
        let remap = |keep: &[bool]| {
            let mut next = 0;
            keep.iter()
                .map(|&k| {
                    k.then(|| {
                        next += 1;
                        next - 1
                    })
                })
                .collect::<Vec<Option<usize>>>()
        };
        let umap = remap(keep_users);
        let imap = remap(keep_items);
        let rows = |t: &Tensor, keep: &[bool]| -> Result<Tensor> {
            let c = t.cols();
            let mut data = Vec::new();
            let mut n = 0;
            for (r, &k) in keep.iter().enumerate() {
                if k {
                    data.extend_from_slice(t.row(r));
                    n += 1;
                }
            }
            Tensor::matrix(n, c, data)
        };
        let map_ref = |n: &NodeRef| match *n {
            NodeRef::User(u) => umap[u].map(NodeRef::User),
            NodeRef::Item(i) => imap[i].map(NodeRef::Item),
        };
        let adj = |lists: &[Vec<NodeRef>], keep: &[bool]| -> Vec<Vec<NodeRef>> {
            lists
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(l, _)| l.iter().filter_map(map_ref).collect())
                .collect()
        };
        let ids = |ids: &[String], keep: &[bool]| -> Vec<String> {
            ids.iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(s, _)| s.clone())
                .collect()
        };
        let pairs: Vec<(usize, usize)> = interactions
            .iter()
            .filter_map(|&(u, i)| Some((umap[u]?, imap[i]?)))
            .collect();
        Self::with_ids(
            rows(&self.user_features, keep_users)?,
            rows(&self.item_features, keep_items)?,
            pairs,
            adj(&self.user_causal_adj, keep_users),
            adj(&self.item_causal_adj, keep_items),
            ids(&self.user_ids, keep_users),
            ids(&self.item_ids, keep_items),
        )
    }
}

pub(crate) fn group_by_user(n_users: usize, pairs: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n_users];
    for &(u, i) in pairs {
        out[u].push(i);
    }
    for items in &mut out {
        items.sort_unstable();
    }
    out
}

/// Train / validation / test partition of a graph's interactions.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub graph: InteractionGraph,
    pub train: Vec<(usize, usize)>,
    pub validation: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
}

impl SplitDataset {
    pub fn train_by_user(&self) -> Vec<Vec<usize>> {
        group_by_user(self.graph.n_users(), &self.train)
    }

    pub fn validation_by_user(&self) -> Vec<Vec<usize>> {
        group_by_user(self.graph.n_users(), &self.validation)
    }

    pub fn test_by_user(&self) -> Vec<Vec<usize>> {
        group_by_user(self.graph.n_users(), &self.test)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(n: usize) -> Tensor {
        Tensor::zeros(&[n, 1])
    }

    #[test]
    fn rejects_self_loops_duplicates_and_bad_ids() {
        let ok = InteractionGraph::new(
            2,
            2,
            feats(2),
            feats(2),
            [(0, 1), (1, 0)],
            vec![vec![NodeRef::User(1)], vec![]],
            vec![vec![], vec![]],
        );
        assert!(ok.is_ok());

        let self_loop = InteractionGraph::new(
            2,
            2,
            feats(2),
            feats(2),
            [(0, 1)],
            vec![vec![NodeRef::User(0)], vec![]],
            vec![vec![], vec![]],
        );
        assert!(self_loop.is_err());

        let dup = InteractionGraph::new(
            2,
            2,
            feats(2),
            feats(2),
            [(0, 1)],
            vec![vec![NodeRef::Item(1), NodeRef::Item(1)], vec![]],
            vec![vec![], vec![]],
        );
        assert!(dup.is_err());

        let bad_pair = InteractionGraph::new(
            2,
            2,
            feats(2),
            feats(2),
            [(0, 5)],
            vec![vec![], vec![]],
            vec![vec![], vec![]],
        );
        assert!(bad_pair.is_err());
    }

    #[test]
    fn restrict_remaps_everything() {
        let g = InteractionGraph::new(
            3,
            2,
            Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap(),
            feats(2),
            [(0, 0), (1, 1), (2, 1)],
            vec![vec![NodeRef::User(2)], vec![NodeRef::User(0)], vec![NodeRef::Item(1)]],
            vec![vec![], vec![NodeRef::User(1)]],
        )
        .unwrap();
        let r = g.restrict(&[false, true, true], &[false, true], &[(1, 1), (2, 1)]).unwrap();
        assert_eq!(r.n_users(), 2);
        assert_eq!(r.interactions(), &[(0, 0), (1, 0)]);
        assert_eq!(r.user_features().data(), &[2.0, 3.0]);
        assert_eq!(r.user_causal_adj(), &[vec![], vec![NodeRef::Item(0)]]);
        assert_eq!(r.item_causal_adj(), &[vec![NodeRef::User(0)]]);
        assert_eq!(r.user_ids(), &["1".to_string(), "2".to_string()]);
    }
}
