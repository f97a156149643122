use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{InteractionGraph, NodeRef};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
const INTERACTIONS_FILE: &str = "interactions.csv";
const USER_FEATURES_FILE: &str = "user_features.csv";
const ITEM_FEATURES_FILE: &str = "item_features.csv";
const USER_NEIGHBORS_FILE: &str = "user_neighbors.csv";
const ITEM_NEIGHBORS_FILE: &str = "item_neighbors.csv";

/// Input files for [`ingest`]. Only the interaction log is mandatory.
#[derive(Clone, Debug, Default)]
pub struct IngestSources {
    pub interactions: PathBuf,
    pub user_features: Option<PathBuf>,
    pub item_features: Option<PathBuf>,
    pub user_neighbors: Option<PathBuf>,
    pub item_neighbors: Option<PathBuf>,
}

impl IngestSources {
    /// Sources laid out as a canonical dump directory; absent optional files
    /// are skipped.
    pub fn from_dir(dir: &Path) -> Self {
        let opt = |name: &str| {
            let p = dir.join(name);
            p.exists().then_some(p)
        };
        Self {
            interactions: dir.join(INTERACTIONS_FILE),
            user_features: opt(USER_FEATURES_FILE),
            item_features: opt(ITEM_FEATURES_FILE),
            user_neighbors: opt(USER_NEIGHBORS_FILE),
            item_neighbors: opt(ITEM_NEIGHBORS_FILE),
        }
    }
}

/// Metadata written next to a canonical dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    /// Threshold to apply when the dump itself is re-ingested.
    pub rating_threshold: f64,
    /// Threshold used when the raw log was first ingested.
    #[serde(default)]
    pub source_rating_threshold: Option<f64>,
    #[serde(default)]
    pub k_core: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Free-form provenance (generator config, source paths).
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl DatasetManifest {
    pub fn for_graph(graph: &InteractionGraph) -> Self {
        Self {
            n_users: graph.n_users(),
            n_items: graph.n_items(),
            n_interactions: graph.interactions().len(),
            rating_threshold: 0.0,
            source_rating_threshold: None,
            k_core: None,
            seed: None,
            extra: serde_json::Value::Null,
        }
    }
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn ingest_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

fn line_of(rec: &csv::StringRecord) -> usize {
    rec.position().map_or(0, |p| p.line() as usize)
}

/// Dense ordering of raw ids: numeric when every id is an integer,
/// lexicographic otherwise.
fn order_ids(ids: BTreeSet<String>) -> Vec<String> {
    let mut v: Vec<String> = ids.into_iter().collect();
    if v.iter().all(|s| s.parse::<u64>().is_ok()) {
        v.sort_by_key(|s| s.parse::<u64>().unwrap_or(0));
    }
    v
}

/// Reads an interaction log plus optional feature and neighbor files.
///
/// Only rows with `rating > rating_threshold` become interactions. Nodes
/// without any positive interaction are dropped; their ids are still valid in
/// the feature files.
pub fn ingest(sources: &IngestSources, rating_threshold: f64) -> Result<InteractionGraph> {
    read_graph(sources, rating_threshold, false)
}

/// Ids listed in the first column of a feature file.
fn feature_ids(path: &Path) -> Result<BTreeSet<String>> {
    let mut rdr = reader(path)?;
    let mut ids = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        if let Some(id) = rec.get(0) {
            ids.insert(id.to_string());
        }
    }
    Ok(ids)
}

/// With `keep_featured`, nodes listed in a feature file stay in the graph
/// even without a positive interaction.
fn read_graph(sources: &IngestSources, rating_threshold: f64, keep_featured: bool) -> Result<InteractionGraph> {
    let path = sources.interactions.as_path();
    let mut rdr = reader(path)?;
    let header = rdr.headers()?.clone();
    let expected = ["user_id", "item_id", "rating"];
    if header.len() < 3 || header.iter().take(3).ne(expected.iter().copied()) {
        return Err(ingest_err(
            path,
            1,
            format!("expected header `user_id,item_id,rating`, found `{}`", header.iter().collect::<Vec<_>>().join(",")),
        ));
    }

    let mut all_users = BTreeSet::new();
    let mut all_items = BTreeSet::new();
    let mut positives = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        if rec.len() != 3 && rec.len() != 4 {
            return Err(ingest_err(
                path,
                line,
                format!("expected 3 or 4 columns, found {}", rec.len()),
            ));
        }
        let rating: f64 = rec[2]
            .parse()
            .map_err(|_| ingest_err(path, line, format!("rating `{}` is not a number", &rec[2])))?;
        if !rating.is_finite() {
            return Err(ingest_err(path, line, "rating is not finite"));
        }
        all_users.insert(rec[0].to_string());
        all_items.insert(rec[1].to_string());
        if rating > rating_threshold {
            positives.push((rec[0].to_string(), rec[1].to_string()));
        }
    }
    if positives.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no interaction in {} is rated above {rating_threshold}",
            path.display()
        )));
    }

    let mut user_set: BTreeSet<String> = positives.iter().map(|(u, _)| u.clone()).collect();
    let mut item_set: BTreeSet<String> = positives.iter().map(|(_, i)| i.clone()).collect();
    if keep_featured {
        for (file, set, universe) in [
            (&sources.user_features, &mut user_set, &mut all_users),
            (&sources.item_features, &mut item_set, &mut all_items),
        ] {
            if let Some(p) = file {
                let ids = feature_ids(p)?;
                universe.extend(ids.iter().cloned());
                set.extend(ids);
            }
        }
    }
    let user_ids = order_ids(user_set);
    let item_ids = order_ids(item_set);
    let uidx: HashMap<&str, usize> = user_ids.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
    let iidx: HashMap<&str, usize> = item_ids.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
    let pairs: Vec<(usize, usize)> = positives
        .iter()
        .map(|(u, i)| (uidx[u.as_str()], iidx[i.as_str()]))
        .collect();

    let user_features = match &sources.user_features {
        Some(p) => read_features(p, "user", &all_users, &uidx)?,
        None => Tensor::zeros(&[user_ids.len(), 0]),
    };
    let item_features = match &sources.item_features {
        Some(p) => read_features(p, "item", &all_items, &iidx)?,
        None => Tensor::zeros(&[item_ids.len(), 0]),
    };

    let mut user_adj = vec![Vec::new(); user_ids.len()];
    let mut item_adj = vec![Vec::new(); item_ids.len()];
    if let Some(p) = &sources.user_neighbors {
        read_neighbors(p, true, &uidx, &iidx, &mut user_adj)?;
    }
    if let Some(p) = &sources.item_neighbors {
        read_neighbors(p, false, &uidx, &iidx, &mut item_adj)?;
    }

    InteractionGraph::with_ids(
        user_features,
        item_features,
        pairs,
        user_adj,
        item_adj,
        user_ids,
        item_ids,
    )
}

fn read_features(
    path: &Path,
    kind: &str,
    universe: &BTreeSet<String>,
    index: &HashMap<&str, usize>,
) -> Result<Tensor> {
    let mut rdr = reader(path)?;
    let header = rdr.headers()?.clone();
    if header.is_empty() || &header[0] != "id" {
        return Err(ingest_err(path, 1, "expected header starting with `id`"));
    }
    let width = header.len() - 1;
    let mut out = Tensor::zeros(&[index.len(), width]);
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        if rec.len() != header.len() {
            return Err(ingest_err(
                path,
                line,
                format!("expected {} columns, found {}", header.len(), rec.len()),
            ));
        }
        let id = &rec[0];
        if !universe.contains(id) {
            return Err(ingest_err(path, line, format!("unknown {kind} id `{id}`")));
        }
        let Some(&row) = index.get(id) else { continue };
        for (k, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| ingest_err(path, line, format!("feature `{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(ingest_err(path, line, "feature is not finite"));
            }
            out.row_mut(row)[k] = v;
        }
    }
    Ok(out)
}

fn read_neighbors(
    path: &Path,
    owner_is_user: bool,
    uidx: &HashMap<&str, usize>,
    iidx: &HashMap<&str, usize>,
    adj: &mut [Vec<NodeRef>],
) -> Result<()> {
    let mut rdr = reader(path)?;
    let header = rdr.headers()?.clone();
    if header.len() < 2 || &header[0] != "id" || &header[1] != "neighbor_id" {
        return Err(ingest_err(path, 1, "expected header `id,neighbor_id[,neighbor_kind]`"));
    }
    let owner_index = if owner_is_user { uidx } else { iidx };
    let mut skipped = 0usize;
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        if rec.len() != 2 && rec.len() != 3 {
            return Err(ingest_err(
                path,
                line,
                format!("expected 2 or 3 columns, found {}", rec.len()),
            ));
        }
        let neighbor_is_user = match rec.get(2) {
            None | Some("") => owner_is_user,
            Some("user") => true,
            Some("item") => false,
            Some(other) => {
                return Err(ingest_err(path, line, format!("unknown neighbor kind `{other}`")))
            }
        };
        let owner = owner_index.get(&rec[0]);
        let neighbor = if neighbor_is_user {
            uidx.get(&rec[1]).map(|&u| NodeRef::User(u))
        } else {
            iidx.get(&rec[1]).map(|&i| NodeRef::Item(i))
        };
        let (Some(&owner), Some(neighbor)) = (owner, neighbor) else {
            skipped += 1;
            continue;
        };
        let self_ref = if owner_is_user { NodeRef::User(owner) } else { NodeRef::Item(owner) };
        if neighbor != self_ref && !adj[owner].contains(&neighbor) {
            adj[owner].push(neighbor);
        }
    }
    if skipped > 0 {
        log::debug!("{}: skipped {skipped} edges touching nodes outside the graph", path.display());
    }
    Ok(())
}

/// Writes a graph as a canonical dump directory that [`load_dump`] reads
/// back into an identical graph.
pub fn dump(graph: &InteractionGraph, dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut buf = String::from("user_id,item_id,rating\n");
    for &(u, i) in graph.interactions() {
        buf.push_str(&format!("{},{},1\n", graph.user_ids()[u], graph.item_ids()[i]));
    }
    write_file(&dir.join(INTERACTIONS_FILE), &buf)?;

    write_file(&dir.join(USER_FEATURES_FILE), &features_csv(graph.user_features(), graph.user_ids()))?;
    write_file(&dir.join(ITEM_FEATURES_FILE), &features_csv(graph.item_features(), graph.item_ids()))?;
    write_file(
        &dir.join(USER_NEIGHBORS_FILE),
        &neighbors_csv(graph, graph.user_causal_adj(), graph.user_ids()),
    )?;
    write_file(
        &dir.join(ITEM_NEIGHBORS_FILE),
        &neighbors_csv(graph, graph.item_causal_adj(), graph.item_ids()),
    )?;

    let mut manifest = manifest.clone();
    manifest.n_users = graph.n_users();
    manifest.n_items = graph.n_items();
    manifest.n_interactions = graph.interactions().len();
    manifest.rating_threshold = 0.0;
    write_file(&dir.join(MANIFEST_FILE), &(serde_json::to_string_pretty(&manifest)? + "\n"))
}

/// Reads a dump written by [`dump`]. Nodes listed in the feature files are
/// kept even when they have no interaction.
pub fn load_dump(dir: &Path) -> Result<(InteractionGraph, DatasetManifest)> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Load {
        path: mpath.clone(),
        reason: e.to_string(),
    })?;
    let graph = read_graph(&IngestSources::from_dir(dir), manifest.rating_threshold, true)?;
    Ok((graph, manifest))
}

fn features_csv(t: &Tensor, ids: &[String]) -> String {
    let mut s = String::from("id");
    for k in 1..=t.cols() {
        s.push_str(&format!(",f{k}"));
    }
    s.push('\n');
    for (r, id) in ids.iter().enumerate() {
        s.push_str(id);
        for v in t.row(r) {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

fn neighbors_csv(graph: &InteractionGraph, adj: &[Vec<NodeRef>], ids: &[String]) -> String {
    let mut s = String::from("id,neighbor_id,neighbor_kind\n");
    for (owner, list) in adj.iter().enumerate() {
        for n in list {
            let (nid, kind) = match *n {
                NodeRef::User(u) => (&graph.user_ids()[u], "user"),
                NodeRef::Item(i) => (&graph.item_ids()[i], "item"),
            };
            s.push_str(&format!("{},{nid},{kind}\n", ids[owner]));
        }
    }
    s
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}
