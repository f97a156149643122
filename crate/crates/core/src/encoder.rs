//! Causal graph encoder.
//!
//! Hidden factors are propagated over a node graph that holds every user
//! (indices `0..n_users`) followed by every item. At each layer a node
//! receives `Σ_j h_j ⊙ ReLU(W_msg · [h_self ‖ h_j])` from its neighbors,
//! then combines it with its own state and its exogenous draw `Z` through
//! `ReLU(W_agg · [h ‖ m ‖ Z])`. Layer outputs are summed and fed to Gaussian
//! heads producing `μ` and `σ²` per node.
//!
//! The plain-GCN variant replaces both steps with
//! `ReLU(W · mean_{j ∈ {self} ∪ N} h_j)`.

use serde::{Deserialize, Serialize};

use crate::dataset::{InteractionGraph, NodeRef};
use crate::error::{ConfigIssue, Error, Result};
use crate::numeric::rng::{self, Stream, StreamRng};
use crate::numeric::{dropout_mask, ModelParams, Tape, Tensor, Var, BoundParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    Causal,
    Gcn,
}

/// Reduction applied to incoming messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageNorm {
    Sum,
    Mean,
}

/// How the variance head maps its pre-activation to `σ²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceHead {
    /// `σ² = exp(ReLU(W h + b))`, always ≥ 1.
    ExpRelu,
    /// `σ² = exp(W h + b)`.
    Exp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub layers: usize,
    pub hidden_dim: usize,
    pub repr_dim: usize,
    pub z_dim: usize,
    /// When false every message is zero (ablation).
    pub causal_messages: bool,
    pub message_norm: MessageNorm,
    pub variance: VarianceHead,
    /// Adds a learned per-node vector to the projected features in `h⁽⁰⁾`.
    pub id_embeddings: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            variant: EncoderVariant::Causal,
            layers: 2,
            hidden_dim: 32,
            repr_dim: 64,
            z_dim: 4,
            causal_messages: true,
            message_norm: MessageNorm::Mean,
            variance: VarianceHead::ExpRelu,
            id_embeddings: true,
        }
    }
}

impl EncoderConfig {
    pub fn issues(&self, prefix: &str) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        for (field, v) in [
            ("layers", self.layers),
            ("hidden_dim", self.hidden_dim),
            ("repr_dim", self.repr_dim),
        ] {
            if v == 0 {
                out.push(ConfigIssue {
                    path: format!("{prefix}{field}"),
                    message: "must be positive".into(),
                });
            }
        }
        out
    }
}

/// Propagation structure and normalised inputs derived from a graph.
#[derive(Clone, Debug)]
pub struct EncoderGraph {
    n_users: usize,
    n_items: usize,
    user_inputs: Tensor,
    item_inputs: Tensor,
    neighbors: Vec<Vec<usize>>,
    edge_dst: Vec<usize>,
    edge_src: Vec<usize>,
}

fn standardize(t: &Tensor) -> Tensor {
    let (n, c) = (t.rows(), t.cols());
    let mut out = t.clone();
    if n == 0 {
        return out;
    }
    for col in 0..c {
        let mean = (0..n).map(|r| t.at(r, col)).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (t.at(r, col) - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for r in 0..n {
            out.row_mut(r)[col] = (t.at(r, col) - mean) / sd;
        }
    }
    out
}

impl EncoderGraph {
    /// Neighborhoods are the graph's causal adjacency lists joined with the
    /// given observed interactions (users see their items and vice versa).
    /// Feature columns are standardised per node type.
    pub fn new(graph: &InteractionGraph, observed: &[(usize, usize)]) -> Result<Self> {
        let (nu, ni) = (graph.n_users(), graph.n_items());
        let global = |n: &NodeRef| match *n {
            NodeRef::User(u) => u,
            NodeRef::Item(i) => nu + i,
        };
        let mut neighbors: Vec<Vec<usize>> = graph
            .user_causal_adj()
            .iter()
            .chain(graph.item_causal_adj())
            .map(|l| l.iter().map(global).collect())
            .collect();
        for &(u, i) in observed {
            if u >= nu || i >= ni {
                return Err(Error::Consistency(format!(
                    "observed pair ({u}, {i}) outside the graph"
                )));
            }
            if !neighbors[u].contains(&(nu + i)) {
                neighbors[u].push(nu + i);
            }
            if !neighbors[nu + i].contains(&u) {
                neighbors[nu + i].push(u);
            }
        }
        Self::from_neighbors(
            nu,
            ni,
            standardize(graph.user_features()),
            standardize(graph.item_features()),
            neighbors,
        )
    }

    /// Builds the structure from explicit global-index neighbor lists.
    pub fn from_neighbors(
        n_users: usize,
        n_items: usize,
        user_inputs: Tensor,
        item_inputs: Tensor,
        neighbors: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let n = n_users + n_items;
        if neighbors.len() != n {
            return Err(Error::Consistency(format!(
                "{} neighbor lists for {n} nodes",
                neighbors.len()
            )));
        }
        let mut edge_dst = Vec::new();
        let mut edge_src = Vec::new();
        for (dst, list) in neighbors.iter().enumerate() {
            for &src in list {
                if src >= n {
                    return Err(Error::Consistency(format!(
                        "node {dst} lists unknown neighbor {src}"
                    )));
                }
                edge_dst.push(dst);
                edge_src.push(src);
            }
        }
        Ok(Self {
            n_users,
            n_items,
            user_inputs,
            item_inputs,
            neighbors,
            edge_dst,
            edge_src,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn neighbors(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn n_edges(&self) -> usize {
        self.edge_dst.len()
    }

    fn row_scale(&self, cols: usize, extra: f64) -> Tensor {
        let mut t = Tensor::zeros(&[self.n_nodes(), cols]);
        for (r, list) in self.neighbors.iter().enumerate() {
            let d = list.len() as f64 + extra;
            let s = if d > 0.0 { 1.0 / d } else { 0.0 };
            t.row_mut(r).iter_mut().for_each(|x| *x = s);
        }
        t
    }
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn init_rng(seed: u64, name: &str) -> StreamRng {
    rng::stream(seed, Stream::Init, &[fnv1a(name)])
}

/// Glorot-uniform matrix of shape `fan_in × fan_out`.
pub(crate) fn glorot(seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Tensor {
    use rand::Rng;
    let mut r = init_rng(seed, name);
    let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| r.random_range(-a..a)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("sized above")
}

pub(crate) fn small_normal(seed: u64, name: &str, rows: usize, cols: usize, sd: f64) -> Tensor {
    let mut r = init_rng(seed, name);
    rng::standard_normal(&mut r, &[rows, cols]).map(|x| x * sd)
}

pub fn message_param(layer: usize) -> String {
    format!("enc.layer{layer}.message")
}

pub fn aggregate_param(layer: usize) -> String {
    format!("enc.layer{layer}.aggregate")
}

pub fn gcn_param(layer: usize) -> String {
    format!("enc.layer{layer}.gcn")
}

/// Fresh encoder parameters. Each tensor is drawn from its own stream keyed
/// by its name, so the set of tensors present never shifts another's draws.
pub fn init_params(cfg: &EncoderConfig, topo: &EncoderGraph, seed: u64) -> ModelParams {
    let h = cfg.hidden_dim;
    let d = cfg.repr_dim;
    let mut p = ModelParams::new();
    let fu = topo.user_inputs.cols();
    let fi = topo.item_inputs.cols();
    if fu > 0 {
        p.insert("enc.input.user", glorot(seed, "enc.input.user", fu, h));
    }
    if fi > 0 {
        p.insert("enc.input.item", glorot(seed, "enc.input.item", fi, h));
    }
    if cfg.id_embeddings {
        p.insert("enc.embed.user", small_normal(seed, "enc.embed.user", topo.n_users, h, 0.1));
        p.insert("enc.embed.item", small_normal(seed, "enc.embed.item", topo.n_items, h, 0.1));
    }
    for l in 1..=cfg.layers {
        match cfg.variant {
            EncoderVariant::Causal => {
                p.insert(message_param(l), glorot(seed, &message_param(l), 2 * h, h));
                p.insert(
                    aggregate_param(l),
                    glorot(seed, &aggregate_param(l), 2 * h + cfg.z_dim, h),
                );
            }
            EncoderVariant::Gcn => {
                p.insert(gcn_param(l), glorot(seed, &gcn_param(l), h, h));
            }
        }
    }
    for side in ["user", "item"] {
        for head in ["mu", "var"] {
            let w = format!("enc.{side}.{head}.weight");
            let b = format!("enc.{side}.{head}.bias");
            p.insert(w.clone(), glorot(seed, &w, h, d));
            p.insert(b, Tensor::zeros(&[d]));
        }
    }
    p
}

/// Randomness consumed by one training-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardDraws {
    /// Exogenous draws, one row per node.
    pub z: Tensor,
    /// Inverted-dropout mask per layer (`None` = identity).
    pub masks: Vec<Option<Tensor>>,
}

impl ForwardDraws {
    /// Evaluation mode: `Z` at its mean and no dropout.
    pub fn eval(cfg: &EncoderConfig, topo: &EncoderGraph) -> Self {
        Self {
            z: Tensor::zeros(&[topo.n_nodes(), cfg.z_dim]),
            masks: vec![None; cfg.layers],
        }
    }

    /// `Z` comes from the per-epoch exogenous stream; dropout masks from the
    /// per-batch dropout stream.
    pub fn sample(
        cfg: &EncoderConfig,
        topo: &EncoderGraph,
        dropout: f64,
        seed: u64,
        epoch: u64,
        batch: u64,
    ) -> Result<Self> {
        let z = rng::standard_normal(
            &mut rng::stream(seed, Stream::Exogenous, &[epoch]),
            &[topo.n_nodes(), cfg.z_dim],
        );
        let mut r = rng::stream(seed, Stream::Dropout, &[epoch, batch]);
        let masks = (0..cfg.layers)
            .map(|_| dropout_mask(&[topo.n_nodes(), cfg.hidden_dim], dropout, true, &mut r))
            .collect::<Result<_>>()?;
        Ok(Self { z, masks })
    }
}

/// Mean, variance and standard deviation produced by one Gaussian head.
#[derive(Clone, Copy, Debug)]
pub struct GaussianHead {
    pub mu: Var,
    pub var: Var,
    pub sigma: Var,
}

/// Tape handles for one encoder pass.
#[derive(Clone, Debug)]
pub struct Posterior {
    /// `h⁽¹⁾ … h⁽ᴸ⁾` over all nodes.
    pub layers: Vec<Var>,
    /// Layer-aggregated hidden factors over all nodes.
    pub hidden: Var,
    pub user: GaussianHead,
    pub item: GaussianHead,
}

/// Messages for every node at one layer.
pub fn causal_messages(
    tape: &mut Tape,
    topo: &EncoderGraph,
    hidden: Var,
    weight: Var,
    norm: MessageNorm,
) -> Result<Var> {
    let (n, h) = tape.value(hidden).as_matrix("causal_messages")?;
    if topo.n_edges() == 0 {
        return Ok(tape.constant(Tensor::zeros(&[n, h])));
    }
    let w_self_rows: Vec<usize> = (0..h).collect();
    let w_nb_rows: Vec<usize> = (h..2 * h).collect();
    let w_self = tape.gather_rows(weight, &w_self_rows)?;
    let w_nb = tape.gather_rows(weight, &w_nb_rows)?;
    let a = tape.matmul(hidden, w_self)?;
    let b = tape.matmul(hidden, w_nb)?;
    let a_e = tape.gather_rows(a, &topo.edge_dst)?;
    let b_e = tape.gather_rows(b, &topo.edge_src)?;
    let pre = tape.add(a_e, b_e)?;
    let gate = tape.relu(pre);
    let h_src = tape.gather_rows(hidden, &topo.edge_src)?;
    let per_edge = tape.mul(h_src, gate)?;
    let summed = tape.scatter_add_rows(per_edge, &topo.edge_dst, n)?;
    match norm {
        MessageNorm::Sum => Ok(summed),
        MessageNorm::Mean => tape.mask_mul(summed, topo.row_scale(h, 0.0)),
    }
}

/// `ReLU(W_agg · [h ‖ m ‖ Z])` for every node.
pub fn aggregate(tape: &mut Tape, hidden: Var, message: Var, z: Var, weight: Var) -> Result<Var> {
    let x = tape.concat_cols(&[hidden, message, z])?;
    let pre = tape.matmul(x, weight)?;
    Ok(tape.relu(pre))
}

/// Elementwise sum of the per-layer hidden factors.
pub fn layer_aggregate(tape: &mut Tape, layers: &[Var]) -> Result<Var> {
    let (&first, rest) = layers
        .split_first()
        .ok_or_else(|| Error::invalid("layer_aggregate", "no layers"))?;
    let mut acc = first;
    for &l in rest {
        acc = tape.add(acc, l)?;
    }
    Ok(acc)
}

/// `ReLU(W · mean over {self} ∪ N(self) of h)` for every node.
pub fn gcn_layer(tape: &mut Tape, topo: &EncoderGraph, hidden: Var, weight: Var) -> Result<Var> {
    let (n, h) = tape.value(hidden).as_matrix("gcn_layer")?;
    let pooled = if topo.n_edges() == 0 {
        hidden
    } else {
        let h_src = tape.gather_rows(hidden, &topo.edge_src)?;
        let summed = tape.scatter_add_rows(h_src, &topo.edge_dst, n)?;
        tape.add(summed, hidden)?
    };
    let mean = tape.mask_mul(pooled, topo.row_scale(h, 1.0))?;
    let pre = tape.matmul(mean, weight)?;
    Ok(tape.relu(pre))
}

fn input_layer(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    topo: &EncoderGraph,
    params: &BoundParams,
) -> Result<Var> {
    let h = cfg.hidden_dim;
    let mut side = |inputs: &Tensor, proj: &str, embed: &str, n: usize| -> Result<Var> {
        let mut acc = if inputs.cols() > 0 {
            let x = tape.constant(inputs.clone());
            let w = params.get(proj)?;
            Some(tape.matmul(x, w)?)
        } else {
            None
        };
        if cfg.id_embeddings {
            let e = params.get(embed)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, e)?,
                None => e,
            });
        }
        Ok(acc.unwrap_or_else(|| tape.constant(Tensor::zeros(&[n, h]))))
    };
    let users = side(&topo.user_inputs, "enc.input.user", "enc.embed.user", topo.n_users)?;
    let items = side(&topo.item_inputs, "enc.input.item", "enc.embed.item", topo.n_items)?;
    tape.concat_rows(&[users, items])
}

fn head(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    params: &BoundParams,
    hidden: Var,
    side: &str,
) -> Result<GaussianHead> {
    let w_mu = params.get(&format!("enc.{side}.mu.weight"))?;
    let b_mu = params.get(&format!("enc.{side}.mu.bias"))?;
    let w_var = params.get(&format!("enc.{side}.var.weight"))?;
    let b_var = params.get(&format!("enc.{side}.var.bias"))?;
    let lin = tape.matmul(hidden, w_mu)?;
    let lin = tape.add_row(lin, b_mu)?;
    let mu = tape.relu(lin);
    let lin = tape.matmul(hidden, w_var)?;
    let lin = tape.add_row(lin, b_var)?;
    let log_var = match cfg.variance {
        VarianceHead::ExpRelu => tape.relu(lin),
        VarianceHead::Exp => lin,
    };
    let var = tape.exp(log_var);
    let half = tape.scale(log_var, 0.5);
    let sigma = tape.exp(half);
    Ok(GaussianHead { mu, var, sigma })
}

fn ensure_finite(tape: &Tape, v: Var, layer: usize) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NumericOverflow { layer })
    }
}

/// Full forward pass up to the posterior parameters of every node.
///
/// A non-finite activation is reported with its layer index; index
/// `layers + 1` denotes the Gaussian heads.
pub fn encode(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    topo: &EncoderGraph,
    params: &BoundParams,
    draws: &ForwardDraws,
) -> Result<Posterior> {
    let mut h = input_layer(tape, cfg, topo, params)?;
    ensure_finite(tape, h, 0)?;
    let z = tape.constant(draws.z.clone());
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 1..=cfg.layers {
        let next = match cfg.variant {
            EncoderVariant::Causal => {
                let m = if cfg.causal_messages {
                    let w = params.get(&message_param(l))?;
                    causal_messages(tape, topo, h, w, cfg.message_norm)?
                } else {
                    tape.constant(Tensor::zeros(&[topo.n_nodes(), cfg.hidden_dim]))
                };
                let w = params.get(&aggregate_param(l))?;
                aggregate(tape, h, m, z, w)?
            }
            EncoderVariant::Gcn => {
                let w = params.get(&gcn_param(l))?;
                gcn_layer(tape, topo, h, w)?
            }
        };
        let next = match draws.masks.get(l - 1).and_then(Option::as_ref) {
            Some(mask) => tape.mask_mul(next, mask.clone())?,
            None => next,
        };
        ensure_finite(tape, next, l)?;
        layers.push(next);
        h = next;
    }
    let hidden = layer_aggregate(tape, &layers)?;
    let users: Vec<usize> = (0..topo.n_users).collect();
    let items: Vec<usize> = (topo.n_users..topo.n_nodes()).collect();
    let hu = tape.gather_rows(hidden, &users)?;
    let hv = tape.gather_rows(hidden, &items)?;
    let user = head(tape, cfg, params, hu, "user")?;
    let item = head(tape, cfg, params, hv, "item")?;
    for v in [user.mu, user.var, item.mu, item.var] {
        ensure_finite(tape, v, cfg.layers + 1)?;
    }
    Ok(Posterior {
        layers,
        hidden,
        user,
        item,
    })
}

/// Reparameterised representations `μ + σ ⊙ ε` for users and items.
pub fn sample_representations(
    tape: &mut Tape,
    posterior: &Posterior,
    user_noise: Tensor,
    item_noise: Tensor,
) -> Result<(Var, Var)> {
    let u = tape.gaussian_sample(posterior.user.mu, posterior.user.sigma, user_noise)?;
    let v = tape.gaussian_sample(posterior.item.mu, posterior.item.sigma, item_noise)?;
    Ok((u, v))
}

/// Deterministic user and item representations (posterior means).
#[derive(Clone, Debug, PartialEq)]
pub struct Representations {
    pub users: Tensor,
    pub items: Tensor,
}

/// Evaluation-mode encoding: `Z = 0`, no dropout, `u = μ`.
pub fn encode_eval(
    cfg: &EncoderConfig,
    topo: &EncoderGraph,
    params: &ModelParams,
) -> Result<Representations> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let post = encode(&mut tape, cfg, topo, &bound, &ForwardDraws::eval(cfg, topo))?;
    Ok(Representations {
        users: tape.value(post.user.mu).clone(),
        items: tape.value(post.item.mu).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_topo(h0: &[Vec<f64>], neighbors: Vec<Vec<usize>>, n_users: usize) -> EncoderGraph {
        let n = h0.len();
        EncoderGraph::from_neighbors(
            n_users,
            n - n_users,
            Tensor::zeros(&[n_users, 0]),
            Tensor::zeros(&[n - n_users, 0]),
            neighbors,
        )
        .unwrap()
    }

    #[test]
    fn zero_message_weight_gives_zero_message() {
        let topo = line_topo(&[vec![1.0, 2.0], vec![3.0, -1.0]], vec![vec![1], vec![0]], 1);
        let mut t = Tape::new();
        let h = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap());
        let w = t.constant(Tensor::zeros(&[4, 2]));
        let m = causal_messages(&mut t, &topo, h, w, MessageNorm::Sum).unwrap();
        assert!(t.value(m).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn isolated_node_gets_zero_message() {
        let topo = line_topo(&[vec![1.0], vec![2.0]], vec![vec![], vec![]], 1);
        let mut t = Tape::new();
        let h = t.constant(Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap());
        let w = t.constant(Tensor::ones(&[2, 1]));
        let m = causal_messages(&mut t, &topo, h, w, MessageNorm::Sum).unwrap();
        assert_eq!(t.value(m).data(), &[0.0, 0.0]);
    }

    #[test]
    fn single_neighbor_message_by_hand() {
        // node 0 receives from node 1; h_dim = 2
        let h0 = vec![1.0, -1.0];
        let h1 = vec![2.0, 0.5];
        let topo = line_topo(&[h0.clone(), h1.clone()], vec![vec![1], vec![]], 1);
        // W (4×2) rows: [self0, self1, nb0, nb1]
        let w_rows = vec![vec![0.5, -1.0], vec![1.0, 0.0], vec![0.25, 1.0], vec![-2.0, 0.5]];
        let mut t = Tape::new();
        let h = t.constant(Tensor::from_rows(&[h0.clone(), h1.clone()]).unwrap());
        let w = t.constant(Tensor::from_rows(&w_rows).unwrap());
        let m = causal_messages(&mut t, &topo, h, w, MessageNorm::Sum).unwrap();
        // concat = [1, -1, 2, 0.5]
        // pre_0 = 1*0.5 + -1*1 + 2*0.25 + 0.5*-2 = -1.0 → relu 0
        // pre_1 = 1*-1 + -1*0 + 2*1 + 0.5*0.5 = 1.25 → relu 1.25
        // message = h1 ⊙ [0, 1.25] = [0, 0.625]
        assert_eq!(t.value(m).row(0), &[0.0, 0.625]);
        assert_eq!(t.value(m).row(1), &[0.0, 0.0]);
    }

    #[test]
    fn aggregate_cases() {
        let mut t = Tape::new();
        let h = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let m = t.constant(Tensor::from_rows(&[vec![0.5, -1.0]]).unwrap());
        let z = t.constant(Tensor::from_rows(&[vec![3.0]]).unwrap());
        let w0 = t.constant(Tensor::zeros(&[5, 2]));
        let out = aggregate(&mut t, h, m, z, w0).unwrap();
        assert_eq!(t.value(out).data(), &[0.0, 0.0]);

        // x = [1, 2, 0.5, -1, 3]
        let w = t.constant(
            Tensor::from_rows(&[
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![2.0, 0.0],
                vec![0.0, 1.0],
                vec![0.5, -1.0],
            ])
            .unwrap(),
        );
        let out = aggregate(&mut t, h, m, z, w).unwrap();
        // col0 = 1 + 0 + 1 + 0 + 1.5 = 3.5; col1 = 0 + 2 + 0 - 1 - 3 = -2 → 0
        assert_eq!(t.value(out).data(), &[3.5, 0.0]);

        let z0 = t.constant(Tensor::zeros(&[1, 1]));
        let out0 = aggregate(&mut t, h, m, z0, w).unwrap();
        assert_ne!(t.value(out0).data(), t.value(out).data());
    }

    #[test]
    fn layer_aggregate_sums() {
        let mut t = Tape::new();
        let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 4.0]]).unwrap();
        let a = t.constant(x.clone());
        let one = layer_aggregate(&mut t, &[a]).unwrap();
        assert_eq!(t.value(one), &x);
        let b = t.constant(x.clone());
        let two = layer_aggregate(&mut t, &[a, b]).unwrap();
        assert_eq!(t.value(two), &x.map(|v| 2.0 * v));

        let layers = [
            vec![0.3, -1.1, 2.0, 0.0],
            vec![1.7, 0.4, -0.6, 5.0],
            vec![-0.2, 0.9, 0.1, -3.0],
        ];
        let vars: Vec<Var> = layers
            .iter()
            .map(|l| t.constant(Tensor::matrix(2, 2, l.clone()).unwrap()))
            .collect();
        let sum = layer_aggregate(&mut t, &vars).unwrap();
        for k in 0..4 {
            let want = layers[0][k] + layers[1][k] + layers[2][k];
            assert!((t.value(sum).data()[k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn gcn_layer_cases() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        // isolated node: mean over itself only
        let topo = line_topo(&[vec![1.0, -2.0]], vec![vec![]], 1);
        let mut t = Tape::new();
        let h = t.constant(Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap());
        let w = t.constant(eye.clone());
        let out = gcn_layer(&mut t, &topo, h, w).unwrap();
        assert_eq!(t.value(out).data(), &[1.0, 0.0]);

        // three-node line 0 - 1 - 2
        let rows = vec![vec![3.0, 0.0], vec![0.0, 3.0], vec![6.0, -3.0]];
        let topo = line_topo(&rows, vec![vec![1], vec![0, 2], vec![1]], 1);
        let mut t = Tape::new();
        let h = t.constant(Tensor::from_rows(&rows).unwrap());
        let w = t.constant(eye);
        let out = gcn_layer(&mut t, &topo, h, w).unwrap();
        // node 0: mean(h0, h1) = [1.5, 1.5]
        // node 1: mean(h1, h0, h2) = [3, 0]
        // node 2: mean(h2, h1) = [3, 0]
        assert_eq!(t.value(out).data(), &[1.5, 1.5, 3.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn duplicate_neighbors_equal_single_copy_under_mean() {
        let rows = vec![vec![1.0, 2.0], vec![4.0, 0.0], vec![4.0, 0.0]];
        let one = line_topo(&rows[..2], vec![vec![1], vec![]], 1);
        let two = line_topo(&rows, vec![vec![1, 2], vec![], vec![]], 1);
        let w_eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut t = Tape::new();
        let h1 = t.constant(Tensor::from_rows(&rows[..2]).unwrap());
        let h2 = t.constant(Tensor::from_rows(&rows).unwrap());
        let w = t.constant(w_eye);
        let a = gcn_layer(&mut t, &one, h1, w).unwrap();
        let b = gcn_layer(&mut t, &two, h2, w).unwrap();
        // mean({h0, x}) vs mean({h0, x, x}) differ; the idempotent case is a
        // neighbor identical to the node itself.
        let _ = (a, b);
        let same = vec![vec![2.0, 1.0], vec![2.0, 1.0]];
        let topo = line_topo(&same, vec![vec![1], vec![0]], 1);
        let h = t.constant(Tensor::from_rows(&same).unwrap());
        let out = gcn_layer(&mut t, &topo, h, w).unwrap();
        assert_eq!(t.value(out).row(0), &[2.0, 1.0]);
    }
}
