use std::collections::HashMap;

use cngcf::config::{self, DataConfig};
use cngcf::decoder;
use cngcf::encoder::{self, EncoderGraph};
use cngcf::synthgen::{self, SynthConfig, SynthDataset};
use cngcf::trainer::{ModelKind, StopReason, TrainConfig, Trainer};
use cngcf::dataset::NodeRef;
use cngcf::{InteractionGraph, SplitDataset, Tensor};

fn small(seed: u64) -> (SynthDataset, SplitDataset) {
    let ds = synthgen::generate(&SynthConfig {
        n_users: 40,
        n_items: 30,
        k_range: [6, 12],
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let split = config::prepare_split(&ds.graph, &DataConfig { k_core: 2, ..Default::default() }, seed).unwrap();
    (ds, split)
}

fn tiny_cfg(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        max_epochs: 3,
        batch_size: 16,
        learning_rate: 0.01,
        seed,
        ..TrainConfig::default()
    };
    cfg.encoder.repr_dim = 8;
    cfg.encoder.hidden_dim = 8;
    cfg
}

#[test]
fn training_is_deterministic_under_a_seed() {
    let (_, split) = small(1);
    let a = Trainer::new(&split, tiny_cfg(9), ModelKind::Cngcf).unwrap().run().unwrap();
    let b = Trainer::new(&split, tiny_cfg(9), ModelKind::Cngcf).unwrap().run().unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.last.params, b.last.params);
    let c = Trainer::new(&split, tiny_cfg(10), ModelKind::Cngcf).unwrap().run().unwrap();
    assert_ne!(a.last.params, c.last.params);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (_, split) = small(2);
    for kind in [ModelKind::Cngcf, ModelKind::Mf] {
        let cfg = TrainConfig { learning_rate: 0.0, ..tiny_cfg(0) };
        let mut t = Trainer::new(&split, cfg, kind).unwrap();
        let before = t.params().clone();
        t.run_epoch().unwrap();
        t.run_epoch().unwrap();
        assert_eq!(t.params(), &before, "{kind:?}");
    }
}

#[test]
fn patience_stops_after_that_many_flat_epochs() {
    let (_, split) = small(3);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        patience: 4,
        max_epochs: 50,
        ..tiny_cfg(0)
    };
    let out = Trainer::new(&split, cfg, ModelKind::Cngcf).unwrap().run().unwrap();
    assert_eq!(out.stop, StopReason::Patience);
    assert_eq!(out.log.len(), 5);
    assert_eq!(out.best.epoch, 5);
}

#[test]
fn encoder_is_equivariant_to_user_relabelling() {
    let (ds, _) = small(4);
    let g = &ds.graph;
    let cfg = tiny_cfg(0).encoder;
    let topo = EncoderGraph::new(g, g.interactions()).unwrap();
    let params = encoder::init_params(&cfg, &topo, 3);
    let base = encoder::encode_eval(&cfg, &topo, &params).unwrap();

    let nu = g.n_users();
    let perm: Vec<usize> = (0..nu).map(|u| (u * 7 + 3) % nu).collect();
    let relabel = |n: &NodeRef| match *n {
        NodeRef::User(u) => NodeRef::User(perm[u]),
        item => item,
    };
    let mut feats = vec![Vec::new(); nu];
    let mut user_adj = vec![Vec::new(); nu];
    for u in 0..nu {
        feats[perm[u]] = g.user_features().row(u).to_vec();
        user_adj[perm[u]] = g.user_causal_adj()[u].iter().map(relabel).collect();
    }
    let item_adj = g
        .item_causal_adj()
        .iter()
        .map(|l| l.iter().map(relabel).collect())
        .collect();
    let pairs: Vec<(usize, usize)> = g.interactions().iter().map(|&(u, i)| (perm[u], i)).collect();
    let pg = InteractionGraph::new(
        nu,
        g.n_items(),
        Tensor::from_rows(&feats).unwrap(),
        g.item_features().clone(),
        pairs.iter().copied(),
        user_adj,
        item_adj,
    )
    .unwrap();
    let ptopo = EncoderGraph::new(&pg, &pairs).unwrap();

    let mut pp = params.clone();
    let emb = params.get("enc.embed.user").unwrap();
    let mut moved = emb.clone();
    for u in 0..nu {
        moved.row_mut(perm[u]).copy_from_slice(emb.row(u));
    }
    pp.insert("enc.embed.user", moved);
    let out = encoder::encode_eval(&cfg, &ptopo, &pp).unwrap();
    for u in 0..nu {
        for (a, b) in base.users.row(u).iter().zip(out.users.row(perm[u])) {
            assert!((a - b).abs() < 1e-9);
        }
    }
    for (a, b) in base.items.data().iter().zip(out.items.data()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn mf_learns_a_one_dimensional_preference() {
    let (_, split) = small(5);
    let mut cfg = TrainConfig {
        max_epochs: 30,
        batch_size: 32,
        learning_rate: 0.05,
        l2_weight: 0.0,
        patience: 30,
        ..tiny_cfg(0)
    };
    cfg.encoder.repr_dim = 1;
    let out = Trainer::new(&split, cfg, ModelKind::Mf).unwrap().run().unwrap();
    assert!(out.log.last().unwrap().recon > out.log[0].recon);
}

#[test]
fn ground_truth_scores_recover_every_held_out_item() {
    let (ds, split) = small(6);
    let g = &split.graph;
    let user_src: Vec<usize> = g.user_ids().iter().map(|s| s.parse().unwrap()).collect();
    let item_src: Vec<usize> = g.item_ids().iter().map(|s| s.parse().unwrap()).collect();
    let truth = &ds.preferences.scores;
    let mut rows = Vec::with_capacity(g.n_users());
    for &u in &user_src {
        rows.push(item_src.iter().map(|&i| truth.at(u, i)).collect());
    }
    let scores = Tensor::from_rows(&rows).unwrap();

    let train = split.train_by_user();
    let mut held: HashMap<usize, Vec<usize>> = HashMap::new();
    for &(u, i) in split.validation.iter().chain(&split.test) {
        held.entry(u).or_default().push(i);
    }
    for (u, mut items) in held {
        let mut top = decoder::top_k_items(&scores, u, &train[u], items.len()).unwrap();
        top.sort_unstable();
        items.sort_unstable();
        assert_eq!(top, items, "user {u}");
    }
}
