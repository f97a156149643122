use std::fs;
use std::path::{Path, PathBuf};

use cngcf::config::{self, DataConfig, RunConfig};
use cngcf::dataset::{self, DatasetManifest, IngestSources};
use cngcf::error::{Error, Result};
use cngcf::eval::{self, SweepAxis, Variant, DEFAULT_KS};
use cngcf::synthgen;
use cngcf::trainer::{self, Checkpoint, DataSource, ModelKind, Trainer};
use cngcf::SplitDataset;
use serde::{Deserialize, Serialize};

use crate::{Command, Common, DataArgs, EvalArgs, SweepArgs, TrainArgs};

pub const CONFIG_COPY: &str = "config.json";

/// How a training run prepared its split, recorded in its checkpoints.
#[derive(Serialize, Deserialize)]
struct Preparation {
    data: DataConfig,
    seed: u64,
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(&a),
        Command::Ingest(a) => ingest(&a),
        Command::Train(a) => train(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Gridsearch(a) => gridsearch(&a),
    }
}

fn load(common: &Common, data: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => config::load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(d) = data {
        cfg.data_dir = Some(d.to_path_buf());
    }
    Ok(cfg.resolve())
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::config("out_dir", "no output directory (use --out)"))?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let copy = RunConfig {
        out_dir: None,
        ..cfg.clone()
    };
    write(&dir.join(CONFIG_COPY), &copy.to_json())?;
    Ok(dir)
}

fn data_dir(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.data_dir
        .clone()
        .ok_or_else(|| Error::config("data_dir", "no dataset directory (use --data)"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ks_or(ks: &[usize], fallback: &[usize]) -> Vec<usize> {
    if ks.is_empty() {
        fallback.to_vec()
    } else {
        ks.to_vec()
    }
}

fn split_for(cfg: &RunConfig) -> Result<(PathBuf, SplitDataset)> {
    let dir = data_dir(cfg)?;
    let split = config::load_split(&dir, &cfg.data, cfg.seed)?;
    log::info!(
        "split: {} users, {} items, {} train / {} validation / {} test",
        split.graph.n_users(),
        split.graph.n_items(),
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    Ok((dir, split))
}

fn synth(a: &Common) -> Result<()> {
    let cfg = load(a, None)?;
    let out = out_dir(&cfg)?;
    let ds = synthgen::generate(&cfg.synth)?;
    ds.write(&out)?;
    println!(
        "wrote {} users, {} items, {} interactions to {}",
        ds.graph.n_users(),
        ds.graph.n_items(),
        ds.graph.interactions().len(),
        out.display()
    );
    Ok(())
}

fn ingest(a: &DataArgs) -> Result<()> {
    let cfg = load(&a.common, a.data.as_deref())?;
    let src = data_dir(&cfg)?;
    let out = out_dir(&cfg)?;
    let graph = dataset::ingest(&IngestSources::from_dir(&src), cfg.data.rating_threshold)?;
    let mut manifest = DatasetManifest::for_graph(&graph);
    manifest.source_rating_threshold = Some(cfg.data.rating_threshold);
    manifest.extra = serde_json::json!({ "source": src });
    dataset::dump(&graph, &out, &manifest)?;
    println!(
        "ingested {} users, {} items, {} positive interactions",
        graph.n_users(),
        graph.n_items(),
        graph.interactions().len()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = load(&a.data.common, a.data.data.as_deref())?;
    let (dir, split) = split_for(&cfg)?;
    let out = out_dir(&cfg)?;
    let outcome = if a.resume {
        trainer::resume_run(&out, &split)?
    } else {
        let kind = if a.mf { ModelKind::Mf } else { ModelKind::Cngcf };
        Trainer::new(&split, cfg.train.clone(), kind)?.run()?
    };
    let source = DataSource {
        dir: fs::canonicalize(&dir).unwrap_or(dir),
        preparation: serde_json::to_value(Preparation {
            data: cfg.data.clone(),
            seed: cfg.seed,
        })?,
    };
    trainer::save_run(&out, &outcome, Some(&source))?;
    println!(
        "trained {} epochs ({:?}); best validation precision@10 {:.6} at epoch {}",
        outcome.log.len(),
        outcome.stop,
        outcome.best.best_val_precision.unwrap_or(0.0),
        outcome.best.epoch
    );
    Ok(())
}

fn evaluate(a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let recorded = ckpt.source.as_ref();
    let dir = a
        .data
        .clone()
        .or_else(|| recorded.map(|s| s.dir.clone()))
        .ok_or_else(|| Error::config("data_dir", "checkpoint records no dataset (use --data)"))?;
    let prep = match recorded {
        Some(s) => serde_json::from_value(s.preparation.clone())?,
        None => Preparation {
            data: DataConfig::default(),
            seed: ckpt.config.seed,
        },
    };
    let split = config::load_split(&dir, &prep.data, prep.seed)?;
    let report = eval::evaluate_checkpoint(&ckpt, &split, &ks_or(&a.ks, &DEFAULT_KS))?;
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write(&out.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
        write(&out.join("report.txt"), &report.to_table())?;
    }
    Ok(())
}

fn ablate(a: &DataArgs) -> Result<()> {
    let cfg = load(&a.common, a.data.as_deref())?;
    let (_, split) = split_for(&cfg)?;
    let out = out_dir(&cfg)?;
    let ks = ks_or(&a.ks, &cfg.eval.ks);
    let table = eval::run_ablations(&split, &cfg.train, &Variant::ALL, &ks, a.jobs)?;
    let csv = table.to_csv();
    write(&out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let cfg = load(&a.data.common, a.data.data.as_deref())?;
    let (_, split) = split_for(&cfg)?;
    let out = out_dir(&cfg)?;
    let axis: SweepAxis = a.axis.into();
    let (name, values) = match axis {
        SweepAxis::EmbeddingSize => ("embedding_size", &cfg.sweep.embedding_size),
        SweepAxis::Dropout => ("dropout", &cfg.sweep.dropout),
    };
    let rows = eval::sweep(&split, &cfg.train, axis, values, a.data.jobs)?;
    let csv = eval::sweep_csv(&rows);
    write(&out.join(format!("sweep_{name}.csv")), &csv)?;
    print!("{csv}");
    Ok(())
}

fn gridsearch(a: &DataArgs) -> Result<()> {
    let cfg = load(&a.common, a.data.as_deref())?;
    let (_, split) = split_for(&cfg)?;
    let out = out_dir(&cfg)?;
    let result = trainer::grid_search(&split, &cfg.train, &cfg.grid, a.jobs)?;
    write(&out.join("grid.csv"), &result.to_csv())?;
    let best = RunConfig {
        train: result.best.clone(),
        ..cfg.clone()
    };
    write(&out.join("best_config.json"), &best.to_json())?;
    println!(
        "best: learning_rate {} l2_weight {} dropout {}",
        result.best.learning_rate, result.best.l2_weight, result.best.dropout
    );
    Ok(())
}
