use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{train, TrainConfig};
use crate::dataset::SplitDataset;
use crate::error::{Error, Result};

/// Axes of a hyperparameter grid. Each run gets seed `base.seed + index`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpace {
    pub learning_rate: Vec<f64>,
    pub l2_weight: Vec<f64>,
    pub dropout: Vec<f64>,
}

impl Default for GridSpace {
    fn default() -> Self {
        Self {
            learning_rate: vec![0.0001, 0.0005, 0.001, 0.005],
            l2_weight: vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0],
            dropout: (0..=8).map(|k| k as f64 / 10.0).collect(),
        }
    }
}

impl GridSpace {
    pub fn len(&self) -> usize {
        self.learning_rate.len() * self.l2_weight.len() * self.dropout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Configurations in row-major order (learning rate outermost).
    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &lr in &self.learning_rate {
            for &l2 in &self.l2_weight {
                for &p in &self.dropout {
                    out.push(TrainConfig {
                        learning_rate: lr,
                        l2_weight: l2,
                        dropout: p,
                        seed: base.seed.wrapping_add(out.len() as u64),
                        ..base.clone()
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub index: usize,
    pub learning_rate: f64,
    pub l2_weight: f64,
    pub dropout: f64,
    pub seed: u64,
    pub val_precision: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub best: TrainConfig,
    pub rows: Vec<GridRow>,
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,learning_rate,l2_weight,dropout,seed,val_precision@10,epochs\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.index, r.learning_rate, r.l2_weight, r.dropout, r.seed, r.val_precision, r.epochs
            ));
        }
        s
    }
}

/// Trains every grid point and keeps the best validation Precision@10;
/// ties go to the lower L2 weight, then the lower learning rate.
///
/// Up to `jobs` runs execute concurrently. Results are reported in grid
/// order regardless of completion order.
pub fn grid_search(
    split: &SplitDataset,
    base: &TrainConfig,
    space: &GridSpace,
    jobs: usize,
) -> Result<GridResult> {
    if space.is_empty() {
        return Err(Error::config("grid", "search space has no points"));
    }
    let configs = space.configs(base);
    for c in &configs {
        c.validate()?;
    }
    let rows = parallel_map(&configs, jobs, |idx, cfg| {
        let out = train(split, cfg)?;
        log::info!("grid point {idx} finished");
        Ok(GridRow {
            index: idx,
            learning_rate: cfg.learning_rate,
            l2_weight: cfg.l2_weight,
            dropout: cfg.dropout,
            seed: cfg.seed,
            val_precision: out.best.best_val_precision.unwrap_or(0.0),
            epochs: out.log.len(),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let best = rows
        .iter()
        .min_by(|a, b| {
            b.val_precision
                .total_cmp(&a.val_precision)
                .then(a.l2_weight.total_cmp(&b.l2_weight))
                .then(a.learning_rate.total_cmp(&b.learning_rate))
                .then(a.index.cmp(&b.index))
        })
        .expect("non-empty grid");
    Ok(GridResult {
        best: configs[best.index].clone(),
        rows,
    })
}

/// Applies `f` to every item on up to `jobs` threads; output keeps input order.
pub(crate) fn parallel_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let next = Mutex::new(0usize);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let idx = {
                    let mut n = next.lock().expect("work counter");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(item) = items.get(idx) else { break };
                let r = f(idx, item);
                *slots[idx].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_axes() {
        let g = GridSpace::default();
        assert_eq!(g.learning_rate, [0.0001, 0.0005, 0.001, 0.005]);
        assert_eq!(g.l2_weight.len(), 8);
        assert_eq!(g.l2_weight[0], 1e-5);
        assert_eq!(g.l2_weight[7], 1e2);
        assert_eq!(g.dropout.len(), 9);
        assert_eq!(g.dropout[8], 0.8);
    }

    #[test]
    fn configs_get_consecutive_seeds() {
        let g = GridSpace {
            learning_rate: vec![0.1, 0.2],
            l2_weight: vec![0.0, 1.0],
            dropout: vec![0.0],
        };
        let base = TrainConfig { seed: 40, ..Default::default() };
        let cs = g.configs(&base);
        assert_eq!(cs.len(), 4);
        assert_eq!(cs.iter().map(|c| c.seed).collect::<Vec<_>>(), [40, 41, 42, 43]);
        assert_eq!((cs[1].learning_rate, cs[1].l2_weight), (0.1, 1.0));
    }
}
