use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Consistency(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_vec(&self) -> Vec<Tensor> {
        self.tensors.values().cloned().collect()
    }

    /// Overwrites every tensor from a list in name order.
    pub fn assign(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::Dimension {
                op: "assign",
                lhs: vec![self.tensors.len()],
                rhs: vec![values.len()],
            });
        }
        for (slot, v) in self.tensors.values_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::Dimension {
                    op: "assign",
                    lhs: slot.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            *slot = v;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Records every tensor on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Tape handles for a [`ModelParams`] set.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Consistency(format!("missing parameter `{name}`")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients in name order, zeros for parameters off the loss path.
    pub fn collect_grads(&self, tape: &Tape, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars
            .values()
            .map(|&v| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect()
    }

    /// `Σ‖θ‖²` over every bound tensor.
    pub fn sum_squares(&self, tape: &mut Tape) -> Result<Var> {
        let parts: Vec<Var> = self.vars.values().map(|&v| tape.sum_squares(v)).collect();
        let mut acc = *parts
            .first()
            .ok_or_else(|| Error::Consistency("no parameters bound".into()))?;
        for &p in &parts[1..] {
            acc = tape.add(acc, p)?;
        }
        Ok(acc)
    }
}
