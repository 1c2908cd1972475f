//! Named parameter storage and JSON checkpoints.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

/// Parameters of a store placed on a tape as trainable leaves.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps tape nodes that stand in for a store's parameters, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform `U(-bound, bound)` initialisation.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let t = Tensor::from_fn(rows, cols, |_, _| {
            if bound > 0.0 {
                rng.random_range(-bound..bound)
            } else {
                0.0
            }
        });
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    /// Places every parameter on the tape as a constant (no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }

    /// Gradients for every parameter after `tape.backward`.
    pub fn grads(&self, tape: &Tape, bound: &Bound) -> Vec<Tensor> {
        bound
            .vars
            .iter()
            .zip(&self.values)
            .map(|(&v, p)| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()))
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(n, t)| NamedArray {
                    name: n.clone(),
                    shape: t.shape(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Overwrites values from a checkpoint; names and shapes must match.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.params.len() != self.values.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} parameters, model expects {}",
                ckpt.params.len(),
                self.values.len()
            )));
        }
        for (i, p) in ckpt.params.iter().enumerate() {
            if p.name != self.names[i] || p.shape != self.values[i].shape() {
                return Err(Error::invalid(format!(
                    "checkpoint parameter {} ({:?}) does not match model parameter {} ({:?})",
                    p.name,
                    p.shape,
                    self.names[i],
                    self.values[i].shape()
                )));
            }
            self.values[i] = Tensor::new(p.shape[0], p.shape[1], p.data.clone())?;
        }
        Ok(())
    }
}

/// On-disk checkpoint: a JSON list of named row-major arrays.
///
/// ```json
/// {"params": [{"name": "mlp.0.w", "shape": [5, 256], "data": [ ... ]}]}
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: Vec<NamedArray>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
