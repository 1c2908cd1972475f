//! Dense networks, the 0-1 input gate, and the classification residual.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }

    fn apply_value(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Fully connected network with a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// `widths` = `[input, hidden..., output]`. Weights and biases start
    /// uniform in `+-1/sqrt(fan_in)`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        widths: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if widths.len() < 2 || widths[1..].contains(&0) {
            return Err(Error::invalid(format!("mlp {prefix}: bad widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let bound = 1.0 / (w[0].max(1) as f64).sqrt();
                let wid = store.add_uniform(format!("{prefix}.{i}.w"), w[0], w[1], bound, rng);
                let bid = store.add_uniform(format!("{prefix}.{i}.b"), 1, w[1], bound, rng);
                (wid, bid)
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Parameter ids of the last (output) layer: `(weight, bias)`.
    pub fn output_layer(&self) -> (ParamId, ParamId) {
        *self.layers.last().unwrap()
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let lin = tape.matmul(h, bound.get(w))?;
            h = tape.add(lin, bound.get(b))?;
            if i < last {
                h = self.activation.apply(tape, h);
            }
        }
        Ok(h)
    }

    /// Tape-free evaluation, used at prediction time.
    pub fn forward_value(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "mlp",
                lhs: x.shape(),
                rhs: [self.input_dim(), self.output_dim()],
            });
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let mut out = gemm(&h, false, store.value(w), false);
            let bias = store.value(b).data();
            let cols = out.cols();
            for (k, v) in out.data_mut().iter_mut().enumerate() {
                *v += bias[k % cols];
                if i < last {
                    *v = self.activation.apply_value(*v);
                }
            }
            h = out;
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// Bernoulli sample per call with straight-through gradients.
    Train,
    /// Deterministic mask `p > 0.5`.
    Eval,
}

/// Learnable 0-1 mask over `d` input columns.
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector {
    logits: ParamId,
    dim: usize,
}

impl GateVector {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, init_logit: f64) -> Self {
        let logits = store.add(format!("{prefix}.logits"), Tensor::filled(1, dim, init_logit));
        Self { logits, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn logits(&self) -> ParamId {
        self.logits
    }

    pub fn probabilities(&self, store: &ParamStore) -> Vec<f64> {
        store
            .value(self.logits)
            .data()
            .iter()
            .map(|&l| 1.0 / (1.0 + (-l).exp()))
            .collect()
    }

    pub fn eval_mask(&self, store: &ParamStore) -> Vec<bool> {
        self.probabilities(store).iter().map(|&p| p > 0.5).collect()
    }

    /// Selection probabilities as a `[1, d]` node.
    pub fn probs_var(&self, tape: &mut Tape, bound: &Bound) -> Var {
        tape.sigmoid(bound.get(self.logits))
    }

    /// The `[1, d]` mask node: a straight-through Bernoulli sample in train
    /// mode, the thresholded (constant) mask in eval mode.
    pub fn mask(&self, tape: &mut Tape, bound: &Bound, mode: GateMode, rng: &mut impl Rng) -> Result<Var> {
        let probs = self.probs_var(tape, bound);
        match mode {
            GateMode::Train => {
                let p = tape.value(probs);
                let draws: Vec<f64> = p
                    .data()
                    .iter()
                    .map(|&pi| if rng.random::<f64>() < pi { 1.0 } else { 0.0 })
                    .collect();
                let sample = Tensor::new(p.rows(), p.cols(), draws)?;
                tape.straight_through(probs, sample)
            }
            GateMode::Eval => {
                let m = tape.value(probs).map(|pi| if pi > 0.5 { 1.0 } else { 0.0 });
                Ok(tape.constant(m))
            }
        }
    }

    /// `x * g` with one gate sample shared by every row.
    pub fn apply(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        mode: GateMode,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let [_, d] = tape.shape(x);
        if d != self.dim {
            return Err(Error::Shape {
                op: "gate_apply",
                lhs: tape.shape(x),
                rhs: [1, self.dim],
            });
        }
        let m = self.mask(tape, bound, mode, rng)?;
        tape.mul(x, m)
    }
}

/// `onehot * softmax(logits)`: the invertible classification residual.
pub fn classification_residual(tape: &mut Tape, labels_onehot: Var, logits: Var) -> Result<Var> {
    let (sl, sz) = (tape.shape(labels_onehot), tape.shape(logits));
    if sl != sz {
        return Err(Error::Shape {
            op: "classification_residual",
            lhs: sl,
            rhs: sz,
        });
    }
    let p = tape.softmax(logits);
    tape.mul(labels_onehot, p)
}
