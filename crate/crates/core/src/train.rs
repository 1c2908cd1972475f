//! Training loops for the invariant regression models (flow and
//! additive-noise, with and without gating), the ERM/CERM references, and
//! the invariant classifier.
//!
//! Every optimization step draws one minibatch per seen environment, pools
//! them, takes the maximum of the per-environment fit losses and adds
//! `lambda_i * HSIC(residuals, [features | environment one-hot])`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Var};
use crate::dataio::colored::{ColoredEnv, ColoredTask, Split};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, MtaFlowStack};
use crate::losses::{self, KernelSpec, HALF_LOG_TWO_PI};
use crate::models::{classification_residual, Activation, GateMode, GateVector, Mlp};
use crate::optim::{AdamState, LrSchedule};
use crate::params::{Bound, Checkpoint, ParamStore};
use crate::rng;
use crate::scm::{Dataset, InterventionLocation, InterventionType, Mechanism, SettingMeta};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Flow,
    #[serde(rename = "flowg")]
    FlowG,
    Anm,
    #[serde(rename = "anmg")]
    AnmG,
    Erm,
    Cerm,
    /// Linear invariant causal prediction (a baseline, not trained here).
    Icp,
    Classifier,
}

impl ModelKind {
    pub const REGRESSION: [ModelKind; 6] = [
        ModelKind::Flow,
        ModelKind::FlowG,
        ModelKind::Anm,
        ModelKind::AnmG,
        ModelKind::Erm,
        ModelKind::Cerm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Flow => "flow",
            ModelKind::FlowG => "flowg",
            ModelKind::Anm => "anm",
            ModelKind::AnmG => "anmg",
            ModelKind::Erm => "erm",
            ModelKind::Cerm => "cerm",
            ModelKind::Icp => "icp",
            ModelKind::Classifier => "classifier",
        }
    }

    pub fn is_gated(self) -> bool {
        matches!(self, ModelKind::FlowG | ModelKind::AnmG)
    }

    pub fn is_flow(self) -> bool {
        matches!(self, ModelKind::Flow | ModelKind::FlowG)
    }

    /// ERM and CERM: pooled loss, no invariance penalty.
    pub fn is_reference(self) -> bool {
        matches!(self, ModelKind::Erm | ModelKind::Cerm)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "flow" => Ok(ModelKind::Flow),
            "flowg" | "flow_g" => Ok(ModelKind::FlowG),
            "anm" => Ok(ModelKind::Anm),
            "anmg" | "anm_g" => Ok(ModelKind::AnmG),
            "erm" => Ok(ModelKind::Erm),
            "cerm" => Ok(ModelKind::Cerm),
            "icp" => Ok(ModelKind::Icp),
            "classifier" => Ok(ModelKind::Classifier),
            other => Err(Error::invalid(format!("unknown model '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub lambda_i: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    /// Epochs trained without the gate complexity loss.
    pub gate_warmup: usize,
    /// Complexity weight against the summed (not averaged) minibatch fit.
    pub gate_weight: f64,
    pub gate_init_logit: f64,
    /// Learning-rate multiplier for the gate logits.
    pub gate_lr_scale: f64,
    pub hsic_sigma: f64,
    /// Draws averaged for flow predictions.
    pub prediction_draws: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub flow_layers: usize,
    pub flow_k: usize,
    pub conditioner_hidden: usize,
    /// Output width of the non-gated flow feature network.
    pub flow_feature_dim: usize,
    /// Classifier feature width.
    pub feature_dim: usize,
    pub wasserstein_weight: f64,
    /// Rows per environment used for training; the rest is the test split.
    pub n_train: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::synthetic(ModelKind::Anm)
    }
}

impl TrainConfig {
    /// Full-scale synthetic recipe.
    pub fn synthetic(model: ModelKind) -> Self {
        Self {
            model,
            lambda_i: 1.0,
            epochs: 1000,
            batch_size: 256,
            lr: 1e-3,
            weight_decay: 1e-5,
            lr_schedule: LrSchedule::Synthetic,
            gate_warmup: 200,
            gate_weight: 5.0,
            gate_init_logit: 2.0,
            gate_lr_scale: 1.0,
            hsic_sigma: 1.0,
            prediction_draws: 512,
            seed: 0,
            hidden: vec![256, 256],
            flow_layers: 2,
            flow_k: 32,
            conditioner_hidden: 64,
            flow_feature_dim: 1,
            feature_dim: 16,
            wasserstein_weight: 10.0,
            n_train: 1024,
        }
    }

    /// Full-scale classification recipe.
    pub fn classification() -> Self {
        Self {
            model: ModelKind::Classifier,
            lambda_i: 1.585,
            epochs: 300,
            batch_size: 2048,
            lr: 6e-3,
            lr_schedule: LrSchedule::Classification,
            n_train: 25_000,
            ..Self::synthetic(ModelKind::Classifier)
        }
    }

    /// Reduced classification recipe: 2000 rows per environment, 60 epochs.
    pub fn classification_desk() -> Self {
        Self {
            epochs: 60,
            batch_size: 512,
            hidden: vec![32, 32],
            n_train: 2000,
            ..Self::classification()
        }
    }

    /// Reduced synthetic recipe for single-core machines: smaller networks,
    /// fewer epochs, fewer rows and prediction draws. The schedule keeps its
    /// shape (decay at 40% of the budget, gates after 20%).
    pub fn desk(model: ModelKind) -> Self {
        Self {
            epochs: 150,
            batch_size: 128,
            lr: 3e-3,
            gate_warmup: 30,
            gate_lr_scale: 10.0,
            hidden: vec![32, 32],
            flow_k: 8,
            conditioner_hidden: 16,
            prediction_draws: 64,
            n_train: 512,
            ..Self::synthetic(model)
        }
    }

    /// Penalty weight actually used: references ignore `lambda_i`.
    pub fn effective_lambda(&self) -> f64 {
        if self.model.is_reference() {
            0.0
        } else {
            self.lambda_i
        }
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            layers: self.flow_layers,
            k: self.flow_k,
            conditioner_hidden: self.conditioner_hidden,
            ..FlowConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.lambda_i >= 0.0 && self.lambda_i.is_finite()) {
            return bad(format!("lambda_i must be >= 0, got {}", self.lambda_i));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return bad(format!("bad optimizer settings lr={} weight_decay={}", self.lr, self.weight_decay));
        }
        if !(self.gate_weight >= 0.0) || !(self.gate_lr_scale > 0.0) {
            return bad(format!(
                "bad gate settings weight={} lr_scale={}",
                self.gate_weight, self.gate_lr_scale
            ));
        }
        if self.hidden.contains(&0) {
            return bad(format!("hidden widths must be positive: {:?}", self.hidden));
        }
        if self.model.is_flow() && (self.flow_layers == 0 || self.flow_k == 0 || self.prediction_draws == 0) {
            return bad("flow needs layers, K and prediction draws > 0".into());
        }
        KernelSpec::gaussian(self.hsic_sigma)?;
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        // step positions scale with the epoch budget of the full recipe
        let full = match self.lr_schedule {
            LrSchedule::Synthetic => 1000,
            LrSchedule::Classification => 300,
            LrSchedule::Constant => self.epochs,
        };
        let scaled = epoch * full / self.epochs.max(1);
        self.lr_schedule.lr(scaled, self.lr)
    }
}

/// Outcome of one training run. `wall_clock_secs` is the only field that is
/// allowed to differ between repeated runs with the same seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: ModelKind,
    pub seed: u64,
    pub setting_id: Option<String>,
    pub mechanism: Option<Mechanism>,
    pub intervention_type: Option<InterventionType>,
    pub location: Option<InterventionLocation>,
    /// 1-based target variable.
    pub target: Option<usize>,
    /// 1-based ground-truth parents.
    pub parents: Option<Vec<usize>>,
    /// 1-based variables selected by the gate (gated models only).
    pub selected: Option<Vec<usize>>,
    pub gate_probabilities: Option<Vec<f64>>,
    pub train_mse: Option<f64>,
    pub test_mse: Option<f64>,
    pub dg_mse: Option<f64>,
    /// Environment id -> accuracy (classification).
    pub env_accuracy: BTreeMap<String, f64>,
    /// Mean training objective per epoch.
    pub loss_history: Vec<f64>,
    pub epochs: usize,
    pub lambda_i: f64,
    pub num_params: usize,
    pub checkpoint: Option<String>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub(crate) fn empty(cfg: &TrainConfig) -> Self {
        Self {
            model: cfg.model,
            seed: cfg.seed,
            setting_id: None,
            mechanism: None,
            intervention_type: None,
            location: None,
            target: None,
            parents: None,
            selected: None,
            gate_probabilities: None,
            train_mse: None,
            test_mse: None,
            dg_mse: None,
            env_accuracy: BTreeMap::new(),
            loss_history: Vec::new(),
            epochs: cfg.epochs,
            lambda_i: cfg.effective_lambda(),
            num_params: 0,
            checkpoint: None,
            wall_clock_secs: 0.0,
        }
    }

    pub(crate) fn with_meta(mut self, meta: Option<&SettingMeta>) -> Self {
        if let Some(m) = meta {
            self.setting_id = Some(m.id.clone());
            self.mechanism = Some(m.mechanism);
            self.intervention_type = Some(m.intervention_type);
            self.location = Some(m.location);
            self.target = Some(m.target);
            self.parents = Some(m.parents.clone());
        }
        self
    }

    /// Equality of every metric, ignoring wall-clock time and file paths.
    pub fn same_metrics(&self, other: &Self) -> bool {
        let strip = |r: &Self| {
            let mut r = r.clone();
            r.wall_clock_secs = 0.0;
            r.checkpoint = None;
            r
        };
        strip(self) == strip(other)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Per-environment inputs and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvSplit {
    pub env_id: u8,
    pub x: Tensor,
    pub y: Tensor,
}

/// A regression problem cut out of a [`Dataset`]: seen environments 1-3 are
/// split into train/test rows, environment 4 is the domain-generalization set.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionTask {
    /// 0-based input columns.
    pub inputs: Vec<usize>,
    pub target: usize,
    pub train: Vec<EnvSplit>,
    pub test: Vec<EnvSplit>,
    pub dg: Vec<EnvSplit>,
    pub meta: Option<SettingMeta>,
}

pub const SEEN_ENVS: [u8; 3] = [1, 2, 3];
pub const UNSEEN_ENVS: [u8; 1] = [4];

/// Input columns a model sees: the true parents for CERM, all other
/// variables otherwise.
pub fn input_vars(kind: ModelKind, ds: &Dataset) -> Vec<usize> {
    if kind == ModelKind::Cerm {
        ds.parents.clone()
    } else {
        ds.feature_vars()
    }
}

impl RegressionTask {
    pub fn from_dataset(ds: &Dataset, inputs: &[usize], n_train: usize) -> Result<Self> {
        if inputs.contains(&ds.target) {
            return Err(Error::invalid("target column cannot be an input"));
        }
        let cut = |env: u8, rows: std::ops::Range<usize>| -> Result<EnvSplit> {
            let e = ds
                .env(env)
                .ok_or_else(|| Error::invalid(format!("dataset has no environment {env}")))?;
            let idx: Vec<usize> = rows.collect();
            let sub = e.samples.select_rows(&idx);
            Ok(EnvSplit {
                env_id: env,
                x: sub.select_cols(inputs),
                y: sub.select_cols(&[ds.target]),
            })
        };
        let mut train = Vec::new();
        let mut test = Vec::new();
        for env in SEEN_ENVS {
            let n = ds
                .env(env)
                .ok_or_else(|| Error::invalid(format!("dataset has no environment {env}")))?
                .samples
                .rows();
            if n_train == 0 || n_train > n {
                return Err(Error::invalid(format!(
                    "n_train = {n_train} but environment {env} has {n} rows"
                )));
            }
            train.push(cut(env, 0..n_train)?);
            if n > n_train {
                test.push(cut(env, n_train..n)?);
            }
        }
        let mut dg = Vec::new();
        for env in UNSEEN_ENVS {
            if let Some(e) = ds.env(env) {
                dg.push(cut(env, 0..e.samples.rows())?);
            }
        }
        Ok(Self {
            inputs: inputs.to_vec(),
            target: ds.target,
            train,
            test,
            dg,
            meta: ds.meta.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Net {
    Anm { f: Mlp },
    AnmG { gate: GateVector, f: Mlp },
    Flow { h: Mlp, flow: MtaFlowStack },
    FlowG { gate: GateVector, flow: MtaFlowStack },
}

/// Tape nodes of one forward pass.
struct Forward {
    /// Per-row fit loss, `[n, 1]`.
    row_loss: Var,
    resid: Var,
    features: Var,
}

/// A trained (or freshly initialised) regression model with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionModel {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub config: TrainConfig,
    pub store: ParamStore,
    net: Net,
}

/// On-disk model: architecture config plus named parameter arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub input_dim: usize,
    pub inputs: Vec<usize>,
    pub config: TrainConfig,
    pub params: Checkpoint,
}

impl ModelFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

impl RegressionModel {
    pub fn new(cfg: &TrainConfig, input_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mlp = |store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut _| {
            let mut widths = vec![inp];
            widths.extend(&cfg.hidden);
            widths.push(out);
            Mlp::new(store, name, &widths, Activation::Relu, rng)
        };
        let net = match cfg.model {
            ModelKind::Anm | ModelKind::Erm | ModelKind::Cerm => Net::Anm {
                f: mlp(&mut store, "f", input_dim, 1, rng)?,
            },
            ModelKind::AnmG => {
                let gate = GateVector::new(&mut store, "gate", input_dim, cfg.gate_init_logit);
                let f = mlp(&mut store, "f", input_dim, 1, rng)?;
                Net::AnmG { gate, f }
            }
            ModelKind::Flow => {
                let h = mlp(&mut store, "h", input_dim, cfg.flow_feature_dim, rng)?;
                let flow = MtaFlowStack::new(&mut store, "flow", cfg.flow_feature_dim, &cfg.flow_config(), rng)?;
                Net::Flow { h, flow }
            }
            ModelKind::FlowG => {
                let gate = GateVector::new(&mut store, "gate", input_dim, cfg.gate_init_logit);
                let flow = MtaFlowStack::new(&mut store, "flow", input_dim, &cfg.flow_config(), rng)?;
                Net::FlowG { gate, flow }
            }
            ModelKind::Classifier | ModelKind::Icp => {
                return Err(Error::invalid(format!("{} is not a trainable regression model", cfg.model)));
            }
        };
        Ok(Self {
            kind: cfg.model,
            input_dim,
            config: cfg.clone(),
            store,
            net,
        })
    }

    fn gate(&self) -> Option<&GateVector> {
        match &self.net {
            Net::AnmG { gate, .. } | Net::FlowG { gate, .. } => Some(gate),
            _ => None,
        }
    }

    /// Gate selection probabilities, for gated models.
    pub fn gate_probabilities(&self) -> Option<Vec<f64>> {
        self.gate().map(|g| g.probabilities(&self.store))
    }

    /// Input positions (0-based, within the model inputs) kept by the
    /// evaluation-time gate.
    pub fn selected_inputs(&self) -> Option<Vec<usize>> {
        self.gate().map(|g| {
            g.eval_mask(&self.store)
                .iter()
                .enumerate()
                .filter(|(_, &on)| on)
                .map(|(i, _)| i)
                .collect()
        })
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, y: Var, mode: GateMode, rng: &mut impl Rng) -> Result<Forward> {
        match &self.net {
            Net::Anm { f } => {
                let pred = f.forward(tape, bound, x)?;
                let resid = tape.sub(y, pred)?;
                let row_loss = tape.square(resid);
                Ok(Forward {
                    row_loss,
                    resid,
                    features: pred,
                })
            }
            Net::AnmG { gate, f } => {
                let h = gate.apply(tape, bound, x, mode, rng)?;
                let pred = f.forward(tape, bound, h)?;
                let resid = tape.sub(y, pred)?;
                let row_loss = tape.square(resid);
                Ok(Forward {
                    row_loss,
                    resid,
                    features: h,
                })
            }
            Net::Flow { h, flow } => {
                let feat = h.forward(tape, bound, x)?;
                let (z, ld) = flow.forward(tape, bound, y, feat)?;
                Ok(Forward {
                    row_loss: nll_rows(tape, z, ld)?,
                    resid: z,
                    features: feat,
                })
            }
            Net::FlowG { gate, flow } => {
                let feat = gate.apply(tape, bound, x, mode, rng)?;
                let (z, ld) = flow.forward(tape, bound, y, feat)?;
                Ok(Forward {
                    row_loss: nll_rows(tape, z, ld)?,
                    resid: z,
                    features: feat,
                })
            }
        }
    }

    fn masked(&self, x: &Tensor) -> Tensor {
        match self.gate() {
            Some(g) => {
                let mask = g.eval_mask(&self.store);
                let mut out = x.clone();
                let cols = out.cols();
                for (k, v) in out.data_mut().iter_mut().enumerate() {
                    if !mask[k % cols] {
                        *v = 0.0;
                    }
                }
                out
            }
            None => x.clone(),
        }
    }

    /// Point predictions: network output for additive-noise models, the mean
    /// of `prediction_draws` inverse-flow samples for flow models.
    pub fn predict(&self, x: &Tensor, rng: &mut impl Rng) -> Result<Vec<f64>> {
        if x.cols() != self.input_dim {
            return Err(Error::Shape {
                op: "predict",
                lhs: x.shape(),
                rhs: [x.rows(), self.input_dim],
            });
        }
        let draws = self.config.prediction_draws;
        match &self.net {
            Net::Anm { f } => Ok(f.forward_value(&self.store, x)?.into_data()),
            Net::AnmG { f, .. } => Ok(f.forward_value(&self.store, &self.masked(x))?.into_data()),
            Net::Flow { h, flow } => {
                let feat = h.forward_value(&self.store, x)?;
                flow.predict_mean(&self.store, &feat, draws, rng)
            }
            Net::FlowG { flow, .. } => flow.predict_mean(&self.store, &self.masked(x), draws, rng),
        }
    }

    /// Flow residuals `T(y | h(x))` in evaluation mode (flow models only).
    pub fn flow_residuals(&self, x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
        let (flow, cond) = match &self.net {
            Net::Flow { h, flow } => (flow, h.forward_value(&self.store, x)?),
            Net::FlowG { flow, .. } => (flow, self.masked(x)),
            _ => return Err(Error::invalid("flow_residuals needs a flow model")),
        };
        let params = flow.row_params(&self.store, &cond)?;
        Ok((0..x.rows())
            .map(|i| {
                let row: Vec<_> = params.iter().map(|l| l[i].clone()).collect();
                MtaFlowStack::forward_row(&row, y.get(i, 0)).0
            })
            .collect())
    }

    pub fn to_file(&self, inputs: &[usize]) -> ModelFile {
        ModelFile {
            input_dim: self.input_dim,
            inputs: inputs.to_vec(),
            config: self.config.clone(),
            params: self.store.to_checkpoint(),
        }
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        let mut r = rng::stream(0, 0);
        let mut model = Self::new(&file.config, file.input_dim, &mut r)?;
        model.store.load_checkpoint(&file.params)?;
        Ok(model)
    }
}

fn nll_rows(tape: &mut Tape, z: Var, ld: Var) -> Result<Var> {
    let sq = tape.square(z);
    let half = tape.scale(sq, 0.5);
    let d = tape.sub(half, ld)?;
    Ok(tape.add_scalar(d, HALF_LOG_TWO_PI))
}

fn mse(pred: &[f64], y: &Tensor) -> f64 {
    pred.iter().zip(y.data()).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len().max(1) as f64
}

fn split_mse(model: &RegressionModel, splits: &[EnvSplit], rng: &mut impl Rng) -> Result<Option<f64>> {
    if splits.is_empty() {
        return Ok(None);
    }
    let x = Tensor::vstack(&splits.iter().map(|s| &s.x).collect::<Vec<_>>())?;
    let y = Tensor::vstack(&splits.iter().map(|s| &s.y).collect::<Vec<_>>())?;
    let pred = model.predict(&x, rng)?;
    Ok(Some(mse(&pred, &y)))
}

/// Train/test/DG mean squared errors of `model` on `task`; flow draws are
/// seeded by `seed` exactly as at the end of training.
pub fn evaluate(model: &RegressionModel, task: &RegressionTask, seed: u64) -> Result<[Option<f64>; 3]> {
    let mut r = rng::stream(seed, 12);
    Ok([
        split_mse(model, &task.train, &mut r)?,
        split_mse(model, &task.test, &mut r)?,
        split_mse(model, &task.dg, &mut r)?,
    ])
}

/// Per-environment row ranges of one pooled minibatch.
fn env_means(tape: &mut Tape, rows: Var, sizes: &[usize]) -> Result<Var> {
    let mut start = 0;
    let mut means = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let part = tape.slice_rows(rows, start, n)?;
        means.push(tape.mean(part));
        start += n;
    }
    tape.concat_cols(&means)
}

fn invariance_penalty(tape: &mut Tape, resid: Var, features: Var, sizes: &[usize], sigma: f64) -> Result<Var> {
    let env_pos: Vec<usize> = sizes.iter().enumerate().flat_map(|(e, &n)| std::iter::repeat_n(e, n)).collect();
    let onehot = tape.constant(losses::env_one_hot(&env_pos, sizes.len())?);
    let cond = tape.concat_cols(&[features, onehot])?;
    let k = KernelSpec::gaussian(sigma)?;
    losses::hsic(tape, resid, cond, k, k)
}

/// Trains a regression model of kind `cfg.model` on `task`.
pub fn train_regression(task: &RegressionTask, cfg: &TrainConfig) -> Result<(RegressionModel, RunReport)> {
    let start = Instant::now();
    if matches!(cfg.model, ModelKind::Classifier | ModelKind::Icp) {
        return Err(Error::invalid(format!("{} is not trained by train_regression", cfg.model)));
    }
    if task.train.len() < 2 {
        return Err(Error::invalid(format!(
            "training needs at least 2 seen environments, got {}",
            task.train.len()
        )));
    }
    let mut init_rng = rng::stream(cfg.seed, 10);
    let mut model = RegressionModel::new(cfg, task.inputs.len(), &mut init_rng)?;
    let mut step_rng = rng::stream(cfg.seed, 11);
    let mut adam = AdamState::new(&model.store, cfg.lr, cfg.weight_decay);
    adam.scale_lr(&model.store, "gate", cfg.gate_lr_scale);
    let lambda = cfg.effective_lambda();
    let n_min = task.train.iter().map(|e| e.y.rows()).min().unwrap_or(0);
    let batch = cfg.batch_size.min(n_min).max(1);
    let steps = n_min.div_ceil(batch);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut perms: Vec<Vec<usize>> = task.train.iter().map(|e| (0..e.y.rows()).collect()).collect();

    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr_at(epoch);
        for p in &mut perms {
            p.shuffle(&mut step_rng);
        }
        let gates_on = model.kind.is_gated() && epoch >= cfg.gate_warmup && cfg.gate_weight > 0.0;
        let mut epoch_loss = 0.0;
        for s in 0..steps {
            let mut xs = Vec::with_capacity(task.train.len());
            let mut ys = Vec::with_capacity(task.train.len());
            let mut sizes = Vec::with_capacity(task.train.len());
            for (e, env) in task.train.iter().enumerate() {
                let hi = ((s + 1) * batch).min(perms[e].len());
                let idx = &perms[e][s * batch..hi];
                xs.push(env.x.select_rows(idx));
                ys.push(env.y.select_rows(idx));
                sizes.push(idx.len());
            }
            let x = Tensor::vstack(&xs.iter().collect::<Vec<_>>())?;
            let y = Tensor::vstack(&ys.iter().collect::<Vec<_>>())?;

            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape);
            let (xv, yv) = (tape.constant(x), tape.constant(y));
            let fwd = model.forward(&mut tape, &bound, xv, yv, GateMode::Train, &mut step_rng)?;
            let fit = if model.kind.is_reference() {
                tape.mean(fwd.row_loss)
            } else {
                let per_env = env_means(&mut tape, fwd.row_loss, &sizes)?;
                tape.max_axis(per_env, Axis::Cols)?
            };
            let mut loss = fit;
            if lambda > 0.0 {
                let pen = invariance_penalty(&mut tape, fwd.resid, fwd.features, &sizes, cfg.hsic_sigma)?;
                let scaled = tape.scale(pen, lambda);
                loss = tape.add(loss, scaled)?;
            }
            if gates_on {
                let gate = model.gate().expect("gated model");
                let probs = gate.probs_var(&mut tape, &bound);
                let c = losses::complexity_loss(&mut tape, probs);
                // the weight is relative to a per-environment minibatch sum
                let scaled = tape.scale(c, cfg.gate_weight / batch as f64);
                loss = tape.add(loss, scaled)?;
            }
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    what: "training loss".into(),
                    detail: format!("epoch {epoch}, step {s}, fit term {}", tape.value(fit).item()),
                });
            }
            tape.backward(loss)?;
            let grads = model.store.grads(&tape, &bound);
            adam.step(&mut model.store, &grads).map_err(|e| match e {
                Error::NonFinite { what, detail } => Error::NonFinite {
                    what,
                    detail: format!("{detail} (epoch {epoch}, step {s})"),
                },
                other => other,
            })?;
            epoch_loss += value;
        }
        history.push(epoch_loss / steps as f64);
    }

    let mut pred_rng = rng::stream(cfg.seed, 12);
    let mut report = RunReport::empty(cfg).with_meta(task.meta.as_ref());
    report.train_mse = split_mse(&model, &task.train, &mut pred_rng)?;
    report.test_mse = split_mse(&model, &task.test, &mut pred_rng)?;
    report.dg_mse = split_mse(&model, &task.dg, &mut pred_rng)?;
    report.loss_history = history;
    report.num_params = model.store.num_scalars();
    if let Some(sel) = model.selected_inputs() {
        report.selected = Some(sel.iter().map(|&i| task.inputs[i] + 1).collect());
        report.gate_probabilities = model.gate_probabilities();
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Convenience wrapper: picks the model's input columns, splits and trains.
pub fn train_on_dataset(ds: &Dataset, cfg: &TrainConfig) -> Result<(RegressionModel, RunReport)> {
    let task = RegressionTask::from_dataset(ds, &input_vars(cfg.model, ds), cfg.n_train)?;
    train_regression(&task, cfg)
}

/// Feature network and linear head of the invariant classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub config: TrainConfig,
    pub store: ParamStore,
    features: Mlp,
    head: Mlp,
}

impl Classifier {
    pub fn new(cfg: &TrainConfig, input_dim: usize, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut widths = vec![input_dim];
        widths.extend(&cfg.hidden);
        widths.push(cfg.feature_dim);
        let features = Mlp::new(&mut store, "h", &widths, Activation::Relu, rng)?;
        let head = Mlp::new(&mut store, "head", &[cfg.feature_dim, classes], Activation::Relu, rng)?;
        Ok(Self {
            config: cfg.clone(),
            store,
            features,
            head,
        })
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<(Var, Var)> {
        let h = self.features.forward(tape, bound, x)?;
        let hr = tape.relu(h);
        let logits = self.head.forward(tape, bound, hr)?;
        Ok((h, logits))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.features.forward_value(&self.store, x)?.map(|v| v.max(0.0));
        self.head.forward_value(&self.store, &h)
    }

    /// Argmax class per row (lowest index on ties).
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok((0..z.rows())
            .map(|i| {
                let row = z.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    pub fn accuracy(&self, env: &ColoredEnv) -> Result<f64> {
        let pred = self.predict(&env.x)?;
        let hits = pred.iter().zip(&env.labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / pred.len().max(1) as f64)
    }
}

/// Trains the invariant classifier on the two seen environments of `task`,
/// redrawing colors and labels every epoch, and reports accuracies on every
/// environment's test split.
pub fn train_classifier(task: &ColoredTask, cfg: &TrainConfig) -> Result<(Classifier, RunReport)> {
    let start = Instant::now();
    let seen = task.seen_envs();
    if seen.len() != 2 {
        return Err(Error::invalid(format!(
            "classification needs exactly 2 seen environments, got {}",
            seen.len()
        )));
    }
    let classes = 2;
    let mut init_rng = rng::stream(cfg.seed, 10);
    let mut model = Classifier::new(cfg, task.input_dim(), classes, &mut init_rng)?;
    let mut step_rng = rng::stream(cfg.seed, 11);
    let mut adam = AdamState::new(&model.store, cfg.lr, cfg.weight_decay);
    let lambda = cfg.lambda_i;
    let kernel = KernelSpec::gaussian(cfg.hsic_sigma)?;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr_at(epoch);
        let envs: Vec<ColoredEnv> = seen
            .iter()
            .map(|&e| task.draw(Split::Train, e, epoch as u64))
            .collect::<Result<_>>()?;
        let n_min = envs.iter().map(|e| e.labels.len()).min().unwrap_or(0);
        let batch = cfg.batch_size.min(n_min).max(2);
        let steps = (n_min / batch).max(1);
        let mut perms: Vec<Vec<usize>> = envs.iter().map(|e| (0..e.labels.len()).collect()).collect();
        for p in &mut perms {
            p.shuffle(&mut step_rng);
        }
        let mut epoch_loss = 0.0;
        for s in 0..steps {
            let mut xs = Vec::new();
            let mut labels = Vec::new();
            let mut sizes = Vec::new();
            for (e, env) in envs.iter().enumerate() {
                let idx = &perms[e][s * batch..((s + 1) * batch).min(perms[e].len())];
                xs.push(env.x.select_rows(idx));
                labels.extend(idx.iter().map(|&i| env.labels[i]));
                sizes.push(idx.len());
            }
            let x = Tensor::vstack(&xs.iter().collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape);
            let xv = tape.constant(x);
            let (h, logits) = model.forward(&mut tape, &bound, xv)?;

            let mut ce = Vec::new();
            let mut start_row = 0;
            for &n in &sizes {
                let part = tape.slice_rows(logits, start_row, n)?;
                ce.push(losses::cross_entropy(&mut tape, part, &labels[start_row..start_row + n])?);
                start_row += n;
            }
            let per_env = tape.concat_cols(&ce)?;
            let mut loss = tape.max_axis(per_env, Axis::Cols)?;
            if lambda > 0.0 {
                let oh = tape.constant(losses::one_hot(&labels, classes)?);
                let resid = classification_residual(&mut tape, oh, logits)?;
                let env_pos: Vec<usize> =
                    sizes.iter().enumerate().flat_map(|(e, &n)| std::iter::repeat_n(e, n)).collect();
                let env_oh = tape.constant(losses::env_one_hot(&env_pos, sizes.len())?);
                let cond = tape.concat_cols(&[h, env_oh])?;
                let hs = losses::hsic(&mut tape, resid, cond, kernel, kernel)?;
                let r1 = tape.slice_rows(resid, 0, sizes[0])?;
                let r2 = tape.slice_rows(resid, sizes[0], sizes[1])?;
                let w = losses::wasserstein1d(&mut tape, r1, r2)?;
                // root-mean-square over the batch rather than the plain norm
                let ws = tape.scale(w, cfg.wasserstein_weight / (sizes[0] as f64).sqrt());
                let pen = tape.add(hs, ws)?;
                let scaled = tape.scale(pen, lambda);
                loss = tape.add(loss, scaled)?;
            }
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    what: "classification loss".into(),
                    detail: format!("epoch {epoch}, step {s}"),
                });
            }
            tape.backward(loss)?;
            let grads = model.store.grads(&tape, &bound);
            adam.step(&mut model.store, &grads)?;
            epoch_loss += value;
        }
        history.push(epoch_loss / steps as f64);
    }

    let mut report = RunReport::empty(cfg);
    for env in task.all_envs() {
        let test = task.draw(Split::Test, env, 0)?;
        report.env_accuracy.insert(env.to_string(), model.accuracy(&test)?);
    }
    report.loss_history = history;
    report.num_params = model.store.num_scalars();
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((model, report))
}
