//! One-dimensional conditional normalizing flow with monotone
//! "more-than-affine" layers.
//!
//! Each layer maps `y` to
//!
//! ```text
//! z = a * (y + (1/N) * sum_i w_i f(v_i y + r_i)) + b
//! N = (sum_i |w_i v_i| + delta) / eps,      f(u) = exp(-u^2 / 2)
//! ```
//!
//! with `(a, b, w, v, r)` produced per row by a small conditioner network.
//! `|f'| <= exp(-1/2) < 1` and `eps < 1` keep `dz/dy >= a (1 - eps) > 0`, so
//! every layer is strictly increasing and invertible.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::models::{Activation, Mlp};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Added to `softplus(a_raw)` so the layer scale stays positive.
pub const MIN_SCALE: f64 = 1e-3;
const INVERSE_TOL: f64 = 1e-10;
const MAX_DOUBLINGS: usize = 100;
const MAX_ITERS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub layers: usize,
    /// Number of bumps `K` per layer.
    pub k: usize,
    pub eps: f64,
    pub delta: f64,
    /// Hidden width of each conditioner.
    pub conditioner_hidden: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            k: 32,
            eps: 0.9,
            delta: 1e-6,
            conditioner_hidden: 64,
        }
    }
}

/// One transformer layer and its conditioner.
#[derive(Clone, Debug, PartialEq)]
pub struct MtaLayer {
    pub conditioner: Mlp,
    /// Linear path from the condition to the raw parameters, zero at init.
    pub skip: Option<ParamId>,
    pub k: usize,
    pub eps: f64,
    pub delta: f64,
}

/// Per-row layer parameters as plain numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub a: f64,
    pub b: f64,
    pub w: Vec<f64>,
    pub v: Vec<f64>,
    pub r: Vec<f64>,
    /// `1 / N(w, v)`.
    pub inv_norm: f64,
}

impl LayerParams {
    /// Builds row parameters directly and computes `1 / N(w, v)`.
    pub fn new(a: f64, b: f64, w: Vec<f64>, v: Vec<f64>, r: Vec<f64>, eps: f64, delta: f64) -> Self {
        let s: f64 = w.iter().zip(&v).map(|(w, v)| (w * v).abs()).sum();
        Self {
            a,
            b,
            w,
            v,
            r,
            inv_norm: eps / (s + delta),
        }
    }

    /// `(tau(y), tau'(y))`.
    pub fn eval(&self, y: f64) -> (f64, f64) {
        let mut pert = 0.0;
        let mut dpert = 0.0;
        for i in 0..self.w.len() {
            let u = self.v[i] * y + self.r[i];
            let f = (-0.5 * u * u).exp();
            pert += self.w[i] * f;
            dpert -= self.w[i] * self.v[i] * u * f;
        }
        (
            self.a * (y + self.inv_norm * pert) + self.b,
            self.a * (1.0 + self.inv_norm * dpert),
        )
    }

    pub fn log_deriv(&self, y: f64) -> f64 {
        self.eval(y).1.ln()
    }

    /// Solves `tau(y) = z`: geometric bracket expansion around the affine
    /// inverse, then Newton steps safeguarded by bisection.
    pub fn inverse(&self, z: f64) -> Result<f64> {
        if !z.is_finite() {
            return Err(Error::Inversion(format!("non-finite target {z}")));
        }
        let y0 = (z - self.b) / self.a;
        let mut step = 1.0;
        let (mut lo, mut hi) = (y0 - step, y0 + step);
        let mut doublings = 0;
        while self.eval(lo).0 > z || self.eval(hi).0 < z {
            doublings += 1;
            if doublings > MAX_DOUBLINGS {
                return Err(Error::Inversion(format!(
                    "no bracket for z = {z} after {MAX_DOUBLINGS} doublings (a = {}, b = {})",
                    self.a, self.b
                )));
            }
            step *= 2.0;
            lo = y0 - step;
            hi = y0 + step;
        }
        let mut y = y0.clamp(lo, hi);
        for _ in 0..MAX_ITERS {
            let (t, d) = self.eval(y);
            let f = t - z;
            if f == 0.0 {
                return Ok(y);
            }
            if f < 0.0 {
                lo = y;
            } else {
                hi = y;
            }
            let newton = y - f / d;
            let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            let moved = (next - y).abs();
            y = next;
            if f.abs() < INVERSE_TOL && moved <= 1e-15 * (1.0 + y.abs()) {
                return Ok(y);
            }
            if hi - lo <= 4.0 * f64::EPSILON * (1.0 + y.abs()) {
                return Ok(y);
            }
        }
        let resid = self.eval(y).0 - z;
        if resid.abs() < INVERSE_TOL {
            Ok(y)
        } else {
            Err(Error::Inversion(format!("no convergence for z = {z}: residual {resid:e}")))
        }
    }
}

impl MtaLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, cond_dim: usize, cfg: &FlowConfig, rng: &mut impl Rng) -> Result<Self> {
        if !(cfg.eps > 0.0 && cfg.eps < 1.0 && cfg.delta > 0.0) {
            return Err(Error::invalid(format!(
                "flow stabilizers need 0 < eps < 1 and delta > 0, got eps = {}, delta = {}",
                cfg.eps, cfg.delta
            )));
        }
        let conditioner = Mlp::new(
            store,
            prefix,
            &[cond_dim, cfg.conditioner_hidden, 2 + 3 * cfg.k],
            Activation::Relu,
            rng,
        )?;
        // start close to the identity: a = softplus(ln(e - 1)) = 1
        let (_, bias) = conditioner.output_layer();
        store.value_mut(bias).set(0, 0, (std::f64::consts::E - 1.0).ln());
        store.value_mut(bias).set(0, 1, 0.0);
        let skip = (cond_dim > 0).then(|| store.add(format!("{prefix}.skip"), Tensor::zeros(cond_dim, 2 + 3 * cfg.k)));
        Ok(Self {
            conditioner,
            skip,
            k: cfg.k,
            eps: cfg.eps,
            delta: cfg.delta,
        })
    }

    /// Records `(z, log dz/dy)` for column vectors `y` (`[n, 1]`) given
    /// `cond` (`[n, m]`).
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, y: Var, cond: Var) -> Result<(Var, Var)> {
        let k = self.k;
        let mut raw = self.conditioner.forward(tape, bound, cond)?;
        if let Some(skip) = self.skip {
            let lin = tape.matmul(cond, bound.get(skip))?;
            raw = tape.add(raw, lin)?;
        }
        let a_raw = tape.slice_cols(raw, 0, 1)?;
        let a_sp = tape.softplus(a_raw);
        let a = tape.add_scalar(a_sp, MIN_SCALE);
        let b = tape.slice_cols(raw, 1, 1)?;
        let w = tape.slice_cols(raw, 2, k)?;
        let v = tape.slice_cols(raw, 2 + k, k)?;
        let r = tape.slice_cols(raw, 2 + 2 * k, k)?;

        let vy = tape.mul(v, y)?;
        let u = tape.add(vy, r)?;
        let fu = tape.gaussian(u);

        let wv = tape.mul(w, v)?;
        let wv_abs = tape.abs(wv);
        let s = tape.sum_axis(wv_abs, Axis::Cols);
        let s = tape.add_scalar(s, self.delta);
        let norm = tape.scale(s, 1.0 / self.eps);

        let wf = tape.mul(w, fu)?;
        let pert_sum = tape.sum_axis(wf, Axis::Cols);
        let pert = tape.div(pert_sum, norm)?;
        let inner = tape.add(y, pert)?;
        let scaled = tape.mul(a, inner)?;
        let z = tape.add(scaled, b)?;

        // f'(u) = -u f(u)
        let ufu = tape.mul(u, fu)?;
        let wvd = tape.mul(wv, ufu)?;
        let dsum = tape.sum_axis(wvd, Axis::Cols);
        let dpert = tape.div(dsum, norm)?;
        let one_minus = tape.neg(dpert);
        let slope = tape.add_scalar(one_minus, 1.0);
        let log_slope = tape.log(slope)?;
        let log_a = tape.log(a)?;
        let logderiv = tape.add(log_a, log_slope)?;
        Ok((z, logderiv))
    }

    /// Evaluates the conditioner without a tape and unpacks per-row
    /// parameters.
    pub fn row_params(&self, store: &ParamStore, cond: &Tensor) -> Result<Vec<LayerParams>> {
        let mut raw = self.conditioner.forward_value(store, cond)?;
        if let Some(skip) = self.skip {
            raw.add_assign(&gemm(cond, false, store.value(skip), false));
        }
        let k = self.k;
        (0..raw.rows())
            .map(|i| {
                let row = raw.row(i);
                if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        what: "conditioner output".into(),
                        detail: format!("row {i}, column {j}"),
                    });
                }
                let a_raw = row[0];
                let a = a_raw.max(0.0) + (-a_raw.abs()).exp().ln_1p() + MIN_SCALE;
                Ok(LayerParams::new(
                    a,
                    row[1],
                    row[2..2 + k].to_vec(),
                    row[2 + k..2 + 2 * k].to_vec(),
                    row[2 + 2 * k..2 + 3 * k].to_vec(),
                    self.eps,
                    self.delta,
                ))
            })
            .collect()
    }
}

/// Composition of layers; the base distribution is standard normal.
#[derive(Clone, Debug, PartialEq)]
pub struct MtaFlowStack {
    pub layers: Vec<MtaLayer>,
    pub cond_dim: usize,
}

impl MtaFlowStack {
    pub fn new(store: &mut ParamStore, prefix: &str, cond_dim: usize, cfg: &FlowConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.layers == 0 || cfg.k == 0 {
            return Err(Error::invalid("flow needs at least one layer and K >= 1"));
        }
        let layers = (0..cfg.layers)
            .map(|i| MtaLayer::new(store, &format!("{prefix}.{i}"), cond_dim, cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers, cond_dim })
    }

    /// Residual `T(y | cond)` and the summed log-derivative, both `[n, 1]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, y: Var, cond: Var) -> Result<(Var, Var)> {
        let mut z = y;
        let mut total: Option<Var> = None;
        for layer in &self.layers {
            let (next, ld) = layer.forward(tape, bound, z, cond)?;
            z = next;
            total = Some(match total {
                None => ld,
                Some(t) => tape.add(t, ld)?,
            });
        }
        Ok((z, total.expect("non-empty stack")))
    }

    pub fn row_params(&self, store: &ParamStore, cond: &Tensor) -> Result<Vec<Vec<LayerParams>>> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.row_params(store, cond).map_err(|e| match e {
                    Error::NonFinite { what, detail } => Error::NonFinite {
                        what: format!("{what} of flow layer {i}"),
                        detail,
                    },
                    other => other,
                })
            })
            .collect()
    }

    /// Tape-free `(z, log dz/dy)` for one row given its layer parameters.
    pub fn forward_row(params: &[LayerParams], y: f64) -> (f64, f64) {
        let mut z = y;
        let mut ld = 0.0;
        for p in params {
            let (next, d) = p.eval(z);
            ld += d.ln();
            z = next;
        }
        (z, ld)
    }

    pub fn inverse_row(params: &[LayerParams], z: f64) -> Result<f64> {
        let mut y = z;
        for p in params.iter().rev() {
            y = p.inverse(y)?;
        }
        Ok(y)
    }

    /// `T^{-1}(u | cond)` for `n_draws` standard-normal `u` per row:
    /// an `[n, n_draws]` matrix of conditional samples.
    pub fn sample_conditional(
        &self,
        store: &ParamStore,
        cond: &Tensor,
        n_draws: usize,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        let params = self.row_params(store, cond)?;
        let n = cond.rows();
        let mut out = Tensor::zeros(n, n_draws);
        for i in 0..n {
            let row: Vec<LayerParams> = params.iter().map(|l| l[i].clone()).collect();
            for j in 0..n_draws {
                let u: f64 = StandardNormal.sample(rng);
                out.set(i, j, Self::inverse_row(&row, u)?);
            }
        }
        Ok(out)
    }

    /// Row means of [`Self::sample_conditional`].
    pub fn predict_mean(&self, store: &ParamStore, cond: &Tensor, n_draws: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let s = self.sample_conditional(store, cond, n_draws, rng)?;
        Ok((0..s.rows())
            .map(|i| s.row(i).iter().sum::<f64>() / n_draws as f64)
            .collect())
    }
}
