//! Reference methods: linear invariant causal prediction and CERM.
//!
//! ICP searches every subset `S` of candidate predictors, fits pooled least
//! squares of the target on `S` (with intercept), and accepts `S` when the
//! residuals look identically distributed across environments. The parent
//! estimate is the intersection of all accepted subsets.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::error::{Error, Result};
use crate::scm::Dataset;
use crate::tensor::Tensor;
use crate::train::{self, EnvSplit, ModelKind, RegressionModel, RegressionTask, RunReport, TrainConfig};

pub const DEFAULT_ALPHA: f64 = 0.05;
const MAX_CANDIDATES: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetTest {
    /// 1-based variables.
    pub subset: Vec<usize>,
    /// Bonferroni-combined p-value.
    pub p_value: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpResult {
    pub alpha: f64,
    pub tests: Vec<SubsetTest>,
    /// Subsets whose design matrix was singular.
    pub skipped: Vec<Vec<usize>>,
    /// 1-based parent estimate.
    pub intersection: Vec<usize>,
    /// Set when every subset was rejected.
    pub no_invariant_subset: bool,
}

impl IcpResult {
    pub fn accepted(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.tests.iter().filter(|t| t.accepted).map(|t| &t.subset)
    }
}

/// Least squares with intercept; returns `[intercept, coefs...]`, or `None`
/// for a (numerically) singular design.
pub fn ols(x: &Tensor, y: &[f64]) -> Option<Vec<f64>> {
    let (n, p) = (x.rows(), x.cols());
    let d = p + 1;
    if n < d {
        return None;
    }
    // normal equations [X 1]^T [X 1] beta = [X 1]^T y
    let mut a = vec![0.0; d * (d + 1)];
    for i in 0..n {
        let row = x.row(i);
        let feat = |k: usize| if k == 0 { 1.0 } else { row[k - 1] };
        for r in 0..d {
            let fr = feat(r);
            for c in 0..d {
                a[r * (d + 1) + c] += fr * feat(c);
            }
            a[r * (d + 1) + d] += fr * y[i];
        }
    }
    let scale = (0..d).map(|k| a[k * (d + 1) + k].abs()).fold(0.0, f64::max).max(1.0);
    for col in 0..d {
        let piv = (col..d)
            .max_by(|&i, &j| a[i * (d + 1) + col].abs().total_cmp(&a[j * (d + 1) + col].abs()))
            .expect("non-empty range");
        if a[piv * (d + 1) + col].abs() < 1e-10 * scale {
            return None;
        }
        if piv != col {
            for k in 0..=d {
                a.swap(piv * (d + 1) + k, col * (d + 1) + k);
            }
        }
        for r in 0..d {
            if r != col {
                let f = a[r * (d + 1) + col] / a[col * (d + 1) + col];
                for k in col..=d {
                    a[r * (d + 1) + k] -= f * a[col * (d + 1) + k];
                }
            }
        }
    }
    Some((0..d).map(|k| a[k * (d + 1) + d] / a[k * (d + 1) + k]).collect())
}

fn ols_predict(beta: &[f64], x: &Tensor) -> Vec<f64> {
    (0..x.rows())
        .map(|i| beta[0] + x.row(i).iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Two-sided Welch t-test p-value for equal means.
pub fn welch_t_pvalue(a: &[f64], b: &[f64]) -> f64 {
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 <= 0.0 {
        return if ma == mb { 1.0 } else { 0.0 };
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

/// Two-sided F-test p-value for equal variances.
pub fn f_test_pvalue(a: &[f64], b: &[f64]) -> f64 {
    let (_, va) = mean_var(a);
    let (_, vb) = mean_var(b);
    if va <= 0.0 || vb <= 0.0 {
        return if va == vb { 1.0 } else { 0.0 };
    }
    let dist = FisherSnedecor::new(a.len() as f64 - 1.0, b.len() as f64 - 1.0).expect("positive degrees of freedom");
    let c = dist.cdf(va / vb);
    (2.0 * c.min(1.0 - c)).clamp(0.0, 1.0)
}

/// Exhaustive linear ICP over the columns of each environment's `x`.
/// `names` are the 1-based variable names of those columns.
pub fn icp_linear(envs: &[EnvSplit], names: &[usize], alpha: f64) -> Result<IcpResult> {
    if envs.len() < 2 {
        return Err(Error::invalid("ICP needs at least two environments"));
    }
    let d = names.len();
    if d > MAX_CANDIDATES {
        return Err(Error::invalid(format!("ICP limited to {MAX_CANDIDATES} candidates, got {d}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let x_all = Tensor::vstack(&envs.iter().map(|e| &e.x).collect::<Vec<_>>())?;
    let y_all = Tensor::vstack(&envs.iter().map(|e| &e.y).collect::<Vec<_>>())?;
    let pairs = envs.len() * (envs.len() - 1) / 2;
    let n_tests = (2 * pairs) as f64;

    let mut tests = Vec::new();
    let mut skipped = Vec::new();
    for mask in 0u32..(1 << d) {
        let cols: Vec<usize> = (0..d).filter(|&k| mask & (1 << k) != 0).collect();
        let subset: Vec<usize> = cols.iter().map(|&k| names[k]).collect();
        let beta = match ols(&x_all.select_cols(&cols), y_all.data()) {
            Some(b) => b,
            None => {
                skipped.push(subset);
                continue;
            }
        };
        let resid: Vec<Vec<f64>> = envs
            .iter()
            .map(|e| {
                let pred = ols_predict(&beta, &e.x.select_cols(&cols));
                e.y.data().iter().zip(pred).map(|(y, p)| y - p).collect()
            })
            .collect();
        let mut p_min: f64 = 1.0;
        for i in 0..envs.len() {
            for j in i + 1..envs.len() {
                p_min = p_min.min(welch_t_pvalue(&resid[i], &resid[j]));
                p_min = p_min.min(f_test_pvalue(&resid[i], &resid[j]));
            }
        }
        let p_value = (p_min * n_tests).min(1.0);
        tests.push(SubsetTest {
            subset,
            p_value,
            accepted: p_value > alpha,
        });
    }

    let mut intersection: Option<Vec<usize>> = None;
    for s in tests.iter().filter(|t| t.accepted) {
        intersection = Some(match intersection {
            None => s.subset.clone(),
            Some(cur) => cur.into_iter().filter(|v| s.subset.contains(v)).collect(),
        });
    }
    Ok(IcpResult {
        alpha,
        no_invariant_subset: intersection.is_none(),
        intersection: intersection.unwrap_or_default(),
        tests,
        skipped,
    })
}

/// Runs ICP on the training split of `ds` and reports its detection and
/// the errors of the pooled linear fit on the selected set.
pub fn icp_run(ds: &Dataset, n_train: usize, alpha: f64, seed: u64) -> Result<(IcpResult, RunReport)> {
    let start = Instant::now();
    let inputs = ds.feature_vars();
    let task = RegressionTask::from_dataset(ds, &inputs, n_train)?;
    let names: Vec<usize> = inputs.iter().map(|v| v + 1).collect();
    let res = icp_linear(&task.train, &names, alpha)?;

    let cols: Vec<usize> = res
        .intersection
        .iter()
        .map(|v| names.iter().position(|n| n == v).expect("selected from names"))
        .collect();
    let x = Tensor::vstack(&task.train.iter().map(|e| &e.x).collect::<Vec<_>>())?.select_cols(&cols);
    let y = Tensor::vstack(&task.train.iter().map(|e| &e.y).collect::<Vec<_>>())?;
    let beta = ols(&x, y.data()).ok_or_else(|| Error::invalid("ICP selection has a singular design"))?;
    let split_mse = |splits: &[EnvSplit]| -> Result<Option<f64>> {
        if splits.is_empty() {
            return Ok(None);
        }
        let x = Tensor::vstack(&splits.iter().map(|e| &e.x).collect::<Vec<_>>())?.select_cols(&cols);
        let y = Tensor::vstack(&splits.iter().map(|e| &e.y).collect::<Vec<_>>())?;
        let p = ols_predict(&beta, &x);
        Ok(Some(
            p.iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64,
        ))
    };

    let cfg = TrainConfig {
        model: ModelKind::Icp,
        seed,
        n_train,
        epochs: 0,
        ..TrainConfig::default()
    };
    let mut report = RunReport::empty(&cfg).with_meta(ds.meta.as_ref());
    report.lambda_i = 0.0;
    report.selected = Some(res.intersection.clone());
    report.train_mse = split_mse(&task.train)?;
    report.test_mse = split_mse(&task.test)?;
    report.dg_mse = split_mse(&task.dg)?;
    report.num_params = cols.len() + 1;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((res, report))
}

/// ERM restricted to the ground-truth parents.
pub fn cerm_train(ds: &Dataset, cfg: &TrainConfig) -> Result<(RegressionModel, RunReport)> {
    let cfg = TrainConfig {
        model: ModelKind::Cerm,
        ..cfg.clone()
    };
    train::train_on_dataset(ds, &cfg)
}
