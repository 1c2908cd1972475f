//! Scalar training objectives built from tape operations.
//!
//! Every function here records onto the caller's [`Tape`] and returns a
//! `[1, 1]` node, so all of them are differentiable in their tensor inputs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `log(sqrt(2 pi))`, the constant of the standard-normal negative log-likelihood.
pub const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_8;

/// Gaussian kernel `k(a, b) = exp(-|a - b|^2 / (2 sigma^2))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub sigma: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self { sigma: 1.0 }
    }
}

impl KernelSpec {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("kernel bandwidth must be positive, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    pub fn gram(&self, tape: &mut Tape, x: Var) -> Var {
        let d = tape.pairwise_sq_dist(x);
        let scaled = tape.scale(d, -0.5 / (self.sigma * self.sigma));
        tape.exp(scaled)
    }
}

/// Biased HSIC estimate `tr(K H L H) / (n - 1)^2` between the rows of `a`
/// (`[n, p]`) and `b` (`[n, q]`).
///
/// Computed as `sum(HKH * HLH)`, which equals the trace form because `H` is
/// idempotent and both kernels are symmetric. A constant `b` centers to the
/// exact zero matrix, so the estimate is exactly zero.
pub fn hsic(tape: &mut Tape, a: Var, b: Var, ka: KernelSpec, kb: KernelSpec) -> Result<Var> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa[0] != sb[0] {
        return Err(Error::Shape {
            op: "hsic",
            lhs: sa,
            rhs: sb,
        });
    }
    let n = sa[0];
    if n < 2 {
        return Err(Error::invalid(format!("hsic needs at least 2 samples, got {n}")));
    }
    let k = ka.gram(tape, a);
    let l = kb.gram(tape, b);
    let kc = tape.center(k)?;
    let lc = tape.center(l)?;
    let prod = tape.mul(kc, lc)?;
    let total = tape.sum(prod);
    let denom = ((n - 1) * (n - 1)) as f64;
    Ok(tape.scale(total, 1.0 / denom))
}

/// HSIC between two plain matrices.
pub fn hsic_value(a: &Tensor, b: &Tensor, ka: KernelSpec, kb: KernelSpec) -> Result<f64> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let h = hsic(&mut tape, va, vb, ka, kb)?;
    Ok(tape.value(h).item())
}

/// Outcome of a permutation test of independence based on HSIC.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PermutationTest {
    pub statistic: f64,
    /// 95th percentile of the permutation null distribution.
    pub threshold_95: f64,
    pub p_value: f64,
    pub permutations: usize,
}

impl PermutationTest {
    pub fn independent_at_95(&self) -> bool {
        self.statistic < self.threshold_95
    }
}

/// Permutes the rows of `b` to sample the null distribution of HSIC.
pub fn hsic_permutation_test(
    a: &Tensor,
    b: &Tensor,
    ka: KernelSpec,
    kb: KernelSpec,
    permutations: usize,
    rng: &mut impl Rng,
) -> Result<PermutationTest> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let k = ka.gram(&mut tape, va);
    let kc = tape.center(k)?;
    let l = kb.gram(&mut tape, vb);
    let lc = tape.center(l)?;
    let kc = tape.value(kc);
    let lc = tape.value(lc);
    let n = kc.rows();
    let denom = ((n - 1) * (n - 1)) as f64;
    let stat_for = |perm: &[usize]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            let pi = perm[i];
            let krow = kc.row(i);
            let lrow = lc.row(pi);
            for j in 0..n {
                s += krow[j] * lrow[perm[j]];
            }
        }
        s / denom
    };
    let identity: Vec<usize> = (0..n).collect();
    let statistic = stat_for(&identity);
    let mut perm = identity;
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        perm.shuffle(rng);
        null.push(stat_for(&perm));
    }
    null.sort_by(f64::total_cmp);
    let threshold_95 = quantile_sorted(&null, 0.95);
    let exceed = null.iter().filter(|&&v| v >= statistic).count();
    Ok(PermutationTest {
        statistic,
        threshold_95,
        p_value: (exceed + 1) as f64 / (permutations + 1) as f64,
        permutations,
    })
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// One-dimensional Wasserstein loss `|sort(a) - sort(b)|_2`, applied to each
/// column separately; the maximum over columns is returned.
pub fn wasserstein1d(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::Shape {
            op: "wasserstein1d",
            lhs: sa,
            rhs: sb,
        });
    }
    let sorted_a = tape.sort_cols(a);
    let sorted_b = tape.sort_cols(b);
    let diff = tape.sub(sorted_a, sorted_b)?;
    let sq = tape.square(diff);
    let per_dim = tape.sum_axis(sq, Axis::Rows);
    let norms = tape.sqrt(per_dim)?;
    tape.max_axis(norms, Axis::Cols)
}

/// Mean standard-normal negative log-likelihood of a flow:
/// `mean(r^2 / 2 - logdet) + log(sqrt(2 pi))`.
pub fn flow_nll(tape: &mut Tape, r: Var, logdet: Var) -> Result<Var> {
    let sq = tape.square(r);
    let half = tape.scale(sq, 0.5);
    let per = tape.sub(half, logdet)?;
    let m = tape.mean(per);
    Ok(tape.add_scalar(m, HALF_LOG_TWO_PI))
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(labels.len(), classes);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::invalid(format!(
                "label {l} at row {i} out of range for {classes} classes"
            )));
        }
        t.set(i, l, 1.0);
    }
    Ok(t)
}

/// `-mean(f(x)_y - log sum_c exp f(x)_c)`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let [n, c] = tape.shape(logits);
    if labels.len() != n {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: [n, c],
            rhs: [labels.len(), 1],
        });
    }
    let onehot = tape.constant(one_hot(labels, c)?);
    let picked = tape.mul(logits, onehot)?;
    let picked = tape.sum_axis(picked, Axis::Cols);
    let lse = tape.logsumexp(logits);
    let ll = tape.sub(picked, lse)?;
    let m = tape.mean(ll);
    Ok(tape.neg(m))
}

/// Expected number of selected variables: the sum of gate probabilities.
pub fn complexity_loss(tape: &mut Tape, gates: Var) -> Var {
    tape.sum(gates)
}

pub fn mse(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(target, pred)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// One-hot encoding of environment positions `0..n_envs`.
pub fn env_one_hot(env_pos: &[usize], n_envs: usize) -> Result<Tensor> {
    one_hot(env_pos, n_envs)
}
