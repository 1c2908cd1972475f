//! Multi-environment data from the fixed six-variable structural causal model.
//!
//! Graph (1-based names, edge sign in brackets):
//!
//! ```text
//! X1 -> X2 (+)   X1 -> X3 (+)   X2 -> X3 (-)   X3 -> X4 (-)
//! X3 -> X6 (+)   X4 -> X6 (-)   X5 -> X6 (+)
//! ```
//!
//! Internally variables are column indices `0..6`; files and reports use the
//! 1-based names `x1..x6`.
//!
//! Environment 1 is observational, environments 2 and 3 carry the setting's
//! intervention and environment 4 is the held-out shifted environment.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const NUM_VARS: usize = 6;
pub const NUM_ENVS: u8 = 4;
pub const DEFAULT_SAMPLES: usize = 1024;

const EDGES: [(usize, usize, f64); 7] = [
    (0, 1, 1.0),
    (0, 2, 1.0),
    (1, 2, -1.0),
    (2, 3, -1.0),
    (2, 5, 1.0),
    (3, 5, -1.0),
    (4, 5, 1.0),
];

/// The fixed causal graph with signed edges.
#[derive(Clone, Debug)]
pub struct ScmGraph {
    /// `parents[i]` lists `(parent, sign)`.
    parents: Vec<Vec<(usize, f64)>>,
}

impl Default for ScmGraph {
    fn default() -> Self {
        Self::standard()
    }
}

impl ScmGraph {
    pub fn standard() -> Self {
        let mut parents = vec![Vec::new(); NUM_VARS];
        for (from, to, sign) in EDGES {
            parents[to].push((from, sign));
        }
        Self { parents }
    }

    pub fn parents(&self, i: usize) -> Vec<usize> {
        self.parents[i].iter().map(|&(p, _)| p).collect()
    }

    pub fn signed_parents(&self, i: usize) -> &[(usize, f64)] {
        &self.parents[i]
    }

    pub fn children(&self, i: usize) -> Vec<usize> {
        (0..NUM_VARS)
            .filter(|&c| self.parents[c].iter().any(|&(p, _)| p == i))
            .collect()
    }

    pub fn sign(&self, from: usize, to: usize) -> Option<f64> {
        self.parents[to].iter().find(|&&(p, _)| p == from).map(|&(_, s)| s)
    }

    /// X1, X2, X5, X3, X4, X6.
    pub fn topological_order(&self) -> [usize; NUM_VARS] {
        [0, 1, 4, 2, 3, 5]
    }
}

macro_rules! name_enum {
    ($ty:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$var => $s),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
                match norm.as_str() {
                    $($s => Ok($ty::$var),)+
                    _ => Err(Error::invalid(format!(concat!("unknown ", stringify!($ty), " '{}'"), s))),
                }
            }
        }
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Linear,
    Tanhshrink,
    Softplus,
    Relu,
    MultNoise,
}

name_enum!(Mechanism {
    Linear => "linear",
    Tanhshrink => "tanhshrink",
    Softplus => "softplus",
    Relu => "relu",
    MultNoise => "mult_noise",
});

impl Mechanism {
    pub const ALL: [Mechanism; 5] = [
        Mechanism::Linear,
        Mechanism::Tanhshrink,
        Mechanism::Softplus,
        Mechanism::Relu,
        Mechanism::MultNoise,
    ];

    pub fn is_additive(self) -> bool {
        self != Mechanism::MultNoise
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionType {
    Do,
    SoftI,
    SoftII,
}

name_enum!(InterventionType {
    Do => "do",
    SoftI => "soft_i",
    SoftII => "soft_ii",
});

impl InterventionType {
    pub const ALL: [InterventionType; 3] =
        [InterventionType::Do, InterventionType::SoftI, InterventionType::SoftII];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionLocation {
    AllExceptTarget,
    ParentsAndChildren,
}

name_enum!(InterventionLocation {
    AllExceptTarget => "all_except_target",
    ParentsAndChildren => "parents_and_children",
});

impl InterventionLocation {
    pub const ALL: [InterventionLocation; 2] = [
        InterventionLocation::AllExceptTarget,
        InterventionLocation::ParentsAndChildren,
    ];
}

/// Evaluates one structural assignment. `parents` holds `(value, sign)`.
pub fn mechanism_eval(family: Mechanism, parents: &[(f64, f64)], noise: f64) -> f64 {
    let terms = parents.iter().map(|&(x, a)| a * x);
    match family {
        Mechanism::Linear => terms.sum::<f64>() + noise,
        Mechanism::Tanhshrink => terms.map(|u| u - u.tanh()).sum::<f64>() + noise,
        Mechanism::Softplus => {
            terms.map(|u| u.max(0.0) + (-u.abs()).exp().ln_1p()).sum::<f64>() + noise
        }
        Mechanism::Relu => terms.map(|u| u.max(0.0)).sum::<f64>() + noise,
        Mechanism::MultNoise => terms.sum::<f64>() * (1.0 + noise / 4.0) + noise,
    }
}

/// Per-variable intervention parameters for one environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvDraw {
    /// Shift `e1`, indexed by variable.
    pub e1: [f64; NUM_VARS],
    /// Scale `e2`, indexed by variable.
    pub e2: [f64; NUM_VARS],
}

/// One benchmark configuration. Every random quantity is derived from `seed`,
/// so the setting (and its data) can be rebuilt from its identifying fields.
#[derive(Clone, Debug, PartialEq)]
pub struct ScmSetting {
    pub index: usize,
    pub target: usize,
    pub mechanism: Mechanism,
    pub intervention: InterventionType,
    pub location: InterventionLocation,
    pub seed: u64,
    /// Noise standard deviations `c_i ~ U[0.8, 1.2]`.
    pub noise_scales: [f64; NUM_VARS],
    /// Intervention draws for environments 2 and 3.
    pub env_draws: BTreeMap<u8, EnvDraw>,
    /// Sign of the held-out shift `e = e1 +- 1`, per variable.
    pub unseen_signs: [f64; NUM_VARS],
    pub intervened: Vec<usize>,
    /// True when the location rule produced no variable and a random
    /// non-target variable was used instead.
    pub location_fallback: bool,
}

fn draw_shift(rng: &mut impl Rng) -> f64 {
    let mag = rng.random_range(0.5..=1.5);
    if rng.random_bool(0.5) {
        mag
    } else {
        -mag
    }
}

impl ScmSetting {
    pub fn new(
        index: usize,
        target: usize,
        mechanism: Mechanism,
        intervention: InterventionType,
        location: InterventionLocation,
        seed: u64,
    ) -> Result<Self> {
        if target >= NUM_VARS {
            return Err(Error::invalid(format!("target index {target} outside 0..{NUM_VARS}")));
        }
        let graph = ScmGraph::standard();
        let mut coeff_rng = rng::stream(seed, 1);
        let mut noise_scales = [0.0; NUM_VARS];
        for c in &mut noise_scales {
            *c = coeff_rng.random_range(0.8..=1.2);
        }

        let mut int_rng = rng::stream(seed, 2);
        let mut env_draws = BTreeMap::new();
        for env in [2u8, 3] {
            let mut d = EnvDraw {
                e1: [0.0; NUM_VARS],
                e2: [0.0; NUM_VARS],
            };
            for v in 0..NUM_VARS {
                d.e1[v] = draw_shift(&mut int_rng);
                d.e2[v] = int_rng.random_range(1.5..=2.5);
            }
            env_draws.insert(env, d);
        }
        let mut unseen_signs = [0.0; NUM_VARS];
        for s in &mut unseen_signs {
            *s = if int_rng.random_bool(0.5) { 1.0 } else { -1.0 };
        }

        let mut intervened: Vec<usize> = match location {
            InterventionLocation::AllExceptTarget => (0..NUM_VARS).filter(|&v| v != target).collect(),
            InterventionLocation::ParentsAndChildren => {
                let mut s = graph.parents(target);
                s.extend(graph.children(target));
                s.sort_unstable();
                s.dedup();
                s
            }
        };
        let mut location_fallback = false;
        if intervened.is_empty() {
            let others: Vec<usize> = (0..NUM_VARS).filter(|&v| v != target).collect();
            intervened.push(others[int_rng.random_range(0..others.len())]);
            location_fallback = true;
        }
        debug_assert!(!intervened.contains(&target));

        Ok(Self {
            index,
            target,
            mechanism,
            intervention,
            location,
            seed,
            noise_scales,
            env_draws,
            unseen_signs,
            intervened,
            location_fallback,
        })
    }

    pub fn id(&self) -> String {
        format!("s{:04}", self.index)
    }

    pub fn parents(&self) -> Vec<usize> {
        ScmGraph::standard().parents(self.target)
    }

    pub fn is_intervened(&self, v: usize) -> bool {
        self.intervened.contains(&v)
    }

    /// Samples `n` rows of environment `env_id` (1..=4).
    pub fn sample_environment(&self, env_id: u8, n: usize, rng: &mut impl Rng) -> Result<EnvDataset> {
        if !(1..=NUM_ENVS).contains(&env_id) {
            return Err(Error::invalid(format!("environment id {env_id} outside 1..={NUM_ENVS}")));
        }
        let graph = ScmGraph::standard();
        let order = graph.topological_order();
        let active = env_id > 1;

        // held-out soft-II: exactly half of the rows get the wide noise
        let mut wide_rows = vec![false; n];
        if env_id == 4 && self.intervention == InterventionType::SoftII {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            for &i in &idx[..n / 2] {
                wide_rows[i] = true;
            }
        }

        let mut data = Tensor::zeros(n, NUM_VARS);
        let mut row = [0.0; NUM_VARS];
        let mut parent_buf: Vec<(f64, f64)> = Vec::with_capacity(3);
        for r in 0..n {
            for &v in &order {
                let z: f64 = StandardNormal.sample(rng);
                let intervene = active && self.is_intervened(v);
                let mut scale = self.noise_scales[v];
                if intervene && self.intervention == InterventionType::SoftII {
                    scale = match env_id {
                        2 => 2.0,
                        3 => 0.2,
                        _ if wide_rows[r] => 3.0,
                        _ => 1.2,
                    };
                }
                parent_buf.clear();
                parent_buf.extend(graph.signed_parents(v).iter().map(|&(p, s)| (row[p], s)));
                let mut value = mechanism_eval(self.mechanism, &parent_buf, scale * z);
                if intervene {
                    match self.intervention {
                        InterventionType::Do => value = self.intervention_draw(env_id, v, rng),
                        InterventionType::SoftI => value += self.intervention_draw(env_id, v, rng),
                        InterventionType::SoftII => {}
                    }
                }
                row[v] = value;
            }
            for (v, &x) in row.iter().enumerate() {
                data.set(r, v, x);
            }
        }
        Ok(EnvDataset {
            env_id,
            samples: data,
        })
    }

    /// `e1 + e2 N(0,1)` in environments 2-3, `(e1 +- 1) + N(0, 4^2)` in 4.
    fn intervention_draw(&self, env_id: u8, v: usize, rng: &mut impl Rng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        if env_id == 4 {
            // shift is anchored at the first interventional environment
            let base = self.env_draws[&2].e1[v];
            base + self.unseen_signs[v] + 4.0 * z
        } else {
            let d = &self.env_draws[&env_id];
            d.e1[v] + d.e2[v] * z
        }
    }

    /// Samples all four environments from their dedicated streams.
    pub fn generate(&self, n_per_env: usize) -> Result<Dataset> {
        let mut envs = Vec::with_capacity(NUM_ENVS as usize);
        for env in 1..=NUM_ENVS {
            let mut r = rng::stream(self.seed, 100 + env as u64);
            envs.push(self.sample_environment(env, n_per_env, &mut r)?);
        }
        Ok(Dataset {
            target: self.target,
            parents: self.parents(),
            meta: Some(SettingMeta::from(self)),
            envs,
        })
    }
}

/// Samples of one environment; columns are `x1..x6`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvDataset {
    pub env_id: u8,
    pub samples: Tensor,
}

/// All environments of one setting plus ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub target: usize,
    pub parents: Vec<usize>,
    pub meta: Option<SettingMeta>,
    pub envs: Vec<EnvDataset>,
}

impl Dataset {
    pub fn env(&self, env_id: u8) -> Option<&EnvDataset> {
        self.envs.iter().find(|e| e.env_id == env_id)
    }

    pub fn num_vars(&self) -> usize {
        self.envs.first().map_or(NUM_VARS, |e| e.samples.cols())
    }

    /// Predictor columns: every variable except the target, ascending.
    pub fn feature_vars(&self) -> Vec<usize> {
        (0..self.num_vars()).filter(|&v| v != self.target).collect()
    }
}

/// Serialized description of a setting (the dataset sidecar). Variables are
/// 1-based here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingMeta {
    pub id: String,
    pub index: usize,
    pub target: usize,
    pub mechanism: Mechanism,
    pub intervention_type: InterventionType,
    pub location: InterventionLocation,
    pub parents: Vec<usize>,
    pub seed: u64,
    pub c: Vec<f64>,
    /// Environment id -> variable name -> shift.
    pub e1: BTreeMap<String, BTreeMap<String, f64>>,
    /// Environment id -> variable name -> scale.
    pub e2: BTreeMap<String, BTreeMap<String, f64>>,
    pub intervened: Vec<usize>,
    pub unseen_signs: Vec<f64>,
    pub location_fallback: bool,
}

pub fn var_name(v: usize) -> String {
    format!("x{}", v + 1)
}

impl From<&ScmSetting> for SettingMeta {
    fn from(s: &ScmSetting) -> Self {
        let per_env = |f: &dyn Fn(&EnvDraw) -> [f64; NUM_VARS]| {
            s.env_draws
                .iter()
                .map(|(env, d)| {
                    let vals = f(d);
                    let m = s.intervened.iter().map(|&v| (var_name(v), vals[v])).collect();
                    (env.to_string(), m)
                })
                .collect()
        };
        Self {
            id: s.id(),
            index: s.index,
            target: s.target + 1,
            mechanism: s.mechanism,
            intervention_type: s.intervention,
            location: s.location,
            parents: s.parents().iter().map(|p| p + 1).collect(),
            seed: s.seed,
            c: s.noise_scales.to_vec(),
            e1: per_env(&|d| d.e1),
            e2: per_env(&|d| d.e2),
            intervened: s.intervened.iter().map(|v| v + 1).collect(),
            unseen_signs: s.unseen_signs.to_vec(),
            location_fallback: s.location_fallback,
        }
    }
}

impl SettingMeta {
    /// Rebuilds the full setting from its identifying fields.
    pub fn to_setting(&self) -> Result<ScmSetting> {
        if self.target == 0 || self.target > NUM_VARS {
            return Err(Error::invalid(format!("target x{} out of range", self.target)));
        }
        ScmSetting::new(
            self.index,
            self.target - 1,
            self.mechanism,
            self.intervention_type,
            self.location,
            self.seed,
        )
    }
}

/// Restricts the enumeration axes. Empty lists mean "no restriction".
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SettingFilter {
    /// 0-based target indices.
    pub targets: Vec<usize>,
    pub mechanisms: Vec<Mechanism>,
    pub interventions: Vec<InterventionType>,
    pub locations: Vec<InterventionLocation>,
}

impl SettingFilter {
    /// Parses `key=value[|value...]` pairs separated by commas, e.g.
    /// `mechanism=linear|softplus,target=3,intervention=do`. Targets are
    /// 1-based (`3` or `x3`).
    pub fn parse(spec: &str) -> Result<Self> {
        let mut f = Self::default();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, vals) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("filter term '{part}' is not key=value")))?;
            for val in vals.split('|').map(str::trim) {
                match key.trim() {
                    "target" => {
                        let num: usize = val
                            .trim_start_matches(['x', 'X'])
                            .parse()
                            .map_err(|_| Error::invalid(format!("bad target '{val}'")))?;
                        if num == 0 || num > NUM_VARS {
                            return Err(Error::invalid(format!("target '{val}' outside x1..x6")));
                        }
                        f.targets.push(num - 1);
                    }
                    "mechanism" => f.mechanisms.push(val.parse()?),
                    "intervention" | "intervention_type" => f.interventions.push(val.parse()?),
                    "location" => f.locations.push(val.parse()?),
                    other => return Err(Error::invalid(format!("unknown filter key '{other}'"))),
                }
            }
        }
        Ok(f)
    }

    fn allows<T: PartialEq>(list: &[T], v: &T) -> bool {
        list.is_empty() || list.contains(v)
    }

    /// Axis combinations in enumeration order: location, intervention type,
    /// target, then mechanism varying fastest.
    pub fn combinations(&self) -> Vec<(InterventionLocation, InterventionType, usize, Mechanism)> {
        let mut out = Vec::new();
        for loc in InterventionLocation::ALL {
            for it in InterventionType::ALL {
                for target in 0..NUM_VARS {
                    for mech in Mechanism::ALL {
                        if Self::allows(&self.locations, &loc)
                            && Self::allows(&self.interventions, &it)
                            && Self::allows(&self.targets, &target)
                            && Self::allows(&self.mechanisms, &mech)
                        {
                            out.push((loc, it, target, mech));
                        }
                    }
                }
            }
        }
        out
    }
}

/// Deterministic list of `count` settings. When `count` exceeds the number
/// of filtered axis combinations the enumeration wraps around with fresh
/// seeds.
pub fn enumerate_settings(filter: &SettingFilter, count: usize, seed: u64) -> Result<Vec<ScmSetting>> {
    let combos = filter.combinations();
    if combos.is_empty() {
        return Err(Error::invalid(format!("setting filter {filter:?} matches nothing")));
    }
    (0..count)
        .map(|i| {
            let (loc, it, target, mech) = combos[i % combos.len()];
            ScmSetting::new(i, target, mech, it, loc, rng::mix(seed, i as u64))
        })
        .collect()
}
