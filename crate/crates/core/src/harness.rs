//! Benchmark grids: settings × models × seeds, one JSON report per run,
//! and aggregation into detection-accuracy and normalized-error tables.
//!
//! Run directories are resumable. A report is written to a temporary file
//! and renamed into place, so a killed run never leaves a half-written
//! report behind.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::error::{Error, Result};
use crate::losses::quantile_sorted;
use crate::scm::{enumerate_settings, InterventionLocation, InterventionType, Mechanism, ScmSetting, SettingFilter};
use crate::train::{train_on_dataset, ModelKind, RunReport, TrainConfig};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "INVFLOW_OUT";

pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("invflow-out"))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Full,
}

impl Preset {
    pub fn config(self, model: ModelKind) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::desk(model),
            Preset::Full => TrainConfig::synthetic(model),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            other => Err(Error::invalid(format!("unknown preset '{other}' (desk, full)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub filter: SettingFilter,
    /// Number of settings drawn from the filtered grid.
    pub settings: usize,
    pub models: Vec<ModelKind>,
    /// Training seeds per (setting, model).
    pub seeds: usize,
    pub workers: usize,
    pub out_dir: PathBuf,
    /// Seed of the setting enumeration.
    pub grid_seed: u64,
    pub samples_per_env: usize,
    pub preset: Preset,
    /// Replaces the preset; `model` and `seed` are set per run.
    pub base: Option<TrainConfig>,
    pub icp_alpha: f64,
}

impl Default for BenchmarkSpec {
    /// 5 mechanisms × 6 targets × {do, soft-I}, one seed.
    fn default() -> Self {
        Self {
            filter: SettingFilter {
                interventions: vec![InterventionType::Do, InterventionType::SoftI],
                locations: vec![InterventionLocation::AllExceptTarget],
                ..SettingFilter::default()
            },
            settings: 60,
            models: vec![
                ModelKind::Flow,
                ModelKind::FlowG,
                ModelKind::Anm,
                ModelKind::AnmG,
                ModelKind::Erm,
                ModelKind::Cerm,
                ModelKind::Icp,
            ],
            seeds: 1,
            workers: 1,
            out_dir: default_out_root(),
            grid_seed: 0,
            samples_per_env: 1024,
            preset: Preset::Desk,
            base: None,
            icp_alpha: baselines::DEFAULT_ALPHA,
        }
    }
}

/// One (setting, model, seed) triple.
#[derive(Clone, Debug)]
pub struct RunJob {
    pub setting: ScmSetting,
    pub model: ModelKind,
    pub seed: u64,
}

impl RunJob {
    pub fn report_path(&self, out_dir: &Path) -> PathBuf {
        out_dir
            .join("runs")
            .join(self.setting.id())
            .join(format!("{}-seed{}.json", self.model, self.seed))
    }

    fn matches(&self, r: &RunReport) -> bool {
        r.model == self.model
            && r.seed == self.seed
            && r.setting_id.as_deref() == Some(self.setting.id().as_str())
            && r.target == Some(self.setting.target + 1)
            && r.mechanism == Some(self.setting.mechanism)
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.settings == 0 || self.seeds == 0 || self.models.is_empty() {
            return Err(Error::invalid("benchmark needs settings, seeds and models"));
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers must be at least 1"));
        }
        if let Some(m) = self.models.iter().find(|m| **m == ModelKind::Classifier) {
            return Err(Error::invalid(format!("{m} is not a regression benchmark model")));
        }
        let distinct: BTreeSet<_> = self.models.iter().collect();
        if distinct.len() != self.models.len() {
            return Err(Error::invalid(format!("duplicate models in {:?}", self.models)));
        }
        Ok(())
    }

    /// Setting-major plan; every triple appears once.
    pub fn plan(&self) -> Result<Vec<RunJob>> {
        self.validate()?;
        let settings = enumerate_settings(&self.filter, self.settings, self.grid_seed)?;
        let mut jobs = Vec::with_capacity(settings.len() * self.seeds * self.models.len());
        for s in &settings {
            for seed in 0..self.seeds as u64 {
                for &model in &self.models {
                    jobs.push(RunJob {
                        setting: s.clone(),
                        model,
                        seed,
                    });
                }
            }
        }
        Ok(jobs)
    }

    pub fn config_for(&self, model: ModelKind, seed: u64) -> TrainConfig {
        let base = self.base.clone().unwrap_or_else(|| self.preset.config(model));
        TrainConfig { model, seed, ..base }
    }

    pub fn run_job(&self, job: &RunJob) -> Result<RunReport> {
        let cfg = self.config_for(job.model, job.seed);
        let ds = job.setting.generate(self.samples_per_env)?;
        if job.model == ModelKind::Icp {
            Ok(baselines::icp_run(&ds, cfg.n_train, self.icp_alpha, job.seed)?.1)
        } else {
            Ok(train_on_dataset(&ds, &cfg)?.1)
        }
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct BenchOutcome {
    /// Reports in plan order (failed runs omitted).
    pub reports: Vec<RunReport>,
    pub ran: usize,
    pub reused: usize,
    /// `(report path, error)` of runs that failed.
    pub failures: Vec<(PathBuf, String)>,
}

pub enum JobStatus<'a> {
    Reused(&'a RunReport),
    Ran(&'a RunReport),
    Failed(&'a Error),
}

/// Executes the plan on a pool of `spec.workers` threads. Existing reports
/// that match their job are reused. `progress` is called once per job.
pub fn run_benchmark(spec: &BenchmarkSpec, progress: impl Fn(&RunJob, JobStatus<'_>) + Sync) -> Result<BenchOutcome> {
    let plan = spec.plan()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    let results: Vec<(bool, Result<RunReport>)> = pool.install(|| {
        plan.par_iter()
            .map(|job| {
                let path = job.report_path(&spec.out_dir);
                if let Ok(r) = RunReport::load(&path) {
                    if job.matches(&r) {
                        progress(job, JobStatus::Reused(&r));
                        return (true, Ok(r));
                    }
                }
                let res = spec.run_job(job).and_then(|mut r| {
                    r.checkpoint = None;
                    write_atomic(&path, &serde_json::to_vec_pretty(&r)?)?;
                    Ok(r)
                });
                match &res {
                    Ok(r) => progress(job, JobStatus::Ran(r)),
                    Err(e) => progress(job, JobStatus::Failed(e)),
                }
                (false, res)
            })
            .collect()
    });
    let mut out = BenchOutcome::default();
    for (job, (reused, res)) in plan.iter().zip(results) {
        match res {
            Ok(r) => {
                if reused {
                    out.reused += 1;
                } else {
                    out.ran += 1;
                }
                out.reports.push(r);
            }
            Err(e) => out.failures.push((job.report_path(&spec.out_dir), e.to_string())),
        }
    }
    Ok(out)
}

/// Every `*.json` file under `dir` that parses as a [`RunReport`], sorted
/// by path, plus the paths that did not parse.
pub fn load_runs(dir: &Path) -> Result<(Vec<RunReport>, Vec<PathBuf>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "json") {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut runs = Vec::new();
    let mut skipped = Vec::new();
    for f in files {
        match RunReport::load(&f) {
            Ok(r) => runs.push(r),
            Err(_) => skipped.push(f),
        }
    }
    Ok((runs, skipped))
}

/// Exact set equality of selected variables and true parents.
pub fn exact_hit(selected: &[usize], parents: &[usize]) -> bool {
    let a: BTreeSet<_> = selected.iter().collect();
    let b: BTreeSet<_> = parents.iter().collect();
    a == b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub model: ModelKind,
    /// `x3`-style target or mechanism name.
    pub group: String,
    pub hits: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub by_target: Vec<DetectionRow>,
    pub by_mechanism: Vec<DetectionRow>,
    /// Runs with a selected set but no ground truth.
    pub excluded: usize,
}

pub fn detection_accuracy(runs: &[RunReport]) -> Detection {
    let mut by_target: BTreeMap<(ModelKind, usize), (usize, usize)> = BTreeMap::new();
    let mut by_mech: BTreeMap<(ModelKind, Mechanism), (usize, usize)> = BTreeMap::new();
    let mut excluded = 0;
    for r in runs {
        let Some(sel) = &r.selected else { continue };
        let (Some(parents), Some(target), Some(mech)) = (&r.parents, r.target, r.mechanism) else {
            excluded += 1;
            continue;
        };
        let hit = exact_hit(sel, parents) as usize;
        for e in [
            by_target.entry((r.model, target)).or_default(),
            by_mech.entry((r.model, mech)).or_default(),
        ] {
            e.0 += hit;
            e.1 += 1;
        }
    }
    let row = |model, group: String, (hits, total): (usize, usize)| DetectionRow {
        model,
        group,
        hits,
        total,
        accuracy: hits as f64 / total as f64,
    };
    Detection {
        by_target: by_target
            .into_iter()
            .map(|((m, t), c)| row(m, format!("x{t}"), c))
            .collect(),
        by_mechanism: by_mech
            .into_iter()
            .map(|((m, mech), c)| row(m, mech.to_string(), c))
            .collect(),
        excluded,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRun {
    pub setting_id: String,
    pub model: ModelKind,
    pub seed: u64,
    pub mechanism: Option<Mechanism>,
    pub target: Option<usize>,
    pub train: Option<f64>,
    pub test: Option<f64>,
    pub dg: Option<f64>,
}

/// Divides each run's errors by the CERM test error of the same setting and
/// seed. Returns the normalized runs (sorted) and the number of runs left
/// out for lack of a CERM pair.
pub fn normalized_errors(runs: &[RunReport]) -> (Vec<NormalizedRun>, usize) {
    let cerm: HashMap<(&str, u64), f64> = runs
        .iter()
        .filter(|r| r.model == ModelKind::Cerm)
        .filter_map(|r| Some(((r.setting_id.as_deref()?, r.seed), r.test_mse?)))
        .filter(|(_, v)| *v > 0.0 && v.is_finite())
        .collect();
    let mut out = Vec::new();
    let mut unpaired = 0;
    for r in runs.iter().filter(|r| r.model != ModelKind::Classifier) {
        let Some(id) = r.setting_id.as_deref() else {
            unpaired += 1;
            continue;
        };
        let Some(&d) = cerm.get(&(id, r.seed)) else {
            unpaired += 1;
            continue;
        };
        out.push(NormalizedRun {
            setting_id: id.to_string(),
            model: r.model,
            seed: r.seed,
            mechanism: r.mechanism,
            target: r.target,
            train: r.train_mse.map(|v| v / d),
            test: r.test_mse.map(|v| v / d),
            dg: r.dg_mse.map(|v| v / d),
        });
    }
    out.sort_by(|a, b| (&a.setting_id, a.model, a.seed).cmp(&(&b.setting_id, b.model, b.seed)));
    (out, unpaired)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Dg,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Dg];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Dg => "dg",
        }
    }

    fn of(self, n: &NormalizedRun) -> Option<f64> {
        match self {
            Split::Train => n.train,
            Split::Test => n.test,
            Split::Dg => n.dg,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub model: ModelKind,
    pub mechanism: Mechanism,
    pub split: Split,
    pub median: f64,
    pub q95: f64,
    pub n: usize,
}

pub fn summarize(normalized: &[NormalizedRun]) -> Vec<ErrorSummary> {
    let mut groups: BTreeMap<(ModelKind, Mechanism, Split), Vec<f64>> = BTreeMap::new();
    for n in normalized {
        let Some(mech) = n.mechanism else { continue };
        for split in Split::ALL {
            if let Some(v) = split.of(n).filter(|v| v.is_finite()) {
                groups.entry((n.model, mech, split)).or_default().push(v);
            }
        }
    }
    groups
        .into_iter()
        .map(|((model, mechanism, split), mut v)| {
            v.sort_by(f64::total_cmp);
            ErrorSummary {
                model,
                mechanism,
                split,
                median: quantile_sorted(&v, 0.5),
                q95: quantile_sorted(&v, 0.95),
                n: v.len(),
            }
        })
        .collect()
}

/// Median of one (model, mechanism, split) cell.
pub fn median_of(summary: &[ErrorSummary], model: ModelKind, mechanism: Mechanism, split: Split) -> Option<f64> {
    summary
        .iter()
        .find(|s| s.model == model && s.mechanism == mechanism && s.split == split)
        .map(|s| s.median)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub detection: Detection,
    pub errors: Vec<ErrorSummary>,
    pub unpaired: usize,
}

pub fn aggregate(runs: &[RunReport]) -> (AggregateReport, Vec<NormalizedRun>) {
    let (normalized, unpaired) = normalized_errors(runs);
    (
        AggregateReport {
            runs: runs.len(),
            detection: detection_accuracy(runs),
            errors: summarize(&normalized),
            unpaired,
        },
        normalized,
    )
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv buffer: {e}")))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the report tables into `dir` and returns the written paths.
///
/// - `table1.csv`, `table1_q95.csv`: model rows, mechanism columns, DG
///   median (resp. 95% quantile) of the normalized error.
/// - `errors_summary.csv`: `model,mechanism,split,median,q95,n`.
/// - `errors_long.csv`: one normalized error per run and split.
/// - `detection_by_mechanism.csv`, `detection_by_target.csv`:
///   `model,<group>,hits,total,accuracy`.
/// - `aggregate.json`: the whole [`AggregateReport`].
pub fn write_report(dir: &Path, agg: &AggregateReport, normalized: &[NormalizedRun]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        write_atomic(&p, &bytes)?;
        written.push(p);
        Ok(())
    };

    let models: BTreeSet<ModelKind> = agg.errors.iter().map(|e| e.model).collect();
    let mut header = vec!["model"];
    header.extend(Mechanism::ALL.iter().map(|m| m.as_str()));
    for (name, pick) in [("table1.csv", false), ("table1_q95.csv", true)] {
        let rows = models.iter().map(|&m| {
            let mut row = vec![m.to_string()];
            row.extend(Mechanism::ALL.iter().map(|&mech| {
                opt(agg
                    .errors
                    .iter()
                    .find(|e| e.model == m && e.mechanism == mech && e.split == Split::Dg)
                    .map(|e| if pick { e.q95 } else { e.median }))
            }));
            row
        });
        put(name, csv_bytes(&header, rows)?)?;
    }

    put(
        "errors_summary.csv",
        csv_bytes(
            &["model", "mechanism", "split", "median", "q95", "n"],
            agg.errors.iter().map(|e| {
                vec![
                    e.model.to_string(),
                    e.mechanism.to_string(),
                    e.split.as_str().into(),
                    e.median.to_string(),
                    e.q95.to_string(),
                    e.n.to_string(),
                ]
            }),
        )?,
    )?;

    let long = normalized.iter().flat_map(|n| {
        Split::ALL.into_iter().filter_map(move |s| {
            s.of(n).map(|v| {
                vec![
                    n.setting_id.clone(),
                    n.model.to_string(),
                    n.seed.to_string(),
                    n.mechanism.map(|m| m.to_string()).unwrap_or_default(),
                    n.target.map(|t| format!("x{t}")).unwrap_or_default(),
                    s.as_str().into(),
                    v.to_string(),
                ]
            })
        })
    });
    put(
        "errors_long.csv",
        csv_bytes(
            &["setting_id", "model", "seed", "mechanism", "target", "split", "normalized_error"],
            long,
        )?,
    )?;

    for (name, group, rows) in [
        ("detection_by_mechanism.csv", "mechanism", &agg.detection.by_mechanism),
        ("detection_by_target.csv", "target", &agg.detection.by_target),
    ] {
        put(
            name,
            csv_bytes(
                &["model", group, "hits", "total", "accuracy"],
                rows.iter().map(|r| {
                    vec![
                        r.model.to_string(),
                        r.group.clone(),
                        r.hits.to_string(),
                        r.total.to_string(),
                        r.accuracy.to_string(),
                    ]
                }),
            )?,
        )?;
    }
    put("aggregate.json", serde_json::to_vec_pretty(agg)?)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(model: ModelKind, id: &str, mech: Mechanism, parents: &[usize], selected: Option<&[usize]>) -> RunReport {
        let mut r = RunReport::empty(&TrainConfig::desk(model));
        r.setting_id = Some(id.into());
        r.mechanism = Some(mech);
        r.target = Some(3);
        r.parents = Some(parents.to_vec());
        r.selected = selected.map(|s| s.to_vec());
        r
    }

    fn tiny_spec(dir: &Path) -> BenchmarkSpec {
        BenchmarkSpec {
            filter: SettingFilter::parse("mechanism=linear,intervention=do").unwrap(),
            settings: 2,
            models: vec![ModelKind::Erm, ModelKind::Cerm, ModelKind::Icp, ModelKind::AnmG],
            seeds: 1,
            workers: 1,
            out_dir: dir.to_path_buf(),
            samples_per_env: 64,
            base: Some(TrainConfig {
                epochs: 3,
                batch_size: 32,
                hidden: vec![4],
                gate_warmup: 1,
                n_train: 48,
                ..TrainConfig::desk(ModelKind::Erm)
            }),
            ..BenchmarkSpec::default()
        }
    }

    #[test]
    fn plan_has_every_triple_once() {
        let spec = BenchmarkSpec {
            filter: SettingFilter::parse("mechanism=linear").unwrap(),
            settings: 5,
            models: vec![ModelKind::AnmG, ModelKind::Erm, ModelKind::Cerm],
            seeds: 3,
            ..BenchmarkSpec::default()
        };
        let plan = spec.plan().unwrap();
        assert_eq!(plan.len(), 5 * 3 * 3);
        let paths: BTreeSet<_> = plan.iter().map(|j| j.report_path(Path::new("o"))).collect();
        assert_eq!(paths.len(), plan.len());
        assert_eq!(BenchmarkSpec::default().plan().unwrap().len(), 60 * 7);
        let dup = BenchmarkSpec {
            models: vec![ModelKind::Erm, ModelKind::Erm],
            ..BenchmarkSpec::default()
        };
        assert!(dup.plan().is_err());
    }

    #[test]
    fn detection_examples() {
        assert!(exact_hit(&[1, 2], &[2, 1]));
        assert!(!exact_hit(&[1], &[1, 2]));
        assert!(!exact_hit(&[1, 2, 5], &[1, 2]));
        let runs = vec![
            report(ModelKind::AnmG, "s0", Mechanism::Linear, &[1, 2], Some(&[1, 2])),
            report(ModelKind::AnmG, "s1", Mechanism::Linear, &[1, 2], Some(&[1])),
            report(ModelKind::AnmG, "s2", Mechanism::Relu, &[1, 2], Some(&[1, 2, 5])),
            report(ModelKind::Erm, "s0", Mechanism::Linear, &[1, 2], None),
        ];
        let mut no_truth = report(ModelKind::Icp, "s3", Mechanism::Linear, &[], Some(&[]));
        no_truth.parents = None;
        let mut all = runs.clone();
        all.push(no_truth);
        let d = detection_accuracy(&all);
        assert_eq!(d.excluded, 1);
        assert_eq!(d.by_mechanism.len(), 2);
        assert_eq!((d.by_mechanism[0].hits, d.by_mechanism[0].total), (1, 2));
        assert_eq!(d.by_mechanism[1].accuracy, 0.0);
        assert_eq!(d.by_target, vec![DetectionRow {
            model: ModelKind::AnmG,
            group: "x3".into(),
            hits: 1,
            total: 3,
            accuracy: 1.0 / 3.0,
        }]);
    }

    #[test]
    fn normalization_and_summary() {
        let mut runs = Vec::new();
        for (i, (cerm_test, anm_dg)) in [(2.0, 3.0), (1.0, 4.0), (4.0, 2.0)].into_iter().enumerate() {
            let id = format!("s{i}");
            let mut c = report(ModelKind::Cerm, &id, Mechanism::Linear, &[1], None);
            c.test_mse = Some(cerm_test);
            c.dg_mse = Some(cerm_test * 1.5);
            let mut a = report(ModelKind::Anm, &id, Mechanism::Linear, &[1], None);
            a.dg_mse = Some(anm_dg);
            runs.push(c);
            runs.push(a);
        }
        runs.push(report(ModelKind::Anm, "s9", Mechanism::Linear, &[1], None));
        let (agg, norm) = aggregate(&runs);
        assert_eq!(agg.unpaired, 1);
        assert_eq!(norm.len(), 6);
        let cerm_test = median_of(&agg.errors, ModelKind::Cerm, Mechanism::Linear, Split::Test).unwrap();
        assert_eq!(cerm_test, 1.0);
        // normalized ANM DG errors 1.5, 4, 0.5
        assert_eq!(median_of(&agg.errors, ModelKind::Anm, Mechanism::Linear, Split::Dg), Some(1.5));
        assert!(agg.errors.iter().all(|e| e.median <= e.q95));

        let mut shuffled = runs.clone();
        shuffled.reverse();
        shuffled.swap(0, 3);
        assert_eq!(aggregate(&shuffled), (agg, norm));
    }

    #[test]
    fn bench_is_resumable_and_worker_independent() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(dir.path());
        let first = run_benchmark(&spec, |_, _| {}).unwrap();
        assert!(first.failures.is_empty(), "{:?}", first.failures);
        assert_eq!((first.ran, first.reused), (8, 0));
        let second = run_benchmark(&spec, |_, _| {}).unwrap();
        assert_eq!((second.ran, second.reused), (0, 8));
        assert_eq!(first.reports, second.reports);

        let other = tempfile::tempdir().unwrap();
        let par = BenchmarkSpec {
            workers: 3,
            out_dir: other.path().to_path_buf(),
            ..spec.clone()
        };
        let third = run_benchmark(&par, |_, _| {}).unwrap();
        for (a, b) in first.reports.iter().zip(&third.reports) {
            assert!(a.same_metrics(b));
        }

        // a stale report for a different job is recomputed
        let job = &spec.plan().unwrap()[0];
        let mut stale = first.reports[1].clone();
        stale.model = ModelKind::Anm;
        write_atomic(&job.report_path(dir.path()), &serde_json::to_vec(&stale).unwrap()).unwrap();
        let fourth = run_benchmark(&spec, |_, _| {}).unwrap();
        assert_eq!((fourth.ran, fourth.reused), (1, 7));

        let (runs, skipped) = load_runs(dir.path()).unwrap();
        assert_eq!(runs.len(), 8);
        assert!(skipped.is_empty());
        let leftovers: Vec<_> = walk(dir.path()).into_iter().filter(|p| !p.to_string_lossy().ends_with(".json")).collect();
        assert!(leftovers.is_empty(), "{leftovers:?}");

        let (agg, norm) = aggregate(&runs);
        let out = dir.path().join("tables");
        let files = write_report(&out, &agg, &norm).unwrap();
        assert_eq!(files.len(), 7);
        let t1 = std::fs::read_to_string(out.join("table1.csv")).unwrap();
        let mut lines = t1.lines();
        assert_eq!(lines.next().unwrap(), "model,linear,tanhshrink,softplus,relu,mult_noise");
        assert_eq!(lines.count(), 4);
        let back: AggregateReport = serde_json::from_slice(&std::fs::read(out.join("aggregate.json")).unwrap()).unwrap();
        assert_eq!(back, agg);
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }
}
