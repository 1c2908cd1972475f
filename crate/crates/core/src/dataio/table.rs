//! Dataset CSV files with a JSON metadata sidecar.
//!
//! The CSV has header `env,x1,x2,x3,x4,x5,x6` and one row per sample. Floats
//! are written in shortest round-trip form, so reading back is bit-exact.
//! The sidecar lives next to the CSV with a `.json` extension and holds the
//! [`SettingMeta`] of the setting that generated the data.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scm::{var_name, Dataset, EnvDataset, SettingMeta, NUM_VARS};
use crate::tensor::Tensor;

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

fn header() -> Vec<String> {
    std::iter::once("env".to_string()).chain((0..NUM_VARS).map(var_name)).collect()
}

/// Writes `ds` to `path` and, when metadata is present, the sidecar.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header())?;
    for env in &ds.envs {
        if env.samples.cols() != NUM_VARS {
            return Err(Error::invalid(format!(
                "environment {} has {} columns, expected {NUM_VARS}",
                env.env_id,
                env.samples.cols()
            )));
        }
        for i in 0..env.samples.rows() {
            let mut rec = vec![env.env_id.to_string()];
            rec.extend(env.samples.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    if let Some(meta) = &ds.meta {
        std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(meta)?)?;
    }
    Ok(())
}

/// Reads a dataset CSV. Without a sidecar, `target` and `parents` must be
/// supplied by the caller through [`read_dataset_with`]; here they default to
/// the sidecar values and loading fails if it is missing.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let (envs, meta) = read_parts(path)?;
    let meta = meta.ok_or_else(|| Error::Parse {
        path: sidecar_path(path),
        line: 0,
        msg: "sidecar metadata missing; use read_dataset_with to supply target and parents".into(),
    })?;
    Ok(Dataset {
        target: meta.target - 1,
        parents: meta.parents.iter().map(|p| p - 1).collect(),
        meta: Some(meta),
        envs,
    })
}

/// Reads a dataset CSV; metadata comes from the sidecar when present,
/// otherwise `target`/`parents` (0-based) are used and `meta` is `None`.
pub fn read_dataset_with(path: &Path, target: usize, parents: &[usize]) -> Result<Dataset> {
    let (envs, meta) = read_parts(path)?;
    Ok(match meta {
        Some(m) => Dataset {
            target: m.target - 1,
            parents: m.parents.iter().map(|p| p - 1).collect(),
            meta: Some(m),
            envs,
        },
        None => Dataset {
            target,
            parents: parents.to_vec(),
            meta: None,
            envs,
        },
    })
}

fn read_parts(path: &Path) -> Result<(Vec<EnvDataset>, Option<SettingMeta>)> {
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut r = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let found: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if found != header() {
        return Err(parse_err(1, format!("header {found:?}, expected {:?}", header())));
    }
    let mut rows: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != NUM_VARS + 1 {
            return Err(parse_err(line, format!("{} fields, expected {}", rec.len(), NUM_VARS + 1)));
        }
        let env: u8 = rec[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad environment id '{}'", &rec[0])))?;
        let buf = rows.entry(env).or_default();
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("bad number '{field}'")))?;
            buf.push(v);
        }
    }
    let envs = rows
        .into_iter()
        .map(|(env_id, data)| {
            let n = data.len() / NUM_VARS;
            Ok(EnvDataset {
                env_id,
                samples: Tensor::new(n, NUM_VARS, data)?,
            })
        })
        .collect::<Result<_>>()?;
    let side = sidecar_path(path);
    let meta = if side.exists() {
        let m: SettingMeta = serde_json::from_slice(&std::fs::read(&side)?)?;
        if m.target == 0 || m.target > NUM_VARS {
            return Err(Error::Parse {
                path: side,
                line: 0,
                msg: format!("target x{} out of range", m.target),
            });
        }
        Some(m)
    } else {
        None
    };
    Ok((envs, meta))
}
