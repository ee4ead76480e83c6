//! File formats: model and ensemble JSON, snapshot and trajectory CSV with
//! JSON sidecar manifests, and the closed-loop trace CSV.
//!
//! Snapshot CSV layout: one pair per row, the lagged observation columns
//! suffixed `_lag`. Trajectory CSV layout: time, value columns, control
//! (empty on the final row). Trace CSV layout: t, applied u, observation
//! entries, stage cost, window cost, solve seconds, with the terminal sample
//! carrying empty control and solve fields.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::edmd::{KoopmanModel, SnapshotSet};
use crate::error::{Error, Result};
use crate::krom::{BilinearModel, LocalizedBilinear, SwitchedBank};
use crate::mpc::ClosedLoopRun;
use crate::plant::{Trajectory, TrajectoryKind};

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    dictionary: Dictionary,
    lag_time_h: f64,
    control_value: f64,
    /// Row-major k*k entries.
    u_transpose: Vec<f64>,
    sample_count_m: usize,
}

pub fn write_model(path: &Path, model: &KoopmanModel) -> Result<()> {
    let k = model.lift_dim();
    let mut rows = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            rows.push(model.u_transpose()[(i, j)]);
        }
    }
    let file = ModelFile {
        dictionary: model.dict().clone(),
        lag_time_h: model.lag_time_h(),
        control_value: model.control_value(),
        u_transpose: rows,
        sample_count_m: model.sample_count(),
    };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<KoopmanModel> {
    let file: ModelFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    let k = file.dictionary.size();
    if file.u_transpose.len() != k * k {
        return Err(Error::Dimension {
            what: "model operator entries",
            expected: k * k,
            got: file.u_transpose.len(),
        });
    }
    let u_t = DMatrix::from_row_slice(k, k, &file.u_transpose);
    KoopmanModel::new(
        file.dictionary,
        file.lag_time_h,
        file.control_value,
        u_t,
        file.sample_count_m,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleKind {
    Switched,
    Bilinear,
    Localized,
}

#[derive(Debug, Serialize, Deserialize)]
struct EnsembleFile {
    kind: EnsembleKind,
    /// Member model files, relative to the ensemble file's directory.
    models: Vec<PathBuf>,
}

/// A loaded ensemble in one of the three surrogate forms.
pub enum Ensemble {
    Switched(SwitchedBank),
    Bilinear(BilinearModel),
    Localized(LocalizedBilinear),
}

impl Ensemble {
    pub fn kind(&self) -> EnsembleKind {
        match self {
            Ensemble::Switched(_) => EnsembleKind::Switched,
            Ensemble::Bilinear(_) => EnsembleKind::Bilinear,
            Ensemble::Localized(_) => EnsembleKind::Localized,
        }
    }
}

pub fn write_ensemble(path: &Path, kind: EnsembleKind, model_files: &[PathBuf]) -> Result<()> {
    if kind == EnsembleKind::Bilinear && model_files.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "a bilinear ensemble lists exactly two member models, got {}",
            model_files.len()
        )));
    }
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let rel: Vec<PathBuf> = model_files
        .iter()
        .map(|p| {
            p.strip_prefix(base)
                .map(PathBuf::from)
                .unwrap_or_else(|_| p.clone())
        })
        .collect();
    let file = EnsembleFile { kind, models: rel };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn read_ensemble(path: &Path) -> Result<Ensemble> {
    let file: EnsembleFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let models: Vec<KoopmanModel> = file
        .models
        .iter()
        .map(|rel| read_model(&base.join(rel)))
        .collect::<Result<_>>()?;
    match file.kind {
        EnsembleKind::Switched => Ok(Ensemble::Switched(SwitchedBank::new(models)?)),
        EnsembleKind::Bilinear => {
            if models.len() != 2 {
                return Err(Error::InvalidArgument(format!(
                    "a bilinear ensemble lists exactly two member models, got {}",
                    models.len()
                )));
            }
            Ok(Ensemble::Bilinear(BilinearModel::from_anchors(
                &models[0], &models[1],
            )?))
        }
        EnsembleKind::Localized => Ok(Ensemble::Localized(LocalizedBilinear::from_bank(
            &SwitchedBank::new(models)?,
        )?)),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotManifest {
    pub lag_time_h: f64,
    pub control_value: f64,
    pub obs_names: Vec<String>,
}

/// Default sidecar path: `snapshots.csv` -> `snapshots.json`.
pub fn manifest_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

pub fn write_snapshots(csv_path: &Path, data: &SnapshotSet, obs_names: &[String]) -> Result<()> {
    let q = data.obs_dim();
    if obs_names.len() != q {
        return Err(Error::Dimension {
            what: "observation names",
            expected: q,
            got: obs_names.len(),
        });
    }
    let manifest = SnapshotManifest {
        lag_time_h: data.lag_time_h(),
        control_value: data.control_value(),
        obs_names: obs_names.to_vec(),
    };
    fs::write(
        manifest_path(csv_path),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    let mut writer = csv::Writer::from_path(csv_path)?;
    let mut header: Vec<String> = obs_names.to_vec();
    header.extend(obs_names.iter().map(|n| format!("{n}_lag")));
    writer.write_record(&header)?;
    for c in 0..data.len() {
        let mut record: Vec<String> = Vec::with_capacity(2 * q);
        for r in 0..q {
            record.push(data.z()[(r, c)].to_string());
        }
        for r in 0..q {
            record.push(data.ztilde()[(r, c)].to_string());
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_snapshots(csv_path: &Path) -> Result<(SnapshotSet, SnapshotManifest)> {
    let manifest: SnapshotManifest =
        serde_json::from_str(&fs::read_to_string(manifest_path(csv_path))?)?;
    let q = manifest.obs_names.len();
    let mut reader = csv::Reader::from_path(csv_path)?;
    let header = reader.headers()?.clone();
    if header.len() != 2 * q {
        return Err(Error::Dimension {
            what: "snapshot columns",
            expected: 2 * q,
            got: header.len(),
        });
    }
    let mut z_cols: Vec<DVector<f64>> = Vec::new();
    let mut zt_cols: Vec<DVector<f64>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let values: Vec<f64> = record
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("bad number {s:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        z_cols.push(DVector::from_column_slice(&values[..q]));
        zt_cols.push(DVector::from_column_slice(&values[q..]));
    }
    let pairs: Vec<_> = z_cols.into_iter().zip(zt_cols).collect();
    let set = SnapshotSet::from_pairs(manifest.lag_time_h, manifest.control_value, &pairs)?;
    Ok((set, manifest))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryManifest {
    pub kind: TrajectoryKind,
    pub names: Vec<String>,
    pub dt_sample: f64,
}

pub fn write_trajectory(csv_path: &Path, traj: &Trajectory, names: &[String]) -> Result<()> {
    if traj.is_empty() {
        return Err(Error::InvalidArgument(
            "refusing to write an empty trajectory".into(),
        ));
    }
    let width = traj.values[0].len();
    if names.len() != width {
        return Err(Error::Dimension {
            what: "value names",
            expected: width,
            got: names.len(),
        });
    }
    let manifest = TrajectoryManifest {
        kind: traj.kind,
        names: names.to_vec(),
        dt_sample: traj.dt_sample()?,
    };
    fs::write(
        manifest_path(csv_path),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    let mut writer = csv::Writer::from_path(csv_path)?;
    let mut header = vec!["time".to_string()];
    header.extend(names.iter().cloned());
    header.push("control".to_string());
    writer.write_record(&header)?;
    for (i, (t, v)) in traj.times.iter().zip(&traj.values).enumerate() {
        let mut record = vec![t.to_string()];
        record.extend(v.iter().map(|x| x.to_string()));
        record.push(match traj.controls.get(i) {
            Some(c) => c.to_string(),
            None => String::new(), // final sample has no interval after it
        });
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_trajectory(csv_path: &Path) -> Result<(Trajectory, TrajectoryManifest)> {
    let manifest: TrajectoryManifest =
        serde_json::from_str(&fs::read_to_string(manifest_path(csv_path))?)?;
    let width = manifest.names.len();
    let mut reader = csv::Reader::from_path(csv_path)?;
    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut controls = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != width + 2 {
            return Err(Error::Dimension {
                what: "trajectory columns",
                expected: width + 2,
                got: record.len(),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("bad number {s:?}: {e}")))
        };
        times.push(parse(&record[0])?);
        values.push(DVector::from_fn(width, |i, _| {
            record[1 + i].parse::<f64>().unwrap_or(f64::NAN)
        }));
        let control_field = &record[width + 1];
        if !control_field.is_empty() {
            controls.push(parse(control_field)?);
        }
    }
    let traj = Trajectory::new(times, values, controls, manifest.kind)?;
    Ok((traj, manifest))
}

/// Writes the closed-loop trace: per-step rows plus a terminal sample row
/// with empty control and solve fields.
pub fn write_trace(csv_path: &Path, run: &ClosedLoopRun, obs_names: &[String]) -> Result<()> {
    let mut writer = csv::Writer::from_path(csv_path)?;
    let mut header = vec!["time".to_string(), "applied_u".to_string()];
    header.extend(obs_names.iter().cloned());
    header.push("stage_cost".to_string());
    header.push("window_cost".to_string());
    header.push("solve_seconds".to_string());
    writer.write_record(&header)?;
    for i in 0..run.times.len() {
        let mut record = vec![run.times[i].to_string()];
        match run.steps.get(i) {
            Some(step) => record.push(step.applied_control.to_string()),
            None => record.push(String::new()),
        }
        record.extend(run.observations[i].iter().map(|x| x.to_string()));
        record.push(run.stage_costs[i].to_string());
        record.push(run.window_costs[i].to_string());
        match run.steps.get(i) {
            Some(step) => record.push(step.solve_seconds.to_string()),
            None => record.push(String::new()),
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Parsed trace row set used by the audit path.
#[derive(Debug, Clone)]
pub struct TraceData {
    pub times: Vec<f64>,
    pub applied: Vec<Option<f64>>,
    pub observations: Vec<Vec<f64>>,
    pub stage_costs: Vec<f64>,
    pub window_costs: Vec<f64>,
    pub solve_seconds: Vec<Option<f64>>,
}

pub fn read_trace(csv_path: &Path) -> Result<TraceData> {
    let mut reader = csv::Reader::from_path(csv_path)?;
    let header = reader.headers()?.clone();
    if header.len() < 5 {
        return Err(Error::InvalidArgument("trace has too few columns".into()));
    }
    let obs_width = header.len() - 5;
    let mut data = TraceData {
        times: Vec::new(),
        applied: Vec::new(),
        observations: Vec::new(),
        stage_costs: Vec::new(),
        window_costs: Vec::new(),
        solve_seconds: Vec::new(),
    };
    for record in reader.records() {
        let record = record?;
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("bad number {s:?}: {e}")))
        };
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                parse(s).map(Some)
            }
        };
        data.times.push(parse(&record[0])?);
        data.applied.push(opt(&record[1])?);
        data.observations.push(
            (0..obs_width)
                .map(|i| parse(&record[2 + i]))
                .collect::<Result<_>>()?,
        );
        data.stage_costs.push(parse(&record[2 + obs_width])?);
        data.window_costs.push(parse(&record[3 + obs_width])?);
        data.solve_seconds.push(opt(&record[4 + obs_width])?);
    }
    Ok(data)
}
