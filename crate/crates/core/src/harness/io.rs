use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::analysis::{norm_score_spearman, recursion_residuals, scores, uses_whitened};
use super::config::RunConfig;
use super::run::{Checkpoint, ProbeSample, SeedFailure, SeedOutcome, SeedRun};
use crate::dynamics::{collapse_point, TraceRecord};
use crate::error::{Error, Result};
use crate::nas::AnchorSpec;

pub const SCHEMA_VERSION: u32 = 1;

pub const TRACE_HEADER: [&str; 9] = [
    "n",
    "w_norm_sq",
    "r_n",
    "v_old_norm_sq",
    "v_new_norm_sq",
    "v_new_unconstrained_norm_sq",
    "key_norm_sq",
    "key_c_norm_sq",
    "w_tilde_norm_sq",
];

const CHECKPOINT_HEADER: [&str; 10] = [
    "n",
    "w_norm_sq",
    "w_tilde_norm_sq",
    "r_n",
    "efficacy",
    "generalization",
    "specificity",
    "score",
    "drift",
    "dispersion",
];

const PROBE_HEADER: [&str; 8] = [
    "n",
    "w_norm_sq",
    "w_tilde_norm_sq",
    "v_old_norm_sq",
    "v_new_norm_sq",
    "v_new_unconstrained_norm_sq",
    "key_norm_sq",
    "key_c_norm_sq",
];

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn write_rows<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Write a trace; floats use the shortest representation that round-trips.
pub fn write_trace(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    write_rows(
        path,
        &TRACE_HEADER,
        trace.iter().map(|r| {
            vec![
                r.n.to_string(),
                r.w_norm_sq.to_string(),
                r.r_n.to_string(),
                r.v_old_norm_sq.to_string(),
                r.v_new_norm_sq.to_string(),
                r.v_new_unconstrained_norm_sq.to_string(),
                r.key_norm_sq.to_string(),
                r.key_c_norm_sq.to_string(),
                r.w_tilde_norm_sq.to_string(),
            ]
        }),
    )
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let found = r.headers().map_err(csv_err)?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::Format(format!(
            "{}: header {:?} does not match {:?}",
            path.display(),
            found.iter().collect::<Vec<_>>(),
            header
        )));
    }
    r.records().map(|rec| rec.map_err(csv_err)).collect()
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<T> {
    let line = rec.position().map_or(0, |p| p.line());
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("{} line {line}: bad field {}", path.display(), i + 1)))
}

fn opt_field(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<Option<f64>> {
    match rec.get(i) {
        Some("") => Ok(None),
        _ => field(rec, i, path).map(Some),
    }
}

/// Read a trace written by [`write_trace`], checking the header and every field.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    read_rows(path, &TRACE_HEADER)?
        .iter()
        .map(|rec| {
            let f = |i| field::<f64>(rec, i, path);
            let r = TraceRecord {
                n: field(rec, 0, path)?,
                w_norm_sq: f(1)?,
                r_n: f(2)?,
                v_old_norm_sq: f(3)?,
                v_new_norm_sq: f(4)?,
                v_new_unconstrained_norm_sq: f(5)?,
                key_norm_sq: f(6)?,
                key_c_norm_sq: f(7)?,
                w_tilde_norm_sq: f(8)?,
            };
            if [r.w_norm_sq, r.r_n, r.v_old_norm_sq, r.v_new_norm_sq, r.key_norm_sq, r.key_c_norm_sq, r.w_tilde_norm_sq]
                .iter()
                .any(|x| !x.is_finite())
            {
                return Err(Error::Format(format!("{}: non-finite value at step {}", path.display(), r.n)));
            }
            Ok(r)
        })
        .collect()
}

pub fn write_checkpoints(path: &Path, checkpoints: &[Checkpoint]) -> Result<()> {
    write_rows(
        path,
        &CHECKPOINT_HEADER,
        checkpoints.iter().map(|c| {
            vec![
                c.n.to_string(),
                c.w_norm_sq.to_string(),
                c.w_tilde_norm_sq.to_string(),
                c.r_n.to_string(),
                opt(c.efficacy),
                opt(c.generalization),
                c.specificity.to_string(),
                opt(c.score),
                c.drift.to_string(),
                c.dispersion.to_string(),
            ]
        }),
    )
}

pub fn read_checkpoints(path: &Path) -> Result<Vec<Checkpoint>> {
    read_rows(path, &CHECKPOINT_HEADER)?
        .iter()
        .map(|rec| {
            Ok(Checkpoint {
                n: field(rec, 0, path)?,
                w_norm_sq: field(rec, 1, path)?,
                w_tilde_norm_sq: field(rec, 2, path)?,
                r_n: field(rec, 3, path)?,
                efficacy: opt_field(rec, 4, path)?,
                generalization: opt_field(rec, 5, path)?,
                specificity: field(rec, 6, path)?,
                score: opt_field(rec, 7, path)?,
                drift: field(rec, 8, path)?,
                dispersion: field(rec, 9, path)?,
            })
        })
        .collect()
}

pub fn write_probes(path: &Path, probes: &[ProbeSample]) -> Result<()> {
    write_rows(
        path,
        &PROBE_HEADER,
        probes.iter().map(|p| {
            vec![
                p.n.to_string(),
                p.w_norm_sq.to_string(),
                p.w_tilde_norm_sq.to_string(),
                p.v_old_norm_sq.to_string(),
                p.v_new_norm_sq.to_string(),
                p.v_new_unconstrained_norm_sq.to_string(),
                p.key_norm_sq.to_string(),
                p.key_c_norm_sq.to_string(),
            ]
        }),
    )
}

pub fn read_probes(path: &Path) -> Result<Vec<ProbeSample>> {
    read_rows(path, &PROBE_HEADER)?
        .iter()
        .map(|rec| {
            Ok(ProbeSample {
                n: field(rec, 0, path)?,
                w_norm_sq: field(rec, 1, path)?,
                w_tilde_norm_sq: field(rec, 2, path)?,
                v_old_norm_sq: field(rec, 3, path)?,
                v_new_norm_sq: field(rec, 4, path)?,
                v_new_unconstrained_norm_sq: field(rec, 5, path)?,
                key_norm_sq: field(rec, 6, path)?,
                key_c_norm_sq: field(rec, 7, path)?,
            })
        })
        .collect()
}

/// `base` itself if it does not exist or is empty, otherwise a fresh `base/run-NNN`.
pub fn fresh_output_dir(base: &Path) -> Result<PathBuf> {
    let is_empty = |p: &Path| fs::read_dir(p).map(|mut d| d.next().is_none()).unwrap_or(false);
    if !base.exists() || is_empty(base) {
        fs::create_dir_all(base)?;
        return Ok(base.to_path_buf());
    }
    for i in 1.. {
        let candidate = base.join(format!("run-{i:03}"));
        if fs::create_dir(&candidate).is_ok() {
            return Ok(candidate);
        }
        if !candidate.exists() {
            return Err(Error::Io(std::io::Error::other(format!(
                "cannot create {}",
                candidate.display()
            ))));
        }
    }
    unreachable!()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub seed: u64,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probes: Option<String>,
    pub w0_norm_sq: Option<f64>,
    pub w0_tilde_norm_sq: Option<f64>,
    pub anchor: Option<AnchorSpec>,
    pub per_edit_seconds_mean: Option<f64>,
    pub per_edit_seconds_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub software_version: String,
    pub config_hash: String,
    pub created_unix: u64,
    pub nas_enabled: bool,
    pub pilot_streams: String,
    pub seeds: Vec<SeedEntry>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported schema version {}", m.schema_version)));
        }
        Ok(m)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SeedEntry> {
        self.seeds.iter().filter(|s| s.status != "ok")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub final_r_n: f64,
    pub collapse_point: Option<usize>,
    pub norm_score_spearman: Option<f64>,
    pub max_recursion_residual: f64,
    pub max_recursion_residual_whitened: f64,
    pub max_constraint_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub config_hash: String,
    pub whitened: bool,
    pub seeds: Vec<SeedSummary>,
    pub failures: Vec<SeedFailure>,
}

pub fn summarize(cfg: &RunConfig, outcomes: &[SeedOutcome]) -> Result<RunSummary> {
    let ok: Vec<SeedRun> = outcomes.iter().filter_map(|o| o.as_ref().ok().cloned()).collect();
    let seeds = ok
        .iter()
        .map(|run| {
            let (plain, whitened) = recursion_residuals(run);
            SeedSummary {
                seed: run.seed,
                final_r_n: run.trace.last().map_or(1.0, |r| r.r_n),
                collapse_point: collapse_point(&scores(&run.checkpoints), cfg.analysis.cp_threshold),
                norm_score_spearman: norm_score_spearman(&run.checkpoints),
                max_recursion_residual: plain,
                max_recursion_residual_whitened: whitened,
                max_constraint_residual: run.max_constraint_residual,
            }
        })
        .collect();
    Ok(RunSummary {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash()?,
        whitened: uses_whitened(&ok),
        seeds,
        failures: outcomes.iter().filter_map(|o| o.as_ref().err().cloned()).collect(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Write config, per-seed files, summary and manifest into `dir`.
pub fn write_run(dir: &Path, cfg: &RunConfig, outcomes: &[SeedOutcome]) -> Result<RunManifest> {
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let mut entries = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        let entry = match outcome {
            Ok(run) => {
                let trace = format!("trace_seed{}.csv", run.seed);
                let checkpoints = format!("checkpoints_seed{}.csv", run.seed);
                let probes = format!("probes_seed{}.csv", run.seed);
                write_trace(&dir.join(&trace), &run.trace)?;
                write_checkpoints(&dir.join(&checkpoints), &run.checkpoints)?;
                write_probes(&dir.join(&probes), &run.probes)?;
                SeedEntry {
                    seed: run.seed,
                    status: "ok".into(),
                    error: None,
                    trace: Some(trace),
                    checkpoints: Some(checkpoints),
                    probes: Some(probes),
                    w0_norm_sq: Some(run.w0_norm_sq),
                    w0_tilde_norm_sq: Some(run.w0_tilde_norm_sq),
                    anchor: run.anchor.clone(),
                    per_edit_seconds_mean: Some(run.per_edit_seconds.0),
                    per_edit_seconds_std: Some(run.per_edit_seconds.1),
                }
            }
            Err(f) => SeedEntry {
                seed: f.seed,
                status: "failed".into(),
                error: Some(f.error.clone()),
                trace: None,
                checkpoints: None,
                probes: None,
                w0_norm_sq: None,
                w0_tilde_norm_sq: None,
                anchor: None,
                per_edit_seconds_mean: None,
                per_edit_seconds_std: None,
            },
        };
        entries.push(entry);
    }
    write_json(&dir.join("summary.json"), &summarize(cfg, outcomes)?)?;
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        software_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash()?,
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        nas_enabled: cfg.nas.enabled,
        pilot_streams: "pilot keys and pilot value noise drawn from dedicated per-seed streams".into(),
        seeds: entries,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Reload the successful runs recorded in a run directory.
pub fn load_run(dir: &Path) -> Result<(RunConfig, RunManifest, Vec<SeedRun>)> {
    let manifest = RunManifest::read(dir)?;
    let cfg = RunConfig::load(&dir.join("config.toml"))?;
    let mut runs = Vec::new();
    for entry in manifest.seeds.iter().filter(|s| s.status == "ok") {
        let path = |name: &Option<String>| {
            name.as_ref()
                .map(|n| dir.join(n))
                .ok_or_else(|| Error::Format(format!("seed {} has no file entry", entry.seed)))
        };
        let missing = |what: &str| Error::Format(format!("seed {} lacks {what}", entry.seed));
        runs.push(SeedRun {
            seed: entry.seed,
            nas_enabled: manifest.nas_enabled,
            w0_norm_sq: entry.w0_norm_sq.ok_or_else(|| missing("w0_norm_sq"))?,
            w0_tilde_norm_sq: entry.w0_tilde_norm_sq.ok_or_else(|| missing("w0_tilde_norm_sq"))?,
            anchor: entry.anchor.clone(),
            trace: read_trace(&path(&entry.trace)?)?,
            checkpoints: read_checkpoints(&path(&entry.checkpoints)?)?,
            probes: read_probes(&path(&entry.probes)?)?,
            max_constraint_residual: f64::NAN,
            per_edit_seconds: (
                entry.per_edit_seconds_mean.unwrap_or(f64::NAN),
                entry.per_edit_seconds_std.unwrap_or(f64::NAN),
            ),
        });
    }
    Ok((cfg, manifest, runs))
}
