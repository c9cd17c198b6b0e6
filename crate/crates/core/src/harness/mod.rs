//! Experiment orchestration: configuration, per-seed run loops, output files and
//! vanilla versus NAS comparisons.

pub mod analysis;
pub mod compare;
pub mod config;
pub mod io;
pub mod run;

use std::path::{Path, PathBuf};

pub use compare::{compare_runs, Comparison};
pub use config::{Profile, RunConfig};
pub use io::{load_run, RunManifest};
pub use run::{run_all, run_seed, SeedOutcome, SeedRun};

use crate::error::Result;

/// Result of [`run_sequence`].
#[derive(Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub outcomes: Vec<SeedOutcome>,
}

/// Run every seed and write the results under a fresh directory below `out`.
pub fn run_sequence(cfg: &RunConfig, out: &Path) -> Result<RunOutput> {
    let outcomes = run_all(cfg)?;
    let dir = io::fresh_output_dir(out)?;
    let manifest = io::write_run(&dir, cfg, &outcomes)?;
    Ok(RunOutput { dir, manifest, outcomes })
}

/// Result of [`compare_regimes`].
#[derive(Debug)]
pub struct CompareOutput {
    pub vanilla: RunOutput,
    pub nas: RunOutput,
    pub comparison: Option<Comparison>,
}

/// Run the vanilla and NAS variants of `cfg` and write both plus `comparison.json`.
pub fn compare_regimes(cfg: &RunConfig, out: &Path) -> Result<CompareOutput> {
    let dir = io::fresh_output_dir(out)?;
    let vanilla = run_sequence(&cfg.with_nas(false), &dir.join("vanilla"))?;
    let nas = run_sequence(&cfg.with_nas(true), &dir.join("nas"))?;
    let ok = |o: &RunOutput| o.outcomes.iter().filter_map(|r| r.as_ref().ok().cloned()).collect::<Vec<_>>();
    let (mut v, mut n) = (ok(&vanilla), ok(&nas));
    v.retain(|r| n.iter().any(|m| m.seed == r.seed));
    n.retain(|r| v.iter().any(|m| m.seed == r.seed));
    let comparison = if !v.is_empty() {
        let c = compare_runs(cfg, &v, &n)?;
        let text = serde_json::to_string_pretty(&c).map_err(|e| crate::Error::Format(e.to_string()))?;
        std::fs::write(dir.join("comparison.json"), text + "\n")?;
        Some(c)
    } else {
        None
    };
    Ok(CompareOutput { vanilla, nas, comparison })
}
