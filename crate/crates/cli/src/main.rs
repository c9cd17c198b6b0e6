use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nas_core::dynamics::mean_se;
use nas_core::harness::analysis::{mean_anchor, recursion_residuals};
use nas_core::harness::run::SharedModels;
use nas_core::harness::compare::regime_fit;
use nas_core::harness::{compare_regimes, load_run, run_sequence, Profile, RunConfig};
use nas_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_VERIFY: u8 = 4;

/// Bound on the relative residual of the norm recursion checked by `verify`.
const RECURSION_TOL: f64 = 1e-8;

#[derive(Parser)]
#[command(name = "nas-sim", version, about = "Sequential rank-one editing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Debug,
    Fast,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; a fresh subdirectory is used if it already has content.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seeds 0..N instead of the configured list.
    #[arg(long)]
    seeds: Option<u64>,
    /// Norm-anchor scaling on or off.
    #[arg(long, value_enum)]
    nas: Option<Toggle>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a configuration.
    Run(RunArgs),
    /// Run the vanilla and NAS variants of a configuration and compare them.
    Compare(RunArgs),
    /// Check the norm recursion on the traces of a run directory.
    Verify { dir: PathBuf },
    /// Fit the value-norm laws of a run directory and predict its trajectory.
    Fit {
        dir: PathBuf,
        /// Also write the fit as JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-checkpoint aggregates across seeds as CSV.
    Report { dir: PathBuf },
}

fn load_config(args: &RunArgs) -> nas_core::Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(n) = args.seeds {
        cfg.seeds = (0..n).collect();
    }
    if let Some(nas) = args.nas {
        cfg.nas.enabled = matches!(nas, Toggle::On);
    }
    if let Some(p) = args.profile {
        cfg.profile = match p {
            ProfileArg::Debug => Profile::Debug,
            ProfileArg::Fast => Profile::Fast,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(args: &RunArgs, cfg: &RunConfig) -> PathBuf {
    args.out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_NUMERIC })
}

fn report_failures(failed: usize) -> ExitCode {
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        eprintln!("{failed} seed(s) failed");
        ExitCode::from(EXIT_NUMERIC)
    }
}

fn cmd_run(args: &RunArgs) -> nas_core::Result<ExitCode> {
    let cfg = load_config(args)?;
    let out = run_sequence(&cfg, &out_dir(args, &cfg))?;
    println!("wrote {}", out.dir.display());
    for entry in &out.manifest.seeds {
        match &entry.error {
            None => println!("seed {}: ok", entry.seed),
            Some(e) => println!("seed {}: failed: {e}", entry.seed),
        }
    }
    Ok(report_failures(out.manifest.failures().count()))
}

fn cmd_compare(args: &RunArgs) -> nas_core::Result<ExitCode> {
    let cfg = load_config(args)?;
    let out = compare_regimes(&cfg, &out_dir(args, &cfg))?;
    println!("vanilla: {}", out.vanilla.dir.display());
    println!("nas:     {}", out.nas.dir.display());
    if let Some(c) = &out.comparison {
        println!("seed,cp_vanilla,cp_nas,ratio");
        for p in &c.collapse {
            let show = |x: Option<usize>| x.map_or("none".to_string(), |v| v.to_string());
            let ratio = p.ratio.map_or("none".to_string(), |r| format!("{r:.3}"));
            println!("{},{},{},{}", p.seed, show(p.vanilla), show(p.nas), ratio);
        }
        println!(
            "nas not earlier in {}/{} pairs; median CP ratio {}",
            c.nas_not_earlier,
            c.collapse.len(),
            c.median_cp_ratio.map_or("none".into(), |r| format!("{r:.3}"))
        );
        for e in &c.fit_errors {
            println!("fit error: {e}");
        }
    }
    let failed = out.vanilla.manifest.failures().count() + out.nas.manifest.failures().count();
    Ok(report_failures(failed))
}

fn cmd_verify(dir: &Path) -> nas_core::Result<ExitCode> {
    let (cfg, manifest, runs) = match load_run(dir) {
        Err(e @ Error::Format(_)) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(EXIT_VERIFY));
        }
        other => other?,
    };
    // C = I makes both identities exact, so both are checked.
    let whitened = !SharedModels::build(&cfg)?.second_moment().is_identity();
    let mut ok = manifest.failures().count() == 0;
    for entry in manifest.failures() {
        println!("seed {}: no trace ({})", entry.seed, entry.error.as_deref().unwrap_or("failed"));
    }
    println!("seed,plain_residual,whitened_residual,checked,status");
    for run in &runs {
        let (plain, tilde) = recursion_residuals(run);
        let checked = if whitened { tilde } else { plain.max(tilde) };
        let pass = checked <= RECURSION_TOL;
        ok &= pass;
        println!(
            "{},{plain:e},{tilde:e},{},{}",
            run.seed,
            if whitened { "whitened" } else { "both" },
            if pass { "pass" } else { "FAIL" }
        );
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(EXIT_VERIFY) })
}

fn cmd_fit(dir: &Path, out: Option<&Path>) -> nas_core::Result<ExitCode> {
    let (cfg, manifest, runs) = load_run(dir)?;
    let anchor = if manifest.nas_enabled { mean_anchor(&runs) } else { None };
    let fit = regime_fit(&runs, &cfg, anchor)?;
    let text = serde_json::to_string_pretty(&fit).map_err(|e| Error::Format(e.to_string()))?;
    if let Some(path) = out {
        std::fs::write(path, format!("{text}\n"))?;
    }
    println!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(dir: &Path) -> nas_core::Result<ExitCode> {
    let (_, _, runs) = load_run(dir)?;
    let Some(first) = runs.first() else {
        return Err(Error::InsufficientData("run directory has no successful seeds".into()));
    };
    println!("n,seeds,w_norm_sq_mean,w_norm_sq_se,r_n_mean,r_n_se,score_mean,score_se,drift_mean,drift_se");
    for (i, cp) in first.checkpoints.iter().enumerate() {
        let column = |f: &dyn Fn(&nas_core::harness::run::Checkpoint) -> Option<f64>| -> Vec<f64> {
            runs.iter().filter_map(|r| r.checkpoints.get(i).and_then(f)).collect()
        };
        let cell = |v: Vec<f64>| {
            if v.is_empty() {
                ",".to_string()
            } else {
                let (m, se) = mean_se(&v);
                format!("{m},{se}")
            }
        };
        println!(
            "{},{},{},{},{},{}",
            cp.n,
            runs.len(),
            cell(column(&|c| Some(c.w_norm_sq))),
            cell(column(&|c| Some(c.r_n))),
            cell(column(&|c| c.score)),
            cell(column(&|c| Some(c.drift))),
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Verify { dir } => cmd_verify(dir),
        Command::Fit { dir, out } => cmd_fit(dir, out.as_deref()),
        Command::Report { dir } => cmd_report(dir),
    };
    result.unwrap_or_else(|e| fail(&e))
}
