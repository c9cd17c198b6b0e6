//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use nas_core::dynamics::{fit_value_norm_laws, mean_se, ols, LawFitOptions};
use nas_core::editor::{init_weights, EditorState};
use nas_core::harness::analysis::{
    collapse_pairs, compare_trajectory, drift_at, fit_runs, mean_anchor, median, nas_not_earlier,
    norm_score_spearman, probe_batch_means, recursion_residuals,
};
use nas_core::harness::io::{read_trace, TRACE_HEADER};
use nas_core::harness::run::{require_all, run_seed, SharedModels};
use nas_core::harness::{run_all, run_sequence, RunConfig, SeedRun};
use nas_core::linalg::{frob_inner, frob_norm_sq, outer, outer_product_norm_sq};
use nas_core::nas::estimate_anchor;
use nas_core::streams::{stream_rng, SimRng, Stream};

const EXACT_TOL: f64 = 1e-8;

type Outcome = Result<String, String>;

fn divergent_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/divergent.toml");
    RunConfig::load(&path).expect("divergent config loads")
}

struct Divergent {
    cfg: RunConfig,
    vanilla: Vec<SeedRun>,
    nas: Vec<SeedRun>,
}

fn divergent() -> &'static Divergent {
    static CELL: OnceLock<Divergent> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = divergent_config();
        let vanilla = require_all(run_all(&cfg.with_nas(false)).unwrap()).unwrap();
        let nas = require_all(run_all(&cfg.with_nas(true)).unwrap()).unwrap();
        Divergent { cfg, vanilla, nas }
    })
}

fn anisotropic() -> &'static (RunConfig, Vec<SeedRun>) {
    static CELL: OnceLock<(RunConfig, Vec<SeedRun>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut cfg = RunConfig::default();
        cfg.seeds = vec![0, 1];
        let mut runs = require_all(run_all(&cfg).unwrap()).unwrap();
        runs.extend(require_all(run_all(&cfg.with_nas(true)).unwrap()).unwrap());
        (cfg, runs)
    })
}

fn ensure(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

fn c01_exact_recursion() -> Outcome {
    let d = divergent();
    let worst = d
        .vanilla
        .iter()
        .chain(&d.nas)
        .map(|r| recursion_residuals(r).0)
        .fold(0.0, f64::max);
    let steps = d.vanilla[0].trace.len();
    ensure(steps == 5000, format!("trace has {steps} steps"))?;
    ensure(worst <= EXACT_TOL, format!("max residual {worst:e}"))?;

    let cfg = d.cfg.with_nas(true);
    let models = SharedModels::build(&cfg).unwrap();
    let started = Instant::now();
    run_seed(&cfg, &models, 0).unwrap();
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("one seed took {secs:.1} s"))?;
    Ok(format!("max residual {worst:.2e} over {} traces of {steps} steps; {secs:.2} s per seed", d.vanilla.len() * 2))
}

fn c02_whitened_recursion() -> Outcome {
    let (cfg, runs) = anisotropic();
    let c = SharedModels::build(cfg).unwrap().second_moment();
    let eig = c.data.clone().symmetric_eigenvalues();
    let cond = eig.max() / eig.min();
    ensure((cond - 10.0).abs() < 1e-6, format!("condition number {cond}"))?;
    let (mut plain, mut tilde) = (0.0f64, 0.0f64);
    for r in runs {
        let (p, t) = recursion_residuals(r);
        plain = plain.max(p);
        tilde = tilde.max(t);
    }
    ensure(runs[0].trace.len() == 5000, "short trace".into())?;
    ensure(tilde <= EXACT_TOL, format!("max whitened residual {tilde:e}"))?;
    Ok(format!("cond(C) = {cond:.3}; whitened residual {tilde:.2e} (plain identity off by {plain:.2e})"))
}

fn c03_constraint() -> Outcome {
    let d = divergent();
    let (_, aniso) = anisotropic();
    let worst = d
        .vanilla
        .iter()
        .chain(&d.nas)
        .chain(aniso)
        .map(|r| r.max_constraint_residual)
        .fold(0.0, f64::max);
    ensure(worst <= EXACT_TOL, format!("max constraint residual {worst:e}"))?;
    Ok(format!("max ||W_n k - v_new|| / ||v_new|| = {worst:.2e} over {} runs", d.vanilla.len() * 2 + aniso.len()))
}

fn gaussian_matrix(rng: &mut SimRng, r: usize, c: usize) -> DMatrix<f64> {
    let scale = 10f64.powf(rng.random_range(-3.0..3.0));
    DMatrix::from_fn(r, c, |_, _| {
        let z: f64 = StandardNormal.sample(&mut *rng);
        z * scale
    })
}

fn c04_frobenius() -> Outcome {
    let mut rng = stream_rng(2024, Stream::WeightInit);
    let (mut e17, mut e18, mut e19) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (r, c) = (rng.random_range(1..9), rng.random_range(1..9));
        let a = gaussian_matrix(&mut rng, r, c);
        let b = gaussian_matrix(&mut rng, r, c);
        let lhs = frob_norm_sq(&(&a + &b)).unwrap();
        let rhs = frob_norm_sq(&a).unwrap() + frob_norm_sq(&b).unwrap() + 2.0 * frob_inner(&a, &b).unwrap();
        let scale = frob_norm_sq(&a).unwrap() + frob_norm_sq(&b).unwrap();
        e17 = e17.max((lhs - rhs).abs() / scale.max(f64::MIN_POSITIVE));
    }
    for _ in 0..1000 {
        let (r, c) = (rng.random_range(1..9), rng.random_range(1..9));
        let u = gaussian_matrix(&mut rng, r, 1).column(0).into_owned();
        let v = gaussian_matrix(&mut rng, c, 1).column(0).into_owned();
        let direct = frob_norm_sq(&outer(&u, &v)).unwrap();
        e18 = e18.max((direct - outer_product_norm_sq(&u, &v).unwrap()).abs() / direct);
    }
    for _ in 0..1000 {
        let (r, c) = (rng.random_range(1..9), rng.random_range(1..9));
        let a = gaussian_matrix(&mut rng, r, c);
        let u: DVector<f64> = gaussian_matrix(&mut rng, r, 1).column(0).into_owned();
        let v: DVector<f64> = gaussian_matrix(&mut rng, c, 1).column(0).into_owned();
        let lhs = frob_inner(&a, &outer(&u, &v)).unwrap();
        let rhs = u.dot(&(&a * &v));
        let scale = a.abs().sum() * u.amax() * v.amax();
        e19 = e19.max((lhs - rhs).abs() / scale.max(f64::MIN_POSITIVE));
    }
    let worst = e17.max(e18).max(e19);
    ensure(worst <= 1e-10, format!("errors {e17:e} / {e18:e} / {e19:e}"))?;
    Ok(format!("3 x 1000 instances: sum {e17:.1e}, outer {e18:.1e}, bilinear {e19:.1e}"))
}

/// Mean of `log R_n` across seeds at each step.
fn mean_log_rn(runs: &[SeedRun]) -> Vec<(f64, f64)> {
    let steps = runs[0].trace.len();
    (0..steps)
        .map(|i| {
            let m = runs.iter().map(|r| r.trace[i].r_n.ln()).sum::<f64>() / runs.len() as f64;
            (runs[0].trace[i].n as f64, m)
        })
        .collect()
}

fn c05_exponential() -> Outcome {
    let d = divergent();
    let threshold = d.cfg.analysis.cp_threshold;
    let pairs = collapse_pairs(&d.vanilla, &d.nas, threshold, d.cfg.n_edits);
    let mut cps: Vec<f64> = pairs.iter().filter_map(|p| p.vanilla.map(|c| c as f64)).collect();
    let window_end = median(&mut cps).ok_or("vanilla never collapses")? as usize;
    let (x, y): (Vec<f64>, Vec<f64>) = mean_log_rn(&d.vanilla)
        .into_iter()
        .filter(|(n, _)| *n <= window_end as f64)
        .unzip();
    let fit = ols(&x, &y).map_err(|e| e.to_string())?;
    ensure(fit.r_squared >= 0.98, format!("log R_n fit R^2 = {}", fit.r_squared))?;

    let params = fit_runs(&d.vanilla, LawFitOptions { estimator: d.cfg.analysis.estimator, anchor: None }, false)
        .map_err(|e| e.to_string())?;
    ensure(
        d.cfg.values.s_new > params.s_old,
        format!("configured s_new {} <= fitted s_old {}", d.cfg.values.s_new, params.s_old),
    )?;
    let traj = compare_trajectory(&d.vanilla, &params, false).map_err(|e| e.to_string())?;
    let window: Vec<_> = traj.iter().filter(|p| p.growth <= d.cfg.analysis.max_growth).collect();
    let worst = window.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    let last = window.last().map_or(0, |p| p.n);
    ensure(worst <= 0.10, format!("max relative error {worst:.4} up to step {last}"))?;
    Ok(format!(
        "R^2 {:.4} over steps 1..={window_end}; R = {:.6}, s_old = {:.4}; max rel err {:.2}% over {} checkpoints up to n = {last}",
        fit.r_squared,
        params.rho,
        params.s_old,
        worst * 100.0,
        window.len()
    ))
}

fn c06_bounded() -> Outcome {
    let d = divergent();
    let a = mean_anchor(&d.nas).ok_or("no anchors")?;
    let params = fit_runs(&d.nas, LawFitOptions { estimator: d.cfg.analysis.estimator, anchor: Some(a) }, false)
        .map_err(|e| e.to_string())?;
    let nas_core::dynamics::Regime::Stable { r, beta } = params.regime else {
        return Err("NAS fit is not stable".into());
    };
    let traj = compare_trajectory(&d.nas, &params, false).map_err(|e| e.to_string())?;
    let worst = traj.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    ensure(worst <= 0.10, format!("max relative error {worst:.4}"))?;
    let tail_start = d.cfg.n_edits - d.cfg.n_edits / 10;
    let tail: Vec<f64> = d
        .nas
        .iter()
        .flat_map(|run| run.trace.iter().filter(|rec| rec.n > tail_start).map(|rec| rec.w_norm_sq))
        .collect();
    let (tail_mean, _) = mean_se(&tail);
    let gap = (tail_mean - beta).abs() / beta;
    ensure(gap <= 0.15, format!("tail mean {tail_mean} vs beta {beta}"))?;
    let sup = d
        .nas
        .iter()
        .flat_map(|run| run.trace.iter().map(|rec| rec.w_norm_sq))
        .fold(0.0, f64::max);
    ensure(sup.is_finite(), "unbounded NAS norm".into())?;
    Ok(format!(
        "r = {r:.5}, beta = {beta:.3}; max rel err {:.2}%; tail mean {tail_mean:.3} ({:.2}% from beta); sup {sup:.2}",
        worst * 100.0,
        gap * 100.0
    ))
}

fn c07_nas_enforcement() -> Outcome {
    let d = divergent();
    let mut worst_norm = 0.0f64;
    let mut worst_slope = 0.0f64;
    let mut worst_intercept = 0.0f64;
    for run in &d.nas {
        let a = run.anchor.as_ref().ok_or("NAS run without anchor")?.a;
        for rec in &run.trace {
            worst_norm = worst_norm.max((rec.v_new_norm_sq - a).abs() / a);
        }
        let samples = probe_batch_means(&run.probes, false);
        let fit = fit_value_norm_laws(&samples, LawFitOptions { estimator: d.cfg.analysis.estimator, anchor: Some(a) })
            .map_err(|e| e.to_string())?;
        let slope_ratio = fit.s_new.abs() / fit.s_old;
        ensure(slope_ratio <= 0.1, format!("seed {}: |s_new| = {} vs s_old = {}", run.seed, fit.s_new, fit.s_old))?;
        let bound = (3.0 * fit.fit_new.intercept_se).max(1e-10 * a);
        let gap = (fit.b_new - a).abs();
        ensure(gap <= bound, format!("seed {}: b_new {} vs a {a}, bound {bound:e}", run.seed, fit.b_new))?;
        worst_slope = worst_slope.max(slope_ratio);
        worst_intercept = worst_intercept.max(gap / a);
    }
    ensure(worst_norm <= 1e-10, format!("||v_new||^2 deviates from a by {worst_norm:e}"))?;
    Ok(format!(
        "||v_new||^2 = a within {worst_norm:.1e}; max |s_new|/s_old {worst_slope:.1e}; max |b_new - a|/a {worst_intercept:.1e}"
    ))
}

fn c08_collapse_order() -> Outcome {
    let d = divergent();
    let pairs = collapse_pairs(&d.vanilla, &d.nas, d.cfg.analysis.cp_threshold, d.cfg.n_edits);
    let wins = pairs.iter().filter(|p| nas_not_earlier(p)).count();
    let mut ratios: Vec<f64> = pairs.iter().filter_map(|p| p.ratio).collect();
    let med = median(&mut ratios).ok_or("no vanilla collapse")?;
    ensure(pairs.len() == 20, format!("{} pairs", pairs.len()))?;
    ensure(wins >= 18, format!("NAS not earlier in {wins}/20"))?;
    ensure(ratios.len() == pairs.len(), "a vanilla run never collapsed".into())?;
    ensure(med >= 2.0, format!("median ratio {med}"))?;
    Ok(format!("CP@60(NAS) >= CP@60(vanilla) in {wins}/20 pairs; median ratio {med:.2}"))
}

fn c09_spearman() -> Outcome {
    let d = divergent();
    let rhos: Vec<f64> = d
        .vanilla
        .iter()
        .map(|r| norm_score_spearman(&r.checkpoints).ok_or(format!("seed {}: undefined", r.seed)))
        .collect::<Result<_, _>>()?;
    let worst = rhos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let med = median(&mut rhos.clone()).unwrap();
    ensure(worst <= -0.8, format!("largest rho {worst}"))?;
    Ok(format!("Spearman rho(R_n, Score) <= {worst:.3} on all 20 seeds (median {med:.3})"))
}

fn c10_drift() -> Outcome {
    let d = divergent();
    let mut parts = Vec::new();
    for step in [100, 500] {
        let wins = d
            .vanilla
            .iter()
            .zip(&d.nas)
            .filter(|(v, n)| drift_at(v, step).unwrap() > drift_at(n, step).unwrap())
            .count();
        ensure(wins >= 18, format!("step {step}: vanilla drift larger in {wins}/20"))?;
        parts.push(format!("{wins}/20 at n = {step}"));
    }
    Ok(format!("vanilla drift exceeds NAS in {}", parts.join(", ")))
}

fn c11_anchor_ablation() -> Outcome {
    let cfg = divergent_config();
    let models = SharedModels::build(&cfg).unwrap();
    let w0 = init_weights(cfg.dims.d_v, cfg.dims.d_k, cfg.w0_sigma, &mut stream_rng(0, Stream::WeightInit)).unwrap();
    let clean = EditorState::new(w0, models.second_moment()).unwrap();
    let sizes = [100usize, 300, 500, 1000, 2000];
    let restarts = 5;
    let mut stats = Vec::new();
    for &n in &sizes {
        let est: Vec<f64> = (0..restarts)
            .map(|r| estimate_anchor(&clean, &models.values, &models.keys, n, 10_000 + r).unwrap().a)
            .collect();
        let (m, se) = mean_se(&est);
        stats.push((n, m, se, se * (restarts as f64).sqrt()));
    }
    for i in 0..stats.len() {
        for j in (i + 1)..stats.len() {
            let (ni, mi, si, _) = stats[i];
            let (nj, mj, sj, _) = stats[j];
            let pooled = (si * si + sj * sj).sqrt();
            ensure(
                (mi - mj).abs() <= 3.0 * pooled,
                format!("N = {ni} ({mi}) vs N = {nj} ({mj}): pooled se {pooled}"),
            )?;
        }
    }
    let f_crit = FisherSnedecor::new(4.0, 4.0).unwrap().inverse_cdf(0.95);
    for w in stats.windows(2) {
        let ratio = (w[1].3 / w[0].3).powi(2);
        ensure(ratio <= f_crit, format!("sd rises from N = {} to N = {} (variance ratio {ratio:.2})", w[0].0, w[1].0))?;
    }
    let (first, last) = (stats[0].3, stats[stats.len() - 1].3);
    ensure(last < first, format!("sd(2000) = {last} >= sd(100) = {first}"))?;
    let sds: Vec<String> = stats.iter().map(|s| format!("{}:{:.3}", s.0, s.3)).collect();
    Ok(format!("means agree within 3 pooled se; estimator sd by N {}", sds.join(" ")))
}

fn c12_determinism() -> Outcome {
    let mut cfg = divergent_config();
    cfg.n_edits = 400;
    cfg.seeds = vec![3, 7];
    cfg.nas.enabled = true;
    cfg.nas.pilot_n = 200;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = run_sequence(&cfg, &tmp.path().join("a")).map_err(|e| e.to_string())?;
    let b = run_sequence(&cfg, &tmp.path().join("b")).map_err(|e| e.to_string())?;
    let mut files = 0;
    for entry in &a.manifest.seeds {
        for name in [&entry.trace, &entry.checkpoints, &entry.probes] {
            let name = name.as_ref().ok_or("missing file entry")?;
            let (pa, pb): (PathBuf, PathBuf) = (a.dir.join(name), b.dir.join(name));
            let (ba, bb) = (std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
            ensure(ba == bb, format!("{name} differs between identical runs"))?;
            files += 1;
        }
        let trace_path = a.dir.join(entry.trace.as_ref().unwrap());
        let text = std::fs::read_to_string(&trace_path).unwrap();
        ensure(
            text.lines().next() == Some(TRACE_HEADER.join(",").as_str()),
            "trace header mismatch".into(),
        )?;
        let parsed = read_trace(&trace_path).map_err(|e| e.to_string())?;
        ensure(parsed.len() == cfg.n_edits, format!("{} rows", parsed.len()))?;
    }
    let summary = |dir: &Path| std::fs::read(dir.join("summary.json")).unwrap();
    ensure(summary(&a.dir) == summary(&b.dir), "summary differs".into())?;
    Ok(format!("{files} per-seed files and summary byte-identical; traces parse against the header"))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 12] = [
        (1, "exact norm recursion (C = I)", c01_exact_recursion),
        (2, "whitened norm recursion (cond 10)", c02_whitened_recursion),
        (3, "edit constraint exactness", c03_constraint),
        (4, "Frobenius identities", c04_frobenius),
        (5, "exponential regime", c05_exponential),
        (6, "bounded NAS regime", c06_bounded),
        (7, "NAS norm enforcement", c07_nas_enforcement),
        (8, "collapse order", c08_collapse_order),
        (9, "norm-score co-occurrence", c09_spearman),
        (10, "drift ordering", c10_drift),
        (11, "anchor N-ablation", c11_anchor_ablation),
        (12, "determinism and trace format", c12_determinism),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
