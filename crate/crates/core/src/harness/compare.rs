use serde::{Deserialize, Serialize};

use super::analysis::{
    collapse_pairs, compare_trajectory, fit_runs, mean_anchor, median, nas_not_earlier, norm_score_spearman,
    pre_collapse_log_fit, uses_whitened, CollapsePair, TrajectoryPoint,
};
use super::config::RunConfig;
use super::run::SeedRun;
use crate::dynamics::{LawFitOptions, RecurrenceParams};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub spearman_vanilla: Option<f64>,
    pub spearman_nas: Option<f64>,
    pub log_rn_slope: f64,
    pub log_rn_r_squared: f64,
    pub log_rn_window_end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeFit {
    pub params: RecurrenceParams,
    pub trajectory: Vec<TrajectoryPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub whitened: bool,
    pub collapse: Vec<CollapsePair>,
    pub nas_not_earlier: usize,
    pub median_cp_ratio: Option<f64>,
    pub seeds: Vec<SeedComparison>,
    pub anchor: Option<f64>,
    pub vanilla_fit: Option<RegimeFit>,
    pub nas_fit: Option<RegimeFit>,
    pub fit_errors: Vec<String>,
}

/// Fit the norm laws of a set of runs and set the closed form against the realized mean.
pub fn regime_fit(runs: &[SeedRun], cfg: &RunConfig, anchor: Option<f64>) -> Result<RegimeFit> {
    let whitened = uses_whitened(runs);
    let opts = LawFitOptions {
        estimator: cfg.analysis.estimator,
        anchor,
    };
    let params = fit_runs(runs, opts, whitened)?;
    let trajectory = compare_trajectory(runs, &params, whitened)?;
    Ok(RegimeFit { params, trajectory })
}

/// Paired analysis of vanilla and NAS runs over the same seeds.
pub fn compare_runs(cfg: &RunConfig, vanilla: &[SeedRun], nas: &[SeedRun]) -> Result<Comparison> {
    let threshold = cfg.analysis.cp_threshold;
    let collapse = collapse_pairs(vanilla, nas, threshold, cfg.n_edits);
    let mut ratios: Vec<f64> = collapse.iter().filter_map(|p| p.ratio).collect();
    let seeds = vanilla
        .iter()
        .zip(nas)
        .map(|(v, n)| {
            let (fit, end) = pre_collapse_log_fit(v, threshold)?;
            Ok(SeedComparison {
                seed: v.seed,
                spearman_vanilla: norm_score_spearman(&v.checkpoints),
                spearman_nas: norm_score_spearman(&n.checkpoints),
                log_rn_slope: fit.slope,
                log_rn_r_squared: fit.r_squared,
                log_rn_window_end: end,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let anchor = mean_anchor(nas);
    let mut fit_errors = Vec::new();
    let vanilla_fit = regime_fit(vanilla, cfg, None)
        .map_err(|e| fit_errors.push(format!("vanilla: {e}")))
        .ok();
    let nas_fit = anchor.and_then(|a| {
        regime_fit(nas, cfg, Some(a))
            .map_err(|e| fit_errors.push(format!("nas: {e}")))
            .ok()
    });
    Ok(Comparison {
        whitened: uses_whitened(vanilla),
        nas_not_earlier: collapse.iter().filter(|p| nas_not_earlier(p)).count(),
        median_cp_ratio: median(&mut ratios),
        collapse,
        seeds,
        anchor,
        vanilla_fit,
        nas_fit,
        fit_errors,
    })
}
