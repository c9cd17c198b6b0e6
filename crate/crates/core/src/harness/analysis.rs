//! Cross-seed analysis of completed runs.

use serde::{Deserialize, Serialize};

use super::run::{Checkpoint, ProbeSample, SeedRun};
use crate::dynamics::{
    collapse_point, fit_log_rn, fit_value_norm_laws, mean_se, spearman, verify_recursion_from, FitResult,
    LawFitOptions, NormSample, RecurrenceParams,
};
use crate::error::{Error, Result};

/// Whether a run should be analysed in whitened coordinates (`C != I`).
pub fn uses_whitened(runs: &[SeedRun]) -> bool {
    runs.iter()
        .flat_map(|r| r.trace.iter())
        .any(|rec| rec.key_c_norm_sq != rec.key_norm_sq)
}

/// Max recursion residual of one run, plain and whitened.
pub fn recursion_residuals(run: &SeedRun) -> (f64, f64) {
    (
        verify_recursion_from(run.w0_norm_sq, &run.trace, false),
        verify_recursion_from(run.w0_tilde_norm_sq, &run.trace, true),
    )
}

/// One regression point per checkpoint: the probe batch mean against the checkpoint norm.
pub fn probe_batch_means(probes: &[ProbeSample], whitened: bool) -> Vec<NormSample> {
    let mut out: Vec<NormSample> = Vec::new();
    let mut start = 0;
    while start < probes.len() {
        let n = probes[start].n;
        let end = probes[start..].iter().position(|p| p.n != n).map_or(probes.len(), |i| start + i);
        let batch = &probes[start..end];
        let m = batch.len() as f64;
        let mean = |f: &dyn Fn(&ProbeSample) -> f64| batch.iter().map(f).sum::<f64>() / m;
        out.push(NormSample {
            w_norm_sq: if whitened { batch[0].w_tilde_norm_sq } else { batch[0].w_norm_sq },
            v_old_norm_sq: mean(&|p| p.v_old_norm_sq),
            v_new_norm_sq: mean(&|p| p.v_new_norm_sq),
            key_norm_sq: 1.0 / mean(&|p| 1.0 / if whitened { p.key_c_norm_sq } else { p.key_norm_sq }),
        });
        start = end;
    }
    out
}

/// Fit the value-norm laws on probe batches pooled across runs.
///
/// With `opts.anchor` set the stable closed form is used.
pub fn fit_runs(runs: &[SeedRun], opts: LawFitOptions, whitened: bool) -> Result<RecurrenceParams> {
    let samples: Vec<NormSample> = runs
        .iter()
        .flat_map(|r| probe_batch_means(&r.probes, whitened))
        .collect();
    fit_value_norm_laws(&samples, opts)
}

/// Mean anchor across NAS runs.
pub fn mean_anchor(runs: &[SeedRun]) -> Option<f64> {
    let anchors: Vec<f64> = runs.iter().filter_map(|r| r.anchor.as_ref().map(|a| a.a)).collect();
    (!anchors.is_empty()).then(|| anchors.iter().sum::<f64>() / anchors.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub n: usize,
    pub mean: f64,
    pub se: f64,
    pub predicted: f64,
    pub growth: f64,
    pub rel_err: f64,
}

/// Seed-averaged squared weight norm at each checkpoint against the closed form.
pub fn compare_trajectory(runs: &[SeedRun], params: &RecurrenceParams, whitened: bool) -> Result<Vec<TrajectoryPoint>> {
    let first = runs.first().ok_or_else(|| Error::InsufficientData("no runs".into()))?;
    let w0: Vec<f64> = runs
        .iter()
        .map(|r| if whitened { r.w0_tilde_norm_sq } else { r.w0_norm_sq })
        .collect();
    let (w0_mean, _) = mean_se(&w0);
    first
        .checkpoints
        .iter()
        .enumerate()
        .map(|(i, cp)| {
            let values: Vec<f64> = runs
                .iter()
                .map(|r| {
                    r.checkpoints
                        .get(i)
                        .filter(|c| c.n == cp.n)
                        .map(|c| if whitened { c.w_tilde_norm_sq } else { c.w_norm_sq })
                        .ok_or_else(|| Error::InsufficientData("runs have different checkpoints".into()))
                })
                .collect::<Result<_>>()?;
            let (mean, se) = mean_se(&values);
            let predicted = params.predict(w0_mean, cp.n);
            Ok(TrajectoryPoint {
                n: cp.n,
                mean,
                se,
                predicted,
                growth: params.growth(cp.n),
                rel_err: (mean - predicted).abs() / predicted.abs(),
            })
        })
        .collect()
}

/// `(checkpoint, score)` pairs of the scored checkpoints.
pub fn scores(checkpoints: &[Checkpoint]) -> Vec<(usize, f64)> {
    checkpoints.iter().filter_map(|c| c.score.map(|s| (c.n, s))).collect()
}

/// Spearman correlation of `R_n` and Score over checkpoints up to the first zero score.
///
/// Checkpoints after the score has hit zero are tied at the floor and carry no rank information.
pub fn norm_score_spearman(checkpoints: &[Checkpoint]) -> Option<f64> {
    let mut r = Vec::new();
    let mut s = Vec::new();
    for c in checkpoints {
        if let Some(score) = c.score {
            r.push(c.r_n);
            s.push(score);
            if score == 0.0 {
                break;
            }
        }
    }
    spearman(&r, &s)
}

/// OLS of `log R_n` over the pre-collapse window (all steps if the run never collapses).
pub fn pre_collapse_log_fit(run: &SeedRun, threshold: f64) -> Result<(FitResult, usize)> {
    let end = collapse_point(&scores(&run.checkpoints), threshold).unwrap_or(run.trace.len());
    Ok((fit_log_rn(&run.trace, 1..=end)?, end))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapsePair {
    pub seed: u64,
    pub vanilla: Option<usize>,
    pub nas: Option<usize>,
    /// `nas / vanilla`, with a run that never collapses counted at the horizon.
    pub ratio: Option<f64>,
}

pub fn collapse_pairs(vanilla: &[SeedRun], nas: &[SeedRun], threshold: f64, horizon: usize) -> Vec<CollapsePair> {
    vanilla
        .iter()
        .zip(nas)
        .map(|(v, n)| {
            let cv = collapse_point(&scores(&v.checkpoints), threshold);
            let cn = collapse_point(&scores(&n.checkpoints), threshold);
            let ratio = cv.map(|cv| cn.unwrap_or(horizon) as f64 / cv as f64);
            CollapsePair {
                seed: v.seed,
                vanilla: cv,
                nas: cn,
                ratio,
            }
        })
        .collect()
}

/// `CP(nas) >= CP(vanilla)`, where a run that never collapses sits past every checkpoint.
pub fn nas_not_earlier(pair: &CollapsePair) -> bool {
    match (pair.vanilla, pair.nas) {
        (_, None) => true,
        (None, Some(_)) => false,
        (Some(v), Some(n)) => n >= v,
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 0 {
        (values[mid - 1] + values[mid]) / 2.0
    } else {
        values[mid]
    })
}

/// Drift of the checkpoint at step `n`.
pub fn drift_at(run: &SeedRun, n: usize) -> Option<f64> {
    run.checkpoints.iter().find(|c| c.n == n).map(|c| c.drift)
}
