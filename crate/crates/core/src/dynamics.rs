//! Weight-norm dynamics: per-step traces, the exact norm recursion, regression of
//! the value-norm laws, closed-form trajectory prediction and collapse detection.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of an edit trace; describes edit `n` and the state `W_n` it produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub n: usize,
    pub w_norm_sq: f64,
    pub r_n: f64,
    pub v_old_norm_sq: f64,
    pub v_new_norm_sq: f64,
    pub v_new_unconstrained_norm_sq: f64,
    pub key_norm_sq: f64,
    pub key_c_norm_sq: f64,
    pub w_tilde_norm_sq: f64,
}

impl TraceRecord {
    fn norm_pair(&self, whitened: bool) -> (f64, f64) {
        if whitened {
            (self.w_tilde_norm_sq, self.key_c_norm_sq)
        } else {
            (self.w_norm_sq, self.key_norm_sq)
        }
    }
}

/// Relative residual of `after - before = (v_new - v_old) / key` for one step.
pub fn recursion_residual(before: f64, after: f64, v_old_sq: f64, v_new_sq: f64, key_sq: f64) -> f64 {
    let lhs = after - before;
    let rhs = (v_new_sq - v_old_sq) / key_sq;
    let gap = (lhs - rhs).abs();
    if gap == 0.0 {
        return 0.0;
    }
    let scale = lhs.abs().max((v_new_sq + v_old_sq) / key_sq).max(f64::MIN_POSITIVE);
    gap / scale
}

/// Max relative residual of the norm recursion over consecutive trace records.
///
/// With `use_whitened` the identity is checked on `||W C^{1/2}||^2` and `k^T C^{-1} k`.
pub fn verify_recursion(trace: &[TraceRecord], use_whitened: bool) -> f64 {
    trace
        .windows(2)
        .map(|pair| {
            let (before, _) = pair[0].norm_pair(use_whitened);
            let (after, key_sq) = pair[1].norm_pair(use_whitened);
            recursion_residual(before, after, pair[1].v_old_norm_sq, pair[1].v_new_norm_sq, key_sq)
        })
        .fold(0.0, f64::max)
}

/// [`verify_recursion`] including the first step, taken from the initial norm.
pub fn verify_recursion_from(initial_norm_sq: f64, trace: &[TraceRecord], use_whitened: bool) -> f64 {
    let first = trace.first().map_or(0.0, |rec| {
        let (after, key_sq) = rec.norm_pair(use_whitened);
        recursion_residual(initial_norm_sq, after, rec.v_old_norm_sq, rec.v_new_norm_sq, key_sq)
    });
    first.max(verify_recursion(trace, use_whitened))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
    pub slope_se: f64,
    pub intercept_se: f64,
}

/// Below this both sums of squares count as zero and `R^2 = 1`.
const ZERO_VARIANCE: f64 = 1e-24;

/// Ordinary least squares of `y` on `x`.
pub fn ols(x: &[f64], y: &[f64]) -> Result<FitResult> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::Shape(format!("ols: {} x values, {} y values", n, y.len())));
    }
    if n < 3 {
        return Err(Error::InsufficientData(format!("need at least 3 points, got {n}")));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::InsufficientData("regressor has zero variance".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let r_squared = if ss_res < ZERO_VARIANCE && syy < ZERO_VARIANCE {
        1.0
    } else if syy < ZERO_VARIANCE {
        0.0
    } else {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    let sigma2 = ss_res / (nf - 2.0);
    let slope_se = (sigma2 / sxx).sqrt();
    let intercept_se = (sigma2 * (1.0 / nf + mx * mx / sxx)).sqrt();
    Ok(FitResult {
        slope,
        intercept,
        r_squared,
        n_points: n,
        slope_se,
        intercept_se,
    })
}

/// Linear fit of `y` on `x` with relative weighting, for data spanning several decades.
///
/// Fits `y / x = slope + intercept / x` by OLS, which weights each point by `1 / x^2`.
/// The reported `r_squared` is that of the transformed regression.
pub fn relative_wls(x: &[f64], y: &[f64]) -> Result<FitResult> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("wls: {} x values, {} y values", x.len(), y.len())));
    }
    if let Some(bad) = x.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::InsufficientData(format!("relative fit needs x > 0, got {bad}")));
    }
    let inv: Vec<f64> = x.iter().map(|v| 1.0 / v).collect();
    let ratio: Vec<f64> = x.iter().zip(y).map(|(a, b)| b / a).collect();
    let t = ols(&inv, &ratio)?;
    Ok(FitResult {
        slope: t.intercept,
        intercept: t.slope,
        r_squared: t.r_squared,
        n_points: t.n_points,
        slope_se: t.intercept_se,
        intercept_se: t.slope_se,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Ols,
    #[default]
    RelativeWls,
}

impl Estimator {
    pub fn fit(self, x: &[f64], y: &[f64]) -> Result<FitResult> {
        match self {
            Estimator::Ols => ols(x, y),
            Estimator::RelativeWls => relative_wls(x, y),
        }
    }
}

/// OLS of `log R_n` on `n` over the records whose `n` lies in `window`.
pub fn fit_log_rn(trace: &[TraceRecord], window: RangeInclusive<usize>) -> Result<FitResult> {
    let (x, y): (Vec<f64>, Vec<f64>) = trace
        .iter()
        .filter(|rec| window.contains(&rec.n))
        .map(|rec| {
            if rec.r_n > 0.0 {
                Ok((rec.n as f64, rec.r_n.ln()))
            } else {
                Err(Error::Numeric(format!("R_n = {} at step {}", rec.r_n, rec.n)))
            }
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    ols(&x, &y)
}

/// Value norms observed against a weight state of squared norm `w_norm_sq`.
///
/// `w_norm_sq` is the pre-edit state; use whitened quantities for general `C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSample {
    pub w_norm_sq: f64,
    pub v_old_norm_sq: f64,
    pub v_new_norm_sq: f64,
    pub key_norm_sq: f64,
}

/// Per-edit samples from a trace; the regressor of edit `n` is the norm of `W_{n-1}`.
pub fn samples_from_trace(initial_norm_sq: f64, trace: &[TraceRecord], whitened: bool) -> Vec<NormSample> {
    let mut before = initial_norm_sq;
    trace
        .iter()
        .map(|rec| {
            let (after, key_norm_sq) = rec.norm_pair(whitened);
            let sample = NormSample {
                w_norm_sq: before,
                v_old_norm_sq: rec.v_old_norm_sq,
                v_new_norm_sq: rec.v_new_norm_sq,
                key_norm_sq,
            };
            before = after;
            sample
        })
        .collect()
}

/// Average consecutive groups of `size` samples (a trailing partial group is kept).
pub fn batch_means(samples: &[NormSample], size: usize) -> Vec<NormSample> {
    samples
        .chunks(size.max(1))
        .map(|chunk| {
            let n = chunk.len() as f64;
            let mean = |f: fn(&NormSample) -> f64| chunk.iter().map(f).sum::<f64>() / n;
            NormSample {
                w_norm_sq: mean(|s| s.w_norm_sq),
                v_old_norm_sq: mean(|s| s.v_old_norm_sq),
                v_new_norm_sq: mean(|s| s.v_new_norm_sq),
                key_norm_sq: mean(|s| s.key_norm_sq),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Regime {
    Divergent { big_r: f64, alpha: f64 },
    Stable { r: f64, beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecurrenceParams {
    pub k: f64,
    pub s_new: f64,
    pub b_new: f64,
    pub s_old: f64,
    pub b_old: f64,
    pub rho: f64,
    pub gamma: f64,
    pub regime: Regime,
    pub fit_new: FitResult,
    pub fit_old: FitResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LawFitOptions {
    pub estimator: Estimator,
    /// Anchor level of a NAS run; selects the stable closed form with `s_new = 0`, `b_new = a`.
    pub anchor: Option<f64>,
}

/// Mean of `1 / key_norm_sq`.
pub fn mean_inverse_key(samples: &[NormSample]) -> f64 {
    samples.iter().map(|s| 1.0 / s.key_norm_sq).sum::<f64>() / samples.len() as f64
}

/// Fit `E||v_new||^2` and `E||v_old||^2` as linear functions of the weight norm and
/// derive the recurrence constants.
pub fn fit_value_norm_laws(samples: &[NormSample], opts: LawFitOptions) -> Result<RecurrenceParams> {
    if samples.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "need at least 10 samples, got {}",
            samples.len()
        )));
    }
    let k = mean_inverse_key(samples);
    let x: Vec<f64> = samples.iter().map(|s| s.w_norm_sq).collect();
    let y_new: Vec<f64> = samples.iter().map(|s| s.v_new_norm_sq).collect();
    let y_old: Vec<f64> = samples.iter().map(|s| s.v_old_norm_sq).collect();
    let fit_new = opts.estimator.fit(&x, &y_new)?;
    let fit_old = opts.estimator.fit(&x, &y_old)?;
    params_from_fits(k, fit_new, fit_old, opts.anchor)
}

/// Recurrence constants from fitted laws; `anchor` selects the NAS form.
pub fn params_from_fits(
    k: f64,
    fit_new: FitResult,
    fit_old: FitResult,
    anchor: Option<f64>,
) -> Result<RecurrenceParams> {
    let (s_old, b_old) = (fit_old.slope, fit_old.intercept);
    let (s_new, b_new) = (fit_new.slope, fit_new.intercept);
    let (rho, gamma, regime) = match anchor {
        Some(a) => {
            let r = 1.0 - k * s_old;
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::NonPhysicalRegime(format!("stable regime needs 0 < r < 1, got {r}")));
            }
            let beta = (a - b_old) / s_old;
            (r, -beta, Regime::Stable { r, beta })
        }
        None => {
            let ds = s_new - s_old;
            if ds.abs() < 1e-12 {
                return Err(Error::DegenerateSlopes(ds));
            }
            let rho = 1.0 + k * ds;
            let gamma = (b_new - b_old) / ds;
            let regime = if rho > 1.0 {
                Regime::Divergent { big_r: rho, alpha: gamma }
            } else if rho > 0.0 {
                Regime::Stable { r: rho, beta: -gamma }
            } else {
                return Err(Error::NonPhysicalRegime(format!("rho = {rho} is not positive")));
            };
            (rho, gamma, regime)
        }
    };
    Ok(RecurrenceParams {
        k,
        s_new,
        b_new,
        s_old,
        b_old,
        rho,
        gamma,
        regime,
        fit_new,
        fit_old,
    })
}

impl RecurrenceParams {
    /// Predicted `E||W_n||^2` at step `n`.
    pub fn predict(&self, w0_norm_sq: f64, n: usize) -> f64 {
        match self.regime {
            Regime::Divergent { big_r, alpha } => {
                let g = big_r.powf(n as f64);
                g * w0_norm_sq + alpha * (g - 1.0)
            }
            Regime::Stable { r, beta } => {
                let g = r.powf(n as f64);
                g * w0_norm_sq + beta * (1.0 - g)
            }
        }
    }

    /// Geometric factor `R^n` (or `r^n`).
    pub fn growth(&self, n: usize) -> f64 {
        self.rho.powf(n as f64)
    }
}

/// Predicted `E||W_n||^2` for `n = 0..=n_max`.
pub fn predict_trajectory(params: &RecurrenceParams, w0_norm_sq: f64, n_max: usize) -> Vec<f64> {
    (0..=n_max).map(|n| params.predict(w0_norm_sq, n)).collect()
}

/// First checkpoint whose score is at or below `threshold`.
pub fn collapse_point(scores: &[(usize, f64)], threshold: f64) -> Option<usize> {
    scores.iter().find(|(_, s)| *s <= threshold).map(|(c, _)| *c)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &pos in &idx[i..=j] {
            ranks[pos] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` if either input has constant ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    pearson(&rx, &ry)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Mean and standard error of the mean.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
