//! Norm-Anchor Scaling: estimate the anchor `a = E||v_new||^2` on the clean
//! state, then rescale every unconstrained target value to squared norm `a`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::editor::EditorState;
use crate::error::{Error, Result};
use crate::models::{KeyModel, ValueModel};
use crate::streams::{stream_rng, Stream};

pub const DEFAULT_PILOT_N: usize = 1000;

/// Smallest value norm [`rescale`] accepts.
pub const MIN_VALUE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub a: f64,
    pub pilot_n: usize,
    #[serde(skip)]
    pub pilot_norms_sq: Vec<f64>,
    pub enabled: bool,
    /// Mean and standard deviation of the raw pilot norms `||v_hat||`.
    pub raw_mean: f64,
    pub raw_std: f64,
}

impl AnchorSpec {
    /// Anchor fixed by hand rather than estimated.
    pub fn fixed(a: f64) -> Result<Self> {
        if !(a > 0.0) || !a.is_finite() {
            return Err(Error::Config(format!("anchor must be positive, got {a}")));
        }
        Ok(Self {
            a,
            pilot_n: 0,
            pilot_norms_sq: Vec::new(),
            enabled: true,
            raw_mean: a.sqrt(),
            raw_std: 0.0,
        })
    }

    pub fn disabled() -> Self {
        Self {
            a: 0.0,
            pilot_n: 0,
            pilot_norms_sq: Vec::new(),
            enabled: false,
            raw_mean: 0.0,
            raw_std: 0.0,
        }
    }

    fn from_pilot(pilot_norms_sq: Vec<f64>) -> Self {
        let n = pilot_norms_sq.len() as f64;
        let a = pilot_norms_sq.iter().sum::<f64>() / n;
        let raw: Vec<f64> = pilot_norms_sq.iter().map(|x| x.sqrt()).collect();
        let raw_mean = raw.iter().sum::<f64>() / n;
        let raw_std = if raw.len() > 1 {
            (raw.iter().map(|x| (x - raw_mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            a,
            pilot_n: pilot_norms_sq.len(),
            pilot_norms_sq,
            enabled: true,
            raw_mean,
            raw_std,
        }
    }
}

/// Estimate the anchor from `pilot_n` pilot edits against the clean weights.
///
/// Every pilot edit starts from the unedited matrix and is discarded afterwards, so
/// `clean` is never mutated. Pilot keys and value noise come from their own streams
/// under `seed`.
pub fn estimate_anchor(
    clean: &EditorState,
    value_model: &ValueModel,
    key_model: &KeyModel,
    pilot_n: usize,
    seed: u64,
) -> Result<AnchorSpec> {
    if clean.step != 0 {
        return Err(Error::Config(format!(
            "anchor must be estimated on an unedited state (step = {})",
            clean.step
        )));
    }
    if pilot_n == 0 {
        return Err(Error::Config("pilot_n must be positive".into()));
    }
    let mut keys = key_model.sampler(stream_rng(seed, Stream::Pilot));
    let mut noise = stream_rng(seed, Stream::PilotValueNoise);
    let w_metric = clean.w_tilde_norm_sq();
    let mut norms = Vec::with_capacity(pilot_n);
    for index in 0..pilot_n {
        let mut pilot = || -> Result<f64> {
            let key = keys.sample_key()?;
            let request = value_model.request(index as u64, key, &mut noise)?;
            let v_hat = value_model.target(&clean.w, w_metric, &request, &mut noise)?;
            clean.compute_delta(&request.key, &v_hat)?;
            Ok(v_hat.norm_squared())
        };
        let norm_sq = pilot().map_err(|e| Error::PilotFailure {
            index,
            source: Box::new(e),
        })?;
        norms.push(norm_sq);
    }
    Ok(AnchorSpec::from_pilot(norms))
}

/// `v_hat * sqrt(a / ||v_hat||^2)`; a pass-through when the anchor is disabled.
pub fn rescale(v_hat: &DVector<f64>, anchor: &AnchorSpec) -> Result<DVector<f64>> {
    if !anchor.enabled {
        return Ok(v_hat.clone());
    }
    let norm_sq = v_hat.norm_squared();
    if !(norm_sq.sqrt() > MIN_VALUE_NORM) {
        return Err(Error::ZeroValueVector(norm_sq.sqrt()));
    }
    Ok(v_hat * (anchor.a / norm_sq).sqrt())
}
