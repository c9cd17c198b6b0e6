use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::dynamics::TraceRecord;
use crate::editor::{init_weights, EditorState};
use crate::error::{Error, Result};
use crate::linalg::SpdMatrix;
use crate::metrics::{evaluate_edits, paraphrase, representation_drift, EditProbe, ProbeSet};
use crate::models::{KeyMode, KeyModel, ValueModel};
use crate::nas::{estimate_anchor, rescale, AnchorSpec};
use crate::streams::{stream_rng, Stream};

/// Metrics and drift of one checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub n: usize,
    pub w_norm_sq: f64,
    pub w_tilde_norm_sq: f64,
    pub r_n: f64,
    pub efficacy: Option<f64>,
    pub generalization: Option<f64>,
    pub specificity: f64,
    pub score: Option<f64>,
    pub drift: f64,
    pub dispersion: f64,
}

/// A target value drawn against the checkpoint state and discarded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub n: usize,
    pub w_norm_sq: f64,
    pub w_tilde_norm_sq: f64,
    pub v_old_norm_sq: f64,
    pub v_new_norm_sq: f64,
    pub v_new_unconstrained_norm_sq: f64,
    pub key_norm_sq: f64,
    pub key_c_norm_sq: f64,
}

/// Everything recorded for one seed.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub nas_enabled: bool,
    pub w0_norm_sq: f64,
    pub w0_tilde_norm_sq: f64,
    pub anchor: Option<AnchorSpec>,
    pub trace: Vec<TraceRecord>,
    pub checkpoints: Vec<Checkpoint>,
    pub probes: Vec<ProbeSample>,
    pub max_constraint_residual: f64,
    /// Wall-clock seconds per edit (mean, standard deviation).
    pub per_edit_seconds: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
    pub numeric: bool,
}

pub type SeedOutcome = std::result::Result<SeedRun, SeedFailure>;

/// Models shared by every seed of a configuration.
#[derive(Debug, Clone)]
pub struct SharedModels {
    pub keys: KeyModel,
    pub values: ValueModel,
}

impl SharedModels {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let d_k = cfg.dims.d_k;
        let ks = &cfg.keys;
        let keys = match ks.mode {
            KeyMode::Isotropic => KeyModel::isotropic(d_k, ks.radial, ks.seed),
            KeyMode::AnisotropicSpd => KeyModel::anisotropic(d_k, ks.condition_number, ks.radial, ks.seed)?,
            KeyMode::FixedPool => {
                let c = if ks.condition_number == 1.0 {
                    SpdMatrix::identity(d_k)
                } else {
                    KeyModel::anisotropic(d_k, ks.condition_number, ks.radial, ks.seed)?
                        .second_moment
                        .as_ref()
                        .clone()
                };
                KeyModel::fixed_pool(c, ks.radial, ks.seed, cfg.pool_size())
            }
        };
        let values = ValueModel::new(cfg.values.clone(), cfg.dims.d_v, ks.seed)?;
        Ok(Self { keys, values })
    }

    pub fn second_moment(&self) -> Arc<SpdMatrix> {
        self.keys.second_moment.clone()
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Run the edit sequence of one seed.
pub fn run_seed(cfg: &RunConfig, models: &SharedModels, seed: u64) -> Result<SeedRun> {
    let (d_v, d_k) = (cfg.dims.d_v, cfg.dims.d_k);
    let w0 = init_weights(d_v, d_k, cfg.w0_sigma, &mut stream_rng(seed, Stream::WeightInit))?;
    let mut state = EditorState::new(w0.clone(), models.second_moment())?
        .with_check_every(cfg.profile.check_every());
    let w0_tilde_norm_sq = state.w_tilde_norm_sq();

    let anchor = match (cfg.nas.enabled, cfg.nas.anchor) {
        (false, _) => None,
        (true, Some(a)) => Some(AnchorSpec::fixed(a)?),
        (true, None) => Some(estimate_anchor(&state, &models.values, &models.keys, cfg.nas.pilot_n, seed)?),
    };

    let mut neighborhood_rng = stream_rng(seed, Stream::Neighborhood);
    let neighborhood = (0..cfg.probes.neighborhood)
        .map(|_| models.keys.draw_fresh(&mut neighborhood_rng))
        .collect();
    let mut holdout_rng = stream_rng(seed, Stream::Holdout);
    let holdout = (0..cfg.probes.holdout)
        .map(|_| models.keys.draw_fresh(&mut holdout_rng))
        .collect();
    let mut probe_set = ProbeSet::new(
        &w0,
        neighborhood,
        holdout,
        cfg.probes.sigma_p,
        cfg.probes.cos_floor,
        cfg.probes.efficacy_window,
    )?;

    let mut keys = models.keys.sampler(stream_rng(seed, Stream::Keys));
    let mut value_rng = stream_rng(seed, Stream::ValueNoise);
    let mut paraphrase_rng = stream_rng(seed, Stream::Paraphrase);
    let mut probe_key_rng = stream_rng(seed, Stream::ProbeKeys);
    let mut probe_value_rng = stream_rng(seed, Stream::ProbeValueNoise);

    let checkpoint_steps = cfg.checkpoints();
    let mut next_checkpoint = 0;
    let mut trace = Vec::with_capacity(cfg.n_edits);
    let mut checkpoints = Vec::with_capacity(checkpoint_steps.len());
    let mut probes = Vec::with_capacity(checkpoint_steps.len() * cfg.probes.batch);
    let mut timings = Vec::with_capacity(cfg.n_edits);
    let mut max_constraint_residual: f64 = 0.0;
    let mut w_tilde = w0_tilde_norm_sq;

    for n in 0..=cfg.n_edits {
        if n > 0 {
            let started = Instant::now();
            let key = keys.sample_key()?;
            let request = models.values.request(n as u64, key, &mut value_rng)?;
            let v_hat = models.values.target(&state.w, w_tilde, &request, &mut value_rng)?;
            let v_new = match &anchor {
                Some(a) => rescale(&v_hat, a)?,
                None => v_hat.clone(),
            };
            let outcome = state.apply_edit_rescaled(&request, &v_hat, &v_new)?;
            timings.push(started.elapsed().as_secs_f64());
            max_constraint_residual = max_constraint_residual.max(outcome.constraint_residual);
            w_tilde = state.w_tilde_norm_sq();
            let w_norm_sq = state.w_norm_sq();
            trace.push(TraceRecord {
                n,
                w_norm_sq,
                r_n: (w_norm_sq / state.w0_norm_sq).sqrt(),
                v_old_norm_sq: outcome.v_old.norm_squared(),
                v_new_norm_sq: outcome.v_new.norm_squared(),
                v_new_unconstrained_norm_sq: outcome.v_new_unconstrained.norm_squared(),
                key_norm_sq: outcome.key_norm_sq,
                key_c_norm_sq: outcome.key_c_norm_sq,
                w_tilde_norm_sq: w_tilde,
            });
            let paraphrases = (0..cfg.probes.paraphrases_per_edit)
                .map(|_| paraphrase(&request.key, cfg.probes.sigma_p, cfg.probes.cos_floor, &mut paraphrase_rng))
                .collect();
            probe_set.record_edit(EditProbe {
                key: request.key,
                v_new: outcome.v_new,
                paraphrases,
            });
        }
        if checkpoint_steps.get(next_checkpoint) != Some(&n) {
            continue;
        }
        next_checkpoint += 1;

        let w_norm_sq = state.w_norm_sq();
        for i in 0..cfg.probes.batch {
            let key = models.keys.draw_fresh(&mut probe_key_rng);
            let request = models.values.request(i as u64, key, &mut probe_value_rng)?;
            let v_hat = models.values.target(&state.w, w_tilde, &request, &mut probe_value_rng)?;
            let v_new = match &anchor {
                Some(a) => rescale(&v_hat, a)?,
                None => v_hat.clone(),
            };
            probes.push(ProbeSample {
                n,
                w_norm_sq,
                w_tilde_norm_sq: w_tilde,
                v_old_norm_sq: state.pre_edit_value(&request.key)?.norm_squared(),
                v_new_norm_sq: v_new.norm_squared(),
                v_new_unconstrained_norm_sq: v_hat.norm_squared(),
                key_norm_sq: request.key.norm_squared(),
                key_c_norm_sq: state.c.inv_quad(&request.key)?,
            });
        }
        let report = evaluate_edits(&state, &probe_set, &cfg.metrics)?;
        let drift = representation_drift(&w0, &state.w, &probe_set.holdout_keys)?;
        checkpoints.push(Checkpoint {
            n,
            w_norm_sq,
            w_tilde_norm_sq: w_tilde,
            r_n: state.r_n(),
            efficacy: report.efficacy,
            generalization: report.generalization,
            specificity: report.specificity,
            score: report.score,
            drift: drift.delta,
            dispersion: drift.dispersion_post,
        });
    }

    Ok(SeedRun {
        seed,
        nas_enabled: anchor.is_some(),
        w0_norm_sq: state.w0_norm_sq,
        w0_tilde_norm_sq,
        anchor,
        trace,
        checkpoints,
        probes,
        max_constraint_residual,
        per_edit_seconds: mean_std(&timings),
    })
}

/// Run one seed, turning errors and panics into a [`SeedFailure`].
pub fn run_seed_isolated(cfg: &RunConfig, models: &SharedModels, seed: u64) -> SeedOutcome {
    match catch_unwind(AssertUnwindSafe(|| run_seed(cfg, models, seed))) {
        Ok(Ok(run)) => Ok(run),
        Ok(Err(e)) => Err(SeedFailure {
            seed,
            numeric: !e.is_config(),
            error: e.to_string(),
        }),
        Err(panic) => Err(SeedFailure {
            seed,
            numeric: true,
            error: panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()),
        }),
    }
}

/// Run every seed of `cfg` in parallel; results follow the order of `cfg.seeds`.
pub fn run_all(cfg: &RunConfig) -> Result<Vec<SeedOutcome>> {
    cfg.validate()?;
    let models = SharedModels::build(cfg)?;
    Ok(cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed_isolated(cfg, &models, seed))
        .collect())
}

/// Successful runs, or an error naming the first failure.
pub fn require_all(outcomes: Vec<SeedOutcome>) -> Result<Vec<SeedRun>> {
    outcomes
        .into_iter()
        .map(|o| o.map_err(|f| Error::Numeric(format!("seed {} failed: {}", f.seed, f.error))))
        .collect()
}
