//! Value-space editing metrics (efficacy, generalization, specificity, Score) and
//! the centroid drift probe.

use std::collections::VecDeque;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::editor::EditorState;
use crate::error::{Error, Result};
use crate::linalg::MemoryMatrix;
use crate::models::standard_normal;
use crate::streams::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Relative tolerance for an edit to count as recalled.
    pub tol: f64,
    /// Paraphrase keys are judged at `tol * gen_factor`.
    pub gen_factor: f64,
    /// Largest relative output movement of a neighborhood key that still counts as preserved.
    pub tol_spe: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            tol: 0.05,
            gen_factor: 2.0,
            tol_spe: 0.1,
        }
    }
}

/// One applied edit and its paraphrased keys.
#[derive(Debug, Clone, PartialEq)]
pub struct EditProbe {
    pub key: DVector<f64>,
    pub v_new: DVector<f64>,
    pub paraphrases: Vec<DVector<f64>>,
}

/// Probe keys for the metrics of one run.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub edits: VecDeque<EditProbe>,
    /// Keep only the most recent edits when set.
    pub window: Option<usize>,
    pub neighborhood_keys: Vec<DVector<f64>>,
    /// Outputs of the unedited model on the neighborhood keys.
    pub neighborhood_reference: Vec<DVector<f64>>,
    pub holdout_keys: Vec<DVector<f64>>,
    pub sigma_p: f64,
    pub cos_floor: f64,
}

impl ProbeSet {
    pub fn new(
        clean: &MemoryMatrix,
        neighborhood_keys: Vec<DVector<f64>>,
        holdout_keys: Vec<DVector<f64>>,
        sigma_p: f64,
        cos_floor: f64,
        window: Option<usize>,
    ) -> Result<Self> {
        let neighborhood_reference = neighborhood_keys
            .iter()
            .map(|k| clean.apply(k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            edits: VecDeque::new(),
            window,
            neighborhood_keys,
            neighborhood_reference,
            holdout_keys,
            sigma_p,
            cos_floor,
        })
    }

    pub fn record_edit(&mut self, probe: EditProbe) {
        self.edits.push_back(probe);
        if let Some(w) = self.window {
            while self.edits.len() > w {
                self.edits.pop_front();
            }
        }
    }
}

/// `key + sigma_p ||key|| / sqrt(d) z`, rescaled to `||key||`, redrawn until its cosine
/// with `key` reaches `cos_floor`.
pub fn paraphrase(key: &DVector<f64>, sigma_p: f64, cos_floor: f64, rng: &mut SimRng) -> DVector<f64> {
    let norm = key.norm();
    let std = sigma_p * norm / (key.len() as f64).sqrt();
    loop {
        let candidate = key + standard_normal(rng, key.len()) * std;
        let c_norm = candidate.norm();
        if c_norm == 0.0 {
            continue;
        }
        let candidate = candidate * (norm / c_norm);
        if candidate.dot(key) / (norm * norm) >= cos_floor {
            return candidate;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub efficacy: Option<f64>,
    pub generalization: Option<f64>,
    pub specificity: f64,
    pub score: Option<f64>,
}

/// Harmonic mean of the three components in percent; 0 if any component is 0.
pub fn harmonic_score(eff: f64, gen: f64, spe: f64) -> f64 {
    if eff <= 0.0 || gen <= 0.0 || spe <= 0.0 {
        return 0.0;
    }
    300.0 / (1.0 / eff + 1.0 / gen + 1.0 / spe)
}

fn recalled(w: &MemoryMatrix, key: &DVector<f64>, target: &DVector<f64>, tol: f64) -> Result<bool> {
    let out = w.apply(key)?;
    Ok((out - target).norm() <= tol * target.norm())
}

fn fraction(hits: usize, total: usize) -> f64 {
    hits as f64 / total as f64
}

pub fn evaluate_edits(state: &EditorState, probes: &ProbeSet, cfg: &MetricsConfig) -> Result<MetricsReport> {
    if probes.neighborhood_keys.is_empty() {
        return Err(Error::MissingProbes("no neighborhood keys".into()));
    }
    let w = &state.w;
    let (efficacy, generalization) = if probes.edits.is_empty() {
        (None, None)
    } else {
        let mut eff_hits = 0;
        let mut gen_hits = 0;
        let mut gen_total = 0;
        for edit in &probes.edits {
            eff_hits += recalled(w, &edit.key, &edit.v_new, cfg.tol)? as usize;
            for p in &edit.paraphrases {
                gen_hits += recalled(w, p, &edit.v_new, cfg.tol * cfg.gen_factor)? as usize;
                gen_total += 1;
            }
        }
        if gen_total == 0 {
            return Err(Error::MissingProbes("edits carry no paraphrase keys".into()));
        }
        (
            Some(fraction(eff_hits, probes.edits.len())),
            Some(fraction(gen_hits, gen_total)),
        )
    };
    let mut spe_hits = 0;
    for (k, reference) in probes.neighborhood_keys.iter().zip(&probes.neighborhood_reference) {
        let moved = (w.apply(k)? - reference).norm();
        spe_hits += (moved < cfg.tol_spe * reference.norm()) as usize;
    }
    let specificity = fraction(spe_hits, probes.neighborhood_keys.len());
    let score = match (efficacy, generalization) {
        (Some(e), Some(g)) => Some(harmonic_score(e, g, specificity)),
        _ => None,
    };
    Ok(MetricsReport {
        efficacy,
        generalization,
        specificity,
        score,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    #[serde(skip)]
    pub centroid_pre: DVector<f64>,
    #[serde(skip)]
    pub centroid_post: DVector<f64>,
    pub delta: f64,
    pub dispersion_pre: f64,
    pub dispersion_post: f64,
}

fn centroid_and_dispersion(w: &MemoryMatrix, keys: &[DVector<f64>]) -> Result<(DVector<f64>, f64)> {
    let outs = keys.iter().map(|k| w.apply(k)).collect::<Result<Vec<_>>>()?;
    let n = outs.len() as f64;
    let centroid = outs.iter().fold(DVector::zeros(w.d_v()), |acc, o| acc + o) / n;
    let dispersion = outs.iter().map(|o| (o - &centroid).norm()).sum::<f64>() / n;
    Ok((centroid, dispersion))
}

/// Centroid distance and dispersion of the outputs `W k` over holdout keys.
pub fn representation_drift(
    pre: &MemoryMatrix,
    post: &MemoryMatrix,
    holdout_keys: &[DVector<f64>],
) -> Result<DriftReport> {
    if holdout_keys.len() < 2 {
        return Err(Error::MissingProbes(format!(
            "drift needs at least 2 holdout keys, got {}",
            holdout_keys.len()
        )));
    }
    let (centroid_pre, dispersion_pre) = centroid_and_dispersion(pre, holdout_keys)?;
    let (centroid_post, dispersion_post) = centroid_and_dispersion(post, holdout_keys)?;
    Ok(DriftReport {
        delta: (&centroid_post - &centroid_pre).norm(),
        centroid_pre,
        centroid_post,
        dispersion_pre,
        dispersion_post,
    })
}
