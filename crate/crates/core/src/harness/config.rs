use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::Estimator;
use crate::error::{Error, Result};
use crate::metrics::MetricsConfig;
use crate::models::{KeyMode, KeyRadial, ValueModelConfig};
use crate::nas::DEFAULT_PILOT_N;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Check the edit constraint after every edit.
    #[default]
    Debug,
    /// Check the edit constraint every 100 edits.
    Fast,
}

impl Profile {
    pub fn check_every(self) -> usize {
        match self {
            Profile::Debug => 1,
            Profile::Fast => 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Dims {
    pub d_v: usize,
    pub d_k: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self { d_v: 64, d_k: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeySpec {
    pub mode: KeyMode,
    pub radial: KeyRadial,
    pub condition_number: f64,
    /// Seed of the second-moment matrix and of a fixed pool; shared by all run seeds.
    pub seed: u64,
    /// Fixed-pool size; defaults to `n_edits`.
    pub pool_size: Option<usize>,
}

impl Default for KeySpec {
    fn default() -> Self {
        Self {
            mode: KeyMode::AnisotropicSpd,
            radial: KeyRadial::Shell,
            condition_number: 10.0,
            seed: 0,
            pool_size: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NasSpec {
    pub enabled: bool,
    pub pilot_n: usize,
    /// Use this anchor instead of estimating one.
    pub anchor: Option<f64>,
}

impl Default for NasSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            pilot_n: DEFAULT_PILOT_N,
            anchor: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSpec {
    /// Target values sampled (and discarded) per checkpoint for the norm-law fits.
    pub batch: usize,
    pub neighborhood: usize,
    pub holdout: usize,
    pub paraphrases_per_edit: usize,
    /// Paraphrase noise as a fraction of the key norm.
    pub sigma_p: f64,
    pub cos_floor: f64,
    /// Efficacy and generalization look at this many most recent edits; all edits if unset.
    pub efficacy_window: Option<usize>,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            batch: 32,
            neighborhood: 128,
            holdout: 64,
            paraphrases_per_edit: 1,
            sigma_p: 0.05,
            cos_floor: 0.9,
            efficacy_window: Some(10),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSpec {
    pub estimator: Estimator,
    pub cp_threshold: f64,
    /// Largest growth factor of the predicted trajectory compared against the realized mean.
    pub max_growth: f64,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self {
            estimator: Estimator::RelativeWls,
            cp_threshold: 60.0,
            max_growth: 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dims: Dims,
    pub w0_sigma: f64,
    pub n_edits: usize,
    pub checkpoint_every: usize,
    pub seeds: Vec<u64>,
    pub profile: Profile,
    pub out_dir: Option<PathBuf>,
    pub keys: KeySpec,
    pub values: ValueModelConfig,
    pub nas: NasSpec,
    pub probes: ProbeSpec,
    pub metrics: MetricsConfig,
    pub analysis: AnalysisSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dims: Dims::default(),
            w0_sigma: 1.0,
            n_edits: 5000,
            checkpoint_every: 50,
            seeds: (0..20).collect(),
            profile: Profile::Debug,
            out_dir: None,
            keys: KeySpec::default(),
            values: ValueModelConfig::default(),
            nas: NasSpec::default(),
            probes: ProbeSpec::default(),
            metrics: MetricsConfig::default(),
            analysis: AnalysisSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML serialisation.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.dims.d_v == 0 || self.dims.d_k == 0 {
            return bad("dims must be positive");
        }
        if !(self.w0_sigma > 0.0) {
            return bad("w0_sigma must be positive");
        }
        if self.n_edits == 0 {
            return bad("n_edits must be at least 1");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1");
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if !(self.keys.condition_number >= 1.0) {
            return bad("keys.condition_number must be >= 1");
        }
        if self.keys.mode == KeyMode::FixedPool && self.pool_size() < self.n_edits {
            return bad("keys.pool_size must cover n_edits");
        }
        if self.nas.enabled && self.nas.anchor.is_none() && self.nas.pilot_n == 0 {
            return bad("nas.pilot_n must be positive");
        }
        if let Some(a) = self.nas.anchor {
            if !(a > 0.0) {
                return bad("nas.anchor must be positive");
            }
        }
        if self.probes.neighborhood == 0 {
            return bad("probes.neighborhood must be positive");
        }
        if self.probes.holdout < 2 {
            return bad("probes.holdout must be at least 2");
        }
        if self.probes.paraphrases_per_edit == 0 {
            return bad("probes.paraphrases_per_edit must be positive");
        }
        if !(-1.0..1.0).contains(&self.probes.cos_floor) || !(self.probes.sigma_p >= 0.0) {
            return bad("probes.cos_floor must lie in [-1, 1) and sigma_p must be >= 0");
        }
        if self.probes.efficacy_window == Some(0) {
            return bad("probes.efficacy_window must be positive");
        }
        if !(self.metrics.tol > 0.0 && self.metrics.gen_factor > 0.0 && self.metrics.tol_spe > 0.0) {
            return bad("metric tolerances must be positive");
        }
        self.values.validate()
    }

    pub fn pool_size(&self) -> usize {
        self.keys.pool_size.unwrap_or(self.n_edits)
    }

    /// Steps at which metrics and probe batches are recorded (step 0 included).
    pub fn checkpoints(&self) -> Vec<usize> {
        let mut steps: Vec<usize> = (0..=self.n_edits).step_by(self.checkpoint_every).collect();
        if steps.last() != Some(&self.n_edits) {
            steps.push(self.n_edits);
        }
        steps
    }

    pub fn with_nas(&self, enabled: bool) -> Self {
        let mut cfg = self.clone();
        cfg.nas.enabled = enabled;
        cfg
    }
}
