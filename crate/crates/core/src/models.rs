//! Stochastic inputs of the simulation: keys drawn with second moment `C`, and
//! target values produced either by a surrogate NLL optimisation or by a
//! statistical model realising linear norm laws.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, MemoryMatrix, SpdMatrix};
use crate::streams::{stream_rng, SimRng, Stream};

/// Floor applied to sampled squared target norms.
pub const NORM_FLOOR: f64 = 1e-8;

/// Smallest admissible key norm.
pub const MIN_KEY_NORM: f64 = 1e-8;

pub(crate) fn standard_normal(rng: &mut SimRng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}

pub(crate) fn random_unit(rng: &mut SimRng, n: usize) -> DVector<f64> {
    loop {
        let g = standard_normal(rng, n);
        let norm = g.norm();
        if norm > 0.0 {
            return g / norm;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeyMode {
    Isotropic,
    AnisotropicSpd,
    FixedPool,
}

/// Radial law of a key draw `k = L z`.
///
/// `Gaussian` uses `z ~ N(0, I)`. `Shell` rescales `z` to norm `sqrt(d_k)`, which keeps
/// `E[k k^T] = C` while fixing the whitened key norm at `d_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeyRadial {
    Gaussian,
    Shell,
}

/// A key distribution with SPD second moment `C`.
#[derive(Debug, Clone)]
pub struct KeyModel {
    pub second_moment: Arc<SpdMatrix>,
    pub dim: usize,
    pub seed: u64,
    pub mode: KeyMode,
    pub radial: KeyRadial,
    pool: Option<Arc<Vec<DVector<f64>>>>,
}

/// `Q diag(lambda) Q^T` with log-uniform eigenvalues spanning exactly `[1, cond]`,
/// rescaled to unit mean eigenvalue.
pub fn random_spd(dim: usize, cond: f64, rng: &mut SimRng) -> Result<SpdMatrix> {
    if !(cond >= 1.0) || !cond.is_finite() {
        return Err(Error::Config(format!("condition number must be >= 1, got {cond}")));
    }
    if dim == 1 {
        return Ok(SpdMatrix::identity(1));
    }
    let gauss = DMatrix::<f64>::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut *rng));
    let q = gauss.qr().q();
    let log_c = cond.ln();
    let mut eig: Vec<f64> = (0..dim)
        .map(|i| match i {
            0 => 0.0,
            1 => log_c,
            _ => rng.random_range(0.0..=log_c),
        })
        .map(f64::exp)
        .collect();
    let mean = eig.iter().sum::<f64>() / dim as f64;
    eig.iter_mut().for_each(|x| *x /= mean);
    let lam = DMatrix::from_diagonal(&DVector::from_vec(eig));
    let c: DMatrix<f64> = &q * lam * q.transpose();
    cholesky(&((&c + c.transpose()) * 0.5))
}

impl KeyModel {
    pub fn isotropic(dim: usize, radial: KeyRadial, seed: u64) -> Self {
        Self {
            second_moment: Arc::new(SpdMatrix::identity(dim)),
            dim,
            seed,
            mode: KeyMode::Isotropic,
            radial,
            pool: None,
        }
    }

    /// Random anisotropic `C` with the given condition number, generated from `seed`.
    pub fn anisotropic(dim: usize, cond: f64, radial: KeyRadial, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, Stream::KeyModel);
        let c = random_spd(dim, cond, &mut rng)?;
        Ok(Self {
            second_moment: Arc::new(c),
            dim,
            seed,
            mode: KeyMode::AnisotropicSpd,
            radial,
            pool: None,
        })
    }

    /// A fixed pool of `pool_size` keys drawn once from `N(0, C)` (or the shell law).
    pub fn fixed_pool(
        second_moment: SpdMatrix,
        radial: KeyRadial,
        seed: u64,
        pool_size: usize,
    ) -> Self {
        let dim = second_moment.dim();
        let mut model = Self {
            second_moment: Arc::new(second_moment),
            dim,
            seed,
            mode: KeyMode::FixedPool,
            radial,
            pool: None,
        };
        let mut rng = stream_rng(seed, Stream::KeyPool);
        let pool = (0..pool_size).map(|_| model.draw(&mut rng)).collect();
        model.pool = Some(Arc::new(pool));
        model
    }

    fn draw(&self, rng: &mut SimRng) -> DVector<f64> {
        let mut z = standard_normal(rng, self.dim);
        if self.radial == KeyRadial::Shell {
            let norm = z.norm();
            z *= (self.dim as f64).sqrt() / norm;
        }
        if self.second_moment.is_identity() {
            z
        } else {
            &self.second_moment.chol_lower * z
        }
    }

    /// A key from the underlying distribution, bypassing any fixed pool.
    pub fn draw_fresh(&self, rng: &mut SimRng) -> DVector<f64> {
        self.draw(rng)
    }

    /// A sampler drawing from this model with its own generator.
    pub fn sampler(&self, mut rng: SimRng) -> KeySampler {
        let order = self.pool.as_ref().map(|pool| {
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            idx.shuffle(&mut rng);
            idx
        });
        KeySampler {
            model: self.clone(),
            rng,
            order,
            drawn: 0,
        }
    }
}

/// Stateful key sampler; deterministic in (generator seed, draw index).
#[derive(Debug, Clone)]
pub struct KeySampler {
    model: KeyModel,
    rng: SimRng,
    order: Option<Vec<usize>>,
    drawn: usize,
}

impl KeySampler {
    pub fn sample_key(&mut self) -> Result<DVector<f64>> {
        let key = match (&self.order, &self.model.pool) {
            (Some(order), Some(pool)) => {
                let idx = *order
                    .get(self.drawn)
                    .ok_or(Error::PoolExhausted(self.drawn))?;
                pool[idx].clone()
            }
            _ => self.model.draw(&mut self.rng),
        };
        self.drawn += 1;
        Ok(key)
    }

    pub fn drawn(&self) -> usize {
        self.drawn
    }

    pub fn model(&self) -> &KeyModel {
        &self.model
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueMode {
    SurrogateNll,
    StatisticalLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValueModelConfig {
    pub mode: ValueMode,
    pub s_new: f64,
    pub b_new: f64,
    pub noise_std: f64,
    pub direction_mix: f64,
    pub readout_classes: usize,
    pub opt_steps: usize,
    pub opt_lr: f64,
}

impl Default for ValueModelConfig {
    fn default() -> Self {
        Self {
            mode: ValueMode::StatisticalLinear,
            s_new: 1.1,
            b_new: 0.0,
            noise_std: 5.0,
            direction_mix: 0.5,
            readout_classes: 16,
            opt_steps: 25,
            opt_lr: 0.5,
        }
    }
}

impl ValueModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.direction_mix) {
            return bad(format!("direction_mix must lie in [0, 1], got {}", self.direction_mix));
        }
        if !(self.noise_std >= 0.0) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        match self.mode {
            ValueMode::StatisticalLinear => {
                if !(self.s_new >= 0.0) {
                    return bad(format!("statistical mode needs s_new >= 0, got {}", self.s_new));
                }
                if !self.b_new.is_finite() {
                    return bad("b_new must be finite".into());
                }
            }
            ValueMode::SurrogateNll => {
                if self.readout_classes < 2 {
                    return bad("surrogate mode needs readout_classes >= 2".into());
                }
                if self.opt_steps < 1 {
                    return bad("surrogate mode needs opt_steps >= 1".into());
                }
                if !(self.opt_lr > 0.0) {
                    return bad(format!("opt_lr must be positive, got {}", self.opt_lr));
                }
            }
        }
        Ok(())
    }
}

/// One atomic edit.
#[derive(Debug, Clone, PartialEq)]
pub struct EditRequest {
    pub id: u64,
    pub key: DVector<f64>,
    pub target_class: Option<usize>,
}

impl EditRequest {
    pub fn new(id: u64, key: DVector<f64>, target_class: Option<usize>) -> Result<Self> {
        let norm = key.norm();
        if !(norm > MIN_KEY_NORM) {
            return Err(Error::DegenerateKey(norm));
        }
        Ok(Self { id, key, target_class })
    }
}

/// Fixed random linear readout `U` (classes x d_v) with entries `N(0, 1/d_v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    pub u: DMatrix<f64>,
}

impl Readout {
    pub fn random(classes: usize, d_v: usize, rng: &mut SimRng) -> Self {
        let scale = 1.0 / (d_v as f64).sqrt();
        let u = DMatrix::from_fn(classes, d_v, |_, _| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            z * scale
        });
        Self { u }
    }

    pub fn classes(&self) -> usize {
        self.u.nrows()
    }

    fn probs(&self, v: &DVector<f64>) -> DVector<f64> {
        let logits = &self.u * v;
        let max = logits.max();
        let exp = logits.map(|x| (x - max).exp());
        let z = exp.sum();
        exp / z
    }

    /// `-log softmax(U v)[class]`.
    pub fn nll(&self, v: &DVector<f64>, class: usize) -> f64 {
        let logits = &self.u * v;
        let max = logits.max();
        let lse = max + logits.map(|x| (x - max).exp()).sum().ln();
        lse - logits[class]
    }

    /// Gradient of [`Readout::nll`] with respect to `v`: `U^T (p - e_class)`.
    pub fn nll_grad(&self, v: &DVector<f64>, class: usize) -> DVector<f64> {
        let mut p = self.probs(v);
        p[class] -= 1.0;
        self.u.transpose() * p
    }
}

/// Target value by gradient descent on an additive correction `delta` (initialised at
/// zero) minimising the readout NLL of `target_class`; returns `v_old + delta`.
pub fn target_value_surrogate(
    w: &MemoryMatrix,
    k: &DVector<f64>,
    target_class: usize,
    cfg: &ValueModelConfig,
    readout: &Readout,
) -> Result<DVector<f64>> {
    if target_class >= readout.classes() {
        return Err(Error::Config(format!(
            "target class {target_class} out of range for {} classes",
            readout.classes()
        )));
    }
    let v_old = w.apply(k)?;
    let mut delta = DVector::zeros(v_old.len());
    for step in 0..cfg.opt_steps {
        let grad = readout.nll_grad(&(&v_old + &delta), target_class);
        delta -= grad * cfg.opt_lr;
        if delta.iter().any(|x| !x.is_finite()) {
            return Err(Error::OptDiverged(step));
        }
    }
    Ok(v_old + delta)
}

/// Target value whose squared norm follows `s_new * w_norm_sq + b_new + noise`
/// (floored at [`NORM_FLOOR`]) and whose direction mixes `v_old` with an isotropic
/// random direction.
///
/// `w_norm_sq` is the regressor of the norm law: `||W||_F^2` for `C = I`, the
/// whitened `||W C^{1/2}||_F^2` otherwise.
pub fn target_value_statistical(
    w: &MemoryMatrix,
    w_norm_sq: f64,
    k: &DVector<f64>,
    cfg: &ValueModelConfig,
    rng: &mut SimRng,
) -> Result<DVector<f64>> {
    let v_old = w.apply(k)?;
    let eta: f64 = StandardNormal.sample(&mut *rng);
    let target = (cfg.s_new * w_norm_sq + cfg.b_new + cfg.noise_std * eta).max(NORM_FLOOR);
    let g = random_unit(rng, v_old.len());
    let old_norm = v_old.norm();
    let dir = if cfg.direction_mix > 0.0 && old_norm > 0.0 {
        let mixed = &v_old * (cfg.direction_mix / old_norm) + &g * (1.0 - cfg.direction_mix);
        let n = mixed.norm();
        if n > 0.0 {
            mixed / n
        } else {
            g
        }
    } else {
        g
    };
    Ok(dir * target.sqrt())
}

/// Value model bound to its configuration (and readout in surrogate mode).
#[derive(Debug, Clone)]
pub struct ValueModel {
    pub cfg: ValueModelConfig,
    pub readout: Option<Readout>,
}

impl ValueModel {
    /// Build the model; the surrogate readout is drawn from `readout_seed`.
    pub fn new(cfg: ValueModelConfig, d_v: usize, readout_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let readout = match cfg.mode {
            ValueMode::SurrogateNll => {
                let mut rng = stream_rng(readout_seed, Stream::Readout);
                Some(Readout::random(cfg.readout_classes, d_v, &mut rng))
            }
            ValueMode::StatisticalLinear => None,
        };
        Ok(Self { cfg, readout })
    }

    /// A request for `key`; in surrogate mode a uniformly random target class is attached.
    pub fn request(&self, id: u64, key: DVector<f64>, rng: &mut SimRng) -> Result<EditRequest> {
        let class = match self.cfg.mode {
            ValueMode::SurrogateNll => Some(rng.random_range(0..self.cfg.readout_classes)),
            ValueMode::StatisticalLinear => None,
        };
        EditRequest::new(id, key, class)
    }

    /// Unconstrained target value for `request` against the current weights.
    pub fn target(
        &self,
        w: &MemoryMatrix,
        w_norm_sq: f64,
        request: &EditRequest,
        rng: &mut SimRng,
    ) -> Result<DVector<f64>> {
        match (&self.readout, self.cfg.mode) {
            (Some(readout), ValueMode::SurrogateNll) => {
                let class = request.target_class.ok_or_else(|| {
                    Error::Config("surrogate mode requires a target class".into())
                })?;
                target_value_surrogate(w, &request.key, class, &self.cfg, readout)
            }
            _ => target_value_statistical(w, w_norm_sq, &request.key, &self.cfg, rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn stat_cfg(s_new: f64, b_new: f64, noise_std: f64) -> ValueModelConfig {
        ValueModelConfig {
            mode: ValueMode::StatisticalLinear,
            s_new,
            b_new,
            noise_std,
            ..Default::default()
        }
    }

    #[test]
    fn sample_key_is_reproducible() {
        for radial in [KeyRadial::Gaussian, KeyRadial::Shell] {
            let model = KeyModel::isotropic(8, radial, 1);
            let mut a = model.sampler(stream_rng(42, Stream::Keys));
            let mut b = model.sampler(stream_rng(42, Stream::Keys));
            for _ in 0..5 {
                let ka = a.sample_key().unwrap();
                let kb = b.sample_key().unwrap();
                assert_eq!(
                    ka.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                    kb.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
                );
            }
        }
    }

    #[test]
    fn isotropic_mean_square_norm() {
        // E||k||^2 = tr(C) = d_k
        for radial in [KeyRadial::Gaussian, KeyRadial::Shell] {
            let d = 16;
            let model = KeyModel::isotropic(d, radial, 0);
            let mut s = model.sampler(stream_rng(7, Stream::Keys));
            let n = 100_000;
            let mean: f64 = (0..n).map(|_| s.sample_key().unwrap().norm_squared()).sum::<f64>()
                / (n as f64 * d as f64);
            assert!((0.95..=1.05).contains(&mean), "{radial:?}: {mean}");
        }
    }

    #[test]
    fn diagonal_second_moment_is_recovered() {
        let c = cholesky(&dmatrix![4.0, 0.0; 0.0, 1.0]).unwrap();
        for radial in [KeyRadial::Gaussian, KeyRadial::Shell] {
            let model = KeyModel {
                second_moment: Arc::new(c.clone()),
                dim: 2,
                seed: 0,
                mode: KeyMode::AnisotropicSpd,
                radial,
                pool: None,
            };
            let mut s = model.sampler(stream_rng(3, Stream::Keys));
            let n = 100_000;
            let m11 = (0..n).map(|_| s.sample_key().unwrap()[0].powi(2)).sum::<f64>() / n as f64;
            assert!((3.8..=4.2).contains(&m11), "{radial:?}: {m11}");
        }
    }

    #[test]
    fn anisotropic_model_matches_second_moment() {
        let d = 6;
        let model = KeyModel::anisotropic(d, 10.0, KeyRadial::Shell, 5).unwrap();
        let c = &model.second_moment;
        assert!((c.data.trace() - d as f64).abs() < 1e-9);
        let eig = c.data.clone().symmetric_eigenvalues();
        let cond = eig.max() / eig.min();
        assert!((cond - 10.0).abs() < 1e-8, "cond {cond}");

        let mut s = model.sampler(stream_rng(1, Stream::Keys));
        let n = 100_000;
        let mut acc = DMatrix::<f64>::zeros(d, d);
        for _ in 0..n {
            let k = s.sample_key().unwrap();
            acc += &k * k.transpose();
        }
        acc /= n as f64;
        for i in 0..d {
            let rel = (acc[(i, i)] - c.data[(i, i)]).abs() / c.data[(i, i)];
            assert!(rel < 0.05, "diag {i}: {rel}");
        }
    }

    #[test]
    fn shell_keys_have_constant_whitened_norm() {
        let d = 5;
        let model = KeyModel::anisotropic(d, 10.0, KeyRadial::Shell, 2).unwrap();
        let mut s = model.sampler(stream_rng(4, Stream::Keys));
        for _ in 0..50 {
            let k = s.sample_key().unwrap();
            let q = model.second_moment.inv_quad(&k).unwrap();
            assert!((q - d as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn fixed_pool_draws_without_replacement() {
        let model = KeyModel::fixed_pool(SpdMatrix::identity(3), KeyRadial::Gaussian, 8, 20);
        let mut s = model.sampler(stream_rng(1, Stream::Keys));
        let mut seen: Vec<Vec<u64>> = Vec::new();
        for _ in 0..20 {
            let k = s.sample_key().unwrap();
            let bits: Vec<u64> = k.iter().map(|x| x.to_bits()).collect();
            assert!(!seen.contains(&bits));
            seen.push(bits);
        }
        assert!(matches!(s.sample_key(), Err(Error::PoolExhausted(20))));
    }

    #[test]
    fn statistical_degenerate_law() {
        let w = MemoryMatrix::new(DMatrix::from_element(4, 3, 0.3)).unwrap();
        let k = dvector![1.0, -1.0, 0.5];
        let mut rng = stream_rng(0, Stream::ValueNoise);
        let v = target_value_statistical(&w, w.norm_sq(), &k, &stat_cfg(0.0, 4.0, 0.0), &mut rng)
            .unwrap();
        assert!((v.norm_squared() - 4.0).abs() < 1e-12);

        let v = target_value_statistical(&w, 100.0, &k, &stat_cfg(0.01, 1.0, 0.0), &mut rng).unwrap();
        assert!((v.norm_squared() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn statistical_zero_v_old_falls_back_to_random_direction() {
        let w = MemoryMatrix::zeros(4, 3).unwrap();
        let mut rng = stream_rng(0, Stream::ValueNoise);
        let mut cfg = stat_cfg(0.0, 9.0, 0.0);
        cfg.direction_mix = 1.0;
        let v = target_value_statistical(&w, 0.0, &dvector![1.0, 0.0, 0.0], &cfg, &mut rng).unwrap();
        assert!((v.norm_squared() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn statistical_monte_carlo_mean() {
        let w = MemoryMatrix::new(DMatrix::from_fn(6, 4, |i, j| (i as f64 - j as f64) * 0.4)).unwrap();
        let k = dvector![0.2, 1.0, -0.5, 0.3];
        let cfg = stat_cfg(0.3, 2.0, 1.5);
        let w_sq = w.norm_sq();
        let expected = cfg.s_new * w_sq + cfg.b_new;
        let mut rng = stream_rng(11, Stream::ValueNoise);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| target_value_statistical(&w, w_sq, &k, &cfg, &mut rng).unwrap().norm_squared())
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        assert!((mean - expected).abs() <= 3.0 * se, "mean {mean}, expected {expected}, se {se}");
    }

    fn surrogate_cfg(steps: usize, lr: f64, classes: usize) -> ValueModelConfig {
        ValueModelConfig {
            mode: ValueMode::SurrogateNll,
            readout_classes: classes,
            opt_steps: steps,
            opt_lr: lr,
            ..Default::default()
        }
    }

    #[test]
    fn surrogate_descends() {
        let model = ValueModel::new(surrogate_cfg(20, 0.5, 8), 6, 3).unwrap();
        let readout = model.readout.as_ref().unwrap();
        let w = MemoryMatrix::new(DMatrix::from_fn(6, 4, |i, j| ((i * 4 + j) as f64).sin())).unwrap();
        let k = dvector![0.5, -1.0, 0.25, 0.8];
        let v_old = w.apply(&k).unwrap();
        let v_new = target_value_surrogate(&w, &k, 5, &model.cfg, readout).unwrap();
        assert!(readout.nll(&v_new, 5) < readout.nll(&v_old, 5));
    }

    #[test]
    fn surrogate_zero_steps_returns_v_old() {
        let mut cfg = surrogate_cfg(1, 0.5, 4);
        let model = ValueModel::new(cfg.clone(), 3, 1).unwrap();
        cfg.opt_steps = 0;
        let w = MemoryMatrix::new(dmatrix![1.0, 2.0; 3.0, 4.0; 5.0, 6.0]).unwrap();
        let k = dvector![0.7, -0.2];
        let v = target_value_surrogate(&w, &k, 2, &cfg, model.readout.as_ref().unwrap()).unwrap();
        assert_eq!(v, w.apply(&k).unwrap());
    }

    #[test]
    fn surrogate_single_step_matches_finite_difference() {
        let readout = Readout { u: dmatrix![0.3, -0.4; -0.2, 0.9] };
        let cfg = surrogate_cfg(1, 0.1, 2);
        let w = MemoryMatrix::new(dmatrix![1.0, 0.0; 0.5, 2.0]).unwrap();
        let k = dvector![1.0, -0.5];
        let v_old = w.apply(&k).unwrap();
        // central differences of the NLL at v_old
        let h = 1e-6;
        let mut fd = DVector::zeros(2);
        for i in 0..2 {
            let mut plus = v_old.clone();
            let mut minus = v_old.clone();
            plus[i] += h;
            minus[i] -= h;
            fd[i] = (readout.nll(&plus, 1) - readout.nll(&minus, 1)) / (2.0 * h);
        }
        let expected = &v_old - fd * cfg.opt_lr;
        let got = target_value_surrogate(&w, &k, 1, &cfg, &readout).unwrap();
        assert!((got - expected).norm() < 1e-9);
    }

    #[test]
    fn surrogate_gradient_matches_central_differences() {
        let mut rng = stream_rng(21, Stream::Readout);
        for trial in 0..10 {
            let readout = Readout::random(3 + trial % 3, 5, &mut rng);
            let v = standard_normal(&mut rng, 5);
            let class = trial % readout.classes();
            let grad = readout.nll_grad(&v, class);
            for i in 0..5 {
                let h = 1e-5;
                let mut plus = v.clone();
                let mut minus = v.clone();
                plus[i] += h;
                minus[i] -= h;
                let fd = (readout.nll(&plus, class) - readout.nll(&minus, class)) / (2.0 * h);
                assert!(
                    (fd - grad[i]).abs() <= 1e-5 * grad[i].abs().max(1e-3),
                    "trial {trial} coord {i}: fd {fd} vs {}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn surrogate_rejects_out_of_range_class() {
        let model = ValueModel::new(surrogate_cfg(2, 0.1, 3), 2, 0).unwrap();
        let w = MemoryMatrix::zeros(2, 2).unwrap();
        let err = target_value_surrogate(&w, &dvector![1.0, 0.0], 3, &model.cfg, model.readout.as_ref().unwrap());
        assert!(err.is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = stat_cfg(-0.1, 0.0, 0.0);
        assert!(cfg.validate().is_err());
        cfg.s_new = 0.1;
        assert!(cfg.validate().is_ok());
        let mut cfg = surrogate_cfg(1, 0.1, 1);
        assert!(cfg.validate().is_err());
        cfg.readout_classes = 2;
        cfg.opt_steps = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn degenerate_request_rejected() {
        assert!(matches!(
            EditRequest::new(0, dvector![0.0, 1e-9], None),
            Err(Error::DegenerateKey(_))
        ));
    }
}
