//! Closed-form rank-one Locate-and-Edit updates applied sequentially.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{EditDelta, MemoryMatrix, SpdMatrix, Whitener};
use crate::models::{EditRequest, MIN_KEY_NORM};
use crate::streams::SimRng;

/// Bound on the relative constraint residual `||W_n k - v_new|| / ||v_new||`.
pub const CONSTRAINT_TOL: f64 = 1e-8;

/// `W_0` with i.i.d. `N(0, sigma^2 / d_k)` entries.
pub fn init_weights(d_v: usize, d_k: usize, sigma: f64, rng: &mut SimRng) -> Result<MemoryMatrix> {
    let std = sigma / (d_k as f64).sqrt();
    MemoryMatrix::new(DMatrix::from_fn(d_v, d_k, |_, _| {
        let z: f64 = StandardNormal.sample(&mut *rng);
        z * std
    }))
}

/// The matrix under edit together with the key second moment.
#[derive(Debug, Clone)]
pub struct EditorState {
    pub w: MemoryMatrix,
    pub c: Arc<SpdMatrix>,
    pub step: usize,
    pub w0_norm_sq: f64,
    /// Raise [`Error::ConstraintViolation`] on steps divisible by this (1 checks every edit).
    pub check_every: usize,
    whitener: Option<Arc<Whitener>>,
}

/// Everything produced by one applied edit.
#[derive(Debug, Clone, PartialEq)]
pub struct EditOutcome {
    pub v_old: DVector<f64>,
    pub v_new: DVector<f64>,
    pub v_new_unconstrained: DVector<f64>,
    pub delta: EditDelta,
    pub key_norm_sq: f64,
    pub key_c_norm_sq: f64,
    /// `||W_n k - v_new|| / ||v_new||` measured after the update.
    pub constraint_residual: f64,
}

impl EditorState {
    pub fn new(w0: MemoryMatrix, c: Arc<SpdMatrix>) -> Result<Self> {
        if c.dim() != w0.d_k() {
            return Err(Error::Shape(format!(
                "C is {}x{} but W has d_k = {}",
                c.dim(),
                c.dim(),
                w0.d_k()
            )));
        }
        let whitener = (!c.is_identity()).then(|| Arc::new(Whitener::new(&c)));
        Ok(Self {
            w0_norm_sq: w0.norm_sq(),
            w: w0,
            c,
            step: 0,
            check_every: 1,
            whitener,
        })
    }

    pub fn with_check_every(mut self, every: usize) -> Self {
        self.check_every = every.max(1);
        self
    }

    pub fn d_v(&self) -> usize {
        self.w.d_v()
    }

    pub fn d_k(&self) -> usize {
        self.w.d_k()
    }

    pub fn whitener(&self) -> Option<&Whitener> {
        self.whitener.as_deref()
    }

    pub fn w_norm_sq(&self) -> f64 {
        self.w.norm_sq()
    }

    /// `||W C^{1/2}||_F^2`; equals `||W||_F^2` when `C = I`.
    pub fn w_tilde_norm_sq(&self) -> f64 {
        match &self.whitener {
            Some(wh) => wh.weight_norm_sq(self.w.as_matrix()),
            None => self.w.norm_sq(),
        }
    }

    /// `R_n = ||W_n|| / ||W_0||`.
    pub fn r_n(&self) -> f64 {
        (self.w.norm_sq() / self.w0_norm_sq).sqrt()
    }

    /// `W_{n-1} k`.
    pub fn pre_edit_value(&self, key: &DVector<f64>) -> Result<DVector<f64>> {
        self.w.apply(key)
    }

    /// `(v_new - v_old) (C^{-1} k)^T / (k^T C^{-1} k)` with `v_old = W k`.
    pub fn compute_delta(&self, key: &DVector<f64>, v_new: &DVector<f64>) -> Result<EditDelta> {
        let norm = key.norm();
        if !(norm > MIN_KEY_NORM) {
            return Err(Error::DegenerateKey(norm));
        }
        if v_new.len() != self.d_v() {
            return Err(Error::Shape(format!(
                "v_new has length {}, expected d_v = {}",
                v_new.len(),
                self.d_v()
            )));
        }
        let v_old = self.pre_edit_value(key)?;
        let c_inv_k = if self.c.is_identity() {
            key.clone()
        } else {
            self.c.solve(key)?
        };
        let scale = key.dot(&c_inv_k);
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Numeric(format!("k^T C^-1 k = {scale}")));
        }
        Ok(EditDelta {
            value_diff: v_new - v_old,
            key_row: c_inv_k,
            scale,
        })
    }

    /// Apply the edit that writes `v_new` at `request.key`.
    pub fn apply_edit(&mut self, request: &EditRequest, v_new: &DVector<f64>) -> Result<EditOutcome> {
        self.apply_edit_rescaled(request, v_new, v_new)
    }

    /// Apply the edit writing `v_new`, where `v_hat` is the value before any rescaling.
    pub fn apply_edit_rescaled(
        &mut self,
        request: &EditRequest,
        v_hat: &DVector<f64>,
        v_new: &DVector<f64>,
    ) -> Result<EditOutcome> {
        let key = &request.key;
        let v_old = self.pre_edit_value(key)?;
        let delta = self.compute_delta(key, v_new)?;
        self.w.add_delta(&delta)?;
        self.step += 1;

        let written = self.w.apply(key)?;
        let gap = (&written - v_new).norm();
        let target = v_new.norm();
        let constraint_residual = if target > 0.0 { gap / target } else { gap };
        if self.step % self.check_every == 0 && !(constraint_residual <= CONSTRAINT_TOL) {
            return Err(Error::ConstraintViolation {
                step: self.step,
                residual: constraint_residual,
            });
        }
        Ok(EditOutcome {
            v_old,
            v_new: v_new.clone(),
            v_new_unconstrained: v_hat.clone(),
            key_c_norm_sq: delta.scale,
            key_norm_sq: key.norm_squared(),
            delta,
            constraint_residual,
        })
    }
}

/// Mean of `||W' k - W k||^2` over the holdout keys.
pub fn minimal_disturbance_check(
    w_before: &MemoryMatrix,
    w_after: &MemoryMatrix,
    holdout_keys: &[DVector<f64>],
) -> Result<f64> {
    if holdout_keys.is_empty() {
        return Err(Error::MissingProbes("minimal disturbance needs at least one holdout key".into()));
    }
    let diff = w_after.as_matrix() - w_before.as_matrix();
    let total: f64 = holdout_keys.iter().map(|k| (&diff * k).norm_squared()).sum();
    Ok(total / holdout_keys.len() as f64)
}
