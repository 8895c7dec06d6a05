//! Clipping and Laplace noise on client uploads.
//!
//! The whole upload of a client is one vector: it is clipped to L2 norm `C`
//! and every entry then receives Laplace(0, b) noise with
//! `b = C / (epsilon · n_local)`. `epsilon = ∞` (or `enabled = false`) makes
//! the mechanism the identity, with no clipping either.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm2, sample_laplace, Rng};
use crate::ranksel::SparseUpload;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpConfig {
    pub enabled: bool,
    pub epsilon: f64,
    pub clip: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            enabled: true,
            epsilon: f64::INFINITY,
            clip: 2.0,
        }
    }
}

impl DpConfig {
    pub fn with_epsilon(epsilon: f64, clip: f64) -> Self {
        DpConfig {
            enabled: true,
            epsilon,
            clip,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.enabled || self.epsilon == f64::INFINITY
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::config("dp.epsilon must be positive (or inf)"));
        }
        if !(self.clip.is_finite() && self.clip > 0.0) {
            return Err(Error::config("dp.clip must be positive and finite"));
        }
        Ok(())
    }

    /// Laplace scale for a client holding `n_local` samples; 0 for the
    /// identity mechanism.
    pub fn noise_scale(&self, n_local: usize) -> f64 {
        if self.is_identity() {
            0.0
        } else {
            self.clip / (self.epsilon * n_local as f64)
        }
    }
}

/// Scales `values` by `min(1, C / ‖values‖₂)`; returns the factor used.
pub fn clip_update(values: &mut [f64], clip: f64) -> f64 {
    let norm = norm2(values);
    if norm <= clip {
        return 1.0;
    }
    let factor = clip / norm;
    for v in values.iter_mut() {
        *v *= factor;
    }
    factor
}

/// Adds i.i.d. Laplace noise of scale `cfg.noise_scale(n_local)` to every
/// value.
pub fn add_noise(values: &mut [f64], cfg: &DpConfig, n_local: usize, rng: &mut Rng) {
    if cfg.is_identity() {
        return;
    }
    let b = cfg.noise_scale(n_local);
    for v in values.iter_mut() {
        *v += sample_laplace(rng, b);
    }
}

/// Clip then noise a whole upload in place.
pub fn privatize(upload: &mut SparseUpload, cfg: &DpConfig, n_local: usize, rng: &mut Rng) -> Result<()> {
    if cfg.is_identity() {
        return Ok(());
    }
    if n_local == 0 {
        return Err(Error::config("dp noise needs a non-empty local dataset"));
    }
    let mut flat: Vec<f64> = upload.values().copied().collect();
    clip_update(&mut flat, cfg.clip);
    add_noise(&mut flat, cfg, n_local, rng);
    for (dst, src) in upload.values_mut().zip(flat) {
        *dst = src;
    }
    Ok(())
}
