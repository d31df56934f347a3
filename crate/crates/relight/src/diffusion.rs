//! Diffusion core: noise schedule, forward diffusion, multi-condition
//! classifier-free guidance, deterministic DDIM sampling, and an analytic
//! Gaussian epsilon-oracle that stands in for a learned denoiser during
//! verification.
//!
//! The forward process perturbs a clean latent as
//! `z_t = sqrt(abar_t) * z_0 + sqrt(1 - abar_t) * eps` and guidance combines
//! two conditional predictions as
//! `eps_hat = eps(c1) + omega * (eps(c2) - eps(c1))`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array4;
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_T_STEPS: usize = 10_000;

/// Training-discretization defaults (classic linear beta schedule).
pub const DEFAULT_T_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("T_steps must be in 1..={MAX_T_STEPS} (got {0})")]
    BadStepCount(usize),
    #[error("betas must satisfy 0 < beta_start <= beta_end < 1 (got {0}, {1})")]
    BadBetaRange(f64, f64),
    #[error("timestep {t} out of range for a {len}-step schedule")]
    BadTimestep { t: usize, len: usize },
    #[error("latent shape mismatch: {expected:?} vs {got:?}")]
    ShapeMismatch {
        expected: LatentShape,
        got: LatentShape,
    },
    #[error("step indices must be strictly decreasing (violated at position {0})")]
    NonMonotoneSteps(usize),
    #[error("step index list must not be empty")]
    EmptySteps,
    #[error("unknown oracle condition {0:?}")]
    UnknownCondition(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Per-step noise strengths and their running products.
///
/// Invariants: `alpha_bars` is strictly decreasing, stays in (0, 1), and is
/// consistent with `betas` (`abar_t = prod_{i<=t} (1 - beta_i)`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` (inclusive).
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if t_steps == 0 || t_steps > MAX_T_STEPS {
            return Err(DiffusionError::BadStepCount(t_steps));
        }
        if !(beta_start.is_finite()
            && beta_end.is_finite()
            && beta_start > 0.0
            && beta_start <= beta_end
            && beta_end < 1.0)
        {
            return Err(DiffusionError::BadBetaRange(beta_start, beta_end));
        }
        let betas: Vec<f64> = if t_steps == 1 {
            vec![beta_start]
        } else {
            (0..t_steps)
                .map(|i| {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64
                })
                .collect()
        };
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut product = 1.0;
        for beta in &betas {
            product *= 1.0 - beta;
            alpha_bars.push(product);
        }
        Self { betas, alpha_bars }
    }

    pub fn default_training() -> Self {
        Self::linear(DEFAULT_T_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> Result<f64, DiffusionError> {
        self.betas.get(t).copied().ok_or(DiffusionError::BadTimestep {
            t,
            len: self.len(),
        })
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, DiffusionError> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or(DiffusionError::BadTimestep {
                t,
                len: self.len(),
            })
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<(), DiffusionError> {
        let file = ScheduleFile {
            version: 1,
            betas: self.betas.clone(),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self, DiffusionError> {
        let file: ScheduleFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.version != 1 {
            return Err(DiffusionError::InvalidParameter(format!(
                "unsupported schedule version {}",
                file.version
            )));
        }
        if file.betas.is_empty() || file.betas.len() > MAX_T_STEPS {
            return Err(DiffusionError::BadStepCount(file.betas.len()));
        }
        for &beta in &file.betas {
            if !(beta.is_finite() && beta > 0.0 && beta < 1.0) {
                return Err(DiffusionError::BadBetaRange(beta, beta));
            }
        }
        Ok(Self::from_betas(file.betas))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleFile {
    version: u32,
    betas: Vec<f64>,
}

/// Shape of a latent sequence. This is also the exact JSON sidecar schema for
/// raw latent dumps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentShape {
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl LatentShape {
    pub fn new(frames: usize, h: usize, w: usize, c: usize) -> Self {
        Self { frames, h, w, c }
    }

    pub fn len(&self) -> usize {
        self.frames * self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A `(frames, h, w, c)` latent tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSeq {
    pub data: Array4<f64>,
}

impl LatentSeq {
    pub fn zeros(shape: LatentShape) -> Self {
        Self {
            data: Array4::zeros((shape.frames, shape.h, shape.w, shape.c)),
        }
    }

    pub fn from_array(data: Array4<f64>) -> Self {
        Self { data }
    }

    pub fn shape(&self) -> LatentShape {
        let (frames, h, w, c) = self.data.dim();
        LatentShape { frames, h, w, c }
    }

    /// Seeded standard-normal draw.
    pub fn standard_normal(shape: LatentShape, rng: &mut ChaCha8Rng) -> Self {
        let data = Array4::from_shape_simple_fn((shape.frames, shape.h, shape.w, shape.c), || {
            rng.sample(StandardNormal)
        });
        Self { data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_shapes(a: &LatentSeq, b: &LatentSeq) -> Result<(), DiffusionError> {
    if a.shape() != b.shape() {
        return Err(DiffusionError::ShapeMismatch {
            expected: a.shape(),
            got: b.shape(),
        });
    }
    Ok(())
}

/// Forward diffusion: `z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps`.
pub fn forward_diffuse(
    z0: &LatentSeq,
    t: usize,
    eps: &LatentSeq,
    schedule: &NoiseSchedule,
) -> Result<LatentSeq, DiffusionError> {
    check_shapes(z0, eps)?;
    let alpha_bar = schedule.alpha_bar(t)?;
    let signal = alpha_bar.sqrt();
    let noise = (1.0 - alpha_bar).sqrt();
    Ok(LatentSeq {
        data: &z0.data * signal + &eps.data * noise,
    })
}

/// Closed-form inversion of [`forward_diffuse`] given the same noise draw:
/// `z_0 = (z_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
pub fn invert_diffuse(
    z_t: &LatentSeq,
    t: usize,
    eps: &LatentSeq,
    schedule: &NoiseSchedule,
) -> Result<LatentSeq, DiffusionError> {
    check_shapes(z_t, eps)?;
    let alpha_bar = schedule.alpha_bar(t)?;
    let signal = alpha_bar.sqrt();
    let noise = (1.0 - alpha_bar).sqrt();
    Ok(LatentSeq {
        data: (&z_t.data - &(&eps.data * noise)) / signal,
    })
}

/// Multi-condition classifier-free guidance:
/// `eps_hat = eps_c1 + omega * (eps_c2 - eps_c1)`.
///
/// `omega = 0` and `omega = 1` return the corresponding input bit-for-bit.
pub fn mc_cfg(
    eps_c1: &LatentSeq,
    eps_c2: &LatentSeq,
    omega: f64,
) -> Result<LatentSeq, DiffusionError> {
    check_shapes(eps_c1, eps_c2)?;
    if !omega.is_finite() {
        return Err(DiffusionError::NonFinite("guidance weight"));
    }
    if omega == 0.0 {
        return Ok(eps_c1.clone());
    }
    if omega == 1.0 {
        return Ok(eps_c2.clone());
    }
    Ok(LatentSeq {
        data: &eps_c1.data + &((&eps_c2.data - &eps_c1.data) * omega),
    })
}

/// Anything that predicts the forward-diffusion noise from a noisy latent,
/// a timestep, and a condition. Both guidance branches go through this one
/// entry point.
pub trait EpsilonModel {
    type Condition: ?Sized;

    fn predict_eps(
        &self,
        z_t: &LatentSeq,
        t: usize,
        condition: &Self::Condition,
    ) -> Result<LatentSeq, DiffusionError>;
}

/// Analytic verification oracle for Gaussian data `N(mu(c), sigma0^2 I)`.
///
/// For that data distribution the minimum-MSE noise prediction has the closed
/// form
/// `eps*(z_t) = sqrt(1 - abar_t) (z_t - sqrt(abar_t) mu) / (abar_t sigma0^2 + 1 - abar_t)`,
/// which reduces to the exact inversion of the forward process at
/// `sigma0 = 0`.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    sigma0: f64,
    means: BTreeMap<String, LatentSeq>,
}

impl GaussianOracle {
    pub fn new(sigma0: f64) -> Result<Self, DiffusionError> {
        if !(sigma0.is_finite() && sigma0 >= 0.0) {
            return Err(DiffusionError::InvalidParameter(format!(
                "sigma0 must be finite and non-negative (got {sigma0})"
            )));
        }
        Ok(Self {
            sigma0,
            means: BTreeMap::new(),
        })
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn insert_condition(&mut self, name: impl Into<String>, mean: LatentSeq) {
        self.means.insert(name.into(), mean);
    }

    pub fn mean(&self, condition: &str) -> Result<&LatentSeq, DiffusionError> {
        self.means
            .get(condition)
            .ok_or_else(|| DiffusionError::UnknownCondition(condition.to_string()))
    }

    pub fn analytic_eps(
        &self,
        z_t: &LatentSeq,
        t: usize,
        condition: &str,
        schedule: &NoiseSchedule,
    ) -> Result<LatentSeq, DiffusionError> {
        let mu = self.mean(condition)?;
        analytic_eps(z_t, t, mu, self.sigma0, schedule)
    }
}

/// The MMSE epsilon-prediction for `z_0 ~ N(mu, sigma0^2 I)`.
pub fn analytic_eps(
    z_t: &LatentSeq,
    t: usize,
    mu: &LatentSeq,
    sigma0: f64,
    schedule: &NoiseSchedule,
) -> Result<LatentSeq, DiffusionError> {
    check_shapes(z_t, mu)?;
    let alpha_bar = schedule.alpha_bar(t)?;
    let denom = alpha_bar * sigma0 * sigma0 + 1.0 - alpha_bar;
    let scale = (1.0 - alpha_bar).sqrt() / denom;
    Ok(LatentSeq {
        data: (&z_t.data - &(&mu.data * alpha_bar.sqrt())) * scale,
    })
}

/// Pairs a [`GaussianOracle`] with the schedule it is evaluated on, yielding
/// a ready-to-sample [`EpsilonModel`].
#[derive(Debug, Clone)]
pub struct ScheduledOracle<'a> {
    pub oracle: &'a GaussianOracle,
    pub schedule: &'a NoiseSchedule,
}

impl EpsilonModel for ScheduledOracle<'_> {
    type Condition = str;

    fn predict_eps(
        &self,
        z_t: &LatentSeq,
        t: usize,
        condition: &str,
    ) -> Result<LatentSeq, DiffusionError> {
        self.oracle.analytic_eps(z_t, t, condition, self.schedule)
    }
}

/// Evenly spaced, strictly decreasing timestep indices covering the schedule
/// (first index `T-1`, last index 0).
pub fn default_step_indices(t_steps: usize, sample_steps: usize) -> Vec<usize> {
    if t_steps == 0 || sample_steps == 0 {
        return Vec::new();
    }
    if sample_steps == 1 || t_steps == 1 {
        return vec![t_steps - 1];
    }
    let n = sample_steps.min(t_steps);
    let mut indices: Vec<usize> = (0..n)
        .map(|i| {
            let frac = (n - 1 - i) as f64 / (n - 1) as f64;
            (frac * (t_steps - 1) as f64).round() as usize
        })
        .collect();
    indices.dedup();
    indices
}

fn check_step_indices(
    step_indices: &[usize],
    schedule: &NoiseSchedule,
) -> Result<(), DiffusionError> {
    if step_indices.is_empty() {
        return Err(DiffusionError::EmptySteps);
    }
    for (position, window) in step_indices.windows(2).enumerate() {
        if window[1] >= window[0] {
            return Err(DiffusionError::NonMonotoneSteps(position + 1));
        }
    }
    if step_indices[0] >= schedule.len() {
        return Err(DiffusionError::BadTimestep {
            t: step_indices[0],
            len: schedule.len(),
        });
    }
    Ok(())
}

/// Deterministic DDIM sampling (eta = 0) with multi-condition guidance.
///
/// Noise is drawn once from the seed; every step forms
/// `eps_hat = mc_cfg(model(z, c1), model(z, c2), omega)`, predicts the clean
/// latent, and re-noises to the next index. The returned value is the final
/// t -> 0 prediction.
#[allow(clippy::too_many_arguments)]
pub fn ddim_sample<M: EpsilonModel>(
    model: &M,
    schedule: &NoiseSchedule,
    step_indices: &[usize],
    omega: f64,
    c1: &M::Condition,
    c2: &M::Condition,
    shape: LatentShape,
    seed: u64,
) -> Result<LatentSeq, DiffusionError> {
    check_step_indices(step_indices, schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = LatentSeq::standard_normal(shape, &mut rng);

    for (position, &t) in step_indices.iter().enumerate() {
        let eps_c1 = model.predict_eps(&z, t, c1)?;
        let eps_c2 = model.predict_eps(&z, t, c2)?;
        let eps_hat = mc_cfg(&eps_c1, &eps_c2, omega)?;

        let alpha_bar = schedule.alpha_bar(t)?;
        let z0_pred = LatentSeq {
            data: (&z.data - &(&eps_hat.data * (1.0 - alpha_bar).sqrt())) / alpha_bar.sqrt(),
        };
        match step_indices.get(position + 1) {
            Some(&t_next) => {
                let alpha_next = schedule.alpha_bar(t_next)?;
                z = LatentSeq {
                    data: &z0_pred.data * alpha_next.sqrt()
                        + &(&eps_hat.data * (1.0 - alpha_next).sqrt()),
                };
            }
            None => {
                z = z0_pred;
            }
        }
    }
    Ok(z)
}

/// Write a latent sequence as raw little-endian f32 values plus a JSON
/// sidecar (`<path>.json`) holding `{frames, h, w, c}`.
pub fn save_latents(latents: &LatentSeq, path: impl AsRef<Path>) -> Result<(), DiffusionError> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(latents.shape().len() * 4);
    for v in latents.data.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    std::fs::write(sidecar, serde_json::to_string(&latents.shape())?)?;
    Ok(())
}

/// Read a latent sequence written by [`save_latents`].
pub fn load_latents(path: impl AsRef<Path>) -> Result<LatentSeq, DiffusionError> {
    let path = path.as_ref();
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    let shape: LatentShape = serde_json::from_str(&std::fs::read_to_string(sidecar)?)?;
    let bytes = std::fs::read(path)?;
    if bytes.len() != shape.len() * 4 {
        return Err(DiffusionError::InvalidParameter(format!(
            "latent payload is {} bytes, expected {}",
            bytes.len(),
            shape.len() * 4
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let data = Array4::from_shape_vec((shape.frames, shape.h, shape.w, shape.c), values)
        .expect("length checked");
    let latents = LatentSeq { data };
    if !latents.is_finite() {
        return Err(DiffusionError::NonFinite("latent file"));
    }
    Ok(latents)
}
