//! Loss functions and a toy self-supervised training loop.
//!
//! The denoiser here is a three-layer conv net over the channel
//! concatenation of the noisy latent, the masked replicated reference latent,
//! and a noise-level plane, with the fused adapter guidance added after its
//! first layer. It is the smallest system with the same conditioning
//! topology as the full pipeline: reference conditioning through latent
//! concatenation and through the reference adapter, shading conditioning
//! through the shading adapter, both gated by binary draws each step so the
//! model sees every conditioning combination.
//!
//! Losses: `ldm_loss` is the mean squared noise-prediction error,
//! `masked_loss` supplements it with the mean absolute residual outside the
//! mask (positions with mask = 1 contribute nothing), and `total_loss` is
//! their sum.

use std::path::Path;

use ndarray::{Array2, Array3, Array4};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{
    fuse, prepare_reference_latent, AdapterError, AdapterFeatures, AdapterNet, ConvLayer,
    ConvLayerGrads, ConvLayerSpec, FusionCoefficients, ADAPTER_DOWNSAMPLE,
};
use crate::diffusion::{
    forward_diffuse, DiffusionError, EpsilonModel, LatentSeq, LatentShape, NoiseSchedule,
};
use crate::face::{build_model, forward, FaceError, FaceModelConfig, PoseParams};
use crate::raster::{render_shading_hints, Camera, RasterError};
use crate::sh::SHCoefficients;

/// Channel layout of the toy latent space: block-averaged RGB plus the
/// max-pooled portrait mask, each mapped affinely to [-1, 1].
pub const TOY_LATENT_CHANNELS: usize = 4;

/// Largest latent grid the synthetic dataset generator accepts.
pub const MAX_SYNTH_LATENT: usize = 64;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch in {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("mask must be binary (found {0})")]
    NonBinaryMask(f64),
    #[error("batch must contain at least one sample")]
    EmptyBatch,
    #[error("synthetic latent dims must be within {MAX_SYNTH_LATENT}x{MAX_SYNTH_LATENT} (got {0}x{1})")]
    SynthTooLarge(usize, usize),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("latent channel count {0} does not match the toy codec ({TOY_LATENT_CHANNELS})")]
    BadChannelCount(usize),
    #[error("image dims must be {ADAPTER_DOWNSAMPLE}x the latent dims")]
    BadImageDims,
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Face(#[from] FaceError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean squared noise-prediction error over all elements.
pub fn ldm_loss(eps: &LatentSeq, eps_pred: &LatentSeq) -> Result<f64, TrainError> {
    if eps.shape() != eps_pred.shape() {
        return Err(TrainError::ShapeMismatch {
            what: "ldm loss",
            expected: eps.data.shape().to_vec(),
            got: eps_pred.data.shape().to_vec(),
        });
    }
    let n = eps.shape().len() as f64;
    let sum: f64 = eps
        .data
        .iter()
        .zip(eps_pred.data.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n)
}

fn check_loss_mask(
    eps: &LatentSeq,
    eps_pred: &LatentSeq,
    mask: &Array3<f64>,
) -> Result<(), TrainError> {
    let shape = eps.shape();
    if eps_pred.shape() != shape {
        return Err(TrainError::ShapeMismatch {
            what: "masked loss prediction",
            expected: eps.data.shape().to_vec(),
            got: eps_pred.data.shape().to_vec(),
        });
    }
    if mask.dim() != (shape.frames, shape.h, shape.w) {
        return Err(TrainError::ShapeMismatch {
            what: "loss mask",
            expected: vec![shape.frames, shape.h, shape.w],
            got: mask.shape().to_vec(),
        });
    }
    for &m in mask.iter() {
        if m != 0.0 && m != 1.0 {
            return Err(TrainError::NonBinaryMask(m));
        }
    }
    Ok(())
}

/// Mean absolute residual with masked positions excluded:
/// `mean over all elements of (1 - M) |eps - eps_pred|`, the mask broadcast
/// over channels. Positions with mask = 1 contribute exactly zero.
pub fn masked_loss(
    eps: &LatentSeq,
    eps_pred: &LatentSeq,
    mask: &Array3<f64>,
) -> Result<f64, TrainError> {
    check_loss_mask(eps, eps_pred, mask)?;
    let shape = eps.shape();
    let n = shape.len() as f64;
    let mut sum = 0.0;
    for f in 0..shape.frames {
        for y in 0..shape.h {
            for x in 0..shape.w {
                let keep = 1.0 - mask[[f, y, x]];
                if keep == 0.0 {
                    continue;
                }
                for c in 0..shape.c {
                    sum += keep * (eps.data[[f, y, x, c]] - eps_pred.data[[f, y, x, c]]).abs();
                }
            }
        }
    }
    Ok(sum / n)
}

/// Total training objective: `masked_loss + ldm_loss`.
pub fn total_loss(
    eps: &LatentSeq,
    eps_pred: &LatentSeq,
    mask: &Array3<f64>,
) -> Result<f64, TrainError> {
    Ok(masked_loss(eps, eps_pred, mask)? + ldm_loss(eps, eps_pred)?)
}

/// Which region the supplemental masked loss emphasizes.
///
/// `Portrait` (the default) complements the portrait mask before it enters
/// [`masked_loss`], so portrait residuals are the ones counted twice in the
/// total objective. `Background` passes the portrait mask through unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskPolarity {
    #[default]
    Portrait,
    Background,
}

/// Resolve the mask handed to [`masked_loss`] from the per-frame portrait
/// mask and the configured polarity.
pub fn loss_mask(portrait_mask: &Array3<f64>, polarity: MaskPolarity) -> Array3<f64> {
    match polarity {
        MaskPolarity::Portrait => portrait_mask.mapv(|m| 1.0 - m),
        MaskPolarity::Background => portrait_mask.clone(),
    }
}

// ---------------------------------------------------------------------------
// Toy latent codec
// ---------------------------------------------------------------------------

/// Encode one rendered frame into the toy latent space: 8x8 block means of
/// the RGB channels and the block max of the portrait mask, mapped to
/// [-1, 1]. Stands in for the learned autoencoder at desk scale.
pub fn toy_encode(image: &Array3<f64>, mask: &Array2<u8>) -> Result<LatentSeq, TrainError> {
    let (height, width, channels) = image.dim();
    if channels != 3 || mask.dim() != (height, width) {
        return Err(TrainError::ShapeMismatch {
            what: "toy encode input",
            expected: vec![height, width, 3],
            got: mask.shape().to_vec(),
        });
    }
    let d = ADAPTER_DOWNSAMPLE;
    if height % d != 0 || width % d != 0 {
        return Err(TrainError::BadImageDims);
    }
    let (h, w) = (height / d, width / d);
    let mut out = Array4::zeros((1, h, w, TOY_LATENT_CHANNELS));
    let block = (d * d) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut rgb = [0.0; 3];
            let mut mask_max = 0u8;
            for by in 0..d {
                for bx in 0..d {
                    for (c, acc) in rgb.iter_mut().enumerate() {
                        *acc += image[[y * d + by, x * d + bx, c]];
                    }
                    mask_max = mask_max.max(mask[[y * d + by, x * d + bx]]);
                }
            }
            for (c, acc) in rgb.iter().enumerate() {
                out[[0, y, x, c]] = 2.0 * acc / block - 1.0;
            }
            out[[0, y, x, 3]] = 2.0 * f64::from(mask_max) - 1.0;
        }
    }
    Ok(LatentSeq::from_array(out))
}

/// Decode latents back to `(frames, H, W, 3)` images: the first three
/// channels map back from [-1, 1] with nearest-neighbour upsampling.
pub fn toy_decode(latents: &LatentSeq) -> Result<Array4<f64>, TrainError> {
    let shape = latents.shape();
    if shape.c < 3 {
        return Err(TrainError::BadChannelCount(shape.c));
    }
    let d = ADAPTER_DOWNSAMPLE;
    let mut out = Array4::zeros((shape.frames, shape.h * d, shape.w * d, 3));
    for f in 0..shape.frames {
        for y in 0..shape.h * d {
            for x in 0..shape.w * d {
                for c in 0..3 {
                    let v = (latents.data[[f, y / d, x / d, c]] + 1.0) / 2.0;
                    out[[f, y, x, c]] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(out)
}

/// Max-pool a full-resolution binary mask down to the latent grid.
pub fn downsample_mask_max(mask: &Array2<u8>) -> Result<Array2<f64>, TrainError> {
    let (height, width) = mask.dim();
    let d = ADAPTER_DOWNSAMPLE;
    if height % d != 0 || width % d != 0 {
        return Err(TrainError::BadImageDims);
    }
    let mut out = Array2::zeros((height / d, width / d));
    for y in 0..height / d {
        for x in 0..width / d {
            let mut m = 0u8;
            for by in 0..d {
                for bx in 0..d {
                    m = m.max(mask[[y * d + by, x * d + bx]]);
                }
            }
            out[[y, x]] = f64::from(m);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Layout bridges
// ---------------------------------------------------------------------------

/// `(F, h, w, c)` latent layout to the conv layers' `(F, c, h, w)`.
pub fn latent_to_chw(latents: &LatentSeq) -> Array4<f64> {
    let shape = latents.shape();
    Array4::from_shape_fn((shape.frames, shape.c, shape.h, shape.w), |(f, c, y, x)| {
        latents.data[[f, y, x, c]]
    })
}

/// Inverse of [`latent_to_chw`].
pub fn chw_to_latent(chw: &Array4<f64>) -> LatentSeq {
    let (frames, c, h, w) = chw.dim();
    LatentSeq::from_array(Array4::from_shape_fn((frames, h, w, c), |(f, y, x, ch)| {
        chw[[f, ch, y, x]]
    }))
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

/// Ground-truth generation parameters carried alongside a synthetic sample.
#[derive(Debug, Clone)]
pub struct SampleMeta {
    pub lighting: SHCoefficients,
    pub poses: Vec<PoseParams>,
    pub expressions: Vec<Vec<f64>>,
    pub shape: Vec<f64>,
}

/// One training sample: clean video latents, the hint sequence that produced
/// them, the reference frame, and per-frame portrait masks at latent
/// resolution.
#[derive(Debug, Clone)]
pub struct TrainSample {
    /// `(F, h, w, c)` clean latents.
    pub latents: LatentSeq,
    /// `(F, 3, 8h, 8w)` shading hints, conv layout.
    pub hints: Array4<f64>,
    /// `(3, 8h, 8w)` reference frame, conv layout.
    pub reference: Array3<f64>,
    /// `(F, h, w)` binary portrait masks.
    pub masks: Array3<f64>,
    pub meta: SampleMeta,
}

/// A batch of consistently shaped samples.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    samples: Vec<TrainSample>,
}

impl TrainBatch {
    pub fn new(samples: Vec<TrainSample>) -> Result<Self, TrainError> {
        if samples.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let latent_shape = samples[0].latents.shape();
        let hint_shape = samples[0].hints.dim();
        for sample in &samples {
            if sample.latents.shape() != latent_shape || sample.hints.dim() != hint_shape {
                return Err(TrainError::ShapeMismatch {
                    what: "batch sample",
                    expected: vec![latent_shape.frames, latent_shape.h, latent_shape.w],
                    got: sample.latents.data.shape().to_vec(),
                });
            }
            for &m in sample.masks.iter() {
                if m != 0.0 && m != 1.0 {
                    return Err(TrainError::NonBinaryMask(m));
                }
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[TrainSample] {
        &self.samples
    }

    pub fn latent_shape(&self) -> LatentShape {
        self.samples[0].latents.shape()
    }
}

// ---------------------------------------------------------------------------
// Toy denoiser
// ---------------------------------------------------------------------------

/// Condition set for the toy denoiser: the fused adapter guidance plus the
/// masked, replicated reference latent for channel concatenation.
#[derive(Debug, Clone)]
pub struct ToyCondition {
    pub guidance: AdapterFeatures,
    pub reference: LatentSeq,
}

/// Three conv layers over `[z_t | reference | noise-level]` with guidance
/// injected after the first convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    conv_in: ConvLayer,
    conv_mid: ConvLayer,
    conv_out: ConvLayer,
    alpha_bars: Vec<f64>,
    latent_channels: usize,
}

/// Cached activations for the backward pass.
pub struct ToyDenoiserCache {
    input: Array4<f64>,
    pre_in: Array4<f64>,
    injected: Array4<f64>,
    hidden_in: Array4<f64>,
    pre_mid: Array4<f64>,
    hidden_mid: Array4<f64>,
    pre_out: Array4<f64>,
}

/// Parameter gradients plus the gradient flowing into the guidance tensor.
pub struct ToyDenoiserGrads {
    pub conv_in: ConvLayerGrads,
    pub conv_mid: ConvLayerGrads,
    pub conv_out: ConvLayerGrads,
    pub d_guidance: Array4<f64>,
}

impl ToyDenoiser {
    /// `feature_channels` must match the adapters' output channel count.
    /// When `zero_init_output` is set the final projection starts at zero so
    /// early predictions are unbiased; gradient-check tests use a random
    /// final layer instead.
    pub fn new(
        latent_channels: usize,
        feature_channels: usize,
        mid_channels: usize,
        schedule: &NoiseSchedule,
        seed: u64,
        zero_init_output: bool,
    ) -> Result<Self, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Input: noisy latent + replicated reference + noise-level plane.
        let in_channels = 2 * latent_channels + 1;
        let conv_in = ConvLayer::seeded(
            in_channels,
            ConvLayerSpec {
                out_channels: feature_channels,
                kernel: 3,
                stride: 1,
                nonlinearity: false,
            },
            &mut rng,
        )?;
        let conv_mid = ConvLayer::seeded(
            feature_channels,
            ConvLayerSpec {
                out_channels: mid_channels,
                kernel: 3,
                stride: 1,
                nonlinearity: false,
            },
            &mut rng,
        )?;
        let mut conv_out = ConvLayer::seeded(
            mid_channels,
            ConvLayerSpec {
                out_channels: latent_channels,
                kernel: 1,
                stride: 1,
                nonlinearity: false,
            },
            &mut rng,
        )?;
        if zero_init_output {
            conv_out.weight.fill(0.0);
        }
        Ok(Self {
            conv_in,
            conv_mid,
            conv_out,
            alpha_bars: schedule.alpha_bars().to_vec(),
            latent_channels,
        })
    }

    pub fn layers(&self) -> [&ConvLayer; 3] {
        [&self.conv_in, &self.conv_mid, &self.conv_out]
    }

    pub fn layers_mut(&mut self) -> [&mut ConvLayer; 3] {
        [&mut self.conv_in, &mut self.conv_mid, &mut self.conv_out]
    }

    pub fn feature_channels(&self) -> usize {
        self.conv_in.out_channels()
    }

    fn build_input(
        &self,
        z_t: &LatentSeq,
        t: usize,
        condition: &ToyCondition,
    ) -> Result<Array4<f64>, TrainError> {
        let shape = z_t.shape();
        if condition.reference.shape() != shape {
            return Err(TrainError::ShapeMismatch {
                what: "reference conditioning",
                expected: z_t.data.shape().to_vec(),
                got: condition.reference.data.shape().to_vec(),
            });
        }
        let alpha_bar = self.alpha_bars.get(t).copied().ok_or(
            DiffusionError::BadTimestep {
                t,
                len: self.alpha_bars.len(),
            },
        )?;
        let zc = latent_to_chw(z_t);
        let rc = latent_to_chw(&condition.reference);
        let c = shape.c;
        let mut input = Array4::zeros((shape.frames, 2 * c + 1, shape.h, shape.w));
        for f in 0..shape.frames {
            for ch in 0..c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        input[[f, ch, y, x]] = zc[[f, ch, y, x]];
                        input[[f, c + ch, y, x]] = rc[[f, ch, y, x]];
                    }
                }
            }
            for y in 0..shape.h {
                for x in 0..shape.w {
                    input[[f, 2 * c, y, x]] = alpha_bar;
                }
            }
        }
        Ok(input)
    }

    pub fn forward_with_cache(
        &self,
        z_t: &LatentSeq,
        t: usize,
        condition: &ToyCondition,
    ) -> Result<(LatentSeq, ToyDenoiserCache), TrainError> {
        let input = self.build_input(z_t, t, condition)?;
        let pre_in = self.conv_in.conv(&input)?;
        if condition.guidance.data.dim() != pre_in.dim() {
            return Err(TrainError::ShapeMismatch {
                what: "guidance injection",
                expected: pre_in.shape().to_vec(),
                got: condition.guidance.data.shape().to_vec(),
            });
        }
        let injected = &pre_in + &condition.guidance.data;
        let hidden_in = crate::adapter::leaky_relu(&injected);
        let pre_mid = self.conv_mid.conv(&hidden_in)?;
        let hidden_mid = crate::adapter::leaky_relu(&pre_mid);
        let pre_out = self.conv_out.conv(&hidden_mid)?;
        Ok((
            chw_to_latent(&pre_out),
            ToyDenoiserCache {
                input,
                pre_in,
                injected,
                hidden_in,
                pre_mid,
                hidden_mid,
                pre_out,
            },
        ))
    }

    /// Reverse-mode pass from a latent-layout upstream gradient.
    pub fn backward(
        &self,
        cache: &ToyDenoiserCache,
        upstream: &LatentSeq,
    ) -> Result<ToyDenoiserGrads, TrainError> {
        let d_out = latent_to_chw(upstream);
        let (g_out, d_hidden_mid) =
            self.conv_out.backward(&cache.hidden_mid, &cache.pre_out, &d_out)?;
        let d_pre_mid = crate::adapter::leaky_relu_backward(&cache.pre_mid, &d_hidden_mid);
        let (g_mid, d_hidden_in) =
            self.conv_mid.backward(&cache.hidden_in, &cache.pre_mid, &d_pre_mid)?;
        let d_injected = crate::adapter::leaky_relu_backward(&cache.injected, &d_hidden_in);
        // The injection is an addition: the same gradient flows to the first
        // conv's pre-activation and to the guidance tensor.
        let (g_in, _d_input) = self.conv_in.backward(&cache.input, &cache.pre_in, &d_injected)?;
        Ok(ToyDenoiserGrads {
            conv_in: g_in,
            conv_mid: g_mid,
            conv_out: g_out,
            d_guidance: d_injected,
        })
    }

    pub fn apply_sgd(&mut self, grads: &ToyDenoiserGrads, lr: f64) {
        self.conv_in.apply_sgd(&grads.conv_in, lr);
        self.conv_mid.apply_sgd(&grads.conv_mid, lr);
        self.conv_out.apply_sgd(&grads.conv_out, lr);
    }
}

impl EpsilonModel for ToyDenoiser {
    type Condition = ToyCondition;

    fn predict_eps(
        &self,
        z_t: &LatentSeq,
        t: usize,
        condition: &ToyCondition,
    ) -> Result<LatentSeq, DiffusionError> {
        self.forward_with_cache(z_t, t, condition)
            .map(|(out, _)| out)
            .map_err(|e| DiffusionError::InvalidParameter(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Training hyperparameters; JSON-facing with strict keys.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    /// Seed for the training-time draws (timestep, noise, fusion) and the
    /// network initializations.
    pub seed: u64,
    /// Seed for the synthetic dataset.
    pub data_seed: u64,
    pub latent_h: usize,
    pub latent_w: usize,
    pub frames: usize,
    /// Number of synthetic batches generated and cycled over.
    pub dataset_size: usize,
    /// Adapter/denoiser feature channels (the denoiser first-layer width).
    pub feature_channels: usize,
    pub mid_channels: usize,
    pub mask_polarity: MaskPolarity,
    /// Pin the fusion coefficients instead of drawing them each step.
    pub force_fusion: Option<FusionCoefficients>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            steps: 200,
            seed: 0,
            data_seed: 0,
            latent_h: 8,
            latent_w: 8,
            frames: 4,
            dataset_size: 16,
            feature_channels: 64,
            mid_channels: 32,
            mask_polarity: MaskPolarity::Portrait,
            force_fusion: None,
        }
    }
}

/// All trainable state: the toy denoiser and both adapters, plus the
/// schedule they are trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub denoiser: ToyDenoiser,
    pub shading_adapter: AdapterNet,
    pub reference_adapter: AdapterNet,
    pub schedule: NoiseSchedule,
}

impl TrainState {
    pub fn init(config: &TrainConfig) -> Result<Self, TrainError> {
        let schedule = NoiseSchedule::default_training();
        let denoiser = ToyDenoiser::new(
            TOY_LATENT_CHANNELS,
            config.feature_channels,
            config.mid_channels,
            &schedule,
            config.seed.wrapping_add(3),
            true,
        )?;
        Ok(Self {
            denoiser,
            shading_adapter: AdapterNet::portrait_plan(
                config.feature_channels,
                config.seed.wrapping_add(1),
            )?,
            reference_adapter: AdapterNet::portrait_plan(
                config.feature_channels,
                config.seed.wrapping_add(2),
            )?,
            schedule,
        })
    }
}

/// One step's random draws, separated from the gradient computation so the
/// latter is a pure function (used directly by finite-difference checks).
#[derive(Debug, Clone)]
pub struct StepDraw {
    pub t: usize,
    pub coeffs: FusionCoefficients,
    /// One noise tensor per batch sample.
    pub eps: Vec<LatentSeq>,
}

/// Draw (t, fusion coefficients, per-sample noise) for one step. Forced
/// fusion skips the coefficient draws entirely so forced runs consume
/// identical random streams regardless of batch content.
pub fn draw_step(
    batch: &TrainBatch,
    schedule: &NoiseSchedule,
    force_fusion: Option<FusionCoefficients>,
    rng: &mut ChaCha8Rng,
) -> StepDraw {
    let t = rng.random_range(0..schedule.len());
    let coeffs = match force_fusion {
        Some(forced) => forced,
        None => FusionCoefficients {
            alpha: rng.random_range(0..=1u8) == 1,
            beta: rng.random_range(0..=1u8) == 1,
        },
    };
    let eps = batch
        .samples()
        .iter()
        .map(|s| LatentSeq::standard_normal(s.latents.shape(), rng))
        .collect();
    StepDraw { t, coeffs, eps }
}

/// Accumulated gradients for everything [`TrainState`] owns.
pub struct StateGrads {
    pub denoiser_in: ConvLayerGrads,
    pub denoiser_mid: ConvLayerGrads,
    pub denoiser_out: ConvLayerGrads,
    pub shading: Option<Vec<ConvLayerGrads>>,
    pub reference: Option<Vec<ConvLayerGrads>>,
}

fn zero_grads_like(layer: &ConvLayer) -> ConvLayerGrads {
    ConvLayerGrads {
        weight: Array4::zeros(layer.weight.dim()),
        bias: ndarray::Array1::zeros(layer.bias.len()),
    }
}

fn accumulate(into: &mut ConvLayerGrads, from: &ConvLayerGrads, scale: f64) {
    into.weight.zip_mut_with(&from.weight, |a, b| *a += scale * b);
    into.bias.zip_mut_with(&from.bias, |a, b| *a += scale * b);
}

/// Forward + backward over one batch at fixed draws. Pure in the state, so
/// finite differences over any weight are meaningful.
pub fn compute_loss_and_grads(
    state: &TrainState,
    batch: &TrainBatch,
    draw: &StepDraw,
    polarity: MaskPolarity,
) -> Result<(f64, StateGrads), TrainError> {
    let n_samples = batch.samples().len();
    let scale = 1.0 / n_samples as f64;
    let coeffs = draw.coeffs;

    let [l_in, l_mid, l_out] = state.denoiser.layers();
    let mut grads = StateGrads {
        denoiser_in: zero_grads_like(l_in),
        denoiser_mid: zero_grads_like(l_mid),
        denoiser_out: zero_grads_like(l_out),
        shading: None,
        reference: None,
    };
    let mut loss_sum = 0.0;

    for (sample, eps) in batch.samples().iter().zip(&draw.eps) {
        let shape = sample.latents.shape();
        let n_elements = shape.len() as f64;

        // Conditioning paths, gated by the fusion draw.
        let shading_fwd = if coeffs.alpha {
            Some(state.shading_adapter.forward_with_cache(&sample.hints)?)
        } else {
            None
        };
        let reference_fwd = if coeffs.beta {
            let (_, c, h, w) = sample.hints.dim();
            let mut duplicated = Array4::zeros((shape.frames, c, h, w));
            for f in 0..shape.frames {
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            duplicated[[f, ch, y, x]] = sample.reference[[ch, y, x]];
                        }
                    }
                }
            }
            Some((
                state.reference_adapter.forward_with_cache(&duplicated)?,
                duplicated,
            ))
        } else {
            None
        };

        let guidance = match (&shading_fwd, &reference_fwd) {
            (None, None) => AdapterFeatures::zeros(
                shape.frames,
                state.denoiser.feature_channels(),
                shape.h,
                shape.w,
            ),
            (shading, reference) => fuse(
                shading.as_ref().map(|(f, _)| f),
                reference.as_ref().map(|((f, _), _)| f),
                coeffs,
            )?,
        };

        // Reference latent concatenation, also gated by beta.
        let reference_latent = if coeffs.beta {
            let ref_image = hwc_from_chw(&sample.reference);
            let ref_mask_full = upsample_mask(&sample.masks, 0)?;
            let encoded = toy_encode(&ref_image, &ref_mask_full)?;
            let mask0 = sample
                .masks
                .index_axis(ndarray::Axis(0), 0)
                .to_owned();
            prepare_reference_latent(&encoded, &mask0, shape.frames)?
        } else {
            LatentSeq::zeros(shape)
        };

        let z_t = forward_diffuse(&sample.latents, draw.t, eps, &state.schedule)?;
        let condition = ToyCondition {
            guidance,
            reference: reference_latent,
        };
        let (pred, cache) = state
            .denoiser
            .forward_with_cache(&z_t, draw.t, &condition)?;

        let mask = loss_mask(&sample.masks, polarity);
        loss_sum += total_loss(eps, &pred, &mask)?;

        // d(total)/d(pred): squared term plus the masked absolute term.
        let mut d_pred = LatentSeq::zeros(shape);
        for f in 0..shape.frames {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    let keep = 1.0 - mask[[f, y, x]];
                    for c in 0..shape.c {
                        let residual = pred.data[[f, y, x, c]] - eps.data[[f, y, x, c]];
                        let mut g = 2.0 * residual / n_elements;
                        if keep != 0.0 && residual != 0.0 {
                            g += keep * residual.signum() / n_elements;
                        }
                        d_pred.data[[f, y, x, c]] = g;
                    }
                }
            }
        }

        let den_grads = state.denoiser.backward(&cache, &d_pred)?;
        accumulate(&mut grads.denoiser_in, &den_grads.conv_in, scale);
        accumulate(&mut grads.denoiser_mid, &den_grads.conv_mid, scale);
        accumulate(&mut grads.denoiser_out, &den_grads.conv_out, scale);

        if let Some((_, cache_s)) = &shading_fwd {
            let (layer_grads, _) = state
                .shading_adapter
                .backward(cache_s, &den_grads.d_guidance)?;
            match &mut grads.shading {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&layer_grads) {
                        accumulate(a, g, scale);
                    }
                }
                None => {
                    let mut acc: Vec<ConvLayerGrads> = state
                        .shading_adapter
                        .layers()
                        .iter()
                        .map(zero_grads_like)
                        .collect();
                    for (a, g) in acc.iter_mut().zip(&layer_grads) {
                        accumulate(a, g, scale);
                    }
                    grads.shading = Some(acc);
                }
            }
        }
        if let Some(((_, cache_r), _)) = &reference_fwd {
            let (layer_grads, _) = state
                .reference_adapter
                .backward(cache_r, &den_grads.d_guidance)?;
            match &mut grads.reference {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&layer_grads) {
                        accumulate(a, g, scale);
                    }
                }
                None => {
                    let mut acc: Vec<ConvLayerGrads> = state
                        .reference_adapter
                        .layers()
                        .iter()
                        .map(zero_grads_like)
                        .collect();
                    for (a, g) in acc.iter_mut().zip(&layer_grads) {
                        accumulate(a, g, scale);
                    }
                    grads.reference = Some(acc);
                }
            }
        }
    }

    Ok((loss_sum * scale, grads))
}

/// `(3, H, W)` conv layout back to `(H, W, 3)`.
fn hwc_from_chw(chw: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = chw.dim();
    debug_assert_eq!(c, 3);
    Array3::from_shape_fn((h, w, 3), |(y, x, ch)| chw[[ch, y, x]])
}

/// Reconstruct a full-resolution {0,1} mask from the latent-resolution mask
/// of one frame (latent cells map to 8x8 pixel blocks).
fn upsample_mask(masks: &Array3<f64>, frame: usize) -> Result<Array2<u8>, TrainError> {
    let (_, h, w) = masks.dim();
    let d = ADAPTER_DOWNSAMPLE;
    let mut out = Array2::zeros((h * d, w * d));
    for y in 0..h * d {
        for x in 0..w * d {
            out[[y, x]] = masks[[frame, y / d, x / d]] as u8;
        }
    }
    Ok(out)
}

/// One SGD step: draw randomness, compute gradients, update every weight.
/// Deterministic for a given rng state; a NaN loss aborts with a diagnostic.
pub fn train_step(
    state: &mut TrainState,
    batch: &TrainBatch,
    config: &TrainConfig,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let draw = draw_step(batch, &state.schedule, config.force_fusion, rng);
    let (loss, grads) = compute_loss_and_grads(state, batch, &draw, config.mask_polarity)?;
    if !loss.is_finite() {
        return Err(TrainError::Diverged { step, loss });
    }
    state.denoiser.apply_sgd(
        &ToyDenoiserGrads {
            conv_in: grads.denoiser_in,
            conv_mid: grads.denoiser_mid,
            conv_out: grads.denoiser_out,
            d_guidance: Array4::zeros((1, 1, 1, 1)),
        },
        config.lr,
    );
    if let Some(g) = &grads.shading {
        state.shading_adapter.apply_sgd(g, config.lr);
    }
    if let Some(g) = &grads.reference {
        state.reference_adapter.apply_sgd(g, config.lr);
    }
    Ok(loss)
}

/// Run the full loop over a batch list (cycled when shorter than `steps`).
/// Returns the per-step loss curve.
pub fn train_loop(
    state: &mut TrainState,
    batches: &[TrainBatch],
    config: &TrainConfig,
) -> Result<Vec<f64>, TrainError> {
    if batches.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = &batches[step % batches.len()];
        losses.push(train_step(state, batch, config, step, &mut rng)?);
    }
    Ok(losses)
}

/// Write a loss curve as `step,loss` CSV.
pub fn write_loss_csv(losses: &[f64], path: impl AsRef<Path>) -> Result<(), TrainError> {
    let mut text = String::from("step,loss\n");
    for (step, loss) in losses.iter().enumerate() {
        text.push_str(&format!("{step},{loss}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Denoiser serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DenoiserManifest {
    version: u32,
    dtype: String,
    latent_channels: usize,
    layers: Vec<ConvLayerSpec>,
    element_count: usize,
}

/// Save the toy denoiser weights: flat little-endian f64 blob plus a JSON
/// manifest at `<path>.json`. The schedule is not stored; supply it on load.
pub fn save_toy_denoiser(
    denoiser: &ToyDenoiser,
    path: impl AsRef<Path>,
) -> Result<(), TrainError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    let mut element_count = 0;
    for layer in denoiser.layers() {
        for v in layer.weight.iter().chain(layer.bias.iter()) {
            bytes.extend_from_slice(&v.to_le_bytes());
            element_count += 1;
        }
    }
    std::fs::write(path, bytes)?;
    let manifest = DenoiserManifest {
        version: 1,
        dtype: "f64-le".to_string(),
        latent_channels: denoiser.latent_channels,
        layers: denoiser.layers().iter().map(|l| l.spec()).collect(),
        element_count,
    };
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    std::fs::write(sidecar, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Load a toy denoiser written by [`save_toy_denoiser`].
pub fn load_toy_denoiser(
    path: impl AsRef<Path>,
    schedule: &NoiseSchedule,
) -> Result<ToyDenoiser, TrainError> {
    let path = path.as_ref();
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    let manifest: DenoiserManifest =
        serde_json::from_str(&std::fs::read_to_string(sidecar)?)?;
    if manifest.version != 1 || manifest.dtype != "f64-le" || manifest.layers.len() != 3 {
        return Err(TrainError::Adapter(AdapterError::InvalidFile(
            "unsupported denoiser manifest".to_string(),
        )));
    }
    let bytes = std::fs::read(path)?;
    if bytes.len() != manifest.element_count * 8 {
        return Err(TrainError::Adapter(AdapterError::InvalidFile(format!(
            "denoiser payload is {} bytes, expected {}",
            bytes.len(),
            manifest.element_count * 8
        ))));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    let mut channels = 2 * manifest.latent_channels + 1;
    let mut layers = Vec::with_capacity(3);
    for spec in &manifest.layers {
        let weight_len = spec.out_channels * channels * spec.kernel * spec.kernel;
        let mut weight = Vec::with_capacity(weight_len);
        for _ in 0..weight_len {
            weight.push(values.next().ok_or_else(|| {
                TrainError::Adapter(AdapterError::InvalidFile(
                    "denoiser blob ended early".to_string(),
                ))
            })?);
        }
        let mut bias = Vec::with_capacity(spec.out_channels);
        for _ in 0..spec.out_channels {
            bias.push(values.next().ok_or_else(|| {
                TrainError::Adapter(AdapterError::InvalidFile(
                    "denoiser blob ended early".to_string(),
                ))
            })?);
        }
        layers.push(ConvLayer {
            weight: Array4::from_shape_vec(
                (spec.out_channels, channels, spec.kernel, spec.kernel),
                weight,
            )
            .expect("length checked"),
            bias: ndarray::Array1::from_vec(bias),
            stride: spec.stride,
            nonlinearity: spec.nonlinearity,
        });
        channels = spec.out_channels;
    }
    let mut layer_iter = layers.into_iter();
    Ok(ToyDenoiser {
        conv_in: layer_iter.next().expect("three layers"),
        conv_mid: layer_iter.next().expect("three layers"),
        conv_out: layer_iter.next().expect("three layers"),
        alpha_bars: schedule.alpha_bars().to_vec(),
        latent_channels: manifest.latent_channels,
    })
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

/// Synthetic data generation parameters.
#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub frames: usize,
}

/// Procedural videos of an SH-lit deforming sphere with scripted pose and
/// lighting: each sample renders its own hint sequence, takes frame 0 as the
/// reference, and encodes the frames into toy latents. Deterministic per
/// seed.
pub fn synth_dataset(config: &SynthConfig) -> Result<Vec<TrainBatch>, TrainError> {
    if config.latent_h > MAX_SYNTH_LATENT || config.latent_w > MAX_SYNTH_LATENT {
        return Err(TrainError::SynthTooLarge(config.latent_h, config.latent_w));
    }
    let model = build_model(&FaceModelConfig {
        min_vertices: 42,
        shape_dims: 4,
        expr_dims: 2,
        seed: config.seed,
    })?;
    let height = config.latent_h * ADAPTER_DOWNSAMPLE;
    let width = config.latent_w * ADAPTER_DOWNSAMPLE;
    let camera = Camera::new(
        0.32 * height.min(width) as f64,
        [width as f64 / 2.0, height as f64 / 2.0],
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));

    let mut batches = Vec::with_capacity(config.count);
    for _ in 0..config.count {
        // Lighting with a dominant positive DC term keeps every shade in
        // (0, 1), so the clamp never binds and lighting stays recoverable.
        let mut lighting = SHCoefficients::zeros();
        for channel in 0..3 {
            lighting.sh[channel][0] = rng.random_range(1.6..2.1);
            for band in 1..9 {
                lighting.sh[channel][band] = rng.random_range(-0.1..0.1);
            }
        }
        let shape: Vec<f64> = (0..4).map(|_| rng.random_range(-0.8..0.8)).collect();
        let base_expr: Vec<f64> = (0..2).map(|_| rng.random_range(-0.5..0.5)).collect();
        let expr_delta: Vec<f64> = (0..2).map(|_| rng.random_range(-0.1..0.1)).collect();
        let base_rotation = [
            rng.random_range(-0.4..0.4),
            rng.random_range(-0.4..0.4),
            rng.random_range(-0.4..0.4),
        ];
        let rotation_delta = [
            rng.random_range(-0.06..0.06),
            rng.random_range(-0.06..0.06),
            rng.random_range(-0.06..0.06),
        ];

        let mut poses = Vec::with_capacity(config.frames);
        let mut expressions = Vec::with_capacity(config.frames);
        let mut hints = Array4::zeros((config.frames, 3, height, width));
        let mut masks = Array3::zeros((config.frames, config.latent_h, config.latent_w));
        let mut latents = Array4::zeros((
            config.frames,
            config.latent_h,
            config.latent_w,
            TOY_LATENT_CHANNELS,
        ));
        let mut reference = Array3::zeros((3, height, width));

        for frame in 0..config.frames {
            let pose = PoseParams::new(
                [
                    base_rotation[0] + frame as f64 * rotation_delta[0],
                    base_rotation[1] + frame as f64 * rotation_delta[1],
                    base_rotation[2] + frame as f64 * rotation_delta[2],
                ],
                [0.0, 0.0, 0.0],
            );
            let expr: Vec<f64> = base_expr
                .iter()
                .zip(&expr_delta)
                .map(|(b, d)| b + frame as f64 * d)
                .collect();
            let mesh = forward(&model, &shape, &pose, &expr)?;
            let rendered = render_shading_hints(&mesh, &camera, &lighting, (height, width))?;

            let encoded = toy_encode(&rendered.image, &rendered.mask)?;
            let mask_small = downsample_mask_max(&rendered.mask)?;
            for y in 0..config.latent_h {
                for x in 0..config.latent_w {
                    masks[[frame, y, x]] = mask_small[[y, x]];
                    for c in 0..TOY_LATENT_CHANNELS {
                        latents[[frame, y, x, c]] = encoded.data[[0, y, x, c]];
                    }
                }
            }
            for y in 0..height {
                for x in 0..width {
                    for c in 0..3 {
                        hints[[frame, c, y, x]] = rendered.image[[y, x, c]];
                        if frame == 0 {
                            reference[[c, y, x]] = rendered.image[[y, x, c]];
                        }
                    }
                }
            }
            poses.push(pose);
            expressions.push(expr);
        }

        let sample = TrainSample {
            latents: LatentSeq::from_array(latents),
            hints,
            reference,
            masks,
            meta: SampleMeta {
                lighting,
                poses,
                expressions,
                shape: shape.clone(),
            },
        };
        batches.push(TrainBatch::new(vec![sample])?);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::render_shading_hints_with_normals;
    use crate::sh::estimate_sh;
    use nalgebra::Vector3;

    fn seeded_latent(shape: LatentShape, seed: u64) -> LatentSeq {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentSeq::standard_normal(shape, &mut rng)
    }

    fn small_synth(seed: u64) -> Vec<TrainBatch> {
        synth_dataset(&SynthConfig {
            seed,
            count: 2,
            latent_h: 4,
            latent_w: 4,
            frames: 2,
        })
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            latent_h: 4,
            latent_w: 4,
            frames: 2,
            feature_channels: 8,
            mid_channels: 6,
            dataset_size: 2,
            steps: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let eps = seeded_latent(LatentShape::new(2, 3, 3, 2), 1);
        assert_eq!(ldm_loss(&eps, &eps).unwrap(), 0.0);
        let mask = Array3::zeros((2, 3, 3));
        assert_eq!(total_loss(&eps, &eps, &mask).unwrap(), 0.0);
    }

    #[test]
    fn constant_unit_residual_gives_unit_mse() {
        let shape = LatentShape::new(1, 2, 2, 2);
        let eps = LatentSeq::zeros(shape);
        let pred = LatentSeq::from_array(Array4::ones((1, 2, 2, 2)));
        assert_eq!(ldm_loss(&eps, &pred).unwrap(), 1.0);
    }

    #[test]
    fn ldm_loss_matches_a_scalar_loop_oracle() {
        let shape = LatentShape::new(2, 3, 4, 2);
        let eps = seeded_latent(shape, 2);
        let pred = seeded_latent(shape, 3);
        let got = ldm_loss(&eps, &pred).unwrap();
        let mut sum = 0.0;
        let mut count = 0.0;
        for (a, b) in eps.data.iter().zip(pred.data.iter()) {
            sum += (a - b) * (a - b);
            count += 1.0;
        }
        assert!((got - sum / count).abs() < 1e-10);
    }

    #[test]
    fn fully_masked_loss_is_zero() {
        let shape = LatentShape::new(1, 2, 2, 3);
        let eps = seeded_latent(shape, 4);
        let pred = seeded_latent(shape, 5);
        let mask = Array3::ones((1, 2, 2));
        assert_eq!(masked_loss(&eps, &pred, &mask).unwrap(), 0.0);
    }

    #[test]
    fn unmasked_loss_is_the_mean_absolute_residual() {
        let shape = LatentShape::new(1, 2, 2, 3);
        let eps = seeded_latent(shape, 6);
        let pred = seeded_latent(shape, 7);
        let mask = Array3::zeros((1, 2, 2));
        let got = masked_loss(&eps, &pred, &mask).unwrap();
        let expected: f64 = eps
            .data
            .iter()
            .zip(pred.data.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 12.0;
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn checkerboard_mask_matches_a_loop_oracle() {
        let shape = LatentShape::new(1, 4, 4, 2);
        let eps = seeded_latent(shape, 8);
        let pred = seeded_latent(shape, 9);
        let mask = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| ((y + x) % 2) as f64);
        let got = masked_loss(&eps, &pred, &mask).unwrap();
        let mut sum = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                if (y + x) % 2 == 0 {
                    for c in 0..2 {
                        sum += (eps.data[[0, y, x, c]] - pred.data[[0, y, x, c]]).abs();
                    }
                }
            }
        }
        assert!((got - sum / 32.0).abs() < 1e-12);
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        let shape = LatentShape::new(1, 2, 2, 1);
        let eps = seeded_latent(shape, 10);
        let mask = Array3::from_elem((1, 2, 2), 0.25);
        assert!(matches!(
            masked_loss(&eps, &eps, &mask),
            Err(TrainError::NonBinaryMask(_))
        ));
    }

    #[test]
    fn masked_positions_do_not_affect_the_loss() {
        let shape = LatentShape::new(2, 4, 4, 2);
        let eps = seeded_latent(shape, 11);
        let mut pred = seeded_latent(shape, 12);
        let mask = Array3::from_shape_fn((2, 4, 4), |(f, y, x)| ((f + y + x) % 2) as f64);
        let before = masked_loss(&eps, &pred, &mask).unwrap();
        // Perturb the prediction only where mask = 1.
        for f in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    if mask[[f, y, x]] == 1.0 {
                        for c in 0..2 {
                            pred.data[[f, y, x, c]] += 1000.0;
                        }
                    }
                }
            }
        }
        let after = masked_loss(&eps, &pred, &mask).unwrap();
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_the_exact_sum_of_terms() {
        let shape = LatentShape::new(1, 3, 3, 2);
        let eps = seeded_latent(shape, 13);
        let pred = seeded_latent(shape, 14);
        let mask = Array3::from_shape_fn((1, 3, 3), |(_, y, x)| ((y * x) % 2) as f64);
        let total = total_loss(&eps, &pred, &mask).unwrap();
        let sum = masked_loss(&eps, &pred, &mask).unwrap() + ldm_loss(&eps, &pred).unwrap();
        assert_eq!(total, sum);
    }

    #[test]
    fn toy_codec_round_trips_block_means() {
        let mut image = Array3::zeros((16, 16, 3));
        let mut mask = Array2::zeros((16, 16));
        for y in 0..16 {
            for x in 0..16 {
                let v = if x >= 8 { 0.75 } else { 0.25 };
                for c in 0..3 {
                    image[[y, x, c]] = v;
                }
                mask[[y, x]] = u8::from(x >= 8);
            }
        }
        let encoded = toy_encode(&image, &mask).unwrap();
        assert_eq!(encoded.shape(), LatentShape::new(1, 2, 2, 4));
        assert!((encoded.data[[0, 0, 0, 0]] - (-0.5)).abs() < 1e-12);
        assert!((encoded.data[[0, 0, 1, 0]] - 0.5).abs() < 1e-12);
        assert_eq!(encoded.data[[0, 0, 0, 3]], -1.0);
        assert_eq!(encoded.data[[0, 0, 1, 3]], 1.0);
        let decoded = toy_decode(&encoded).unwrap();
        assert_eq!(decoded.dim(), (1, 16, 16, 3));
        assert!((decoded[[0, 3, 3, 0]] - 0.25).abs() < 1e-12);
        assert!((decoded[[0, 3, 12, 0]] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn synth_dataset_is_deterministic() {
        let a = small_synth(9);
        let b = small_synth(9);
        assert_eq!(a.len(), b.len());
        for (ba, bb) in a.iter().zip(&b) {
            for (sa, sb) in ba.samples().iter().zip(bb.samples()) {
                assert_eq!(sa.latents, sb.latents);
                assert_eq!(sa.hints, sb.hints);
                assert_eq!(sa.masks, sb.masks);
            }
        }
    }

    #[test]
    fn synth_masks_are_maxpooled_rasterizer_masks() {
        let batches = small_synth(10);
        let sample = &batches[0].samples()[0];
        // Re-render frame 0 from the recorded parameters and pool its mask.
        let model = build_model(&FaceModelConfig {
            min_vertices: 42,
            shape_dims: 4,
            expr_dims: 2,
            seed: 10,
        })
        .unwrap();
        let camera = Camera::new(0.32 * 32.0, [16.0, 16.0]).unwrap();
        let mesh = forward(
            &model,
            &sample.meta.shape,
            &sample.meta.poses[0],
            &sample.meta.expressions[0],
        )
        .unwrap();
        let rendered =
            render_shading_hints(&mesh, &camera, &sample.meta.lighting, (32, 32)).unwrap();
        let pooled = downsample_mask_max(&rendered.mask).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(sample.masks[[0, y, x]], pooled[[y, x]]);
            }
        }
    }

    #[test]
    fn synth_lighting_is_recoverable_from_hints() {
        let batches = small_synth(11);
        let sample = &batches[0].samples()[0];
        let model = build_model(&FaceModelConfig {
            min_vertices: 42,
            shape_dims: 4,
            expr_dims: 2,
            seed: 11,
        })
        .unwrap();
        let camera = Camera::new(0.32 * 32.0, [16.0, 16.0]).unwrap();
        let mesh = forward(
            &model,
            &sample.meta.shape,
            &sample.meta.poses[0],
            &sample.meta.expressions[0],
        )
        .unwrap();
        let (_, normals) = render_shading_hints_with_normals(
            &mesh,
            &camera,
            &sample.meta.lighting,
            (32, 32),
        )
        .unwrap();
        let mut samples = Vec::new();
        for y in 0..32 {
            for x in 0..32 {
                let n = Vector3::new(normals[[y, x, 0]], normals[[y, x, 1]], normals[[y, x, 2]]);
                if n.norm() > 0.5 {
                    let rgb = [
                        sample.hints[[0, 0, y, x]],
                        sample.hints[[0, 1, y, x]],
                        sample.hints[[0, 2, y, x]],
                    ];
                    samples.push((n.normalize(), rgb));
                }
            }
        }
        let estimate = estimate_sh(&samples).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for channel in 0..3 {
            for band in 0..9 {
                let diff =
                    estimate.coeffs.sh[channel][band] - sample.meta.lighting.sh[channel][band];
                num += diff * diff;
                den += sample.meta.lighting.sh[channel][band].powi(2);
            }
        }
        assert!((num / den).sqrt() < 5e-2);
    }

    #[test]
    fn non_finite_loss_aborts_with_a_diagnostic() {
        // Corrupt one latent value. The zero-initialized output projection
        // keeps the first loss finite, but the NaN reaches the weights
        // through the gradients, so the guard fires within two steps.
        let mut config = tiny_config();
        config.steps = 4;
        let batches = small_synth(60);
        let mut bad = batches[0].samples()[0].clone();
        bad.latents.data[[0, 0, 0, 0]] = f64::NAN;
        let poisoned = TrainBatch::new(vec![bad]).unwrap();
        let mut state = TrainState::init(&config).unwrap();
        let err = train_loop(&mut state, &[poisoned], &config).unwrap_err();
        match err {
            TrainError::Diverged { step, loss } => {
                assert!(step <= 1, "diverged late at step {step}");
                assert!(loss.is_nan());
            }
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn zero_learning_rate_leaves_the_state_unchanged() {
        let mut config = tiny_config();
        config.lr = 0.0;
        let batches = small_synth(12);
        let mut state = TrainState::init(&config).unwrap();
        let reference = state.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let loss = train_step(&mut state, &batches[0], &config, 0, &mut rng).unwrap();
        assert!(loss.is_finite());
        assert_eq!(state, reference);
    }

    #[test]
    fn fixed_seed_runs_are_bit_identical() {
        let config = tiny_config();
        let batches = small_synth(13);
        let mut state_a = TrainState::init(&config).unwrap();
        let mut state_b = TrainState::init(&config).unwrap();
        let losses_a = train_loop(&mut state_a, &batches, &config).unwrap();
        let losses_b = train_loop(&mut state_b, &batches, &config).unwrap();
        assert_eq!(losses_a, losses_b);
        assert_eq!(state_a, state_b);
    }

    #[test]
    fn unconditional_runs_ignore_hint_and_reference_content() {
        let mut config = tiny_config();
        config.force_fusion = Some(FusionCoefficients::NEITHER);
        let batches = small_synth(14);
        // Variant batches: same latents and masks, different hints/reference.
        let variant: Vec<TrainBatch> = small_synth(15)
            .into_iter()
            .zip(&batches)
            .map(|(other, original)| {
                let mut samples = Vec::new();
                for (donor, keep) in other.samples().iter().zip(original.samples()) {
                    samples.push(TrainSample {
                        latents: keep.latents.clone(),
                        hints: donor.hints.clone(),
                        reference: donor.reference.clone(),
                        masks: keep.masks.clone(),
                        meta: keep.meta.clone(),
                    });
                }
                TrainBatch::new(samples).unwrap()
            })
            .collect();

        let mut state_a = TrainState::init(&config).unwrap();
        let mut state_b = TrainState::init(&config).unwrap();
        let losses_a = train_loop(&mut state_a, &batches, &config).unwrap();
        let losses_b = train_loop(&mut state_b, &variant, &config).unwrap();
        assert_eq!(losses_a, losses_b);
        assert_eq!(state_a, state_b);
    }

    #[test]
    fn end_to_end_gradients_pass_spot_finite_differences() {
        let config = tiny_config();
        let batches = small_synth(16);
        // Random final layer so gradients reach every parameter.
        let mut state = TrainState::init(&config).unwrap();
        state.denoiser = ToyDenoiser::new(
            TOY_LATENT_CHANNELS,
            config.feature_channels,
            config.mid_channels,
            &state.schedule,
            99,
            false,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draw = draw_step(
            &batches[0],
            &state.schedule,
            Some(FusionCoefficients::BOTH),
            &mut rng,
        );
        let (_, grads) = compute_loss_and_grads(
            &state,
            &batches[0],
            &draw,
            config.mask_polarity,
        )
        .unwrap();

        let loss_of = |state: &TrainState| -> f64 {
            compute_loss_and_grads(state, &batches[0], &draw, config.mask_polarity)
                .unwrap()
                .0
        };

        // Five spot checks across the denoiser and both adapters.
        let h = 1e-4;
        let spots: Vec<(&str, usize, usize)> = vec![
            ("den_in", 0, 3),
            ("den_out", 2, 1),
            ("shading", 0, 7),
            ("shading", 3, 2),
            ("reference", 1, 5),
        ];
        for (which, layer_index, flat) in spots {
            let (analytic, mut plus, mut minus) = match which {
                "den_in" | "den_out" => {
                    let g = if which == "den_in" {
                        grads.denoiser_in.weight.as_slice().unwrap()[flat]
                    } else {
                        grads.denoiser_out.weight.as_slice().unwrap()[flat]
                    };
                    (g, state.clone(), state.clone())
                }
                "shading" => (
                    grads.shading.as_ref().unwrap()[layer_index]
                        .weight
                        .as_slice()
                        .unwrap()[flat],
                    state.clone(),
                    state.clone(),
                ),
                _ => (
                    grads.reference.as_ref().unwrap()[layer_index]
                        .weight
                        .as_slice()
                        .unwrap()[flat],
                    state.clone(),
                    state.clone(),
                ),
            };
            match which {
                "den_in" => {
                    plus.denoiser.layers_mut()[0].weight.as_slice_mut().unwrap()[flat] += h;
                    minus.denoiser.layers_mut()[0].weight.as_slice_mut().unwrap()[flat] -= h;
                }
                "den_out" => {
                    plus.denoiser.layers_mut()[2].weight.as_slice_mut().unwrap()[flat] += h;
                    minus.denoiser.layers_mut()[2].weight.as_slice_mut().unwrap()[flat] -= h;
                }
                "shading" => {
                    plus.shading_adapter.layers_mut()[layer_index]
                        .weight
                        .as_slice_mut()
                        .unwrap()[flat] += h;
                    minus.shading_adapter.layers_mut()[layer_index]
                        .weight
                        .as_slice_mut()
                        .unwrap()[flat] -= h;
                }
                _ => {
                    plus.reference_adapter.layers_mut()[layer_index]
                        .weight
                        .as_slice_mut()
                        .unwrap()[flat] += h;
                    minus.reference_adapter.layers_mut()[layer_index]
                        .weight
                        .as_slice_mut()
                        .unwrap()[flat] -= h;
                }
            }
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
            assert!(
                rel < 1e-3,
                "{which}[{layer_index}][{flat}]: fd {fd} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn short_training_run_reduces_the_loss() {
        let mut config = tiny_config();
        config.steps = 60;
        config.lr = 0.05;
        let batches = synth_dataset(&SynthConfig {
            seed: 17,
            count: 4,
            latent_h: 4,
            latent_w: 4,
            frames: 2,
        })
        .unwrap();
        let mut state = TrainState::init(&config).unwrap();
        let losses = train_loop(&mut state, &batches, &config).unwrap();
        let first: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let last: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(
            last < first,
            "loss did not decrease: first {first}, last {last}"
        );
    }

    #[test]
    fn loss_csv_has_one_row_per_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_csv(&[1.5, 0.75, 0.5], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "step,loss\n0,1.5\n1,0.75\n2,0.5\n");
    }
}
