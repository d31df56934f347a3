//! Conditioning adapters and feature fusion.
//!
//! The shading and reference adapters are small strided conv stacks that map
//! image-space inputs (hint sequences, duplicated reference frames) onto the
//! denoiser's first-layer feature grid: spatial downsampling by 8 and a
//! configurable output channel count. Forward and reverse passes are written
//! out explicitly so gradients can be verified against finite differences.
//!
//! Fusion recombines the two feature maps with binary coefficients
//! (`alpha * F_s + beta * F_r`), and the reference-latent helper zeroes
//! portrait pixels and replicates the masked latent across frames for
//! channel concatenation.

use std::path::Path;

use ndarray::{Array1, Array2, Array4};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::LatentSeq;

/// Negative-branch slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Spatial downsampling contract between image inputs and the latent grid.
pub const ADAPTER_DOWNSAMPLE: usize = 8;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("kernel size must be odd and positive (got {0})")]
    BadKernel(usize),
    #[error("stride must be at least 1")]
    BadStride,
    #[error("layer must have at least one output channel")]
    NoChannels,
    #[error("input has {got} channels, layer expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("input spatial dims ({h}x{w}) must be divisible by the net's downsample factor {factor}")]
    NotDivisible { h: usize, w: usize, factor: usize },
    #[error("shape mismatch in {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("feature required by coefficient {0} is absent")]
    MissingFeature(&'static str),
    #[error("fusion needs at least one feature to determine the output shape")]
    NoFeatures,
    #[error("mask must be binary (found {0})")]
    NonBinaryMask(f64),
    #[error("reference latent must be a single frame (got {0})")]
    MultiFrameReference(usize),
    #[error("frame count must be at least 1")]
    NoFrames,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    InvalidFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Declarative layer description: channels, odd kernel, stride, and whether
/// a leaky rectifier follows the convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub nonlinearity: bool,
}

/// One convolution layer with same-padding (`pad = (kernel - 1) / 2`).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `(out_channels, in_channels, kernel, kernel)`.
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub nonlinearity: bool,
}

/// Gradients for one layer, shaped like its parameters.
#[derive(Debug, Clone)]
pub struct ConvLayerGrads {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl ConvLayer {
    pub fn seeded(
        in_channels: usize,
        spec: ConvLayerSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, AdapterError> {
        if spec.kernel == 0 || spec.kernel.is_multiple_of(2) {
            return Err(AdapterError::BadKernel(spec.kernel));
        }
        if spec.stride == 0 {
            return Err(AdapterError::BadStride);
        }
        if spec.out_channels == 0 || in_channels == 0 {
            return Err(AdapterError::NoChannels);
        }
        let fan_in = (in_channels * spec.kernel * spec.kernel) as f64;
        let scale = (2.0 / fan_in).sqrt();
        let weight = Array4::from_shape_simple_fn(
            (spec.out_channels, in_channels, spec.kernel, spec.kernel),
            || scale * rng.sample::<f64, _>(StandardNormal),
        );
        Ok(Self {
            weight,
            bias: Array1::zeros(spec.out_channels),
            stride: spec.stride,
            nonlinearity: spec.nonlinearity,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn spec(&self) -> ConvLayerSpec {
        ConvLayerSpec {
            out_channels: self.out_channels(),
            kernel: self.kernel(),
            stride: self.stride,
            nonlinearity: self.nonlinearity,
        }
    }

    /// Convolution + bias, before any nonlinearity. Output spatial dims are
    /// `ceil(in / stride)`.
    ///
    /// Weight-stationary loop order over flat slices; the inner loop runs
    /// along contiguous output rows.
    pub fn conv(&self, input: &Array4<f64>) -> Result<Array4<f64>, AdapterError> {
        let (frames, in_c, in_h, in_w) = input.dim();
        if in_c != self.in_channels() {
            return Err(AdapterError::ChannelMismatch {
                expected: self.in_channels(),
                got: in_c,
            });
        }
        let k = self.kernel();
        let pad = (k - 1) / 2;
        let s = self.stride;
        let out_h = in_h.div_ceil(s);
        let out_w = in_w.div_ceil(s);
        let out_c = self.out_channels();

        let input_std = input.as_standard_layout();
        let x = input_std.as_slice().expect("standard layout");
        let w = self.weight.as_slice().expect("owned weights");
        let mut out = vec![0.0f64; frames * out_c * out_h * out_w];

        for f in 0..frames {
            for oc in 0..out_c {
                let out_base = (f * out_c + oc) * out_h * out_w;
                out[out_base..out_base + out_h * out_w].fill(self.bias[oc]);
                for ic in 0..in_c {
                    let in_base = (f * in_c + ic) * in_h * in_w;
                    for ky in 0..k {
                        let ky_off = ky as isize - pad as isize;
                        let Some((oy_min, oy_max)) =
                            valid_output_range(ky_off, s, in_h, out_h)
                        else {
                            continue;
                        };
                        for kx in 0..k {
                            let kx_off = kx as isize - pad as isize;
                            let Some((ox_min, ox_max)) =
                                valid_output_range(kx_off, s, in_w, out_w)
                            else {
                                continue;
                            };
                            let weight = w[((oc * in_c + ic) * k + ky) * k + kx];
                            if weight == 0.0 {
                                continue;
                            }
                            for oy in oy_min..=oy_max {
                                let iy = (oy as isize * s as isize + ky_off) as usize;
                                let in_row = in_base + iy * in_w;
                                let out_row = out_base + oy * out_w;
                                let mut ix =
                                    (ox_min as isize * s as isize + kx_off) as usize;
                                for ox in ox_min..=ox_max {
                                    out[out_row + ox] += weight * x[in_row + ix];
                                    ix += s;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Array4::from_shape_vec((frames, out_c, out_h, out_w), out)
            .expect("length matches shape"))
    }

    /// Full layer: convolution, then leaky rectifier when configured.
    pub fn forward(&self, input: &Array4<f64>) -> Result<Array4<f64>, AdapterError> {
        let pre = self.conv(input)?;
        Ok(if self.nonlinearity {
            leaky_relu(&pre)
        } else {
            pre
        })
    }

    /// Reverse-mode gradients given the layer input, the cached
    /// pre-activation, and the upstream gradient. Returns parameter grads and
    /// the gradient w.r.t. the input.
    pub fn backward(
        &self,
        input: &Array4<f64>,
        preact: &Array4<f64>,
        upstream: &Array4<f64>,
    ) -> Result<(ConvLayerGrads, Array4<f64>), AdapterError> {
        if upstream.dim() != preact.dim() {
            return Err(AdapterError::ShapeMismatch {
                what: "upstream gradient",
                expected: preact.shape().to_vec(),
                got: upstream.shape().to_vec(),
            });
        }
        let d_pre = if self.nonlinearity {
            let mut d = upstream.clone();
            d.zip_mut_with(preact, |g, &x| {
                if x <= 0.0 {
                    *g *= LEAKY_SLOPE;
                }
            });
            d
        } else {
            upstream.clone()
        };

        let (frames, in_c, in_h, in_w) = input.dim();
        let (_, out_c, out_h, out_w) = d_pre.dim();
        let k = self.kernel();
        let pad = (k - 1) / 2;
        let s = self.stride;

        let input_std = input.as_standard_layout();
        let x = input_std.as_slice().expect("standard layout");
        let d_pre_std = d_pre.as_standard_layout();
        let g = d_pre_std.as_slice().expect("standard layout");
        let w = self.weight.as_slice().expect("owned weights");

        let mut d_weight = vec![0.0f64; self.weight.len()];
        let mut d_bias = Array1::zeros(out_c);
        let mut d_input = vec![0.0f64; input.len()];

        for f in 0..frames {
            for oc in 0..out_c {
                let out_base = (f * out_c + oc) * out_h * out_w;
                d_bias[oc] += g[out_base..out_base + out_h * out_w].iter().sum::<f64>();
                for ic in 0..in_c {
                    let in_base = (f * in_c + ic) * in_h * in_w;
                    for ky in 0..k {
                        let ky_off = ky as isize - pad as isize;
                        let Some((oy_min, oy_max)) =
                            valid_output_range(ky_off, s, in_h, out_h)
                        else {
                            continue;
                        };
                        for kx in 0..k {
                            let kx_off = kx as isize - pad as isize;
                            let Some((ox_min, ox_max)) =
                                valid_output_range(kx_off, s, in_w, out_w)
                            else {
                                continue;
                            };
                            let w_index = ((oc * in_c + ic) * k + ky) * k + kx;
                            let weight = w[w_index];
                            let mut dw = 0.0;
                            for oy in oy_min..=oy_max {
                                let iy = (oy as isize * s as isize + ky_off) as usize;
                                let in_row = in_base + iy * in_w;
                                let out_row = out_base + oy * out_w;
                                let mut ix =
                                    (ox_min as isize * s as isize + kx_off) as usize;
                                for ox in ox_min..=ox_max {
                                    let grad = g[out_row + ox];
                                    dw += grad * x[in_row + ix];
                                    d_input[in_row + ix] += grad * weight;
                                    ix += s;
                                }
                            }
                            d_weight[w_index] += dw;
                        }
                    }
                }
            }
        }
        Ok((
            ConvLayerGrads {
                weight: Array4::from_shape_vec(self.weight.dim(), d_weight)
                    .expect("length matches shape"),
                bias: d_bias,
            },
            Array4::from_shape_vec(input.dim(), d_input).expect("length matches shape"),
        ))
    }

    pub fn apply_sgd(&mut self, grads: &ConvLayerGrads, lr: f64) {
        self.weight.zip_mut_with(&grads.weight, |w, g| *w -= lr * g);
        self.bias.zip_mut_with(&grads.bias, |b, g| *b -= lr * g);
    }
}

/// Output positions `o` with `0 <= o * stride + offset < input_len`, clipped
/// to the output extent. `None` when the kernel tap never lands in bounds.
fn valid_output_range(
    offset: isize,
    stride: usize,
    input_len: usize,
    output_len: usize,
) -> Option<(usize, usize)> {
    let s = stride as isize;
    let min = if offset >= 0 {
        0
    } else {
        ((-offset) + s - 1) / s
    };
    let max = (input_len as isize - 1 - offset).div_euclid(s);
    if max < min {
        return None;
    }
    let min = min as usize;
    let max = (max as usize).min(output_len - 1);
    if max < min {
        return None;
    }
    Some((min, max))
}

pub fn leaky_relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

/// Gradient of [`leaky_relu`] at the cached pre-activation.
pub fn leaky_relu_backward(preact: &Array4<f64>, upstream: &Array4<f64>) -> Array4<f64> {
    let mut d = upstream.clone();
    d.zip_mut_with(preact, |g, &x| {
        if x <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    });
    d
}

/// Per-frame feature maps matching the denoiser's first-layer output:
/// `(frames, channels, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterFeatures {
    pub data: Array4<f64>,
}

impl AdapterFeatures {
    pub fn zeros(frames: usize, channels: usize, h: usize, w: usize) -> Self {
        Self {
            data: Array4::zeros((frames, channels, h, w)),
        }
    }
}

/// A conv stack mapping image-space inputs onto the feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterNet {
    layers: Vec<ConvLayer>,
}

/// Cached activations from [`AdapterNet::forward_with_cache`], consumed by
/// the backward pass.
#[derive(Debug, Clone)]
pub struct AdapterCache {
    /// Input to each layer.
    inputs: Vec<Array4<f64>>,
    /// Pre-activation output of each layer.
    preacts: Vec<Array4<f64>>,
}

impl AdapterNet {
    /// Build a net from explicit layer specs with seeded initialization.
    pub fn with_layers(
        in_channels: usize,
        specs: &[ConvLayerSpec],
        seed: u64,
    ) -> Result<Self, AdapterError> {
        if specs.is_empty() {
            return Err(AdapterError::NoChannels);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len());
        let mut channels = in_channels;
        for spec in specs {
            layers.push(ConvLayer::seeded(channels, *spec, &mut rng)?);
            channels = spec.out_channels;
        }
        Ok(Self { layers })
    }

    /// The standard adapter plan: three stride-2 stages (3 -> 16 -> 32 -> 64)
    /// followed by a linear 1x1 projection to the feature channel count,
    /// giving the x8 spatial downsampling the latent grid requires.
    pub fn portrait_plan(feature_channels: usize, seed: u64) -> Result<Self, AdapterError> {
        let net = Self::with_layers(
            3,
            &[
                ConvLayerSpec {
                    out_channels: 16,
                    kernel: 3,
                    stride: 2,
                    nonlinearity: true,
                },
                ConvLayerSpec {
                    out_channels: 32,
                    kernel: 3,
                    stride: 2,
                    nonlinearity: true,
                },
                ConvLayerSpec {
                    out_channels: 64,
                    kernel: 3,
                    stride: 2,
                    nonlinearity: true,
                },
                ConvLayerSpec {
                    out_channels: feature_channels,
                    kernel: 1,
                    stride: 1,
                    nonlinearity: false,
                },
            ],
            seed,
        )?;
        debug_assert_eq!(net.total_downsample(), ADAPTER_DOWNSAMPLE);
        Ok(net)
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().expect("non-empty").out_channels()
    }

    pub fn total_downsample(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    fn check_input(&self, input: &Array4<f64>) -> Result<(), AdapterError> {
        let (_, c, h, w) = input.dim();
        if c != self.in_channels() {
            return Err(AdapterError::ChannelMismatch {
                expected: self.in_channels(),
                got: c,
            });
        }
        let factor = self.total_downsample();
        if h % factor != 0 || w % factor != 0 {
            return Err(AdapterError::NotDivisible { h, w, factor });
        }
        if !input.iter().all(|v| v.is_finite()) {
            return Err(AdapterError::NonFinite("adapter input"));
        }
        Ok(())
    }

    /// Map an `(F, C, H, W)` image stack to `(F, C', H/d, W/d)` features.
    pub fn forward(&self, input: &Array4<f64>) -> Result<AdapterFeatures, AdapterError> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(AdapterFeatures { data: x })
    }

    pub fn forward_with_cache(
        &self,
        input: &Array4<f64>,
    ) -> Result<(AdapterFeatures, AdapterCache), AdapterError> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let pre = layer.conv(&x)?;
            inputs.push(x);
            x = if layer.nonlinearity {
                leaky_relu(&pre)
            } else {
                pre.clone()
            };
            preacts.push(pre);
        }
        Ok((AdapterFeatures { data: x }, AdapterCache { inputs, preacts }))
    }

    /// Reverse-mode gradients for every layer plus the input gradient, given
    /// the cache from the matching forward pass.
    pub fn backward(
        &self,
        cache: &AdapterCache,
        upstream: &Array4<f64>,
    ) -> Result<(Vec<ConvLayerGrads>, Array4<f64>), AdapterError> {
        let mut grads: Vec<Option<ConvLayerGrads>> = (0..self.layers.len()).map(|_| None).collect();
        let mut d = upstream.clone();
        for (index, layer) in self.layers.iter().enumerate().rev() {
            let (layer_grads, d_input) =
                layer.backward(&cache.inputs[index], &cache.preacts[index], &d)?;
            grads[index] = Some(layer_grads);
            d = d_input;
        }
        Ok((
            grads.into_iter().map(|g| g.expect("filled")).collect(),
            d,
        ))
    }

    /// Convenience wrapper matching the (net, input, upstream) contract:
    /// runs the forward pass internally and returns (weight grads, input grad).
    pub fn backward_from_input(
        &self,
        input: &Array4<f64>,
        upstream: &Array4<f64>,
    ) -> Result<(Vec<ConvLayerGrads>, Array4<f64>), AdapterError> {
        let (_, cache) = self.forward_with_cache(input)?;
        self.backward(&cache, upstream)
    }

    pub fn apply_sgd(&mut self, grads: &[ConvLayerGrads], lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            layer.apply_sgd(g, lr);
        }
    }
}

/// Binary recombination coefficients for the two feature subspaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionCoefficients {
    pub alpha: bool,
    pub beta: bool,
}

impl FusionCoefficients {
    pub const BOTH: Self = Self {
        alpha: true,
        beta: true,
    };
    pub const SHADING_ONLY: Self = Self {
        alpha: true,
        beta: false,
    };
    pub const REFERENCE_ONLY: Self = Self {
        alpha: false,
        beta: true,
    };
    pub const NEITHER: Self = Self {
        alpha: false,
        beta: false,
    };
}

/// `alpha * F_s + beta * F_r`. Coefficients are binary; (0, 0) yields the
/// zero feature (the unconditional branch). A feature may be absent only if
/// its coefficient is 0, and at least one feature must be present to fix the
/// output shape.
pub fn fuse(
    shading: Option<&AdapterFeatures>,
    reference: Option<&AdapterFeatures>,
    coeffs: FusionCoefficients,
) -> Result<AdapterFeatures, AdapterError> {
    if coeffs.alpha && shading.is_none() {
        return Err(AdapterError::MissingFeature("alpha"));
    }
    if coeffs.beta && reference.is_none() {
        return Err(AdapterError::MissingFeature("beta"));
    }
    let template = shading
        .or(reference)
        .ok_or(AdapterError::NoFeatures)?;
    if let (Some(a), Some(b)) = (shading, reference) {
        if a.data.dim() != b.data.dim() {
            return Err(AdapterError::ShapeMismatch {
                what: "fusion features",
                expected: a.data.shape().to_vec(),
                got: b.data.shape().to_vec(),
            });
        }
    }
    let mut out = Array4::zeros(template.data.dim());
    if coeffs.alpha {
        out += &shading.expect("checked").data;
    }
    if coeffs.beta {
        out += &reference.expect("checked").data;
    }
    Ok(AdapterFeatures { data: out })
}

/// Zero the portrait pixels of a single-frame reference latent (mask = 1
/// marks the portrait) and replicate it `frames` times, ready for channel
/// concatenation with the noise latent.
pub fn prepare_reference_latent(
    ref_latent: &LatentSeq,
    portrait_mask: &Array2<f64>,
    frames: usize,
) -> Result<LatentSeq, AdapterError> {
    let shape = ref_latent.shape();
    if shape.frames != 1 {
        return Err(AdapterError::MultiFrameReference(shape.frames));
    }
    if frames == 0 {
        return Err(AdapterError::NoFrames);
    }
    if portrait_mask.dim() != (shape.h, shape.w) {
        return Err(AdapterError::ShapeMismatch {
            what: "portrait mask",
            expected: vec![shape.h, shape.w],
            got: portrait_mask.shape().to_vec(),
        });
    }
    for &m in portrait_mask.iter() {
        if m != 0.0 && m != 1.0 {
            return Err(AdapterError::NonBinaryMask(m));
        }
    }
    let mut out = Array4::zeros((frames, shape.h, shape.w, shape.c));
    for f in 0..frames {
        for y in 0..shape.h {
            for x in 0..shape.w {
                let keep = 1.0 - portrait_mask[[y, x]];
                for ch in 0..shape.c {
                    out[[f, y, x, ch]] = keep * ref_latent.data[[0, y, x, ch]];
                }
            }
        }
    }
    Ok(LatentSeq::from_array(out))
}

/// Concatenate two latent sequences along the channel axis.
pub fn concat_channels(a: &LatentSeq, b: &LatentSeq) -> Result<LatentSeq, AdapterError> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.frames, sa.h, sa.w) != (sb.frames, sb.h, sb.w) {
        return Err(AdapterError::ShapeMismatch {
            what: "channel concatenation",
            expected: vec![sa.frames, sa.h, sa.w],
            got: vec![sb.frames, sb.h, sb.w],
        });
    }
    let mut out = Array4::zeros((sa.frames, sa.h, sa.w, sa.c + sb.c));
    for f in 0..sa.frames {
        for y in 0..sa.h {
            for x in 0..sa.w {
                for ch in 0..sa.c {
                    out[[f, y, x, ch]] = a.data[[f, y, x, ch]];
                }
                for ch in 0..sb.c {
                    out[[f, y, x, sa.c + ch]] = b.data[[f, y, x, ch]];
                }
            }
        }
    }
    Ok(LatentSeq::from_array(out))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterManifest {
    version: u32,
    dtype: String,
    in_channels: usize,
    layers: Vec<ConvLayerSpec>,
    element_count: usize,
}

/// Save adapter weights as a flat binary blob (little-endian f64, layer
/// weights then biases in order) plus a JSON manifest at `<path>.json`.
pub fn save_adapter(net: &AdapterNet, path: impl AsRef<Path>) -> Result<(), AdapterError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    let mut element_count = 0;
    for layer in net.layers() {
        for v in layer.weight.iter().chain(layer.bias.iter()) {
            bytes.extend_from_slice(&v.to_le_bytes());
            element_count += 1;
        }
    }
    std::fs::write(path, bytes)?;
    let manifest = AdapterManifest {
        version: 1,
        dtype: "f64-le".to_string(),
        in_channels: net.in_channels(),
        layers: net.layers().iter().map(|l| l.spec()).collect(),
        element_count,
    };
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    std::fs::write(sidecar, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Load adapter weights written by [`save_adapter`].
pub fn load_adapter(path: impl AsRef<Path>) -> Result<AdapterNet, AdapterError> {
    let path = path.as_ref();
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    let manifest: AdapterManifest = serde_json::from_str(&std::fs::read_to_string(sidecar)?)?;
    if manifest.version != 1 {
        return Err(AdapterError::InvalidFile(format!(
            "unsupported adapter version {}",
            manifest.version
        )));
    }
    if manifest.dtype != "f64-le" {
        return Err(AdapterError::InvalidFile(format!(
            "unsupported dtype {}",
            manifest.dtype
        )));
    }
    let bytes = std::fs::read(path)?;
    if bytes.len() != manifest.element_count * 8 {
        return Err(AdapterError::InvalidFile(format!(
            "weight payload is {} bytes, expected {}",
            bytes.len(),
            manifest.element_count * 8
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));

    let mut layers = Vec::with_capacity(manifest.layers.len());
    let mut channels = manifest.in_channels;
    for spec in &manifest.layers {
        if spec.kernel == 0 || spec.kernel.is_multiple_of(2) {
            return Err(AdapterError::BadKernel(spec.kernel));
        }
        if spec.stride == 0 {
            return Err(AdapterError::BadStride);
        }
        let weight_len = spec.out_channels * channels * spec.kernel * spec.kernel;
        let mut weight = Vec::with_capacity(weight_len);
        for _ in 0..weight_len {
            weight.push(values.next().ok_or_else(|| {
                AdapterError::InvalidFile("weight blob ended early".to_string())
            })?);
        }
        let mut bias = Vec::with_capacity(spec.out_channels);
        for _ in 0..spec.out_channels {
            bias.push(values.next().ok_or_else(|| {
                AdapterError::InvalidFile("weight blob ended early".to_string())
            })?);
        }
        if !weight.iter().chain(bias.iter()).all(|v| v.is_finite()) {
            return Err(AdapterError::NonFinite("adapter weights"));
        }
        layers.push(ConvLayer {
            weight: Array4::from_shape_vec(
                (spec.out_channels, channels, spec.kernel, spec.kernel),
                weight,
            )
            .expect("length checked"),
            bias: Array1::from_vec(bias),
            stride: spec.stride,
            nonlinearity: spec.nonlinearity,
        });
        channels = spec.out_channels;
    }
    if values.next().is_some() {
        return Err(AdapterError::InvalidFile(
            "weight blob has trailing data".to_string(),
        ));
    }
    Ok(AdapterNet { layers })
}
