//! Desk-scale relightable portrait animation.
//!
//! The pipeline animates a reference portrait with the motion of a driving
//! sequence while imposing a target lighting: a blendshape face model poses a
//! mesh per frame, the mesh is rendered into SH-lit shading hints, two conv
//! adapters map the hints and the reference frame into a shared feature
//! space, and a guided diffusion sampler generates the output latents window
//! by window, blending the overlaps into an arbitrarily long sequence.
//!
//! Every learned component has a desk-scale stand-in so the full system is
//! exactly testable: a closed-form Gaussian noise-prediction oracle replaces
//! the video diffusion backbone, a block-pooling codec replaces the
//! autoencoder, and a three-layer conv net trained on procedural lit-sphere
//! videos plays the denoiser when a trainable path is wanted.
//!
//! Module map:
//! - [`face`]: blendshape face model, posing, vertex normals, OBJ/JSON.
//! - [`sh`]: second-order spherical-harmonics shading and its inverse.
//! - [`raster`]: z-buffered software rasterizer producing shading hints,
//!   portrait masks, and depth.
//! - [`align`]: motion alignment of driving sequences to a reference.
//! - [`diffusion`]: noise schedule, forward diffusion, multi-condition
//!   classifier-free guidance, DDIM sampling, Gaussian oracle.
//! - [`adapter`]: shading/reference conv adapters with exact gradients,
//!   feature fusion, reference-latent masking.
//! - [`train`]: losses, the toy denoiser, and the synthetic training loop.
//! - [`window`]: long-video window planning and overlap blending.
//! - [`pipeline`]: config validation and the end-to-end run modes.

pub mod adapter;
pub mod align;
pub mod diffusion;
pub mod face;
pub mod pipeline;
pub mod raster;
pub mod sh;
pub mod train;
pub mod window;
