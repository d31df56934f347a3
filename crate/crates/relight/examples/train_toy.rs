//! Train the toy denoiser and both adapters on the synthetic lit-sphere
//! task, then print the loss trajectory summary and write the curve CSV.
//!
//! Each step draws a timestep, fresh noise, and binary fusion coefficients
//! (shading on/off, reference on/off), so the model explores every
//! conditioning combination, mirroring the full pipeline's training regime.

use relight::train::{
    synth_dataset, train_loop, write_loss_csv, SynthConfig, TrainConfig, TrainState,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::path::Path::new("example-out/train_toy");
    std::fs::create_dir_all(out)?;

    let config = TrainConfig {
        steps: 120,
        ..TrainConfig::default()
    };
    println!(
        "synthesizing {} videos of {} frames at {}x{} latents...",
        config.dataset_size, config.frames, config.latent_h, config.latent_w
    );
    let batches = synth_dataset(&SynthConfig {
        seed: config.data_seed,
        count: config.dataset_size,
        latent_h: config.latent_h,
        latent_w: config.latent_w,
        frames: config.frames,
    })?;

    let mut state = TrainState::init(&config)?;
    println!("training {} steps at lr {}...", config.steps, config.lr);
    let losses = train_loop(&mut state, &batches, &config)?;

    for chunk in losses.chunks(20) {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("  mean loss over 20 steps: {mean:.4}");
    }
    write_loss_csv(&losses, out.join("loss.csv"))?;
    println!("wrote {}", out.join("loss.csv").display());
    Ok(())
}
