//! Full end-to-end run: generate a complete input set (face model, driving
//! sequence, reference portrait, target lighting), then run the
//! relight-animate pipeline on it.
//!
//! The generated JSON files stay under `example-out/relight_pipeline/` and
//! can be reused with the CLI, e.g.
//!
//! ```text
//! relight relight --config example-out/relight_pipeline/config.json
//! ```

use relight::align::{save_driving_json, DrivingSequence};
use relight::face::{build_model, FaceModelConfig, PoseParams};
use relight::pipeline::{run, Mode, PipelineConfig, ReferenceSpec};
use relight::sh::SHCoefficients;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::path::Path::new("example-out/relight_pipeline");
    std::fs::create_dir_all(out)?;

    // Face model.
    let model = build_model(&FaceModelConfig {
        min_vertices: 162,
        shape_dims: 4,
        expr_dims: 2,
        seed: 12,
    })?;
    model.save_json(out.join("model.json"))?;

    // Driving motion: a slow turn with a blink-like expression pulse.
    let frames = 20;
    let driving = DrivingSequence::new(
        (0..frames)
            .map(|i| {
                let t = i as f64 / (frames - 1) as f64;
                PoseParams::new([0.1 * (6.0 * t).sin(), 0.7 * t - 0.35, 0.0], [0.0; 3])
            })
            .collect(),
        (0..frames)
            .map(|i| vec![(i as f64 * 0.9).sin() * 0.6, 0.2])
            .collect(),
    )?;
    save_driving_json(&driving, out.join("driving.json"))?;

    // Reference portrait: its own shape, pose, and neutral lighting.
    let reference = ReferenceSpec {
        shape: vec![0.6, -0.3, 0.2, 0.1],
        rotation: [0.05, -0.1, 0.0],
        translation: [0.0; 3],
        expression: None,
        lighting: SHCoefficients::dc([1.8, 1.8, 1.8]),
    };
    reference.save_json(out.join("reference.json"))?;

    // Target lighting: warm key from the left.
    let mut lighting = SHCoefficients::dc([1.9, 1.6, 1.3]);
    lighting.sh[0][3] = -0.4;
    lighting.sh[1][3] = -0.3;
    lighting.sh[2][3] = -0.2;
    lighting.save_json(out.join("lighting.json"))?;

    let mut config = PipelineConfig::new(Mode::RelightAnimate, out.join("run"));
    config.model = Some(out.join("model.json"));
    config.driving = Some(out.join("driving.json"));
    config.reference = Some(out.join("reference.json"));
    config.lighting = Some(out.join("lighting.json"));
    config.resolution = 64;
    config.feature_channels = 16;
    std::fs::write(
        out.join("config.json"),
        serde_json::to_string_pretty(&config)?,
    )?;

    let summary = run(&config)?;
    println!(
        "relit {} frames ({} hints) -> {}",
        summary.frames_written,
        summary.hints_written,
        summary.output_dir.display()
    );
    println!("manifest: {}", summary.manifest_path.display());
    println!("reusable CLI config: {}", out.join("config.json").display());
    Ok(())
}
