//! Render shading hints: a posed mesh lit by second-order SH lighting,
//! rasterized into an image + portrait mask + depth buffer.
//!
//! Writes hint/mask PNGs, a golden-test-friendly PPM, and a raw depth dump
//! under `example-out/shading_hints/`.

use relight::face::{build_model, forward, FaceModelConfig, PoseParams};
use relight::raster::{
    render_shading_hints, save_depth_raw, save_image_png, save_mask_png, save_ppm, Camera,
};
use relight::sh::SHCoefficients;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::path::Path::new("example-out/shading_hints");
    std::fs::create_dir_all(out)?;

    let model = build_model(&FaceModelConfig {
        min_vertices: 642,
        shape_dims: 4,
        expr_dims: 2,
        seed: 7,
    })?;
    let mesh = forward(
        &model,
        &[0.8, -0.5, 0.3, 0.0],
        &PoseParams::new([0.15, 0.4, 0.0], [0.0, 0.0, 0.0]),
        &[0.5, -0.5],
    )?;

    // Warm key light from the upper right plus a cool ambient floorplate.
    let mut light = SHCoefficients::dc([1.6, 1.5, 1.4]);
    light.sh[0][3] = 0.45; // x
    light.sh[1][3] = 0.35;
    light.sh[2][3] = 0.20;
    light.sh[0][2] = 0.30; // z
    light.sh[1][2] = 0.30;
    light.sh[2][2] = 0.40;

    let resolution = 256;
    let camera = Camera::new(0.38 * resolution as f64, [128.0, 128.0])?;
    let frame = render_shading_hints(&mesh, &camera, &light, (resolution, resolution))?;

    let covered = frame.mask.iter().filter(|&&m| m == 1).count();
    println!(
        "rendered {}x{} hints, {} portrait pixels",
        resolution, resolution, covered
    );

    save_image_png(&frame.image, out.join("hint.png"))?;
    save_mask_png(&frame.mask, out.join("mask.png"))?;
    save_ppm(&frame.image, out.join("hint.ppm"))?;
    save_depth_raw(&frame.depth, out.join("depth.f32"))?;
    println!("wrote hint.png, mask.png, hint.ppm, depth.f32 under {}", out.display());
    Ok(())
}
