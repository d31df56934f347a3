//! Recover SH lighting coefficients from a rendered image: render a sphere
//! under known lighting, then solve the least-squares inverse from
//! (interpolated normal, pixel radiance) pairs.

use nalgebra::Vector3;
use relight::face::{build_model, forward, FaceModelConfig, PoseParams};
use relight::raster::{render_shading_hints_with_normals, Camera};
use relight::sh::{estimate_sh, SHCoefficients};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = build_model(&FaceModelConfig {
        min_vertices: 642,
        shape_dims: 1,
        expr_dims: 1,
        seed: 0,
    })?;
    let mesh = forward(&model, &[0.0], &PoseParams::identity(), &[0.0])?;

    let mut truth = SHCoefficients::dc([1.7, 1.7, 1.7]);
    truth.sh[0][2] = 0.25;
    truth.sh[1][4] = -0.15;
    truth.sh[2][6] = 0.10;

    let camera = Camera::new(48.0, [64.0, 64.0])?;
    let (frame, normals) =
        render_shading_hints_with_normals(&mesh, &camera, &truth, (128, 128))?;

    let mut samples = Vec::new();
    for y in 0..128 {
        for x in 0..128 {
            if frame.mask[[y, x]] == 1 {
                samples.push((
                    Vector3::new(normals[[y, x, 0]], normals[[y, x, 1]], normals[[y, x, 2]]),
                    [
                        frame.image[[y, x, 0]],
                        frame.image[[y, x, 1]],
                        frame.image[[y, x, 2]],
                    ],
                ));
            }
        }
    }
    println!("fitting 27 coefficients from {} pixel samples", samples.len());
    let estimate = estimate_sh(&samples)?;

    let mut worst: f64 = 0.0;
    for channel in 0..3 {
        for band in 0..9 {
            worst = worst.max(
                (estimate.coeffs.sh[channel][band] - truth.sh[channel][band]).abs(),
            );
        }
    }
    println!("residual rms = {:.3e}", estimate.residual_rms);
    println!("worst coefficient error = {worst:.3e}");
    println!("red channel, true vs estimated:");
    for band in 0..9 {
        println!(
            "  band {band}: {:+.4} vs {:+.4}",
            truth.sh[0][band], estimate.coeffs.sh[0][band]
        );
    }
    Ok(())
}
