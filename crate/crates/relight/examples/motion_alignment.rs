//! Align a driving pose sequence to a reference portrait, both ways.
//!
//! The relative variant re-bases the motion on the reference pose (first
//! aligned frame equals the reference); the scale-consistent variant keeps
//! the driving poses verbatim. Writes both aligned JSON files under
//! `example-out/motion_alignment/`.

use relight::align::{
    align_relative, align_scale_consistent, save_aligned_json, save_driving_json, DrivingSequence,
};
use relight::face::PoseParams;
use relight::sh::SHCoefficients;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::path::Path::new("example-out/motion_alignment");
    std::fs::create_dir_all(out)?;

    // A nod with a slow head turn, expressions drifting.
    let frames = 12;
    let poses: Vec<PoseParams> = (0..frames)
        .map(|i| {
            let t = i as f64 / (frames - 1) as f64;
            PoseParams::new(
                [0.3 * (t * 6.0).sin() * 0.5, 0.4 * t, 0.0],
                [0.02 * i as f64, 0.0, 0.0],
            )
        })
        .collect();
    let expressions: Vec<Vec<f64>> = (0..frames)
        .map(|i| vec![0.1 * i as f64, -0.05 * i as f64])
        .collect();
    let driving = DrivingSequence::new(poses, expressions)?;
    save_driving_json(&driving, out.join("driving.json"))?;

    let ref_pose = PoseParams::new([-0.1, -0.3, 0.05], [0.0, 0.0, 0.0]);
    let ref_shape = vec![0.5, -0.5, 0.2, 0.0];
    let light = SHCoefficients::dc([1.8, 1.8, 1.8]);

    let relative = align_relative(&driving, &ref_pose, &ref_shape, &light);
    let consistent = align_scale_consistent(&driving, &ref_shape, &light);

    println!("driving frame 0 rotation:  {:?}", driving.poses()[0].rotation.as_slice());
    println!("relative frame 0 rotation: {:?}", relative.poses[0].rotation.as_slice());
    println!("  (equals the reference pose; later frames add driving offsets)");
    println!(
        "scale-consistent frame 0:  {:?}",
        consistent.poses[0].rotation.as_slice()
    );
    println!("  (driving poses pass through unchanged)");

    save_aligned_json(&relative, out.join("aligned_relative.json"))?;
    save_aligned_json(&consistent, out.join("aligned_scale_consistent.json"))?;
    println!("wrote aligned sequences under {}", out.display());
    Ok(())
}
