//! Golden-image test: the rasterizer's byte-exact output for a fixed scene.
//! Pins the projection, fill rule, culling, depth resolution, and shading
//! math all at once; any change to rendering behavior shows up here.

use relight::face::{build_model, forward, FaceModelConfig, PoseParams};
use relight::raster::{encode_ppm, render_shading_hints, Camera};
use relight::sh::SHCoefficients;

#[test]
fn fixed_scene_matches_the_golden_ppm() {
    let model = build_model(&FaceModelConfig {
        min_vertices: 42,
        shape_dims: 2,
        expr_dims: 1,
        seed: 5,
    })
    .unwrap();
    let mesh = forward(
        &model,
        &[0.5, -0.5],
        &PoseParams::new([0.2, 0.3, 0.0], [0.0; 3]),
        &[0.4],
    )
    .unwrap();
    let mut light = SHCoefficients::dc([1.8, 1.5, 1.2]);
    light.sh[0][2] = 0.3;
    light.sh[1][3] = -0.2;
    light.sh[2][1] = 0.15;
    let camera = Camera::new(6.0, [8.0, 8.0]).unwrap();
    let frame = render_shading_hints(&mesh, &camera, &light, (16, 16)).unwrap();

    let golden = include_bytes!("golden/sphere_16x16.ppm");
    assert_eq!(
        encode_ppm(&frame.image).as_slice(),
        golden.as_slice(),
        "rendered bytes diverged from the golden image"
    );
}
