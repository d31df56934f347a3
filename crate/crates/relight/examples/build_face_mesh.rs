//! Build a synthetic blendshape face model, pose it, and export the mesh.
//!
//! Writes `model.json` (the versioned model blob) and two OBJ files (rest
//! pose and a posed variant) under `example-out/build_face_mesh/`.

use relight::face::{build_model, forward, save_obj, FaceModelConfig, PoseParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::path::Path::new("example-out/build_face_mesh");
    std::fs::create_dir_all(out)?;

    let config = FaceModelConfig {
        min_vertices: 162,
        shape_dims: 8,
        expr_dims: 4,
        seed: 42,
    };
    let model = build_model(&config)?;
    println!(
        "built model: {} vertices, {} faces, |s|={}, |e|={}",
        model.vertex_count(),
        model.faces().len(),
        model.shape_dims(),
        model.expr_dims()
    );
    model.save_json(out.join("model.json"))?;

    let rest = forward(
        &model,
        &vec![0.0; config.shape_dims],
        &PoseParams::identity(),
        &vec![0.0; config.expr_dims],
    )?;
    save_obj(&rest, out.join("rest.obj"))?;

    let mut shape = vec![0.0; config.shape_dims];
    shape[0] = 1.5;
    shape[3] = -1.0;
    let pose = PoseParams::new([0.2, 0.6, 0.0], [0.0, 0.1, 0.0]);
    let posed = forward(&model, &shape, &pose, &[0.8, 0.0, -0.4, 0.0])?;
    save_obj(&posed, out.join("posed.obj"))?;

    println!("wrote {}", out.join("model.json").display());
    println!("wrote {} and {}", out.join("rest.obj").display(), out.join("posed.obj").display());
    Ok(())
}
