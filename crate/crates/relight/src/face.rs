//! Linear blendshape face model.
//!
//! A model is a template mesh plus shape and expression offset bases; a posed
//! mesh is `R(pose) * (template + shape_basis * s + expr_basis * e) + t(pose)`
//! with a rigid axis-angle head pose. The synthetic template is a unit
//! icosphere and the bases are seeded smooth offset fields, so every
//! downstream stage can be exercised without any model assets.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use ndarray::Array3;
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest supported template (an unsubdivided icosahedron).
pub const MIN_VERTICES: usize = 12;
/// Largest template the builder will synthesize (6 subdivision levels).
pub const MAX_VERTICES: usize = 163_842;

const MODEL_FORMAT_VERSION: u32 = 1;

/// Per-component bound on blendshape offsets.
const BASIS_BOUND: f64 = 0.1;

#[derive(Debug, Error)]
pub enum FaceError {
    #[error("model needs at least {MIN_VERTICES} vertices (requested {0})")]
    TooFewVertices(usize),
    #[error("model supports at most {MAX_VERTICES} vertices (requested {0})")]
    TooManyVertices(usize),
    #[error("{0} dimension must be positive")]
    EmptyBasis(&'static str),
    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("face {face} references vertex {index} but the model has {vertex_count} vertices")]
    BadFaceIndex {
        face: usize,
        index: usize,
        vertex_count: usize,
    },
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Rigid head pose: axis-angle rotation (radians) plus translation in model
/// units. Pose arithmetic downstream is componentwise, so the axis-angle
/// representation is treated as a vector space (an accepted approximation for
/// large rotations).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseParams {
    pub fn identity() -> Self {
        Self {
            rotation: Vector3::zeros(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: [f64; 3], translation: [f64; 3]) -> Self {
        Self {
            rotation: Vector3::from(rotation),
            translation: Vector3::from(translation),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Description of a synthetic model for [`build_model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceModelConfig {
    /// Minimum vertex count; the template is the smallest icosphere
    /// subdivision with at least this many vertices (12, 42, 162, 642, ...).
    pub min_vertices: usize,
    pub shape_dims: usize,
    pub expr_dims: usize,
    pub seed: u64,
}

impl Default for FaceModelConfig {
    fn default() -> Self {
        Self {
            min_vertices: 162,
            // DECA-style defaults; the source material never pins these.
            shape_dims: 100,
            expr_dims: 50,
            seed: 0,
        }
    }
}

/// Template vertices, triangle topology, and blendshape bases.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricFaceModel {
    template: Vec<Vector3<f64>>,
    faces: Vec<[usize; 3]>,
    /// Shape offsets, indexed `(vertex, coordinate, shape component)`.
    shape_basis: Array3<f64>,
    /// Expression offsets, indexed `(vertex, coordinate, expression component)`.
    expr_basis: Array3<f64>,
}

/// A posed mesh: vertices, shared topology, and unit vertex normals.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
    pub normals: Vec<Vector3<f64>>,
}

impl ParametricFaceModel {
    pub fn vertex_count(&self) -> usize {
        self.template.len()
    }

    pub fn shape_dims(&self) -> usize {
        self.shape_basis.dim().2
    }

    pub fn expr_dims(&self) -> usize {
        self.expr_basis.dim().2
    }

    pub fn template(&self) -> &[Vector3<f64>] {
        &self.template
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn shape_basis(&self) -> &Array3<f64> {
        &self.shape_basis
    }

    pub fn expr_basis(&self) -> &Array3<f64> {
        &self.expr_basis
    }
}

/// Synthesize a deterministic toy model: a unit icosphere template with
/// seeded smooth random bases bounded to [-0.1, 0.1] per component.
pub fn build_model(config: &FaceModelConfig) -> Result<ParametricFaceModel, FaceError> {
    if config.min_vertices < MIN_VERTICES {
        return Err(FaceError::TooFewVertices(config.min_vertices));
    }
    if config.min_vertices > MAX_VERTICES {
        return Err(FaceError::TooManyVertices(config.min_vertices));
    }
    if config.shape_dims == 0 {
        return Err(FaceError::EmptyBasis("shape"));
    }
    if config.expr_dims == 0 {
        return Err(FaceError::EmptyBasis("expression"));
    }

    let (template, faces) = icosphere(config.min_vertices);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shape_basis = smooth_basis(&template, config.shape_dims, &mut rng);
    let expr_basis = smooth_basis(&template, config.expr_dims, &mut rng);
    Ok(ParametricFaceModel {
        template,
        faces,
        shape_basis,
        expr_basis,
    })
}

/// Smooth bounded offset field: each (component, coordinate) pair gets a
/// random low-frequency sinusoid of position, so neighbouring vertices move
/// coherently and every entry stays within the basis bound.
fn smooth_basis(template: &[Vector3<f64>], dims: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let m = template.len();
    let mut basis = Array3::zeros((m, 3, dims));
    for component in 0..dims {
        for coord in 0..3 {
            let direction = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let frequency = rng.random_range(0.5..3.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amplitude = rng.random_range(0.2..1.0);
            for (vertex, position) in template.iter().enumerate() {
                let arg = frequency * direction.dot(position) + phase;
                basis[[vertex, coord, component]] = BASIS_BOUND * amplitude * arg.sin();
            }
        }
    }
    basis
}

/// Pose the model: apply blendshape offsets, then the rigid head pose, and
/// recompute vertex normals.
pub fn forward(
    model: &ParametricFaceModel,
    shape: &[f64],
    pose: &PoseParams,
    expression: &[f64],
) -> Result<Mesh, FaceError> {
    if shape.len() != model.shape_dims() {
        return Err(FaceError::DimensionMismatch {
            what: "shape parameters",
            expected: model.shape_dims(),
            got: shape.len(),
        });
    }
    if expression.len() != model.expr_dims() {
        return Err(FaceError::DimensionMismatch {
            what: "expression parameters",
            expected: model.expr_dims(),
            got: expression.len(),
        });
    }
    if !shape.iter().chain(expression.iter()).all(|v| v.is_finite()) {
        return Err(FaceError::NonFinite("blendshape parameters"));
    }
    if !pose.is_finite() {
        return Err(FaceError::NonFinite("pose parameters"));
    }

    let rotation = Rotation3::from_scaled_axis(pose.rotation);
    let mut vertices = Vec::with_capacity(model.vertex_count());
    for (vertex, base) in model.template.iter().enumerate() {
        let mut morphed = *base;
        for (k, &weight) in shape.iter().enumerate() {
            morphed.x += weight * model.shape_basis[[vertex, 0, k]];
            morphed.y += weight * model.shape_basis[[vertex, 1, k]];
            morphed.z += weight * model.shape_basis[[vertex, 2, k]];
        }
        for (k, &weight) in expression.iter().enumerate() {
            morphed.x += weight * model.expr_basis[[vertex, 0, k]];
            morphed.y += weight * model.expr_basis[[vertex, 1, k]];
            morphed.z += weight * model.expr_basis[[vertex, 2, k]];
        }
        vertices.push(rotation * morphed + pose.translation);
    }

    let (normals, _degenerate) = vertex_normals(&vertices, &model.faces);
    Ok(Mesh {
        vertices,
        faces: model.faces.clone(),
        normals,
    })
}

/// Area-weighted vertex normals. The raw triangle cross product carries the
/// area weight, so degenerate triangles contribute nothing. Vertices whose
/// incident faces are all degenerate (or that have no incident face) get the
/// +z fallback normal and are reported in the second return value.
pub fn vertex_normals(
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
) -> (Vec<Vector3<f64>>, Vec<usize>) {
    let mut accumulated = vec![Vector3::zeros(); vertices.len()];
    for face in faces {
        let [a, b, c] = *face;
        let cross = (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a]));
        accumulated[a] += cross;
        accumulated[b] += cross;
        accumulated[c] += cross;
    }
    let mut degenerate = Vec::new();
    let normals = accumulated
        .into_iter()
        .enumerate()
        .map(|(vertex, sum)| {
            let norm = sum.norm();
            if norm < 1e-12 {
                degenerate.push(vertex);
                Vector3::new(0.0, 0.0, 1.0)
            } else {
                sum / norm
            }
        })
        .collect();
    (normals, degenerate)
}

// Icosahedron with outward winding: every face's cross-product normal points
// away from the origin (checked in tests, relied on by back-face culling).
fn icosahedron() -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let t = (1.0 + 5.0f64.sqrt()) / 2.0;
    let raw = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let vertices = raw
        .iter()
        .map(|&[x, y, z]| Vector3::new(x, y, z).normalize())
        .collect();
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    (vertices, faces)
}

/// Smallest icosphere subdivision with at least `min_vertices` vertices.
/// Vertex counts follow 12, 42, 162, 642, 2562, ...
pub fn icosphere(min_vertices: usize) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let (mut vertices, mut faces) = icosahedron();
    while vertices.len() < min_vertices {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next_faces = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(&mut vertices, &mut midpoints, a, b);
            let bc = midpoint(&mut vertices, &mut midpoints, b, c);
            let ca = midpoint(&mut vertices, &mut midpoints, c, a);
            next_faces.push([a, ab, ca]);
            next_faces.push([b, bc, ab]);
            next_faces.push([c, ca, bc]);
            next_faces.push([ab, bc, ca]);
        }
        faces = next_faces;
    }
    (vertices, faces)
}

fn midpoint(
    vertices: &mut Vec<Vector3<f64>>,
    cache: &mut HashMap<(usize, usize), usize>,
    a: usize,
    b: usize,
) -> usize {
    let key = (a.min(b), a.max(b));
    *cache.entry(key).or_insert_with(|| {
        let mid = ((vertices[a] + vertices[b]) / 2.0).normalize();
        vertices.push(mid);
        vertices.len() - 1
    })
}

/// ASCII OBJ export: `v` and `f` records with 1-based indices.
pub fn write_obj<W: Write>(mesh: &Mesh, mut writer: W) -> Result<(), FaceError> {
    for v in &mesh.vertices {
        writeln!(writer, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for face in &mesh.faces {
        writeln!(writer, "f {} {} {}", face[0] + 1, face[1] + 1, face[2] + 1)?;
    }
    Ok(())
}

pub fn save_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<(), FaceError> {
    let file = std::fs::File::create(path)?;
    write_obj(mesh, std::io::BufWriter::new(file))
}

/// Versioned JSON blob for model serialization.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    vertex_count: usize,
    shape_dims: usize,
    expr_dims: usize,
    /// Flat vertex-major template coordinates (x, y, z per vertex).
    template: Vec<f64>,
    faces: Vec<[usize; 3]>,
    /// Flat `(vertex, coordinate, component)` row-major basis entries.
    shape_basis: Vec<f64>,
    expr_basis: Vec<f64>,
}

impl ParametricFaceModel {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<(), FaceError> {
        let file = ModelFile {
            version: MODEL_FORMAT_VERSION,
            vertex_count: self.vertex_count(),
            shape_dims: self.shape_dims(),
            expr_dims: self.expr_dims(),
            template: self
                .template
                .iter()
                .flat_map(|v| [v.x, v.y, v.z])
                .collect(),
            faces: self.faces.clone(),
            shape_basis: self.shape_basis.iter().copied().collect(),
            expr_basis: self.expr_basis.iter().copied().collect(),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self, FaceError> {
        let text = std::fs::read_to_string(path)?;
        let file: ModelFile = serde_json::from_str(&text)?;
        if file.version != MODEL_FORMAT_VERSION {
            return Err(FaceError::UnsupportedVersion(file.version));
        }
        let m = file.vertex_count;
        if file.template.len() != 3 * m {
            return Err(FaceError::DimensionMismatch {
                what: "template coordinates",
                expected: 3 * m,
                got: file.template.len(),
            });
        }
        if file.shape_basis.len() != 3 * m * file.shape_dims {
            return Err(FaceError::DimensionMismatch {
                what: "shape basis entries",
                expected: 3 * m * file.shape_dims,
                got: file.shape_basis.len(),
            });
        }
        if file.expr_basis.len() != 3 * m * file.expr_dims {
            return Err(FaceError::DimensionMismatch {
                what: "expression basis entries",
                expected: 3 * m * file.expr_dims,
                got: file.expr_basis.len(),
            });
        }
        for (face, indices) in file.faces.iter().enumerate() {
            for &index in indices {
                if index >= m {
                    return Err(FaceError::BadFaceIndex {
                        face,
                        index,
                        vertex_count: m,
                    });
                }
            }
        }
        if !file
            .template
            .iter()
            .chain(file.shape_basis.iter())
            .chain(file.expr_basis.iter())
            .all(|v| v.is_finite())
        {
            return Err(FaceError::NonFinite("model file"));
        }

        let template = file
            .template
            .chunks_exact(3)
            .map(|v| Vector3::new(v[0], v[1], v[2]))
            .collect();
        let shape_basis = Array3::from_shape_vec((m, 3, file.shape_dims), file.shape_basis)
            .expect("length checked above");
        let expr_basis = Array3::from_shape_vec((m, 3, file.expr_dims), file.expr_basis)
            .expect("length checked above");
        Ok(Self {
            template,
            faces: file.faces,
            shape_basis,
            expr_basis,
        })
    }
}
