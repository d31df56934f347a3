//! Software rasterizer for shading hints.
//!
//! Renders a posed, SH-lit mesh into an image + portrait mask + depth buffer
//! under a weak-perspective camera. The rasterizer is deliberately plain:
//! z-buffered triangles, barycentric normal interpolation, back-face culling,
//! no anti-aliasing, so outputs are bit-reproducible and good for golden
//! tests.
//!
//! Conventions:
//! - `pixel = scale * (x, y) + center`, depth = `-z` (smaller is nearer).
//! - Pixel centers at (x + 0.5, y + 0.5); fill rule accepts centers strictly
//!   inside or on a top/left edge.
//! - Depth ties go to the lower triangle index.

use std::path::Path;

use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::face::Mesh;
use crate::sh::{shade_unit, SHCoefficients};

/// Smallest supported render target edge.
pub const MIN_RESOLUTION: usize = 16;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("resolution must be at least {MIN_RESOLUTION}x{MIN_RESOLUTION} (got {0}x{1})")]
    ResolutionTooSmall(usize, usize),
    #[error("camera scale must be positive and finite (got {0})")]
    InvalidCamera(f64),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

/// Weak-perspective camera: uniform scale plus 2D pixel offset. Depth is used
/// only for visibility ordering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub scale: f64,
    pub center: [f64; 2],
}

impl Camera {
    pub fn new(scale: f64, center: [f64; 2]) -> Result<Self, RasterError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(RasterError::InvalidCamera(scale));
        }
        Ok(Self { scale, center })
    }

    /// Project a vertex to (pixel, depth).
    pub fn project(&self, v: &Vector3<f64>) -> ([f64; 2], f64) {
        (
            [
                self.scale * v.x + self.center[0],
                self.scale * v.y + self.center[1],
            ],
            -v.z,
        )
    }
}

/// One rendered frame: shading-hints image, portrait mask, and depth buffer.
///
/// The mask is 1 exactly where a triangle was rasterized, the image is zero
/// outside the mask, and depth is +inf on background pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadingFrame {
    /// `(H, W, 3)` radiance in [0, 1].
    pub image: Array3<f64>,
    /// `(H, W)` portrait mask, values {0, 1}.
    pub mask: Array2<u8>,
    /// `(H, W)` depth; `f64::INFINITY` where nothing was drawn.
    pub depth: Array2<f64>,
}

impl ShadingFrame {
    pub fn height(&self) -> usize {
        self.mask.dim().0
    }

    pub fn width(&self) -> usize {
        self.mask.dim().1
    }

    fn blank(height: usize, width: usize) -> Self {
        Self {
            image: Array3::zeros((height, width, 3)),
            mask: Array2::zeros((height, width)),
            depth: Array2::from_elem((height, width), f64::INFINITY),
        }
    }
}

fn validate_mesh(mesh: &Mesh) -> Result<(), RasterError> {
    if mesh.normals.len() != mesh.vertices.len() {
        return Err(RasterError::InvalidMesh(format!(
            "{} normals for {} vertices",
            mesh.normals.len(),
            mesh.vertices.len()
        )));
    }
    for (index, v) in mesh.vertices.iter().enumerate() {
        if !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()) {
            return Err(RasterError::InvalidMesh(format!(
                "non-finite vertex {index}"
            )));
        }
    }
    for (index, n) in mesh.normals.iter().enumerate() {
        if (n.norm() - 1.0).abs() > 1e-6 {
            return Err(RasterError::InvalidMesh(format!(
                "normal {index} is not unit length"
            )));
        }
    }
    for (face, indices) in mesh.faces.iter().enumerate() {
        for &i in indices {
            if i >= mesh.vertices.len() {
                return Err(RasterError::InvalidMesh(format!(
                    "face {face} references missing vertex {i}"
                )));
            }
        }
    }
    Ok(())
}

/// Render shading hints: z-buffered rasterization with per-pixel normals
/// interpolated from the vertex normals and shaded through the SH lighting.
/// An empty mesh renders to an all-zero frame with an empty mask.
pub fn render_shading_hints(
    mesh: &Mesh,
    camera: &Camera,
    light: &SHCoefficients,
    resolution: (usize, usize),
) -> Result<ShadingFrame, RasterError> {
    render_shading_hints_with_normals(mesh, camera, light, resolution).map(|(frame, _)| frame)
}

/// As [`render_shading_hints`], additionally returning the `(H, W, 3)` buffer
/// of interpolated unit normals (zero outside the mask). Lighting estimators
/// pair these with the rendered radiance.
pub fn render_shading_hints_with_normals(
    mesh: &Mesh,
    camera: &Camera,
    light: &SHCoefficients,
    resolution: (usize, usize),
) -> Result<(ShadingFrame, Array3<f64>), RasterError> {
    let (height, width) = resolution;
    if height < MIN_RESOLUTION || width < MIN_RESOLUTION {
        return Err(RasterError::ResolutionTooSmall(height, width));
    }
    if !(camera.scale.is_finite() && camera.scale > 0.0) {
        return Err(RasterError::InvalidCamera(camera.scale));
    }
    validate_mesh(mesh)?;

    let mut frame = ShadingFrame::blank(height, width);
    let mut normal_buffer = Array3::zeros((height, width, 3));
    if mesh.vertices.is_empty() || mesh.faces.is_empty() {
        return Ok((frame, normal_buffer));
    }

    let projected: Vec<([f64; 2], f64)> = mesh.vertices.iter().map(|v| camera.project(v)).collect();

    for face in &mesh.faces {
        let [ia, ib, ic] = *face;
        let (pa, da) = projected[ia];
        let (pb, db) = projected[ib];
        let (pc, dc) = projected[ic];

        // Signed parallelogram area in pixel coordinates. Culls back-facing
        // and screen-degenerate triangles (weak perspective keeps the sign of
        // the 3D normal's z component).
        let area2 = edge(pa, pb, pc);
        if area2 <= 0.0 {
            continue;
        }

        let min_x = pa[0].min(pb[0]).min(pc[0]);
        let max_x = pa[0].max(pb[0]).max(pc[0]);
        let min_y = pa[1].min(pb[1]).min(pc[1]);
        let max_y = pa[1].max(pb[1]).max(pc[1]);
        if max_x < 0.5 || max_y < 0.5 {
            continue;
        }
        let x0 = ((min_x - 0.5).ceil().max(0.0)) as usize;
        let y0 = ((min_y - 0.5).ceil().max(0.0)) as usize;
        let x1 = ((max_x - 0.5).floor()).min((width - 1) as f64);
        let y1 = ((max_y - 0.5).floor()).min((height - 1) as f64);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);

        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                let e_a = edge(pb, pc, p);
                let e_b = edge(pc, pa, p);
                let e_c = edge(pa, pb, p);
                if !(covers(e_a, pb, pc) && covers(e_b, pc, pa) && covers(e_c, pa, pb)) {
                    continue;
                }
                let wa = e_a / area2;
                let wb = e_b / area2;
                let wc = e_c / area2;
                let depth = wa * da + wb * db + wc * dc;
                if depth >= frame.depth[[y, x]] {
                    continue;
                }
                let mut normal =
                    wa * mesh.normals[ia] + wb * mesh.normals[ib] + wc * mesh.normals[ic];
                let norm = normal.norm();
                if norm < 1e-12 {
                    // Interpolated normals cancelled out; fall back to the
                    // geometric face normal.
                    normal = (mesh.vertices[ib] - mesh.vertices[ia])
                        .cross(&(mesh.vertices[ic] - mesh.vertices[ia]))
                        .normalize();
                } else {
                    normal /= norm;
                }
                let rgb = shade_unit(&normal, light);
                frame.depth[[y, x]] = depth;
                frame.mask[[y, x]] = 1;
                for channel in 0..3 {
                    frame.image[[y, x, channel]] = rgb[channel];
                    normal_buffer[[y, x, channel]] = normal[channel];
                }
            }
        }
    }
    Ok((frame, normal_buffer))
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Fill rule: accept strictly-inside points, and boundary points only on a
/// top or left edge (y-down pixel coordinates).
fn covers(e: f64, from: [f64; 2], to: [f64; 2]) -> bool {
    if e > 0.0 {
        return true;
    }
    if e < 0.0 {
        return false;
    }
    let dx = to[0] - from[0];
    let dy = to[1] - from[1];
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Save an `(H, W, 3)` [0, 1] image as an 8-bit RGB PNG.
pub fn save_image_png(image: &Array3<f64>, path: impl AsRef<Path>) -> Result<(), RasterError> {
    let (height, width, channels) = image.dim();
    debug_assert_eq!(channels, 3);
    let mut buffer = image::RgbImage::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            buffer.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    to_byte(image[[y, x, 0]]),
                    to_byte(image[[y, x, 1]]),
                    to_byte(image[[y, x, 2]]),
                ]),
            );
        }
    }
    buffer.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Save a binary mask as an 8-bit grayscale PNG with values {0, 255}.
pub fn save_mask_png(mask: &Array2<u8>, path: impl AsRef<Path>) -> Result<(), RasterError> {
    let (height, width) = mask.dim();
    let mut buffer = image::GrayImage::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            let v = if mask[[y, x]] != 0 { 255 } else { 0 };
            buffer.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buffer.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Encode an `(H, W, 3)` [0, 1] image as a binary PPM (P6). Byte-stable, so
/// suitable for golden tests.
pub fn encode_ppm(image: &Array3<f64>) -> Vec<u8> {
    let (height, width, _) = image.dim();
    let mut out = Vec::with_capacity(32 + height * width * 3);
    out.extend_from_slice(format!("P6\n{width} {height}\n255\n").as_bytes());
    for y in 0..height {
        for x in 0..width {
            for channel in 0..3 {
                out.push(to_byte(image[[y, x, channel]]));
            }
        }
    }
    out
}

pub fn save_ppm(image: &Array3<f64>, path: impl AsRef<Path>) -> Result<(), RasterError> {
    std::fs::write(path, encode_ppm(image))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct DepthHeader {
    h: usize,
    w: usize,
    endianness: String,
}

/// Dump a depth buffer as raw little-endian f32 values plus a JSON sidecar
/// (`<path>.json`) describing the shape.
pub fn save_depth_raw(depth: &Array2<f64>, path: impl AsRef<Path>) -> Result<(), RasterError> {
    let path = path.as_ref();
    let (h, w) = depth.dim();
    let mut bytes = Vec::with_capacity(h * w * 4);
    for v in depth.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    let header = DepthHeader {
        h,
        w,
        endianness: "little".to_string(),
    };
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    std::fs::write(sidecar, serde_json::to_string(&header)?)?;
    Ok(())
}

/// Load a depth buffer written by [`save_depth_raw`].
pub fn load_depth_raw(path: impl AsRef<Path>) -> Result<Array2<f64>, RasterError> {
    let path = path.as_ref();
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    let header: DepthHeader = serde_json::from_str(&std::fs::read_to_string(sidecar)?)?;
    let bytes = std::fs::read(path)?;
    if bytes.len() != header.h * header.w * 4 {
        return Err(RasterError::InvalidMesh(format!(
            "depth payload is {} bytes, expected {}",
            bytes.len(),
            header.h * header.w * 4
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Array2::from_shape_vec((header.h, header.w), values).expect("length checked"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face::{build_model, forward, vertex_normals, FaceModelConfig, PoseParams};
    use crate::sh::{estimate_sh, SHCoefficients};

    fn unit_sphere_mesh(min_vertices: usize) -> Mesh {
        let model = build_model(&FaceModelConfig {
            min_vertices,
            shape_dims: 1,
            expr_dims: 1,
            seed: 0,
        })
        .unwrap();
        forward(&model, &[0.0], &PoseParams::identity(), &[0.0]).unwrap()
    }

    fn centered_camera(resolution: usize, scale: f64) -> Camera {
        Camera::new(
            scale,
            [resolution as f64 / 2.0, resolution as f64 / 2.0],
        )
        .unwrap()
    }

    #[test]
    fn projection_formula_is_exact() {
        let camera = Camera::new(1.0, [0.0, 0.0]).unwrap();
        let (pixel, depth) = camera.project(&Vector3::new(3.0, 4.0, 5.0));
        assert_eq!(pixel, [3.0, 4.0]);
        assert_eq!(depth, -5.0);
    }

    #[test]
    fn projection_is_linear_in_scale() {
        let v = Vector3::new(1.5, -2.5, 0.7);
        let one = Camera::new(1.0, [0.0, 0.0]).unwrap().project(&v).0;
        let two = Camera::new(2.0, [0.0, 0.0]).unwrap().project(&v).0;
        assert_eq!(two, [2.0 * one[0], 2.0 * one[1]]);
    }

    #[test]
    fn depth_offset_does_not_move_the_pixel() {
        let camera = Camera::new(3.0, [10.0, 20.0]).unwrap();
        let v = Vector3::new(0.4, 0.6, 1.0);
        let (p1, d1) = camera.project(&v);
        let (p2, d2) = camera.project(&(v + Vector3::new(0.0, 0.0, 1.0)));
        assert_eq!(p1, p2);
        assert_eq!(d2, d1 - 1.0);
    }

    #[test]
    fn zero_scale_camera_is_rejected() {
        assert!(matches!(
            Camera::new(0.0, [0.0, 0.0]),
            Err(RasterError::InvalidCamera(_))
        ));
    }

    /// Two triangles covering the same pixels at different depths: the nearer
    /// one must win regardless of draw order.
    #[test]
    fn z_buffer_keeps_the_nearer_triangle() {
        // Both triangles face the camera (positive screen area) and cover the
        // image center; the z = 1 triangle is nearer (depth -1 < 0).
        let quad = |z: f64, offset: usize| -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
            let v = vec![
                Vector3::new(-1.0, -1.0, z),
                Vector3::new(1.0, -1.0, z),
                Vector3::new(0.0, 1.0, z),
            ];
            (v, vec![[offset, offset + 1, offset + 2]])
        };
        let (mut vertices, faces_near) = quad(1.0, 0);
        let (far_vertices, faces_far) = quad(0.0, 3);
        vertices.extend(far_vertices);

        let light_near = SHCoefficients::dc([2.0, 0.0, 0.0]);
        let normals = vec![Vector3::new(0.0, 0.0, 1.0); 6];

        // Render far-first and near-first; overlap must be identical.
        for faces in [
            vec![faces_far[0], faces_near[0]],
            vec![faces_near[0], faces_far[0]],
        ] {
            let mesh = Mesh {
                vertices: vertices.clone(),
                faces,
                normals: normals.clone(),
            };
            let camera = centered_camera(32, 10.0);
            let frame =
                render_shading_hints(&mesh, &camera, &light_near, (32, 32)).unwrap();
            // The shared pixels must carry the nearer depth (-1).
            assert_eq!(frame.depth[[16, 16]], -1.0);
        }
    }

    #[test]
    fn dc_lighting_shades_every_mask_pixel_identically() {
        let mesh = unit_sphere_mesh(162);
        let camera = centered_camera(64, 24.0);
        let light = SHCoefficients::dc([1.2, 0.9, 0.6]);
        let frame = render_shading_hints(&mesh, &camera, &light, (64, 64)).unwrap();
        let mut reference = None;
        let mut mask_pixels = 0;
        for y in 0..64 {
            for x in 0..64 {
                if frame.mask[[y, x]] == 1 {
                    mask_pixels += 1;
                    let rgb = [
                        frame.image[[y, x, 0]],
                        frame.image[[y, x, 1]],
                        frame.image[[y, x, 2]],
                    ];
                    let reference = reference.get_or_insert(rgb);
                    for channel in 0..3 {
                        assert!((rgb[channel] - reference[channel]).abs() < 1.0 / 255.0);
                    }
                }
            }
        }
        assert!(mask_pixels > 500, "sphere should cover the frame center");
    }

    #[test]
    fn rendered_lighting_is_recoverable() {
        let mesh = unit_sphere_mesh(642);
        let camera = centered_camera(128, 48.0);
        let mut light = SHCoefficients::dc([1.5, 1.5, 1.5]);
        for channel in 0..3 {
            light.sh[channel][2] = 0.35; // band-1 z
        }
        let (frame, normals) =
            render_shading_hints_with_normals(&mesh, &camera, &light, (128, 128)).unwrap();
        let mut samples = Vec::new();
        for y in 0..128 {
            for x in 0..128 {
                if frame.mask[[y, x]] == 1 {
                    let n = Vector3::new(
                        normals[[y, x, 0]],
                        normals[[y, x, 1]],
                        normals[[y, x, 2]],
                    );
                    let rgb = [
                        frame.image[[y, x, 0]],
                        frame.image[[y, x, 1]],
                        frame.image[[y, x, 2]],
                    ];
                    samples.push((n, rgb));
                }
            }
        }
        let estimate = estimate_sh(&samples).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for channel in 0..3 {
            for band in 0..9 {
                let diff = estimate.coeffs.sh[channel][band] - light.sh[channel][band];
                num += diff * diff;
                den += light.sh[channel][band] * light.sh[channel][band];
            }
        }
        let rel = (num / den).sqrt();
        assert!(rel < 1e-2, "relative error {rel}");
    }

    #[test]
    fn mask_equals_finite_depth_and_bounds_image_support() {
        let mesh = unit_sphere_mesh(162);
        let camera = centered_camera(48, 16.0);
        let light = SHCoefficients::dc([1.0, 1.0, 1.0]);
        let frame = render_shading_hints(&mesh, &camera, &light, (48, 48)).unwrap();
        for y in 0..48 {
            for x in 0..48 {
                let masked = frame.mask[[y, x]] == 1;
                assert_eq!(masked, frame.depth[[y, x]].is_finite());
                if !masked {
                    for channel in 0..3 {
                        assert_eq!(frame.image[[y, x, channel]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn face_order_does_not_change_the_render() {
        let mesh = unit_sphere_mesh(162);
        let camera = centered_camera(48, 16.0);
        let mut light = SHCoefficients::dc([1.0, 0.8, 0.6]);
        light.sh[0][3] = 0.3;
        let frame = render_shading_hints(&mesh, &camera, &light, (48, 48)).unwrap();

        let mut permuted = mesh.clone();
        permuted.faces.reverse();
        let swapped = render_shading_hints(&permuted, &camera, &light, (48, 48)).unwrap();
        assert_eq!(frame.image, swapped.image);
        assert_eq!(frame.mask, swapped.mask);
        assert_eq!(frame.depth, swapped.depth);
    }

    #[test]
    fn integer_camera_shift_translates_the_image() {
        let mesh = unit_sphere_mesh(162);
        let light = SHCoefficients::dc([1.0, 1.0, 1.0]);
        let base = Camera::new(10.0, [16.0, 16.0]).unwrap();
        let shifted = Camera::new(10.0, [21.0, 19.0]).unwrap();
        let a = render_shading_hints(&mesh, &base, &light, (64, 64)).unwrap();
        let b = render_shading_hints(&mesh, &shifted, &light, (64, 64)).unwrap();
        for y in 0..61 {
            for x in 0..59 {
                assert_eq!(a.mask[[y, x]], b.mask[[y + 3, x + 5]]);
                for channel in 0..3 {
                    assert_eq!(a.image[[y, x, channel]], b.image[[y + 3, x + 5, channel]]);
                }
            }
        }
    }

    #[test]
    fn empty_mesh_renders_a_blank_frame() {
        let mesh = Mesh {
            vertices: vec![],
            faces: vec![],
            normals: vec![],
        };
        let camera = centered_camera(32, 1.0);
        let light = SHCoefficients::dc([1.0, 1.0, 1.0]);
        let frame = render_shading_hints(&mesh, &camera, &light, (32, 32)).unwrap();
        assert!(frame.mask.iter().all(|&m| m == 0));
        assert!(frame.image.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tiny_resolution_is_rejected() {
        let mesh = unit_sphere_mesh(42);
        let camera = centered_camera(32, 1.0);
        let light = SHCoefficients::dc([1.0, 1.0, 1.0]);
        assert!(matches!(
            render_shading_hints(&mesh, &camera, &light, (8, 32)),
            Err(RasterError::ResolutionTooSmall(8, 32))
        ));
    }

    #[test]
    fn adjacent_triangles_never_double_cover_shared_edges() {
        // A quad split along its diagonal: with the top-left fill rule every
        // covered pixel belongs to exactly one triangle, so rendering both
        // triangles marks each pixel exactly once (mask stays binary and the
        // two-triangle mask equals the union of the single-triangle masks).
        let vertices = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(2.0, 0.0, 0.0),
            Vector3::new(2.0, 2.0, 0.0),
            Vector3::new(0.0, 2.0, 0.0),
        ];
        let faces = vec![[0, 1, 2], [0, 2, 3]];
        let (normals, _) = vertex_normals(&vertices, &faces);
        let light = SHCoefficients::dc([3.0, 3.0, 3.0]);
        let camera = Camera::new(8.0, [8.0, 8.0]).unwrap();

        let both = Mesh {
            vertices: vertices.clone(),
            faces: faces.clone(),
            normals: normals.clone(),
        };
        let frame = render_shading_hints(&both, &camera, &light, (32, 32)).unwrap();

        let mut union = Array2::<u8>::zeros((32, 32));
        let mut overlap = 0;
        for face in faces {
            let single = Mesh {
                vertices: vertices.clone(),
                faces: vec![face],
                normals: normals.clone(),
            };
            let single = render_shading_hints(&single, &camera, &light, (32, 32)).unwrap();
            for (u, &m) in union.iter_mut().zip(single.mask.iter()) {
                overlap += (*u == 1 && m == 1) as usize;
                *u |= m;
            }
        }
        assert_eq!(overlap, 0, "diagonal edge pixels drawn twice");
        assert_eq!(frame.mask, union);
    }

    #[test]
    fn back_faces_are_culled() {
        // A triangle wound away from the camera renders nothing.
        let vertices = vec![
            Vector3::new(-1.0, -1.0, 0.0),
            Vector3::new(1.0, -1.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        let faces = vec![[0, 2, 1]];
        let normals = vec![Vector3::new(0.0, 0.0, -1.0); 3];
        let mesh = Mesh {
            vertices,
            faces,
            normals,
        };
        let camera = centered_camera(32, 10.0);
        let light = SHCoefficients::dc([3.0, 3.0, 3.0]);
        let frame = render_shading_hints(&mesh, &camera, &light, (32, 32)).unwrap();
        assert!(frame.mask.iter().all(|&m| m == 0));
    }

    #[test]
    fn ppm_encoding_is_byte_stable() {
        let mesh = unit_sphere_mesh(42);
        let camera = centered_camera(16, 6.0);
        let light = SHCoefficients::dc([1.4, 1.0, 0.7]);
        let frame = render_shading_hints(&mesh, &camera, &light, (16, 16)).unwrap();
        let a = encode_ppm(&frame.image);
        let b = encode_ppm(&frame.image);
        assert_eq!(a, b);
        assert!(a.starts_with(b"P6\n16 16\n255\n"));
        assert_eq!(a.len(), 13 + 16 * 16 * 3);
    }

    #[test]
    fn depth_raw_round_trip_preserves_f32_payload() {
        let mesh = unit_sphere_mesh(42);
        let camera = centered_camera(16, 6.0);
        let light = SHCoefficients::dc([1.0, 1.0, 1.0]);
        let frame = render_shading_hints(&mesh, &camera, &light, (16, 16)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("depth.f32");
        save_depth_raw(&frame.depth, &path).unwrap();
        let loaded = load_depth_raw(&path).unwrap();
        for (a, b) in frame.depth.iter().zip(loaded.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn png_output_files_are_written() {
        let mesh = unit_sphere_mesh(42);
        let camera = centered_camera(16, 6.0);
        let light = SHCoefficients::dc([1.0, 1.0, 1.0]);
        let frame = render_shading_hints(&mesh, &camera, &light, (16, 16)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let image_path = dir.path().join("hint.png");
        let mask_path = dir.path().join("mask.png");
        save_image_png(&frame.image, &image_path).unwrap();
        save_mask_png(&frame.mask, &mask_path).unwrap();
        let reread = image::open(&image_path).unwrap().to_rgb8();
        assert_eq!(reread.dimensions(), (16, 16));
        let mask = image::open(&mask_path).unwrap().to_luma8();
        assert!(mask.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
    }
}
