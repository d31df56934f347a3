//! Motion alignment for cross-identity driving.
//!
//! Driving videos provide per-frame pose and expression parameters; alignment
//! combines them with the reference portrait's shape (and optionally pose) so
//! the rendered hints carry the driving motion without the driving identity.
//! Two variants:
//!
//! - relative: poses are re-based so the first frame matches the reference
//!   pose and subsequent frames apply the driving video's first-frame-relative
//!   offsets;
//! - scale-consistent: driving poses are used verbatim for exact spatial
//!   alignment with the driving video.
//!
//! Expressions pass through unchanged in both variants.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::face::PoseParams;
use crate::sh::SHCoefficients;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("driving sequence must have at least one frame")]
    Empty,
    #[error("poses ({poses}) and expressions ({expressions}) differ in length")]
    LengthMismatch { poses: usize, expressions: usize },
    #[error("expression vectors must share one length (frame 0 has {expected}, frame {frame} has {got})")]
    RaggedExpressions {
        frame: usize,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Per-frame driving parameters extracted from a video.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivingSequence {
    poses: Vec<PoseParams>,
    expressions: Vec<Vec<f64>>,
}

impl DrivingSequence {
    pub fn new(poses: Vec<PoseParams>, expressions: Vec<Vec<f64>>) -> Result<Self, AlignError> {
        if poses.is_empty() {
            return Err(AlignError::Empty);
        }
        if poses.len() != expressions.len() {
            return Err(AlignError::LengthMismatch {
                poses: poses.len(),
                expressions: expressions.len(),
            });
        }
        let expected = expressions[0].len();
        for (frame, expr) in expressions.iter().enumerate() {
            if expr.len() != expected {
                return Err(AlignError::RaggedExpressions {
                    frame,
                    expected,
                    got: expr.len(),
                });
            }
            if !expr.iter().all(|v| v.is_finite()) {
                return Err(AlignError::NonFinite("expression parameters"));
            }
        }
        if !poses.iter().all(PoseParams::is_finite) {
            return Err(AlignError::NonFinite("pose parameters"));
        }
        Ok(Self { poses, expressions })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn poses(&self) -> &[PoseParams] {
        &self.poses
    }

    pub fn expressions(&self) -> &[Vec<f64>] {
        &self.expressions
    }

    pub fn expr_dims(&self) -> usize {
        self.expressions[0].len()
    }
}

/// Alignment output: per-frame poses and expressions plus the constant shape
/// and target lighting used for hint rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSequence {
    pub poses: Vec<PoseParams>,
    pub expressions: Vec<Vec<f64>>,
    pub shape: Vec<f64>,
    pub lighting: SHCoefficients,
}

impl AlignedSequence {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Relative-displacement alignment: frame i gets
/// `ref_pose + (driving_pose_i - driving_pose_0)`, componentwise on rotation
/// and translation. The first aligned pose is the reference pose exactly.
pub fn align_relative(
    driving: &DrivingSequence,
    ref_pose: &PoseParams,
    ref_shape: &[f64],
    target_light: &SHCoefficients,
) -> AlignedSequence {
    let first = driving.poses[0];
    let poses = driving
        .poses
        .iter()
        .enumerate()
        .map(|(frame, pose)| {
            if frame == 0 {
                // Copy directly: `ref + (p0 - p0)` could flip signed zeros.
                *ref_pose
            } else {
                PoseParams {
                    rotation: ref_pose.rotation + (pose.rotation - first.rotation),
                    translation: ref_pose.translation + (pose.translation - first.translation),
                }
            }
        })
        .collect();
    AlignedSequence {
        poses,
        expressions: driving.expressions.clone(),
        shape: ref_shape.to_vec(),
        lighting: target_light.clone(),
    }
}

/// Scale-consistency alignment: driving poses pass through bit-for-bit, so
/// the generated portrait is spatially aligned with the driving video.
pub fn align_scale_consistent(
    driving: &DrivingSequence,
    ref_shape: &[f64],
    target_light: &SHCoefficients,
) -> AlignedSequence {
    AlignedSequence {
        poses: driving.poses.clone(),
        expressions: driving.expressions.clone(),
        shape: ref_shape.to_vec(),
        lighting: target_light.clone(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    rotation: [f64; 3],
    translation: [f64; 3],
    expression: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DrivingFile {
    frames: Vec<FrameRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AlignedFile {
    frames: Vec<FrameRecord>,
    shape: Vec<f64>,
    lighting: SHCoefficients,
}

fn to_records(poses: &[PoseParams], expressions: &[Vec<f64>]) -> Vec<FrameRecord> {
    poses
        .iter()
        .zip(expressions)
        .map(|(pose, expr)| FrameRecord {
            rotation: pose.rotation.into(),
            translation: pose.translation.into(),
            expression: expr.clone(),
        })
        .collect()
}

/// Read a driving sequence from JSON: `{"frames": [{"rotation": [3],
/// "translation": [3], "expression": [n]}, ...]}`.
pub fn load_driving_json(path: impl AsRef<Path>) -> Result<DrivingSequence, AlignError> {
    let file: DrivingFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let poses = file
        .frames
        .iter()
        .map(|f| PoseParams::new(f.rotation, f.translation))
        .collect();
    let expressions = file.frames.into_iter().map(|f| f.expression).collect();
    DrivingSequence::new(poses, expressions)
}

pub fn save_driving_json(
    driving: &DrivingSequence,
    path: impl AsRef<Path>,
) -> Result<(), AlignError> {
    let file = DrivingFile {
        frames: to_records(&driving.poses, &driving.expressions),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// Write an aligned sequence: the driving schema plus shape and lighting
/// blocks.
pub fn save_aligned_json(
    aligned: &AlignedSequence,
    path: impl AsRef<Path>,
) -> Result<(), AlignError> {
    let file = AlignedFile {
        frames: to_records(&aligned.poses, &aligned.expressions),
        shape: aligned.shape.clone(),
        lighting: aligned.lighting.clone(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_aligned_json(path: impl AsRef<Path>) -> Result<AlignedSequence, AlignError> {
    let file: AlignedFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let poses: Vec<PoseParams> = file
        .frames
        .iter()
        .map(|f| PoseParams::new(f.rotation, f.translation))
        .collect();
    let expressions: Vec<Vec<f64>> = file.frames.into_iter().map(|f| f.expression).collect();
    // Reuse the driving-sequence validation for the shared fields.
    let driving = DrivingSequence::new(poses, expressions)?;
    if !file.shape.iter().all(|v| v.is_finite()) {
        return Err(AlignError::NonFinite("shape parameters"));
    }
    file.lighting
        .validate()
        .map_err(|_| AlignError::NonFinite("lighting coefficients"))?;
    Ok(AlignedSequence {
        poses: driving.poses,
        expressions: driving.expressions,
        shape: file.shape,
        lighting: file.lighting,
    })
}
