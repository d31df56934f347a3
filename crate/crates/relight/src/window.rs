//! Long-sequence assembly from fixed-length sampling windows.
//!
//! Sampling runs in windows of `window_len` frames that overlap by `overlap`
//! frames; the final window is right-aligned to the last frame. Overlapping
//! frames are blended with a linear ramp so consecutive segments transition
//! smoothly.

use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_WINDOW_LEN: usize = 16;
pub const DEFAULT_OVERLAP: usize = 6;

#[derive(Debug, Error)]
pub enum WindowError {
    #[error("total frame count must be at least 1")]
    NoFrames,
    #[error("window length must be at least 1")]
    EmptyWindow,
    #[error("overlap ({overlap}) must be smaller than the window length ({window_len})")]
    OverlapTooLarge { overlap: usize, window_len: usize },
    #[error("shape mismatch: {expected:?} vs {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("expected {expected} window outputs, got {got}")]
    WrongWindowCount { expected: usize, got: usize },
    #[error("window {index} should hold {expected} frames, got {got}")]
    WrongWindowLength {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Frame intervals covering `[0, total)`.
///
/// Interior consecutive windows overlap by exactly `overlap` frames; the last
/// window is right-aligned to the final frame, so the overlap at the final
/// seam may differ.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub window_len: usize,
    pub overlap: usize,
    /// Half-open `(start, end)` intervals in frame indices.
    pub windows: Vec<(usize, usize)>,
}

impl WindowPlan {
    pub fn total_frames(&self) -> usize {
        self.windows.last().map(|w| w.1).unwrap_or(0)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<(), WindowError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Tile `[0, total)` with stride `window_len - overlap` and a right-aligned
/// final window. Natural windows made redundant by the right-aligned one are
/// dropped, so coverage has no gaps and no window is contained in the union
/// of its neighbours.
pub fn plan_windows(
    total_frames: usize,
    window_len: usize,
    overlap: usize,
) -> Result<WindowPlan, WindowError> {
    if total_frames == 0 {
        return Err(WindowError::NoFrames);
    }
    if window_len == 0 {
        return Err(WindowError::EmptyWindow);
    }
    if overlap >= window_len {
        return Err(WindowError::OverlapTooLarge {
            overlap,
            window_len,
        });
    }

    let mut starts: Vec<usize> = Vec::new();
    if total_frames <= window_len {
        starts.push(0);
    } else {
        let stride = window_len - overlap;
        let final_start = total_frames - window_len;
        let mut start = 0;
        while start < final_start {
            starts.push(start);
            start += stride;
        }
        // Drop trailing natural windows whose frames are already covered by
        // their predecessor together with the right-aligned final window.
        while starts.len() >= 2 && starts[starts.len() - 2] + window_len >= final_start {
            starts.pop();
        }
        starts.push(final_start);
    }

    let windows = starts
        .into_iter()
        .map(|s| (s, (s + window_len).min(total_frames)))
        .collect();
    Ok(WindowPlan {
        window_len,
        overlap,
        windows,
    })
}

/// Ramp weights for a K-frame overlap: frame i of the overlap takes weight
/// `(i + 1) / (K + 1)` from the incoming window and the complement from the
/// previous one. Strictly increasing, and the two weights sum to 1.
pub fn blend_weights(overlap_len: usize) -> Vec<f64> {
    (0..overlap_len)
        .map(|i| (i + 1) as f64 / (overlap_len + 1) as f64)
        .collect()
}

/// Blend the overlapping frames of two windows. Inputs are `(K, ...)` frame
/// stacks of identical shape; identical inputs pass through unchanged.
pub fn blend_overlap(
    prev_frames: &Array4<f64>,
    next_frames: &Array4<f64>,
) -> Result<Array4<f64>, WindowError> {
    if prev_frames.dim() != next_frames.dim() {
        return Err(WindowError::ShapeMismatch {
            expected: prev_frames.shape().to_vec(),
            got: next_frames.shape().to_vec(),
        });
    }
    let k = prev_frames.dim().0;
    let weights = blend_weights(k);
    let mut out = prev_frames.clone();
    for (i, &w) in weights.iter().enumerate() {
        let mut frame = out.index_axis_mut(ndarray::Axis(0), i);
        let next = next_frames.index_axis(ndarray::Axis(0), i);
        frame.zip_mut_with(&next, |p, &n| {
            *p = (1.0 - w) * *p + w * n;
        });
    }
    Ok(out)
}

/// Assemble per-window frame stacks into the full sequence, blending each
/// seam. Window outputs are `(window frames, ...)` arrays matching the plan.
pub fn stitch_windows(
    plan: &WindowPlan,
    window_outputs: &[Array4<f64>],
) -> Result<Array4<f64>, WindowError> {
    if window_outputs.len() != plan.windows.len() {
        return Err(WindowError::WrongWindowCount {
            expected: plan.windows.len(),
            got: window_outputs.len(),
        });
    }
    for (index, ((start, end), output)) in
        plan.windows.iter().zip(window_outputs).enumerate()
    {
        if output.dim().0 != end - start {
            return Err(WindowError::WrongWindowLength {
                index,
                expected: end - start,
                got: output.dim().0,
            });
        }
        if output.dim().1 != window_outputs[0].dim().1
            || output.dim().2 != window_outputs[0].dim().2
            || output.dim().3 != window_outputs[0].dim().3
        {
            return Err(WindowError::ShapeMismatch {
                expected: window_outputs[0].shape().to_vec(),
                got: output.shape().to_vec(),
            });
        }
    }

    let total = plan.total_frames();
    let (_, d1, d2, d3) = window_outputs[0].dim();
    let mut assembled = Array4::zeros((total, d1, d2, d3));

    for (index, ((start, end), output)) in plan.windows.iter().zip(window_outputs).enumerate() {
        let overlap_len = if index == 0 {
            0
        } else {
            plan.windows[index - 1].1.saturating_sub(*start)
        };
        if overlap_len > 0 {
            // Blend the already-assembled tail with this window's head.
            let prev = assembled
                .slice(ndarray::s![*start..*start + overlap_len, .., .., ..])
                .to_owned();
            let next = output
                .slice(ndarray::s![0..overlap_len, .., .., ..])
                .to_owned();
            let blended = blend_overlap(&prev, &next)?;
            assembled
                .slice_mut(ndarray::s![*start..*start + overlap_len, .., .., ..])
                .assign(&blended);
        }
        let fresh_from = overlap_len;
        let fresh_count = (end - start) - fresh_from;
        if fresh_count > 0 {
            assembled
                .slice_mut(ndarray::s![
                    *start + fresh_from..*end,
                    ..,
                    ..,
                    ..
                ])
                .assign(&output.slice(ndarray::s![fresh_from.., .., .., ..]));
        }
    }
    Ok(assembled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_frames(k: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((k, 2, 3, 3), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_window_covers_short_sequences() {
        let plan = plan_windows(16, 16, 6).unwrap();
        assert_eq!(plan.windows, vec![(0, 16)]);
        let plan = plan_windows(5, 16, 6).unwrap();
        assert_eq!(plan.windows, vec![(0, 5)]);
    }

    #[test]
    fn stride_arithmetic_matches_the_defaults() {
        let plan = plan_windows(26, 16, 6).unwrap();
        assert_eq!(plan.windows, vec![(0, 16), (10, 26)]);
    }

    #[test]
    fn one_hundred_frames_tile_into_nine_windows() {
        let plan = plan_windows(100, 16, 6).unwrap();
        assert_eq!(plan.windows.len(), 9);
        assert_eq!(*plan.windows.last().unwrap(), (84, 100));
        // Interior seams carry exactly the configured overlap.
        for pair in plan.windows.windows(2).take(plan.windows.len() - 2) {
            assert_eq!(pair[0].1 - pair[1].0, 6);
        }
    }

    /// Coverage oracle: enumerate every frame and assert windows cover the
    /// range with the declared overlap structure.
    #[test]
    fn plans_cover_every_total_exactly() {
        for total in 1..=200usize {
            let plan = plan_windows(total, 16, 6).unwrap();
            let mut covered = vec![0usize; total];
            for &(start, end) in &plan.windows {
                assert!(start < end && end <= total);
                for frame in start..end {
                    covered[frame] += 1;
                }
            }
            assert!(
                covered.iter().all(|&c| c >= 1),
                "gap in coverage at total {total}"
            );
            // Right-aligned last window.
            let &(last_start, last_end) = plan.windows.last().unwrap();
            assert_eq!(last_end, total);
            if total > 16 {
                assert_eq!(last_start, total - 16);
            }
            // Interior overlaps are exact; the final seam only needs to
            // connect.
            for (index, pair) in plan.windows.windows(2).enumerate() {
                let overlap = pair[0].1.saturating_sub(pair[1].0);
                assert!(pair[1].0 <= pair[0].1, "gap after window {index}");
                if index + 2 < plan.windows.len() {
                    assert_eq!(overlap, 6, "interior overlap at total {total}");
                }
            }
            // No frame is claimed by three windows (seams stay pairwise).
            assert!(covered.iter().all(|&c| c <= 2), "triple overlap at {total}");
        }
    }

    #[test]
    fn zero_overlap_plans_are_disjoint_except_the_last_seam() {
        let plan = plan_windows(33, 16, 0).unwrap();
        assert_eq!(plan.windows, vec![(0, 16), (16, 32), (17, 33)]);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(matches!(
            plan_windows(0, 16, 6),
            Err(WindowError::NoFrames)
        ));
        assert!(matches!(
            plan_windows(10, 16, 16),
            Err(WindowError::OverlapTooLarge { .. })
        ));
    }

    #[test]
    fn blend_weights_ramp_and_sum_to_one() {
        let weights = blend_weights(6);
        let expected = [1.0 / 7.0, 2.0 / 7.0, 3.0 / 7.0, 4.0 / 7.0, 5.0 / 7.0, 6.0 / 7.0];
        for (w, e) in weights.iter().zip(expected.iter()) {
            assert!((w - e).abs() < 1e-15);
        }
        for pair in weights.windows(2) {
            assert!(pair[1] > pair[0]);
        }
    }

    #[test]
    fn blending_identical_inputs_is_identity() {
        let frames = random_frames(6, 1);
        let blended = blend_overlap(&frames, &frames).unwrap();
        for (a, b) in blended.iter().zip(frames.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_inputs_blend_to_the_ramp() {
        let zeros = Array4::zeros((6, 1, 1, 1));
        let ones = Array4::ones((6, 1, 1, 1));
        let blended = blend_overlap(&zeros, &ones).unwrap();
        for i in 0..6 {
            assert!((blended[[i, 0, 0, 0]] - (i + 1) as f64 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn blending_stays_within_the_input_envelope() {
        let a = random_frames(5, 2);
        let b = random_frames(5, 3);
        let blended = blend_overlap(&a, &b).unwrap();
        for ((x, p), n) in blended.iter().zip(a.iter()).zip(b.iter()) {
            assert!(*x >= p.min(*n) - 1e-12);
            assert!(*x <= p.max(*n) + 1e-12);
        }
    }

    #[test]
    fn stitching_matches_a_per_frame_oracle() {
        let plan = plan_windows(26, 16, 6).unwrap();
        let w0 = random_frames(16, 4);
        let w1 = random_frames(16, 5);
        let stitched = stitch_windows(&plan, &[w0.clone(), w1.clone()]).unwrap();
        assert_eq!(stitched.dim().0, 26);
        // Frames before the seam come from window 0, frames after from
        // window 1, and the seam is the ramp blend.
        for frame in 0..10 {
            for (a, b) in stitched
                .index_axis(ndarray::Axis(0), frame)
                .iter()
                .zip(w0.index_axis(ndarray::Axis(0), frame).iter())
            {
                assert_eq!(a, b);
            }
        }
        for (i, frame) in (10..16).enumerate() {
            let w = (i + 1) as f64 / 7.0;
            for ((s, p), n) in stitched
                .index_axis(ndarray::Axis(0), frame)
                .iter()
                .zip(w0.index_axis(ndarray::Axis(0), frame).iter())
                .zip(w1.index_axis(ndarray::Axis(0), i).iter())
            {
                assert!((s - ((1.0 - w) * p + w * n)).abs() < 1e-12);
            }
        }
        for frame in 16..26 {
            for (a, b) in stitched
                .index_axis(ndarray::Axis(0), frame)
                .iter()
                .zip(w1.index_axis(ndarray::Axis(0), frame - 10).iter())
            {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn stitching_agreeing_windows_is_idempotent() {
        let plan = plan_windows(26, 16, 6).unwrap();
        let full = random_frames(26, 6);
        let w0 = full.slice(ndarray::s![0..16, .., .., ..]).to_owned();
        let w1 = full.slice(ndarray::s![10..26, .., .., ..]).to_owned();
        let stitched = stitch_windows(&plan, &[w0, w1]).unwrap();
        for (a, b) in stitched.iter().zip(full.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn plan_json_dump_round_trips() {
        let plan = plan_windows(100, 16, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plan.json");
        plan.save_json(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let back: WindowPlan = serde_json::from_str(&text).unwrap();
        assert_eq!(plan, back);
    }
}
