//! Second-order spherical-harmonics irradiance shading and its inverse.
//!
//! Lighting is a set of 9 real SH basis weights per RGB channel. The band
//! ordering is fixed as (l=0; l=1: y, z, x; l=2: xy, yz, 3z^2-1, xz,
//! x^2-y^2) with the standard real-SH normalization constants, and the
//! coefficients are treated as already-convolved irradiance weights: shading
//! a unit normal is a single dot product per channel.

use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of basis functions for bands 0..=2 of the real spherical harmonics.
pub const SH_BASIS_COUNT: usize = 9;

// Real-SH normalization constants (7+ significant digits):
//   c0   = 0.5  * sqrt(1/pi)   = 0.2820948
//   c1   = sqrt(3/(4 pi))      = 0.4886025
//   c2   = 0.5  * sqrt(15/pi)  = 1.0925484
//   c2_0 = 0.25 * sqrt(5/pi)   = 0.3153916
//   c2_2 = 0.25 * sqrt(15/pi)  = 0.5462742
const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: f64 = 1.092_548_430_592_079_2;
const C2_0: f64 = 0.315_391_565_252_520_05;
const C2_2: f64 = 0.546_274_215_296_039_6;

/// Tolerance for the unit-normal precondition.
const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ShError {
    #[error("normal must be unit length within {UNIT_TOL} (got |n| = {0})")]
    NonUnitNormal(f64),
    #[error("lighting estimation needs at least {SH_BASIS_COUNT} samples (got {0})")]
    TooFewSamples(usize),
    #[error(
        "design matrix is rank deficient: rank {rank} of {SH_BASIS_COUNT} \
         (deficient subspace dimension {deficiency})"
    )]
    RankDeficient { rank: usize, deficiency: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Second-order SH lighting coefficients: 9 basis weights per RGB channel.
///
/// Stored channel-major (`sh[channel][band]`), which is also the JSON layout:
/// `{"sh": [[9 floats], [9 floats], [9 floats]]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SHCoefficients {
    pub sh: [[f64; SH_BASIS_COUNT]; 3],
}

impl SHCoefficients {
    pub fn zeros() -> Self {
        Self {
            sh: [[0.0; SH_BASIS_COUNT]; 3],
        }
    }

    /// Uniform (DC-only) lighting with the given per-channel radiance weight.
    pub fn dc(rgb: [f64; 3]) -> Self {
        let mut sh = [[0.0; SH_BASIS_COUNT]; 3];
        for (channel, &value) in rgb.iter().enumerate() {
            sh[channel][0] = value;
        }
        Self { sh }
    }

    pub fn validate(&self) -> Result<(), ShError> {
        if self.sh.iter().flatten().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(ShError::NonFinite("SH coefficients"))
        }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<(), ShError> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self, ShError> {
        let text = std::fs::read_to_string(path)?;
        let coeffs: Self = serde_json::from_str(&text)?;
        coeffs.validate()?;
        Ok(coeffs)
    }
}

fn check_unit(n: &Vector3<f64>) -> Result<(), ShError> {
    let norm = n.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOL {
        return Err(ShError::NonUnitNormal(norm));
    }
    Ok(())
}

/// The 9 real SH basis values at a unit direction, in the fixed band order.
pub fn sh_basis(n: &Vector3<f64>) -> Result<[f64; SH_BASIS_COUNT], ShError> {
    check_unit(n)?;
    Ok(sh_basis_unit(n))
}

/// Basis evaluation without the unit check; callers guarantee |n| = 1.
pub(crate) fn sh_basis_unit(n: &Vector3<f64>) -> [f64; SH_BASIS_COUNT] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        C0,
        C1 * y,
        C1 * z,
        C1 * x,
        C2 * x * y,
        C2 * y * z,
        C2_0 * (3.0 * z * z - 1.0),
        C2 * x * z,
        C2_2 * (x * x - y * y),
    ]
}

/// Per-channel radiance at a unit normal, clamped to [0, 1].
pub fn shade(n: &Vector3<f64>, light: &SHCoefficients) -> Result<[f64; 3], ShError> {
    check_unit(n)?;
    Ok(shade_unit(n, light))
}

/// Radiance before the [0, 1] clamp. The estimator's linear model is exact
/// only for samples produced this way (or for clamped samples that never
/// saturate).
pub fn shade_unclamped(n: &Vector3<f64>, light: &SHCoefficients) -> Result<[f64; 3], ShError> {
    check_unit(n)?;
    Ok(shade_unclamped_unit(n, light))
}

pub(crate) fn shade_unit(n: &Vector3<f64>, light: &SHCoefficients) -> [f64; 3] {
    let raw = shade_unclamped_unit(n, light);
    [
        raw[0].clamp(0.0, 1.0),
        raw[1].clamp(0.0, 1.0),
        raw[2].clamp(0.0, 1.0),
    ]
}

pub(crate) fn shade_unclamped_unit(n: &Vector3<f64>, light: &SHCoefficients) -> [f64; 3] {
    let basis = sh_basis_unit(n);
    let mut out = [0.0; 3];
    for channel in 0..3 {
        let mut acc = 0.0;
        for (b, c) in basis.iter().zip(light.sh[channel].iter()) {
            acc += b * c;
        }
        out[channel] = acc;
    }
    out
}

/// Result of a least-squares lighting fit.
#[derive(Debug, Clone)]
pub struct ShEstimate {
    pub coeffs: SHCoefficients,
    /// Root-mean-square residual over all samples and channels.
    pub residual_rms: f64,
}

/// Recover SH coefficients from (unit normal, observed radiance) pairs by
/// least squares. Observations must be unsaturated: the fit models the
/// unclamped shading equation.
pub fn estimate_sh(samples: &[(Vector3<f64>, [f64; 3])]) -> Result<ShEstimate, ShError> {
    if samples.len() < SH_BASIS_COUNT {
        return Err(ShError::TooFewSamples(samples.len()));
    }
    let rows = samples.len();
    let mut design = DMatrix::<f64>::zeros(rows, SH_BASIS_COUNT);
    let mut observed = DMatrix::<f64>::zeros(rows, 3);
    for (row, (normal, radiance)) in samples.iter().enumerate() {
        check_unit(normal)?;
        if radiance.iter().any(|v| !v.is_finite()) {
            return Err(ShError::NonFinite("observed radiance"));
        }
        let basis = sh_basis_unit(normal);
        for (col, &b) in basis.iter().enumerate() {
            design[(row, col)] = b;
        }
        for channel in 0..3 {
            observed[(row, channel)] = radiance[channel];
        }
    }

    let svd = design.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = max_sv * rows.max(SH_BASIS_COUNT) as f64 * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < SH_BASIS_COUNT {
        return Err(ShError::RankDeficient {
            rank,
            deficiency: SH_BASIS_COUNT - rank,
        });
    }
    let solution = svd
        .solve(&observed, tol)
        .map_err(|_| ShError::NonFinite("least-squares solve"))?;

    let mut sh = [[0.0; SH_BASIS_COUNT]; 3];
    for channel in 0..3 {
        for band in 0..SH_BASIS_COUNT {
            sh[channel][band] = solution[(band, channel)];
        }
    }
    let residual = &design * &solution - &observed;
    let residual_rms = (residual.iter().map(|v| v * v).sum::<f64>() / (rows * 3) as f64).sqrt();
    Ok(ShEstimate {
        coeffs: SHCoefficients { sh },
        residual_rms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let norm = v.norm();
            if norm > 1e-3 && norm <= 1.0 {
                return v / norm;
            }
        }
    }

    fn random_light(rng: &mut ChaCha8Rng) -> SHCoefficients {
        let mut sh = [[0.0; SH_BASIS_COUNT]; 3];
        for row in sh.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        SHCoefficients { sh }
    }

    /// Deterministic, roughly uniform sphere covering for fit tests.
    fn fibonacci_sphere(count: usize) -> Vec<Vector3<f64>> {
        let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
        (0..count)
            .map(|i| {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
                let radius = (1.0 - y * y).sqrt();
                let theta = golden * i as f64;
                Vector3::new(radius * theta.cos(), y, radius * theta.sin())
            })
            .collect()
    }

    #[test]
    fn basis_at_north_pole_matches_analytic_values() {
        // Frozen from the closed-form constants: only DC, the band-1 z term,
        // and the (3z^2 - 1) term survive at n = (0, 0, 1).
        let expected = [
            0.282_094_791_773_878_14,
            0.0,
            0.488_602_511_902_919_9,
            0.0,
            0.0,
            0.0,
            0.630_783_130_505_040_1,
            0.0,
            0.0,
        ];
        let basis = sh_basis(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        for (got, want) in basis.iter().zip(expected.iter()) {
            assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        }
    }

    #[test]
    fn basis_parity_under_z_flip() {
        let up = sh_basis(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let down = sh_basis(&Vector3::new(0.0, 0.0, -1.0)).unwrap();
        assert_eq!(up[0], down[0]);
        assert_eq!(up[2], -down[2]);
        assert_eq!(up[6], down[6]);
    }

    #[test]
    fn band_one_energy_is_constant_on_the_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = random_unit(&mut rng);
            let basis = sh_basis(&n).unwrap();
            let energy = basis[1] * basis[1] + basis[2] * basis[2] + basis[3] * basis[3];
            assert!((energy - C1 * C1).abs() < 1e-12);
        }
    }

    #[test]
    fn basis_entries_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..500 {
            let n = random_unit(&mut rng);
            for entry in sh_basis(&n).unwrap() {
                assert!(entry.abs() <= 1.1);
            }
        }
    }

    #[test]
    fn non_unit_normal_is_rejected() {
        let err = sh_basis(&Vector3::new(0.0, 0.0, 2.0)).unwrap_err();
        assert!(matches!(err, ShError::NonUnitNormal(_)));
    }

    #[test]
    fn dc_only_lighting_shades_uniformly() {
        let light = SHCoefficients::dc([1.0, 0.5, 0.25]);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let n = random_unit(&mut rng);
            let rgb = shade(&n, &light).unwrap();
            assert!((rgb[0] - C0).abs() < 1e-12);
            assert!((rgb[1] - 0.5 * C0).abs() < 1e-12);
            assert!((rgb[2] - 0.25 * C0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lighting_shades_black() {
        let light = SHCoefficients::zeros();
        let rgb = shade(&Vector3::new(0.0, 1.0, 0.0), &light).unwrap();
        assert_eq!(rgb, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn band_one_z_light_brightens_the_pole() {
        let mut light = SHCoefficients::dc([0.5, 0.5, 0.5]);
        for channel in 0..3 {
            light.sh[channel][2] = 0.4; // band-1 z
        }
        let pole = shade(&Vector3::new(0.0, 0.0, 1.0), &light).unwrap();
        let equator = shade(&Vector3::new(1.0, 0.0, 0.0), &light).unwrap();
        for channel in 0..3 {
            assert!(pole[channel] > equator[channel]);
        }
    }

    #[test]
    fn unclamped_shading_is_linear_in_the_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..100 {
            let l1 = random_light(&mut rng);
            let l2 = random_light(&mut rng);
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let mut combined = SHCoefficients::zeros();
            for channel in 0..3 {
                for band in 0..SH_BASIS_COUNT {
                    combined.sh[channel][band] =
                        a * l1.sh[channel][band] + b * l2.sh[channel][band];
                }
            }
            let n = random_unit(&mut rng);
            let lhs = shade_unclamped(&n, &combined).unwrap();
            let s1 = shade_unclamped(&n, &l1).unwrap();
            let s2 = shade_unclamped(&n, &l2).unwrap();
            for channel in 0..3 {
                assert!((lhs[channel] - (a * s1[channel] + b * s2[channel])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn estimation_round_trips_known_lighting() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let light = random_light(&mut rng);
        let samples: Vec<_> = fibonacci_sphere(500)
            .into_iter()
            .map(|n| {
                let rgb = shade_unclamped(&n, &light).unwrap();
                (n, rgb)
            })
            .collect();
        let estimate = estimate_sh(&samples).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for channel in 0..3 {
            for band in 0..SH_BASIS_COUNT {
                let diff = estimate.coeffs.sh[channel][band] - light.sh[channel][band];
                num += diff * diff;
                den += light.sh[channel][band] * light.sh[channel][band];
            }
        }
        assert!((num / den).sqrt() < 1e-6);
        assert!(estimate.residual_rms < 1e-9);
    }

    #[test]
    fn repeated_normal_is_rank_deficient() {
        let n = Vector3::new(0.0, 0.0, 1.0);
        let samples: Vec<_> = (0..20).map(|_| (n, [0.3, 0.3, 0.3])).collect();
        match estimate_sh(&samples).unwrap_err() {
            ShError::RankDeficient { rank, deficiency } => {
                assert_eq!(rank, 1);
                assert_eq!(deficiency, 8);
            }
            other => panic!("expected rank deficiency, got {other}"),
        }
    }

    #[test]
    fn zero_observations_recover_zero_coefficients() {
        let samples: Vec<_> = fibonacci_sphere(64)
            .into_iter()
            .map(|n| (n, [0.0, 0.0, 0.0]))
            .collect();
        let estimate = estimate_sh(&samples).unwrap();
        for channel in 0..3 {
            for band in 0..SH_BASIS_COUNT {
                assert!(estimate.coeffs.sh[channel][band].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let samples: Vec<_> = fibonacci_sphere(8)
            .into_iter()
            .map(|n| (n, [0.1, 0.1, 0.1]))
            .collect();
        assert!(matches!(
            estimate_sh(&samples).unwrap_err(),
            ShError::TooFewSamples(8)
        ));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let light = random_light(&mut rng);
        let text = serde_json::to_string(&light).unwrap();
        assert!(text.starts_with("{\"sh\":[["));
        let back: SHCoefficients = serde_json::from_str(&text).unwrap();
        assert_eq!(light, back);
    }
}
