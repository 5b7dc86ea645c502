//! Pairwise merge kernels: spherical interpolation of two token states into
//! one shared direction, plus the simpler averaging baselines.
//!
//! The core idea: two vectors that point almost the same way can share a
//! single direction as long as each keeps its own length. [`slerp_merge`]
//! produces that direction by interpolating along the great-circle arc
//! between the two unit vectors, weighted by `t` (higher `t` leans toward
//! `x_cur`, the later layer). [`restore_pair`] undoes the merge by rescaling
//! the shared direction back to each side's recorded magnitude.
//!
//! All reductions accumulate in `f64` and round to `f32` once on output;
//! the kernels stay within 1e-6 of a closed-form evaluation that way, even
//! at wide hidden sizes.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Interpolation weight and degeneracy threshold for the spherical merge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeParams {
    /// Interpolation position in `[0, 1]`: 0 returns the earlier layer's
    /// direction, 1 the later layer's. The second term of the blend carries
    /// weight `sin(t*omega)`, so larger `t` draws the shared direction
    /// toward `x_cur`.
    pub t: f32,
    /// Threshold on `sin(omega)` below which the great-circle weights are
    /// numerically unstable and a renormalized linear blend is used instead.
    /// Also bounds the antipodal rejection region: `omega > pi - eps` has no
    /// stable merge direction at all.
    pub eps_parallel: f32,
}

impl MergeParams {
    /// Validates `0 <= t <= 1` and `eps_parallel > 0`.
    pub fn new(t: f32, eps_parallel: f32) -> Result<Self> {
        let p = MergeParams { t, eps_parallel };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.t.is_finite() || !(0.0..=1.0).contains(&self.t) {
            return Err(Error::InvalidConfig(format!(
                "interpolation weight t must lie in [0, 1], got {}",
                self.t
            )));
        }
        if !self.eps_parallel.is_finite() || self.eps_parallel <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "eps_parallel must be positive, got {}",
                self.eps_parallel
            )));
        }
        Ok(())
    }
}

impl Default for MergeParams {
    /// `t = 0.6` (weighted toward the later layer) and `eps_parallel = 1e-6`.
    fn default() -> Self {
        MergeParams { t: 0.6, eps_parallel: 1e-6 }
    }
}

/// Everything needed to reconstruct both source vectors from one merge:
/// the shared direction plus each side's magnitude, and the angle between
/// the sources (kept for retention statistics and storage accounting).
#[derive(Debug, Clone, PartialEq)]
pub struct PairMergeOutput {
    /// Shared direction; unit-norm within 1e-6 when produced by
    /// [`slerp_merge`].
    pub direction: Vec<f32>,
    /// Euclidean norm of `x_prev` (the earlier layer's row).
    pub mag_prev: f32,
    /// Euclidean norm of `x_cur` (the later layer's row).
    pub mag_cur: f32,
    /// Angle between the two source vectors, in `[0, pi]`.
    pub omega: f32,
}

// ── f64 reductions ──────────────────────────────────────────────────────────

pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

pub(crate) fn norm_f64(a: &[f32]) -> f64 {
    dot_f64(a, a).sqrt()
}

/// Angle in `[0, pi]` between two vectors, from the arccosine of their
/// cosine similarity clamped into `[-1, 1]` (accumulated rounding can push
/// the raw cosine a hair outside, which would otherwise produce NaN).
fn angle_f64(x_cur: &[f32], x_prev: &[f32]) -> Result<f64> {
    debug_assert_eq!(x_cur.len(), x_prev.len());
    let norm_cur = norm_f64(x_cur);
    let norm_prev = norm_f64(x_prev);
    if norm_cur == 0.0 || norm_prev == 0.0 {
        return Err(Error::ZeroVector);
    }
    let cos = (dot_f64(x_cur, x_prev) / (norm_cur * norm_prev)).clamp(-1.0, 1.0);
    Ok(cos.acos())
}

// ── Angular measurements ────────────────────────────────────────────────────

/// Angle between two token rows in radians. Errors on zero-norm input.
pub fn angle(x_cur: &[f32], x_prev: &[f32]) -> Result<f32> {
    angle_f64(x_cur, x_prev).map(|w| w as f32)
}

/// Angle normalized to `[0, 1]`: `angle / pi`. The retention stage ranks
/// token pairs by this distance.
pub fn angular_distance(x_cur: &[f32], x_prev: &[f32]) -> Result<f32> {
    angle_f64(x_cur, x_prev).map(|w| (w / PI) as f32)
}

/// Total angular distance convention used by cache construction and
/// analysis, where zero rows must not abort the pipeline: a pair with one
/// or two zero rows restores exactly from a shared direction (the zero side
/// contributes magnitude 0), so its merge distance is 0 by definition.
pub(crate) fn lenient_distance(x_cur: &[f32], x_prev: &[f32]) -> f32 {
    angular_distance(x_cur, x_prev).unwrap_or(0.0)
}

// ── Merge kernels ───────────────────────────────────────────────────────────

/// Merges two token rows into a shared unit direction via spherical linear
/// interpolation:
///
/// ```text
/// e = sin((1 - t) * omega) / sin(omega) * unit(x_prev)
///   + sin(t * omega)       / sin(omega) * unit(x_cur)
/// ```
///
/// When `sin(omega)` falls below `eps_parallel` the two directions are
/// effectively parallel and the great-circle weights degenerate to `0/0`;
/// the kernel falls back to a linear blend of the unit vectors, then
/// renormalizes. Antipodal input (`omega > pi - eps_parallel`) has no
/// stable shared direction and is rejected instead.
pub fn slerp_merge(x_cur: &[f32], x_prev: &[f32], params: &MergeParams) -> Result<PairMergeOutput> {
    params.validate()?;
    debug_assert_eq!(x_cur.len(), x_prev.len());
    let norm_cur = norm_f64(x_cur);
    let norm_prev = norm_f64(x_prev);
    if norm_cur == 0.0 || norm_prev == 0.0 {
        return Err(Error::ZeroVector);
    }
    let cos = (dot_f64(x_cur, x_prev) / (norm_cur * norm_prev)).clamp(-1.0, 1.0);
    let omega = cos.acos();
    let eps = f64::from(params.eps_parallel);
    if omega > PI - eps {
        return Err(Error::DegenerateAntipodal);
    }
    let t = f64::from(params.t);
    let sin_omega = omega.sin();
    let direction: Vec<f32> = if sin_omega < eps {
        // Near-parallel: interpolate the unit vectors linearly and
        // renormalize. The blend's norm is near 1 here (the antipodal
        // cancellation case was rejected above), so the division is stable.
        let blend: Vec<f64> = x_cur
            .iter()
            .zip(x_prev)
            .map(|(&c, &p)| {
                (1.0 - t) * f64::from(p) / norm_prev + t * f64::from(c) / norm_cur
            })
            .collect();
        let blend_norm = blend.iter().map(|v| v * v).sum::<f64>().sqrt();
        blend.iter().map(|v| (v / blend_norm) as f32).collect()
    } else {
        let w_prev = ((1.0 - t) * omega).sin() / sin_omega;
        let w_cur = (t * omega).sin() / sin_omega;
        x_cur
            .iter()
            .zip(x_prev)
            .map(|(&c, &p)| {
                (w_prev * f64::from(p) / norm_prev + w_cur * f64::from(c) / norm_cur) as f32
            })
            .collect()
    };
    Ok(PairMergeOutput {
        direction,
        mag_prev: norm_prev as f32,
        mag_cur: norm_cur as f32,
        omega: omega as f32,
    })
}

/// Rebuilds both source rows from a merge record by rescaling the shared
/// direction to each recorded magnitude:
///
/// ```text
/// x_hat = e * (mag / ||e||)
/// ```
///
/// The division by `||e||` is kept even though spherically merged
/// directions are unit-norm: it makes restoration exact for the linear
/// fallback path and for any caller that stores a non-unit direction.
/// Returns `(restored_cur, restored_prev)`.
#[must_use]
pub fn restore_pair(merged: &PairMergeOutput) -> (Vec<f32>, Vec<f32>) {
    let norm_e = norm_f64(&merged.direction);
    let scale = |mag: f32| -> Vec<f32> {
        if norm_e == 0.0 {
            // Only reachable for a zero direction, which records magnitude 0.
            return vec![0.0; merged.direction.len()];
        }
        let s = f64::from(mag) / norm_e;
        merged.direction.iter().map(|&e| (f64::from(e) * s) as f32).collect()
    };
    (scale(merged.mag_cur), scale(merged.mag_prev))
}

/// Elementwise average of the two rows: the simplest cross-layer baseline.
/// Both layers share the averaged vector as-is, so magnitude disparity
/// between the layers turns directly into restoration error.
#[must_use]
pub fn mean_merge(x_cur: &[f32], x_prev: &[f32]) -> Vec<f32> {
    debug_assert_eq!(x_cur.len(), x_prev.len());
    x_cur.iter().zip(x_prev).map(|(&c, &p)| (c + p) / 2.0).collect()
}

/// Average direction rescaled to the larger of the two magnitudes:
///
/// ```text
/// e = mean(x_cur, x_prev) / ||mean|| * max(||x_cur||, ||x_prev||)
/// ```
///
/// Keeps the dominant row's energy but, like the plain average, hands both
/// layers the same vector. Rejects pairs whose average collapses toward
/// zero (antipodal input), where the normalization would explode.
pub fn max_norm_merge(x_cur: &[f32], x_prev: &[f32], params: &MergeParams) -> Result<Vec<f32>> {
    params.validate()?;
    debug_assert_eq!(x_cur.len(), x_prev.len());
    let max_norm = norm_f64(x_cur).max(norm_f64(x_prev));
    if max_norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    let mean: Vec<f64> = x_cur
        .iter()
        .zip(x_prev)
        .map(|(&c, &p)| (f64::from(c) + f64::from(p)) / 2.0)
        .collect();
    let mean_norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if mean_norm < f64::from(params.eps_parallel) * max_norm {
        return Err(Error::DegenerateAntipodal);
    }
    let scale = max_norm / mean_norm;
    Ok(mean.iter().map(|v| (v * scale) as f32).collect())
}
