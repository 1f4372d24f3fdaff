//! Seeded synthetic scenes: piecewise-smooth structure (gradients, blobs,
//! hard-edged shapes, gratings) mapped to linear or log-uniform intensities.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensor::IntensityImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// Structure scaled linearly onto `[0, peak]`.
    LowLight,
    /// Structure mapped to `peak·10^(−decades·(1 − f))`.
    Hdr,
    /// All zeros.
    Dark,
}

/// Structure field in `[0, 1]` with its minimum at 0 and maximum at 1
/// (constant zero if degenerate).
pub fn structure(dims: (usize, usize), seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = dims;
    let (h, w) = (rows as f64, cols as f64);
    let mut f = Array2::zeros(dims);

    let (gx, gy) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let base = rng.random_range(0.0..0.5);
    for ((r, c), v) in f.indexed_iter_mut() {
        *v = base + 0.4 * (gx * c as f64 / w + gy * r as f64 / h);
    }

    let blobs = rng.random_range(3..7);
    for _ in 0..blobs {
        let (cr, cc) = (rng.random_range(0.0..h), rng.random_range(0.0..w));
        let s = rng.random_range(0.05..0.25) * h.min(w);
        let amp = rng.random_range(-0.8..1.2);
        for ((r, c), v) in f.indexed_iter_mut() {
            let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
            *v += amp * (-d2 / (2.0 * s * s)).exp();
        }
    }

    let shapes = rng.random_range(2..6);
    for _ in 0..shapes {
        let level = rng.random_range(-0.6..1.0);
        let (cr, cc) = (rng.random_range(0.0..h), rng.random_range(0.0..w));
        let (hr, hc) = (rng.random_range(0.06..0.3) * h, rng.random_range(0.06..0.3) * w);
        let disc = rng.random_bool(0.5);
        for ((r, c), v) in f.indexed_iter_mut() {
            let (dr, dc) = ((r as f64 - cr) / hr, (c as f64 - cc) / hc);
            let inside = if disc { dr * dr + dc * dc <= 1.0 } else { dr.abs() <= 1.0 && dc.abs() <= 1.0 };
            if inside {
                *v += level;
            }
        }
    }

    if rng.random_bool(0.6) {
        let period = rng.random_range(4.0..12.0);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let amp = rng.random_range(0.1..0.4);
        let (r0, c0) = (rng.random_range(0.0..h * 0.6), rng.random_range(0.0..w * 0.6));
        let (r1, c1) = (r0 + h * 0.4, c0 + w * 0.4);
        for ((r, c), v) in f.indexed_iter_mut() {
            let (rf, cf) = (r as f64, c as f64);
            if rf >= r0 && rf < r1 && cf >= c0 && cf < c1 {
                let t = (cf * angle.cos() + rf * angle.sin()) * 2.0 * std::f64::consts::PI / period;
                *v += amp * t.sin();
            }
        }
    }

    let min = f.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        f.mapv_inplace(|v| (v - min) / (max - min));
    } else {
        f.fill(0.0);
    }
    f
}

/// Scene of the given kind with dynamic-range peak `peak`.
pub fn scene(kind: SceneKind, dims: (usize, usize), peak: f64, decades: f64, seed: u64) -> Result<IntensityImage> {
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::invalid(format!("scene peak must be > 0, got {peak}")));
    }
    if dims.0 == 0 || dims.1 == 0 {
        return Err(Error::invalid("scene dimensions must be nonzero"));
    }
    let data = match kind {
        SceneKind::Dark => Array2::zeros(dims),
        SceneKind::LowLight => structure(dims, seed) * peak,
        SceneKind::Hdr => {
            if !(decades > 0.0) {
                return Err(Error::invalid("HDR scenes need decades > 0"));
            }
            structure(dims, seed).mapv(|f| peak * 10f64.powf(-decades * (1.0 - f)))
        }
    };
    IntensityImage::new(data, peak)
}

/// `log10(max(x, floor))`, for displaying HDR images.
pub fn log_display(img: &Array2<f64>, floor: f64) -> Array2<f64> {
    img.mapv(|v| v.max(floor).log10())
}

/// Inverse of [`log_display`] on values above the floor.
pub fn log_display_inverse(img: &Array2<f64>) -> Array2<f64> {
    img.mapv(|v| 10f64.powf(v))
}
