//! Numerical differentiation utilities.
//!
//! This is the independent verification path for every analytic gradient in
//! the crate: central finite differences plus the validity scans that keep
//! the probes away from the piecewise kinks of the bilinear sampler, ReLU,
//! and max-pooling. The analytic code never calls into this module.

use crate::image::{pixel_to_norm, norm_to_pixel, Image};
use crate::tps::TpsTransform;

/// Central finite-difference gradient of a scalar function.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = f(&probe);
        probe[i] = x[i] - step;
        let lo = f(&probe);
        probe[i] = x[i];
        grad[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// Worst per-coordinate relative error between two gradients.
///
/// Each coordinate is compared as |a-b| / max(|a|, |b|, floor); the floor
/// keeps genuinely tiny coordinates from blowing up the ratio.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Smallest distance, in pixels, of any warped sample location from an
/// interpolation-cell boundary of the source image.
///
/// Finite differences across the warp are only trustworthy when every sampled
/// point stays inside its cell for the whole probe interval; callers reject
/// instances whose margin is too small.
pub fn warp_cell_margin(x: &Image, map: &TpsTransform) -> f64 {
    let (h, w) = (x.height(), x.width());
    let mut margin = f64::INFINITY;
    for r in 0..h {
        for c in 0..w {
            let q = pixel_to_norm(r, c, h, w).expect("in range");
            let src = map.eval(q);
            let (rf, cf) = norm_to_pixel(src, h, w);
            // Points outside the image sample a constant border, which has no
            // kink to worry about; skip anything clearly out of range.
            if rf < -0.5 || cf < -0.5 || rf > h as f64 - 0.5 || cf > w as f64 - 0.5 {
                continue;
            }
            margin = margin.min((rf - rf.round()).abs());
            margin = margin.min((cf - cf.round()).abs());
        }
    }
    margin
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_on_quadratic() {
        // f(x, y) = x^2 + 3xy, grad = (2x + 3y, 3x)
        let g = central_diff(&mut |p: &[f64]| p[0] * p[0] + 3.0 * p[0] * p[1], &[1.0, 2.0], 1e-6);
        assert!((g[0] - 8.0).abs() < 1e-6);
        assert!((g[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn rel_err_uses_floor() {
        assert_eq!(max_rel_err(&[0.0], &[0.0], 1e-8), 0.0);
        let e = max_rel_err(&[1.0, 1e-12], &[1.0, 0.0], 1e-6);
        assert!(e < 1e-5);
    }
}
