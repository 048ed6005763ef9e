//! Closed-form stand-in for a steady RANS solution: the surface-layer profile
//! advected along +x, modified by one wake per building.

use super::geometry::{Building, GeometrySample};
use crate::error::{Error, Result};
use crate::profiles::{StabilityParams, SurfaceLayer, THETA_REF};
use crate::tensor::Matrix;

pub const AIR_DENSITY: f64 = 1.2;
/// Wake e-folding length per unit building height, neutral stratification.
pub const WAKE_LENGTH_FACTOR: f64 = 3.0;
/// Exponential sensitivity of the wake length to the inverse Obukhov length.
pub const WAKE_STABILITY_GAIN: f64 = 5.0;
pub const VELOCITY_DEFICIT: f64 = 0.6;
pub const LATERAL_DEFLECTION: f64 = 0.1;
pub const VERTICAL_DEFLECTION: f64 = 0.05;
pub const SUCTION: f64 = 0.3;
pub const K_GAIN: f64 = 0.1;
pub const EPS_GAIN: f64 = 0.05;
pub const THETA_MIXING: f64 = 0.5;

pub fn wake_length(height: f64, inv_lmo: f64) -> f64 {
    WAKE_LENGTH_FACTOR * height * (WAKE_STABILITY_GAIN * inv_lmo).exp()
}

/// Per-building influence at a point: `(wake, stagnation)`, both in [0, 1].
///
/// Along x the wake factor is `exp(-(x - x_lee) / L)` behind the building, 1
/// alongside it, and `max(0, 1 - (x_front - x) / 2H)^2` upwind; the stagnation
/// factor is that upwind part only. Both are multiplied by a lateral Gaussian
/// in the distance outside the footprint (scale H/2) and a vertical Gaussian
/// above the roof (scale H/2).
pub fn influence(b: &Building, inv_lmo: f64, p: &[f64]) -> (f64, f64) {
    let h = b.height;
    let (x0, x1) = b.x_range();
    let (y0, y1) = b.y_range();
    let dy = (y0 - p[1]).max(p[1] - y1).max(0.0);
    let dz = (p[2] - h).max(0.0);
    let sigma = 0.5 * h;
    let envelope = (-0.5 * (dy / sigma).powi(2)).exp() * (-0.5 * (dz / sigma).powi(2)).exp();
    let (along, upstream) = if p[0] >= x1 {
        ((-(p[0] - x1) / wake_length(h, inv_lmo)).exp(), 0.0)
    } else if p[0] >= x0 {
        (1.0, 0.0)
    } else {
        let a = (1.0 - (x0 - p[0]) / (2.0 * h)).max(0.0).powi(2);
        (a, a)
    };
    (along * envelope, upstream * envelope)
}

/// Seven fields `(vx, vy, vz, p, theta, log10 k, log10 eps)` per point.
///
/// With background speed U, potential temperature theta_bg, k_bg and eps_bg
/// at the point's height, and per-building wake E and stagnation S:
/// - vx = U * prod(1 - 0.6 E)
/// - vy = U * sum(0.1 E tanh((y - cy) / (depth/2 + 1)))
/// - vz = U * sum(0.05 E tanh((z - H/2) / H))
/// - p = rho U^2 / 2 * sum(S - 0.3 E)
/// - theta = theta_bg + (theta_ref - theta_bg) (1 - prod(1 - 0.5 E))
/// - k = k_bg + 0.1 U^2 sum(E)
/// - eps = eps_bg + 0.05 U^3 sum(E / H)
pub fn oracle_flow(geometry: &GeometrySample, stability: &StabilityParams, coords: &Matrix) -> Result<Matrix> {
    let layer = SurfaceLayer::new(*stability)?;
    let mut out = Matrix::zeros(coords.rows(), 7);
    for r in 0..coords.rows() {
        let p = coords.row(r);
        if geometry.contains(p) {
            return Err(Error::InvalidInput(format!(
                "point {r} at ({}, {}, {}) lies inside a building",
                p[0], p[1], p[2]
            )));
        }
        let bg = layer.at(p[2]);
        let u = bg.v;
        let mut keep_u = 1.0;
        let mut keep_theta = 1.0;
        let (mut vy, mut vz, mut pr, mut sum_e, mut sum_eh) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for b in &geometry.buildings {
            let (e, s) = influence(b, stability.inv_lmo, p);
            keep_u *= 1.0 - VELOCITY_DEFICIT * e;
            keep_theta *= 1.0 - THETA_MIXING * e;
            vy += LATERAL_DEFLECTION * e * ((p[1] - b.cy) / (b.depth / 2.0 + 1.0)).tanh();
            vz += VERTICAL_DEFLECTION * e * ((p[2] - b.height / 2.0) / b.height).tanh();
            pr += s - SUCTION * e;
            sum_e += e;
            sum_eh += e / b.height;
        }
        let k = bg.k + K_GAIN * u * u * sum_e;
        let eps = bg.eps + EPS_GAIN * u.powi(3) * sum_eh;
        out.row_mut(r).copy_from_slice(&[
            u * keep_u,
            u * vy,
            u * vz,
            0.5 * AIR_DENSITY * u * u * pr,
            bg.theta + (THETA_REF - bg.theta) * (1.0 - keep_theta),
            k.log10(),
            eps.log10(),
        ]);
    }
    Ok(out)
}
