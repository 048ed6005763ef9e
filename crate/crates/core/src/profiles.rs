//! Monin–Obukhov surface-layer profiles of wind speed, potential temperature,
//! turbulent kinetic energy and dissipation on 64 fixed levels.

use std::f64::consts::PI;

use crate::error::{Error, Result};

pub const KAPPA: f64 = 0.41;
pub const C_MU: f64 = 0.09;
pub const V_REF: f64 = 6.0;
pub const Z_REF: f64 = 80.0;
pub const THETA_REF: f64 = 293.15;
pub const GRAVITY: f64 = 9.81;

pub const N_LEVELS: usize = 64;
pub const LEVEL_MIN: f64 = 1.0;
pub const LEVEL_MAX: f64 = 400.0;
pub const PROFILE_LEN: usize = 4 * N_LEVELS;

pub const INV_LMO_RANGE: (f64, f64) = (-0.20, 0.10);
pub const Z0_RANGE: (f64, f64) = (0.05, 1.0);

const STABLE_SLOPE: f64 = 5.0;
const UNSTABLE_M: f64 = 19.3;
const UNSTABLE_H: f64 = 11.6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StabilityParams {
    /// Inverse Monin–Obukhov length, 1/m.
    pub inv_lmo: f64,
    /// Roughness length, m.
    pub z0: f64,
}

impl StabilityParams {
    pub fn new(inv_lmo: f64, z0: f64) -> Result<Self> {
        let p = Self { inv_lmo, z0 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = INV_LMO_RANGE;
        if !(lo..=hi).contains(&self.inv_lmo) {
            return Err(Error::InvalidInput(format!(
                "inverse Monin-Obukhov length {} outside [{lo}, {hi}] 1/m",
                self.inv_lmo
            )));
        }
        let (lo, hi) = Z0_RANGE;
        if !(lo..=hi).contains(&self.z0) {
            return Err(Error::InvalidInput(format!(
                "roughness length {} outside [{lo}, {hi}] m",
                self.z0
            )));
        }
        Ok(())
    }
}

/// Integrated stability correction for momentum.
pub fn psi_m(zeta: f64) -> f64 {
    if zeta >= 0.0 {
        -STABLE_SLOPE * zeta
    } else {
        let x = (1.0 - UNSTABLE_M * zeta).powf(0.25);
        2.0 * ((1.0 + x) / 2.0).ln() + ((1.0 + x * x) / 2.0).ln() - 2.0 * x.atan() + PI / 2.0
    }
}

/// Integrated stability correction for heat.
pub fn psi_h(zeta: f64) -> f64 {
    if zeta >= 0.0 {
        -STABLE_SLOPE * zeta
    } else {
        let y = (1.0 - UNSTABLE_H * zeta).sqrt();
        2.0 * ((1.0 + y) / 2.0).ln()
    }
}

/// Dimensionless wind shear.
pub fn phi_m(zeta: f64) -> f64 {
    if zeta >= 0.0 {
        1.0 + STABLE_SLOPE * zeta
    } else {
        (1.0 - UNSTABLE_M * zeta).powf(-0.25)
    }
}

/// Friction velocity that puts the wind speed at `Z_REF` exactly on `V_REF`.
pub fn friction_velocity(p: &StabilityParams) -> f64 {
    KAPPA * V_REF / ((Z_REF / p.z0).ln() - psi_m(Z_REF * p.inv_lmo) + psi_m(p.z0 * p.inv_lmo))
}

/// Temperature scale; negative when unstable.
pub fn temperature_scale(p: &StabilityParams, u_star: f64) -> f64 {
    u_star * u_star * THETA_REF * p.inv_lmo / (KAPPA * GRAVITY)
}

/// `(v, theta, k, eps)` at height `z`; heights below the roughness length are
/// evaluated at `z0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelState {
    pub v: f64,
    pub theta: f64,
    pub k: f64,
    pub eps: f64,
}

pub struct SurfaceLayer {
    pub params: StabilityParams,
    pub u_star: f64,
    pub theta_star: f64,
}

impl SurfaceLayer {
    pub fn new(params: StabilityParams) -> Result<Self> {
        params.validate()?;
        let u_star = friction_velocity(&params);
        Ok(Self {
            params,
            u_star,
            theta_star: temperature_scale(&params, u_star),
        })
    }

    pub fn at(&self, z: f64) -> LevelState {
        let StabilityParams { inv_lmo, z0 } = self.params;
        let z = z.max(z0);
        let zeta = z * inv_lmo;
        let log = (z / z0).ln();
        let us = self.u_star;
        let v = us / KAPPA * (log - psi_m(zeta) + psi_m(z0 * inv_lmo));
        let theta = THETA_REF + self.theta_star / KAPPA * (log - psi_h(zeta) + psi_h(z0 * inv_lmo));
        let phi = phi_m(zeta);
        let k = us * us / C_MU.sqrt() * ((phi - zeta) / phi).sqrt();
        let eps = us.powi(3) / (KAPPA * z) * (phi - zeta);
        LevelState { v, theta, k, eps }
    }
}

/// Geometrically spaced profile heights.
pub fn levels() -> [f64; N_LEVELS] {
    let mut out = [0.0; N_LEVELS];
    let ratio = LEVEL_MAX / LEVEL_MIN;
    for (i, z) in out.iter_mut().enumerate() {
        *z = LEVEL_MIN * ratio.powf(i as f64 / (N_LEVELS - 1) as f64);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeteorologicalProfile {
    pub levels: Vec<f64>,
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub k: Vec<f64>,
    pub eps: Vec<f64>,
}

pub fn compute_profiles(params: &StabilityParams) -> Result<MeteorologicalProfile> {
    let layer = SurfaceLayer::new(*params)?;
    let levels = levels().to_vec();
    let states: Vec<LevelState> = levels.iter().map(|&z| layer.at(z)).collect();
    Ok(MeteorologicalProfile {
        v: states.iter().map(|s| s.v).collect(),
        theta: states.iter().map(|s| s.theta).collect(),
        k: states.iter().map(|s| s.k).collect(),
        eps: states.iter().map(|s| s.eps).collect(),
        levels,
    })
}

/// `v ⊕ theta ⊕ k ⊕ eps`.
pub fn flatten_profiles(p: &MeteorologicalProfile) -> Vec<f64> {
    let mut out = Vec::with_capacity(PROFILE_LEN);
    for part in [&p.v, &p.theta, &p.k, &p.eps] {
        out.extend_from_slice(part);
    }
    out
}

pub fn unflatten_profiles(flat: &[f64]) -> Result<MeteorologicalProfile> {
    if flat.len() != PROFILE_LEN {
        return Err(Error::Shape(format!(
            "flattened profile has length {}, expected {PROFILE_LEN}",
            flat.len()
        )));
    }
    let part = |i: usize| flat[i * N_LEVELS..(i + 1) * N_LEVELS].to_vec();
    Ok(MeteorologicalProfile {
        levels: levels().to_vec(),
        v: part(0),
        theta: part(1),
        k: part(2),
        eps: part(3),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(inv: f64, z0: f64) -> MeteorologicalProfile {
        compute_profiles(&StabilityParams::new(inv, z0).unwrap()).unwrap()
    }

    fn strictly(xs: &[f64], inc: bool) -> bool {
        xs.windows(2).all(|w| if inc { w[1] > w[0] } else { w[1] < w[0] })
    }

    #[test]
    fn neutral_log_law() {
        let p = StabilityParams::new(0.0, 0.05).unwrap();
        let layer = SurfaceLayer::new(p).unwrap();
        assert_eq!(layer.u_star, KAPPA * 6.0 / (80.0f64 / 0.05).ln());
        assert!((layer.at(80.0).v - 6.0).abs() < 1e-12);
        let prof = compute_profiles(&p).unwrap();
        assert!(prof.theta.iter().all(|&t| t == 293.15));
        assert!(prof.k.iter().all(|&k| k == prof.k[0]));
    }

    #[test]
    fn level_layout() {
        let l = levels();
        assert_eq!(l[0], 1.0);
        assert!((l[63] - 400.0).abs() < 1e-9);
        assert!(strictly(&l, true));
    }

    #[test]
    fn unstable_theta_decreases() {
        assert!(strictly(&profile(-0.1, 0.3).theta, false));
    }

    #[test]
    fn stable_theta_increases_and_eps_decreases() {
        let p = profile(0.1, 0.3);
        assert!(strictly(&p.theta, true));
        assert!(strictly(&p.eps, false));
    }

    #[test]
    fn reference_speed_closure_on_grid() {
        for i in 0..50 {
            for j in 0..50 {
                let inv = -0.2 + 0.3 * i as f64 / 49.0;
                let z0 = 0.05 + 0.95 * j as f64 / 49.0;
                let p = StabilityParams::new(inv, z0).unwrap();
                let layer = SurfaceLayer::new(p).unwrap();
                assert!((layer.at(Z_REF).v - V_REF).abs() < 1e-9);
                let prof = compute_profiles(&p).unwrap();
                assert!(prof.v.windows(2).all(|w| w[1] > w[0]));
                assert!(prof.k.iter().chain(&prof.eps).all(|&x| x > 0.0 && x.is_finite()));
                assert!(prof.theta.iter().chain(&prof.v).all(|x| x.is_finite()));
                if inv != 0.0 {
                    assert!(prof.theta.iter().any(|&t| t != THETA_REF));
                }
            }
        }
    }

    #[test]
    fn continuous_at_neutrality() {
        let n = flatten_profiles(&profile(0.0, 0.2));
        for inv in [1e-6, -1e-6] {
            let p = flatten_profiles(&profile(inv, 0.2));
            for (a, b) in n.iter().zip(&p) {
                assert!((a - b).abs() <= 0.01 * a.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn flatten_order_and_roundtrip() {
        let p = profile(-0.05, 0.1);
        let f = flatten_profiles(&p);
        assert_eq!(f.len(), 256);
        assert_eq!(f[0], p.v[0]);
        assert_eq!(f[64], p.theta[0]);
        assert_eq!(unflatten_profiles(&f).unwrap(), p);
        let n = flatten_profiles(&profile(0.0, 0.5));
        assert!(n[64..128].iter().all(|&t| t == 293.15));
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(StabilityParams::new(0.2, 0.1).is_err());
        assert!(StabilityParams::new(0.0, 2.0).is_err());
        assert!(compute_profiles(&StabilityParams { inv_lmo: -0.5, z0: 0.1 }).is_err());
    }

    #[test]
    fn similarity_functions_vanish_at_neutral() {
        assert_eq!(psi_m(0.0), 0.0);
        assert_eq!(psi_h(0.0), 0.0);
        assert_eq!(phi_m(0.0), 1.0);
        // unstable branch limits smoothly
        assert!(psi_m(-1e-9).abs() < 1e-7);
        assert!(psi_h(-1e-9).abs() < 1e-7);
    }
}
