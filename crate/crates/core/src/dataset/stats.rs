use std::collections::BTreeMap;

use super::geometry::ZONE;
use super::FlowSample;
use crate::encoders::{GeometryInputs, COORD_SPAN};
use crate::error::{Error, Result};
use crate::model::ModelInputs;
use crate::processor::{FIELD_NAMES, N_FIELDS};
use crate::profiles::{compute_profiles, flatten_profiles, N_LEVELS, PROFILE_LEN};
use crate::supernode::PointCloud;
use crate::tensor::Matrix;

const PROFILE_GROUPS: [&str; 4] = ["v", "theta", "log_k", "log_eps"];
const FEATURE_NAMES: [&str; 2] = ["inv_lmo", "z0"];
/// Spreads below this are treated as constant inputs and left unscaled.
const FLAT_SPREAD: f64 = 1e-12;

/// Training-split statistics. Output fields are standardized (k and eps are
/// already base-10 logarithms); terrain features and profile groups likewise,
/// except that a constant input keeps unit scale.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationStats {
    pub field_mean: [f64; N_FIELDS],
    pub field_std: [f64; N_FIELDS],
    pub feature_mean: [f64; 2],
    pub feature_std: [f64; 2],
    pub profile_mean: [f64; 4],
    pub profile_std: [f64; 4],
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn floor_spread(s: f64) -> f64 {
    if s < FLAT_SPREAD {
        1.0
    } else {
        s
    }
}

/// Profile values grouped as `v, theta, log10 k, log10 eps`.
pub fn profile_features(sample: &FlowSample) -> Result<Vec<f64>> {
    let mut flat = flatten_profiles(&compute_profiles(&sample.stability)?);
    for v in &mut flat[2 * N_LEVELS..] {
        *v = v.log10();
    }
    Ok(flat)
}

impl NormalizationStats {
    pub fn compute(train: &[FlowSample]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InvalidInput("no training samples for statistics".into()));
        }
        let mut field_mean = [0.0; N_FIELDS];
        let mut field_std = [0.0; N_FIELDS];
        for c in 0..N_FIELDS {
            let it = train.iter().flat_map(move |s| (0..s.fields.rows()).map(move |r| s.fields.get(r, c)));
            let (m, sd) = mean_std(it);
            if !(sd > FLAT_SPREAD * m.abs().max(1.0)) {
                return Err(Error::InvalidInput(format!(
                    "field {} has zero spread over the training split",
                    FIELD_NAMES[c]
                )));
            }
            field_mean[c] = m;
            field_std[c] = sd;
        }
        let (im, is) = mean_std(train.iter().map(|s| s.stability.inv_lmo));
        let (zm, zs) = mean_std(train.iter().map(|s| s.stability.z0));
        let profiles = train.iter().map(profile_features).collect::<Result<Vec<_>>>()?;
        let mut profile_mean = [0.0; 4];
        let mut profile_std = [0.0; 4];
        for gi in 0..4 {
            let it = profiles.iter().flat_map(move |p| p[gi * N_LEVELS..(gi + 1) * N_LEVELS].iter().copied());
            let (m, sd) = mean_std(it);
            profile_mean[gi] = m;
            profile_std[gi] = floor_spread(sd);
        }
        Ok(Self {
            field_mean,
            field_std,
            feature_mean: [im, zm],
            feature_std: [floor_spread(is), floor_spread(zs)],
            profile_mean,
            profile_std,
        })
    }

    pub fn normalize_fields(&self, fields: &Matrix) -> Matrix {
        let mut out = fields.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.field_mean[c]) / self.field_std[c];
            }
        }
        out
    }

    pub fn denormalize_fields(&self, fields: &Matrix) -> Matrix {
        let mut out = fields.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.field_std[c] + self.field_mean[c];
            }
        }
        out
    }

    pub fn normalize_profile(&self, sample: &FlowSample) -> Result<Vec<f64>> {
        let mut p = profile_features(sample)?;
        for (i, v) in p.iter_mut().enumerate() {
            let gi = i / N_LEVELS;
            *v = (*v - self.profile_mean[gi]) / self.profile_std[gi];
        }
        debug_assert_eq!(p.len(), PROFILE_LEN);
        Ok(p)
    }

    pub fn normalized_features(&self, sample: &FlowSample) -> [f64; 2] {
        [
            (sample.stability.inv_lmo - self.feature_mean[0]) / self.feature_std[0],
            (sample.stability.z0 - self.feature_mean[1]) / self.feature_std[1],
        ]
    }

    pub fn to_header(&self) -> BTreeMap<String, String> {
        let mut h = BTreeMap::new();
        for c in 0..N_FIELDS {
            h.insert(format!("stats.field.{}.mean", FIELD_NAMES[c]), self.field_mean[c].to_string());
            h.insert(format!("stats.field.{}.std", FIELD_NAMES[c]), self.field_std[c].to_string());
        }
        for i in 0..2 {
            h.insert(format!("stats.feature.{}.mean", FEATURE_NAMES[i]), self.feature_mean[i].to_string());
            h.insert(format!("stats.feature.{}.std", FEATURE_NAMES[i]), self.feature_std[i].to_string());
        }
        for i in 0..4 {
            h.insert(format!("stats.profile.{}.mean", PROFILE_GROUPS[i]), self.profile_mean[i].to_string());
            h.insert(format!("stats.profile.{}.std", PROFILE_GROUPS[i]), self.profile_std[i].to_string());
        }
        h
    }

    pub fn from_header(h: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: String| -> Result<f64> {
            h.get(&k)
                .ok_or_else(|| Error::Config(format!("missing header key `{k}`")))?
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("header key `{k}`: {e}")))
        };
        let mut s = Self {
            field_mean: [0.0; N_FIELDS],
            field_std: [0.0; N_FIELDS],
            feature_mean: [0.0; 2],
            feature_std: [0.0; 2],
            profile_mean: [0.0; 4],
            profile_std: [0.0; 4],
        };
        for c in 0..N_FIELDS {
            s.field_mean[c] = get(format!("stats.field.{}.mean", FIELD_NAMES[c]))?;
            s.field_std[c] = get(format!("stats.field.{}.std", FIELD_NAMES[c]))?;
        }
        for i in 0..2 {
            s.feature_mean[i] = get(format!("stats.feature.{}.mean", FEATURE_NAMES[i]))?;
            s.feature_std[i] = get(format!("stats.feature.{}.std", FEATURE_NAMES[i]))?;
        }
        for i in 0..4 {
            s.profile_mean[i] = get(format!("stats.profile.{}.mean", PROFILE_GROUPS[i]))?;
            s.profile_std[i] = get(format!("stats.profile.{}.std", PROFILE_GROUPS[i]))?;
        }
        Ok(s)
    }
}

/// Maps zone-of-interest meters to `[0, 1000]` per axis.
pub fn normalize_coords(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        for (a, v) in out.row_mut(r).iter_mut().enumerate() {
            *v *= COORD_SPAN / ZONE[a];
        }
    }
    out
}

pub fn denormalize_coords(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        for (a, v) in out.row_mut(r).iter_mut().enumerate() {
            *v *= ZONE[a] / COORD_SPAN;
        }
    }
    out
}

/// Model-ready view of a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedSample {
    pub inputs: ModelInputs,
    pub fields: Matrix,
}

pub fn normalize_sample(sample: &FlowSample, stats: &NormalizationStats) -> Result<NormalizedSample> {
    let feat = stats.normalized_features(sample);
    let mut features = Matrix::zeros(sample.terrain.rows(), 2);
    for r in 0..features.rows() {
        features.row_mut(r).copy_from_slice(&feat);
    }
    Ok(NormalizedSample {
        inputs: ModelInputs {
            geometry: GeometryInputs {
                terrain: PointCloud::new(normalize_coords(&sample.terrain), features)?,
                obstacles: PointCloud::without_features(normalize_coords(&sample.obstacles))?,
            },
            profile: stats.normalize_profile(sample)?,
            volume: normalize_coords(&sample.volume),
        },
        fields: stats.normalize_fields(&sample.fields),
    })
}
