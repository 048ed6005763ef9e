//! Synthetic box-city dataset: geometry, stability, analytic flow fields,
//! normalization, on-disk format and split manifest.

pub mod geometry;
pub mod io;
pub mod oracle;
pub mod splits;
pub mod stats;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use geometry::{
    extract_point_clouds, generate_geometry, sample_stability, Building, GeometrySample, PointCounts, StabilityClass,
};
pub use io::{read_sample, write_sample};
pub use oracle::oracle_flow;
pub use splits::{build_splits, SplitPlan};
pub use stats::{denormalize_coords, normalize_coords, normalize_sample, NormalizationStats, NormalizedSample};

use crate::error::{Error, Result};
use crate::profiles::StabilityParams;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    /// Samples sharing a geometry share this id.
    pub geometry_id: u64,
    pub geometry: GeometrySample,
    pub stability: StabilityParams,
    /// Meters, `n x 3`.
    pub terrain: Matrix,
    pub obstacles: Matrix,
    pub volume: Matrix,
    /// `(vx, vy, vz, p, theta, log10 k, log10 eps)` per volume point.
    pub fields: Matrix,
}

impl FlowSample {
    pub fn class(&self) -> StabilityClass {
        StabilityClass::of(&self.stability)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetConfig {
    pub n_buildings: usize,
    pub counts: PointCounts,
}

impl DatasetConfig {
    pub fn desk() -> Self {
        Self {
            n_buildings: 8,
            counts: PointCounts {
                terrain: 512,
                obstacles: 512,
                volume: 2048,
            },
        }
    }

    pub fn full_scale() -> Self {
        Self {
            n_buildings: 35,
            counts: PointCounts {
                terrain: 4096,
                obstacles: 4096,
                volume: 16384,
            },
        }
    }
}

fn round_f32(m: &mut Matrix) {
    for v in m.as_mut_slice() {
        *v = *v as f32 as f64;
    }
}

/// One sample for a given geometry and stability; stored arrays are rounded
/// to single precision so the file round trip is exact.
pub fn generate_sample<R: Rng + ?Sized>(
    geometry_id: u64,
    geometry: GeometrySample,
    stability: StabilityParams,
    counts: PointCounts,
    rng: &mut R,
) -> Result<FlowSample> {
    let (mut terrain, mut obstacles, mut volume) = extract_point_clouds(&geometry, counts, rng)?;
    for m in [&mut terrain, &mut obstacles, &mut volume] {
        round_f32(m);
    }
    for r in 0..volume.rows() {
        while geometry.contains(volume.row(r)) {
            let p = [
                rng.random_range(0.0..=geometry::ZONE[0]) as f32 as f64,
                rng.random_range(0.0..=geometry::ZONE[1]) as f32 as f64,
                rng.random_range(0.0..=geometry::ZONE[2]) as f32 as f64,
            ];
            volume.row_mut(r).copy_from_slice(&p);
        }
    }
    let mut fields = oracle_flow(&geometry, &stability, &volume)?;
    round_f32(&mut fields);
    Ok(FlowSample {
        geometry_id,
        geometry,
        stability,
        terrain,
        obstacles,
        volume,
        fields,
    })
}

/// Generated samples with the indices of repeated-geometry group members.
pub struct GeneratedDataset {
    pub samples: Vec<FlowSample>,
    pub repeated: Vec<usize>,
}

/// `n` samples from `seed`. The first `6 * groups` samples form repeated
/// geometry groups of six stabilities each.
pub fn generate_dataset(config: &DatasetConfig, n: usize, seed: u64) -> Result<GeneratedDataset> {
    if config.n_buildings == 0 {
        return Err(Error::Config("at least one building is required".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let groups = splits::repeated_groups(n);
    let group_seeds: Vec<u64> = (0..groups).map(|_| master.random()).collect();
    let sample_seeds: Vec<u64> = (0..n).map(|_| master.random()).collect();
    let repeated: Vec<usize> = (0..groups * splits::REPEAT_STABILITIES).collect();
    let samples = sample_seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let group = i / splits::REPEAT_STABILITIES;
            let (id, geometry) = if group < groups {
                let mut grng = ChaCha8Rng::seed_from_u64(group_seeds[group]);
                (group as u64, generate_geometry(&mut grng, config.n_buildings)?)
            } else {
                ((groups + i) as u64, generate_geometry(&mut rng, config.n_buildings)?)
            };
            let stability = sample_stability(&mut rng);
            generate_sample(id, geometry, stability, config.counts, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GeneratedDataset { samples, repeated })
}

pub const MANIFEST: &str = "manifest.txt";
pub const SPLIT_NAMES: [&str; 3] = ["train", "valid", "test"];

pub fn sample_file_name(index: usize) -> String {
    format!("sample_{index:05}.bin")
}

/// Writes each sample to `<split>/sample_NNNNN.bin` under `dir` and a
/// manifest of the sorted relative paths.
pub fn write_dataset(dir: &Path, samples: &[FlowSample], plan: &SplitPlan) -> Result<Vec<String>> {
    let mut entries = Vec::with_capacity(samples.len());
    for (name, split) in SPLIT_NAMES.iter().zip([&plan.train, &plan.valid, &plan.test]) {
        fs::create_dir_all(dir.join(name))?;
        for &i in split {
            let rel = format!("{name}/{}", sample_file_name(i));
            write_sample(&samples[i], &dir.join(&rel))?;
            entries.push(rel);
        }
    }
    entries.sort();
    let mut text = entries.join("\n");
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)?;
    Ok(entries)
}

/// Paths of one split listed in the dataset manifest.
pub fn manifest_split(dir: &Path, split: &str) -> Result<Vec<PathBuf>> {
    if !SPLIT_NAMES.contains(&split) {
        return Err(Error::Config(format!("unknown split `{split}`; expected train, valid or test")));
    }
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::InvalidInput(format!("cannot read dataset manifest {}: {e}", path.display()))
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| l.split('/').next() == Some(split))
        .map(|l| dir.join(l))
        .collect())
}

pub fn load_split(dir: &Path, split: &str) -> Result<Vec<FlowSample>> {
    manifest_split(dir, split)?.iter().map(|p| read_sample(p)).collect()
}
