use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::geometry::StabilityClass;
use crate::error::{Error, Result};

/// Reference split sizes: 138 train, 10 validation, 80 test out of 228.
pub const REFERENCE_TOTAL: usize = 228;
pub const REFERENCE_VALID: usize = 10;
pub const REFERENCE_TEST: usize = 80;
/// Geometries reused across several stabilities in the reference dataset.
pub const REFERENCE_REPEATED: usize = 3;
pub const REPEAT_STABILITIES: usize = 6;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

fn scaled(n: usize, part: usize) -> usize {
    ((n * part) as f64 / REFERENCE_TOTAL as f64).round() as usize
}

/// `(train, valid, test)` sizes, proportional to the reference split.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let floor = if n >= 20 { 2 } else { 1 };
    let valid = scaled(n, REFERENCE_VALID).max(floor);
    let test = scaled(n, REFERENCE_TEST).max(floor);
    (n - valid - test, valid, test)
}

/// Number of repeated-geometry groups for a dataset of `n` samples.
pub fn repeated_groups(n: usize) -> usize {
    scaled(n, REFERENCE_REPEATED).min(n / REPEAT_STABILITIES)
}

/// Assigns samples to splits. `forced_train` samples (the repeated-geometry
/// groups) always go to training. Each class is first seeded into every split
/// lacking it (unstable, stable, then neutral), then the validation and test splits are filled at random.
pub fn build_splits<R: Rng + ?Sized>(
    classes: &[StabilityClass],
    forced_train: &[usize],
    rng: &mut R,
) -> Result<SplitPlan> {
    let n = classes.len();
    if n < 10 {
        return Err(Error::InvalidInput(format!("need at least 10 samples to split, got {n}")));
    }
    let (n_train, n_valid, n_test) = split_sizes(n);
    let forced: BTreeSet<usize> = forced_train.iter().copied().collect();
    if forced.len() > n_train || forced.iter().any(|&i| i >= n) {
        return Err(Error::InvalidInput(format!(
            "{} forced training samples do not fit a training split of {n_train}",
            forced.len()
        )));
    }
    let mut pool: Vec<usize> = (0..n).filter(|i| !forced.contains(i)).collect();
    pool.shuffle(rng);

    let mut plan = SplitPlan {
        train: forced.iter().copied().collect(),
        ..Default::default()
    };
    let targets = [n_train, n_valid, n_test];
    for class in [StabilityClass::Unstable, StabilityClass::Stable, StabilityClass::Neutral] {
        for (s, &target) in targets.iter().enumerate() {
            let split = match s {
                0 => &mut plan.train,
                1 => &mut plan.valid,
                _ => &mut plan.test,
            };
            if split.len() >= target || split.iter().any(|&i| classes[i] == class) {
                continue;
            }
            if let Some(pos) = pool.iter().position(|&i| classes[i] == class) {
                split.push(pool.remove(pos));
            }
        }
    }
    while plan.valid.len() < n_valid {
        plan.valid.push(pool.remove(0));
    }
    while plan.test.len() < n_test {
        plan.test.push(pool.remove(0));
    }
    plan.train.extend(pool);
    for split in [&mut plan.train, &mut plan.valid, &mut plan.test] {
        split.sort_unstable();
    }
    for (name, split) in [("train", &plan.train), ("valid", &plan.valid), ("test", &plan.test)] {
        for class in StabilityClass::ALL {
            let available = classes.iter().filter(|&&c| c == class).count();
            if available >= 3 && !split.iter().any(|&i| classes[i] == class) {
                log::warn!("{name} split has no {} sample", class.name());
            }
        }
    }
    Ok(plan)
}
