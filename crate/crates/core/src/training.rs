//! Loss, learning-rate schedule, Adam, the training loop and finite-difference
//! gradient verification.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::dataset::NormalizedSample;
use crate::error::{Error, Result};
use crate::model::{ForwardDraw, ModelInputs, ModelWeights};
use crate::nn::ParamStore;
use crate::tensor::Matrix;

pub const ONECYCLE_START_DIV: f64 = 25.0;
pub const ONECYCLE_FINAL_DIV: f64 = 1e4;
pub const ONECYCLE_WARMUP: f64 = 0.3;

/// Mean of squared differences over every entry.
pub fn mse_loss(pred: &Matrix, truth: &Matrix) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let n = pred.as_slice().len();
    if n == 0 {
        return Err(Error::Shape("empty prediction".into()));
    }
    let s: f64 = pred.as_slice().iter().zip(truth.as_slice()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(s / n as f64)
}

/// Step at which the schedule peaks.
pub fn onecycle_peak(total_steps: usize) -> usize {
    ((total_steps as f64 * ONECYCLE_WARMUP).round() as usize).min(total_steps.saturating_sub(1))
}

/// Cosine warmup from `max_lr / 25` to `max_lr`, then cosine decay to `max_lr / 1e4`.
pub fn onecycle_lr(step: usize, total_steps: usize, max_lr: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::InvalidInput(format!("step {step} outside schedule of {total_steps} steps")));
    }
    let peak = onecycle_peak(total_steps);
    let start = max_lr / ONECYCLE_START_DIV;
    let end = max_lr / ONECYCLE_FINAL_DIV;
    let cos_mix = |from: f64, to: f64, frac: f64| to + (from - to) * 0.5 * (1.0 + (PI * frac).cos());
    Ok(if step == peak {
        max_lr
    } else if step < peak {
        cos_mix(start, max_lr, step as f64 / peak as f64)
    } else {
        cos_mix(max_lr, end, (step - peak) as f64 / (total_steps - 1 - peak) as f64)
    })
}

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Matrix>, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!("gradient of `{name}` has shape {:?}", g.shape())));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
            for (((w, &gi), mi), vi) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossPolicy {
    AllPoints,
    AnchorsOnly,
}

impl std::str::FromStr for LossPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-points" => Ok(Self::AllPoints),
            "anchors-only" => Ok(Self::AnchorsOnly),
            _ => Err(Error::Config(format!("unknown loss policy `{s}`; expected all-points or anchors-only"))),
        }
    }
}

impl std::fmt::Display for LossPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::AllPoints => "all-points",
            Self::AnchorsOnly => "anchors-only",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub seed: u64,
    pub loss_policy: LossPolicy,
    /// Volume points drawn per step, capped at what a sample holds.
    pub n_vol: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 1,
            max_lr: 1e-3,
            seed: 0,
            loss_policy: LossPolicy::AllPoints,
            n_vol: 4096,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.epochs == 0 {
            bad.push("epochs must be at least 1".to_string());
        }
        if self.batch_size != 1 {
            bad.push(format!("batch_size={} is unsupported; only 1", self.batch_size));
        }
        if !(self.max_lr >= 0.0 && self.max_lr.is_finite()) {
            bad.push(format!("max_lr={} must be a finite non-negative number", self.max_lr));
        }
        if self.n_vol == 0 {
            bad.push("n_vol must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    /// Validation loss after each epoch, when a validation set was given.
    pub valid_loss: Vec<f64>,
}

impl TrainReport {
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "step,lr,loss")?;
        for r in &self.trace {
            writeln!(out, "{},{:e},{:e}", r.step, r.lr, r.loss)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

fn round_f32(params: &ParamStore) -> ParamStore {
    params
        .iter()
        .map(|(k, m)| {
            let mut m = m.clone();
            for v in m.as_mut_slice() {
                *v = *v as f32 as f64;
            }
            (k.clone(), m)
        })
        .collect()
}

/// Random volume subset of a sample with matching targets.
fn subsample<R: Rng + ?Sized>(s: &NormalizedSample, n_vol: usize, rng: &mut R) -> (ModelInputs, Matrix) {
    let n = s.inputs.volume.rows();
    if n_vol >= n {
        return (s.inputs.clone(), s.fields.clone());
    }
    let mut rows = index::sample(rng, n, n_vol).into_vec();
    rows.sort_unstable();
    let inputs = ModelInputs {
        volume: s.inputs.volume.gather_rows(&rows),
        ..s.inputs.clone()
    };
    (inputs, s.fields.gather_rows(&rows))
}

/// Loss and parameter gradients of one forward pass.
pub fn loss_and_grads(
    weights: &ModelWeights,
    inputs: &ModelInputs,
    target: &Matrix,
    draw: &ForwardDraw,
    policy: LossPolicy,
) -> Result<(f64, BTreeMap<String, Matrix>)> {
    let mut g = Graph::new();
    let y = weights.forward_graph(&mut g, inputs, draw)?;
    let rows = match policy {
        LossPolicy::AllPoints => None,
        LossPolicy::AnchorsOnly => Some(draw.anchors.clone()),
    };
    let loss = g.mse(y, target.clone(), rows)?;
    let value = g.value(loss).get(0, 0);
    let grads = g.backward(loss)?;
    Ok((value, grads))
}

/// Mean full-volume MSE with anchors drawn from `seed`.
pub fn evaluate_loss(weights: &ModelWeights, samples: &[NormalizedSample], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for s in samples {
        let pred = weights.forward(&s.inputs, &mut rng)?;
        total += mse_loss(&pred, &s.fields)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Optimizes `weights` in place. One step per training sample per epoch,
/// samples visited in a freshly shuffled order each epoch.
pub fn train(
    weights: &mut ModelWeights,
    train_set: &[NormalizedSample],
    valid_set: &[NormalizedSample],
    config: &TrainConfig,
    mut on_step: impl FnMut(&TraceRow),
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let total = config.epochs * train_set.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut master = weights.params.clone();
    let mut adam = Adam::default();
    let mut report = TrainReport {
        trace: Vec::with_capacity(total),
        valid_loss: Vec::new(),
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (inputs, target) = subsample(&train_set[i], config.n_vol, &mut rng);
            let draw = weights.draw(&inputs.geometry, inputs.volume.rows(), &mut rng)?;
            let (loss, grads) = loss_and_grads(weights, &inputs, &target, &draw, config.loss_policy)?;
            if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite loss or gradient at step {step}")));
            }
            let lr = onecycle_lr(step, total, config.max_lr)?;
            adam.step(&mut master, &grads, lr)?;
            weights.params = round_f32(&master);
            let row = TraceRow { step, lr, loss };
            on_step(&row);
            report.trace.push(row);
            step += 1;
        }
        if !valid_set.is_empty() {
            report.valid_loss.push(evaluate_loss(weights, valid_set, config.seed)?);
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub entries: Vec<GradientEntry>,
}

impl GradientReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }
}

/// Denominator floor for relative errors of vanishing gradients.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Central differences of `loss` against `analytic` for `n` parameters chosen
/// by first drawing a tensor uniformly, then an entry within it.
pub fn check_gradients(
    params: &ParamStore,
    analytic: &BTreeMap<String, Matrix>,
    loss: impl Fn(&ParamStore) -> Result<f64>,
    n: usize,
    h: f64,
    seed: u64,
) -> Result<GradientReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<&String> = params.keys().collect();
    let mut entries = Vec::with_capacity(n);
    let mut probe = params.clone();
    for _ in 0..n {
        let name = names[rng.random_range(0..names.len())];
        let len = params[name].as_slice().len();
        let index = rng.random_range(0..len);
        let base = params[name].as_slice()[index];
        probe.get_mut(name).unwrap().as_mut_slice()[index] = base + h;
        let up = loss(&probe)?;
        probe.get_mut(name).unwrap().as_mut_slice()[index] = base - h;
        let down = loss(&probe)?;
        probe.get_mut(name).unwrap().as_mut_slice()[index] = base;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.get(name).map_or(0.0, |g| g.as_slice()[index]);
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        entries.push(GradientEntry {
            name: name.clone(),
            index,
            analytic: a,
            numeric,
            rel_error,
        });
    }
    Ok(GradientReport { entries })
}

/// Replaces every parameter with a generic value of scale `spread`: matrices
/// `N(0, spread^2)`, biases and shifts uniform in `±spread`, norm scales in
/// `1 ± spread`. Away from the near-zero initialization, step `h = 1e-3`
/// central differences resolve the normalization layers accurately.
pub fn generic_params(params: &ParamStore, spread: f64, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::Normal::new(0.0, spread).expect("finite spread");
    params
        .iter()
        .map(|(name, m)| {
            let mut m = m.clone();
            for v in m.as_mut_slice() {
                *v = if name.ends_with(".weight") {
                    rng.sample(normal)
                } else if name.ends_with(".scale") {
                    1.0 + rng.random_range(-spread..=spread)
                } else {
                    rng.random_range(-spread..=spread)
                };
            }
            (name.clone(), m)
        })
        .collect()
}

/// Finite-difference check of the full model loss on one sample with a fixed draw.
pub fn gradient_check(
    weights: &ModelWeights,
    inputs: &ModelInputs,
    target: &Matrix,
    n_params: usize,
    h: f64,
    seed: u64,
) -> Result<GradientReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = weights.draw(&inputs.geometry, inputs.volume.rows(), &mut rng)?;
    let (_, grads) = loss_and_grads(weights, inputs, target, &draw, LossPolicy::AllPoints)?;
    let loss = |p: &ParamStore| -> Result<f64> {
        let probe = ModelWeights {
            arch: weights.arch.clone(),
            params: p.clone(),
            stats: None,
        };
        let mut g = Graph::new();
        let y = probe.forward_graph(&mut g, inputs, &draw)?;
        mse_loss(g.value(y), target)
    };
    check_gradients(&weights.params, &grads, loss, n_params, h, rng.random())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DenseLayer;
    use proptest::prelude::*;

    #[test]
    fn mse_examples() {
        let t = Matrix::from_vec(2, 7, (0..14).map(|i| i as f64 * 0.3).collect()).unwrap();
        assert_eq!(mse_loss(&t, &t).unwrap(), 0.0);
        let mut p = t.clone();
        p.as_mut_slice().iter_mut().for_each(|v| *v += 1.0);
        assert!((mse_loss(&p, &t).unwrap() - 1.0).abs() < 1e-12);
        let q = Matrix::from_vec(2, 7, (0..14).map(|i| (i as f64).cos()).collect()).unwrap();
        let mut s = 0.0;
        for r in 0..2 {
            for c in 0..7 {
                s += (q.get(r, c) - t.get(r, c)) * (q.get(r, c) - t.get(r, c));
            }
        }
        assert!((mse_loss(&q, &t).unwrap() - s / 14.0).abs() < 1e-12);
        assert!(mse_loss(&q, &Matrix::zeros(1, 7)).is_err());
    }

    #[test]
    fn onecycle_shape() {
        let max = 1e-3;
        assert_eq!(onecycle_lr(30, 100, max).unwrap(), max);
        assert!((onecycle_lr(0, 100, max).unwrap() - max / 25.0).abs() < 1e-18);
        assert!((onecycle_lr(99, 100, max).unwrap() - max / 1e4).abs() < 1e-18);
        let lrs: Vec<f64> = (0..100).map(|s| onecycle_lr(s, 100, max).unwrap()).collect();
        assert!(lrs[..=30].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[30..].windows(2).all(|w| w[0] > w[1]));
        assert!(onecycle_lr(100, 100, max).is_err());
        assert_eq!(onecycle_lr(0, 1, max).unwrap(), max);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = ParamStore::new();
        p.insert("w".into(), Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap());
        let before = p.clone();
        let mut g = BTreeMap::new();
        g.insert("w".into(), Matrix::zeros(1, 3));
        let mut adam = Adam::default();
        for _ in 0..3 {
            adam.step(&mut p, &g, 1e-2).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_oracle() {
        let mut p = ParamStore::new();
        p.insert("w".into(), Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap());
        let mut g = BTreeMap::new();
        g.insert("w".into(), Matrix::from_vec(1, 2, vec![0.2, -4.0]).unwrap());
        Adam::default().step(&mut p, &g, 0.1).unwrap();
        // bias-corrected first step moves each weight by lr * g / (|g| + eps)
        let w = p["w"].as_slice();
        assert!((w[0] - (1.0 - 0.1 * 0.2 / (0.2 + 1e-8))).abs() < 1e-12);
        assert!((w[1] - (1.0 + 0.1 * 4.0 / (4.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn linear_head_gradient_exact() {
        let layer = DenseLayer::new("toy", 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = crate::nn::init_params(&crate::nn::Parameterized::param_specs(&layer), &mut rng);
        let x = Matrix::from_vec(5, 4, (0..20).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let t = Matrix::from_vec(5, 3, (0..15).map(|i| (i as f64 * 0.3).cos()).collect()).unwrap();
        let run = |p: &ParamStore| -> Result<(f64, BTreeMap<String, Matrix>)> {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let y = layer.forward(&mut g, p, xi)?;
            let l = g.mse(y, t.clone(), None)?;
            let v = g.value(l).get(0, 0);
            Ok((v, g.backward(l)?))
        };
        let (_, grads) = run(&params).unwrap();
        let report = check_gradients(&params, &grads, |p| Ok(run(p)?.0), 40, 1e-3, 1).unwrap();
        for e in &report.entries {
            assert!((e.analytic - e.numeric).abs() < 1e-8, "{e:?}");
        }
    }

    #[test]
    fn trace_csv_format() {
        let r = TrainReport {
            trace: vec![TraceRow {
                step: 0,
                lr: 4e-5,
                loss: 1.5,
            }],
            valid_loss: vec![],
        };
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,lr,loss\n0,4e-5,1.5e0\n");
    }

    proptest! {
        #[test]
        fn onecycle_bounded(total in 2usize..400, frac in 0.0f64..1.0, max in 1e-6f64..1.0) {
            let step = ((total as f64) * frac) as usize;
            let lr = onecycle_lr(step.min(total - 1), total, max).unwrap();
            prop_assert!(lr >= max / ONECYCLE_FINAL_DIV * (1.0 - 1e-12) && lr <= max * (1.0 + 1e-12));
        }

        #[test]
        fn mse_nonnegative_and_symmetric(v in prop::collection::vec(-1e3f64..1e3, 14), w in prop::collection::vec(-1e3f64..1e3, 14)) {
            let a = Matrix::from_vec(2, 7, v).unwrap();
            let b = Matrix::from_vec(2, 7, w).unwrap();
            let ab = mse_loss(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, mse_loss(&b, &a).unwrap());
        }
    }
}
