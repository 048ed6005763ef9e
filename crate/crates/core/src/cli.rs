//! Command-line front end: `gen-data`, `train`, `eval`, `predict`, `ablate`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::dataset::{
    self, build_splits, generate_dataset, geometry::ZONE, manifest_split, normalize_coords, normalize_sample,
    read_sample, DatasetConfig, FlowSample, NormalizationStats, NormalizedSample, StabilityClass,
};
use crate::error::{Error, Result};
use crate::metrics::{self, aggregate_by_class, compute_metrics, format_table, Metric, SampleMetrics, METRIC_FIELDS};
use crate::model::{
    build, exponentiate_turbulence, load_weights, load_weights_expecting, to_physical, ModelInputs, ModelWeights,
    Variant, DEFAULT_CHUNK,
};
use crate::runconfig::RunConfig;
use crate::tensor::Matrix;
use crate::training::{evaluate_loss, train, TrainReport};

pub const THREADS_ENV: &str = "ABSWIFT_THREADS";
const SPLIT_SEED_SALT: u64 = 0x5EED_5B11;

#[derive(Parser, Debug)]
#[command(name = "abswift", version, about = "Urban atmospheric flow surrogate: data, training, evaluation, prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with a split manifest.
    GenData(GenDataArgs),
    /// Train a model on the training split.
    Train(TrainArgs),
    /// Evaluate weights on a split.
    Eval(EvalArgs),
    /// Predict fields at given points or on a horizontal slice.
    Predict(PredictArgs),
    /// Train and evaluate several ablation variants under one seed.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Buildings per sample; defaults to the preset's value.
    #[arg(long)]
    pub buildings: Option<usize>,
    #[arg(long, conflicts_with = "paper_scale")]
    pub desk: bool,
    /// Full-scale point counts and building density.
    #[arg(long)]
    pub paper_scale: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from an existing weight file with the same configuration.
    #[arg(long)]
    pub resume_from: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Replace model predictions: `mean` (per-sample mean) or `truth`.
    #[arg(long)]
    pub baseline: Option<String>,
    #[arg(long, default_value_t = DEFAULT_CHUNK)]
    pub chunk: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub sample: PathBuf,
    /// CSV of `x,y,z` in meters.
    #[arg(long, conflicts_with = "slice")]
    pub points: Option<PathBuf>,
    /// Horizontal slice such as `z=2`.
    #[arg(long)]
    pub slice: Option<String>,
    /// Grid spacing of `--slice` in meters.
    #[arg(long, default_value_t = 2.0)]
    pub spacing: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CHUNK)]
    pub chunk: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "1,2,3,4")]
    pub steps: String,
    #[arg(long, default_value = "test")]
    pub split: String,
}

/// Sizes the global thread pool from `ABSWIFT_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    // A pool built earlier in the same process is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Predict(a) => cmd_predict(&a).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(&a).map(|_| ()),
    }
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let mut cfg = if a.paper_scale {
        DatasetConfig::full_scale()
    } else {
        DatasetConfig::desk()
    };
    if let Some(b) = a.buildings {
        if b == 0 {
            return Err(Error::Config("--buildings must be at least 1".into()));
        }
        cfg.n_buildings = b;
    }
    let data = generate_dataset(&cfg, a.n_samples, a.seed)?;
    let classes: Vec<StabilityClass> = data.samples.iter().map(FlowSample::class).collect();
    let plan = build_splits(&classes, &data.repeated, &mut ChaCha8Rng::seed_from_u64(a.seed ^ SPLIT_SEED_SALT))?;
    fs::create_dir_all(&a.out)?;
    dataset::write_dataset(&a.out, &data.samples, &plan)?;
    println!(
        "wrote {} samples to {}: train {}, valid {}, test {}",
        a.n_samples,
        a.out.display(),
        plan.train.len(),
        plan.valid.len(),
        plan.test.len()
    );
    println!("{:<8}{:>10}{:>10}{:>10}", "split", "unstable", "neutral", "stable");
    for (name, split) in dataset::SPLIT_NAMES.iter().zip([&plan.train, &plan.valid, &plan.test]) {
        let count = |c: StabilityClass| split.iter().filter(|&&i| classes[i] == c).count();
        println!(
            "{name:<8}{:>10}{:>10}{:>10}",
            count(StabilityClass::Unstable),
            count(StabilityClass::Neutral),
            count(StabilityClass::Stable)
        );
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn normalize_all(samples: &[FlowSample], stats: &NormalizationStats) -> Result<Vec<NormalizedSample>> {
    samples.iter().map(|s| normalize_sample(s, stats)).collect()
}

/// Rejects data whose clouds cannot feed the model's supernode pooling.
fn check_compatible(w: &ModelWeights, samples: &[FlowSample]) -> Result<()> {
    let c = w.config();
    for s in samples {
        let split = w.arch.geometry.is_split();
        let (need_t, need_o) = if split { (c.n_gnd_sn, c.n_obs_sn) } else { (0, 0) };
        let merged_short = !split && s.terrain.rows() + s.obstacles.rows() < c.n_gnd_sn + c.n_obs_sn;
        if s.terrain.rows() < need_t || s.obstacles.rows() < need_o || merged_short {
            return Err(Error::Config(format!(
                "weights expect at least {} terrain and {} obstacle points, data has {} and {}",
                c.n_gnd_sn,
                c.n_obs_sn,
                s.terrain.rows(),
                s.obstacles.rows()
            )));
        }
    }
    Ok(())
}

/// Summary of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub report: TrainReport,
    pub initial_valid_loss: Option<f64>,
    pub final_valid_loss: Option<f64>,
}

fn train_with(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    let train_raw = dataset::load_split(data, "train")?;
    let valid_raw = dataset::load_split(data, "valid")?;
    if train_raw.is_empty() {
        return Err(Error::InvalidInput(format!("training split of {} is empty", data.display())));
    }
    let mut weights = match resume {
        Some(p) => load_weights_expecting(p, &cfg.model)?,
        None => build(&cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?,
    };
    let stats = match &weights.stats {
        Some(s) => s.clone(),
        None => NormalizationStats::compute(&train_raw)?,
    };
    weights.stats = Some(stats.clone());
    check_compatible(&weights, &train_raw)?;
    let train_set = normalize_all(&train_raw, &stats)?;
    let valid_set = normalize_all(&valid_raw, &stats)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let initial = if valid_set.is_empty() {
        None
    } else {
        Some(evaluate_loss(&weights, &valid_set, cfg.eval_seed)?)
    };
    let total = cfg.train.epochs * train_set.len();
    let every = (total / 20).max(1);
    let report = train(&mut weights, &train_set, &[], &cfg.train, |r| {
        if r.step % every == 0 || r.step + 1 == total {
            log::info!("step {}/{} lr {:.3e} loss {:.5e}", r.step + 1, total, r.lr, r.loss);
        }
    })?;
    report.save_csv(&out.join("loss.csv"))?;
    weights.save(&out.join("weights.bin"))?;
    let final_valid = if valid_set.is_empty() {
        None
    } else {
        Some(evaluate_loss(&weights, &valid_set, cfg.eval_seed)?)
    };
    let last_epoch = &report.trace[report.trace.len().saturating_sub(train_set.len())..];
    let train_loss = last_epoch.iter().map(|r| r.loss).sum::<f64>() / last_epoch.len() as f64;
    println!("final train loss {train_loss:.6e}");
    if let (Some(i), Some(f)) = (initial, final_valid) {
        println!("validation loss {i:.6e} -> {f:.6e}");
    }
    Ok(TrainOutcome {
        weights,
        report,
        initial_valid_loss: initial,
        final_valid_loss: final_valid,
    })
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainOutcome> {
    let cfg = load_config(a.config.as_deref())?;
    train_with(&cfg, &a.data, &a.out, a.resume_from.as_deref())
}

/// Physical fields of a stored sample, with k and eps exponentiated.
pub fn physical_truth(sample: &FlowSample) -> Matrix {
    let mut t = sample.fields.clone();
    exponentiate_turbulence(&mut t);
    t
}

/// Physical-unit prediction over every stored volume point of `sample`.
pub fn predict_sample(w: &ModelWeights, sample: &FlowSample, chunk: usize, seed: u64) -> Result<Matrix> {
    let stats = w.stats()?;
    let ns = normalize_sample(sample, stats)?;
    let draw = w.draw(&ns.inputs.geometry, ns.inputs.volume.rows(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let out = w.predict_chunked(&ns.inputs, &draw, &ns.inputs.volume, chunk)?;
    Ok(to_physical(&ns.inputs.volume, &out, stats).fields)
}

fn sample_name(path: &Path, data: &Path) -> String {
    path.strip_prefix(data).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

fn evaluate_split(
    w: Option<&ModelWeights>,
    data: &Path,
    split: &str,
    baseline: Option<&str>,
    chunk: usize,
    seed: u64,
) -> Result<Vec<SampleMetrics>> {
    let paths = manifest_split(data, split)?;
    if paths.is_empty() {
        return Err(Error::InvalidInput(format!("split `{split}` of {} is empty", data.display())));
    }
    let samples = paths.iter().map(|p| read_sample(p)).collect::<Result<Vec<_>>>()?;
    if let Some(w) = w {
        check_compatible(w, &samples)?;
    }
    let mut out = Vec::with_capacity(samples.len());
    for (i, (p, s)) in paths.iter().zip(&samples).enumerate() {
        let truth = physical_truth(s);
        let pred = match (baseline, w) {
            (Some("mean"), _) => metrics::mean_predictor(&truth),
            (Some("truth"), _) => truth.clone(),
            (Some(b), _) => return Err(Error::Config(format!("unknown baseline `{b}`; expected mean or truth"))),
            (None, Some(w)) => predict_sample(w, s, chunk, seed.wrapping_add(i as u64))?,
            (None, None) => return Err(Error::Config("no weights to evaluate".into())),
        };
        out.push(compute_metrics(&sample_name(p, data), &pred, &truth, s.class())?);
    }
    Ok(out)
}

fn write_metric_reports(out: &Path, per_sample: &[SampleMetrics]) -> Result<String> {
    fs::create_dir_all(out)?;
    let mut lines = String::new();
    for s in per_sample {
        for l in s.json_lines() {
            lines.push_str(&l);
            lines.push('\n');
        }
    }
    fs::write(out.join("metrics.jsonl"), lines)?;
    let by_class = aggregate_by_class(per_sample);
    let json: BTreeMap<&String, serde_json::Value> =
        by_class.iter().map(|(k, rows)| (k, metrics::aggregate_json(rows))).collect();
    fs::write(out.join("aggregate.json"), serde_json::to_string_pretty(&json).expect("serializable"))?;
    let mut text = String::new();
    for (class, rows) in &by_class {
        text.push_str(&format!("[{class}]\n{}\n", format_table(rows)));
    }
    fs::write(out.join("aggregate.txt"), &text)?;
    Ok(text)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Vec<SampleMetrics>> {
    let weights = match a.baseline {
        Some(_) => None,
        None => Some(load_weights(&a.weights)?),
    };
    let per_sample = evaluate_split(weights.as_ref(), &a.data, &a.split, a.baseline.as_deref(), a.chunk, a.seed)?;
    let text = write_metric_reports(&a.out, &per_sample)?;
    print!("{text}");
    Ok(per_sample)
}

fn parse_slice(s: &str) -> Result<f64> {
    let v = s.strip_prefix("z=").unwrap_or(s);
    v.parse::<f64>()
        .ok()
        .filter(|z| (0.0..=ZONE[2]).contains(z))
        .ok_or_else(|| Error::Config(format!("--slice expects z=<height in [0, {}]>, got `{s}`", ZONE[2])))
}

fn read_points(path: &Path) -> Result<Vec<[f64; 3]>> {
    let text = fs::read_to_string(path)?;
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<std::result::Result<f64, _>> = line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        if vals.iter().any(|v| v.is_err()) {
            if i == 0 {
                continue;
            }
            return Err(Error::InvalidInput(format!("{} line {}: `{line}` is not x,y,z", path.display(), i + 1)));
        }
        if vals.len() != 3 {
            return Err(Error::InvalidInput(format!("{} line {}: expected 3 values", path.display(), i + 1)));
        }
        pts.push([*vals[0].as_ref().unwrap(), *vals[1].as_ref().unwrap(), *vals[2].as_ref().unwrap()]);
    }
    Ok(pts)
}

/// Regular horizontal grid over the zone of interest at height `z`.
pub fn slice_points(z: f64, spacing: f64) -> Result<Vec<[f64; 3]>> {
    if !(spacing > 0.0) {
        return Err(Error::Config("--spacing must be positive".into()));
    }
    let nx = (ZONE[0] / spacing).floor() as usize;
    let ny = (ZONE[1] / spacing).floor() as usize;
    let mut pts = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            pts.push([i as f64 * spacing, j as f64 * spacing, z]);
        }
    }
    Ok(pts)
}

/// Number of rows written and points skipped inside buildings.
pub fn cmd_predict(a: &PredictArgs) -> Result<(usize, usize)> {
    let w = load_weights(&a.weights)?;
    let sample = read_sample(&a.sample)?;
    check_compatible(&w, std::slice::from_ref(&sample))?;
    let pts = match (&a.points, &a.slice) {
        (Some(p), _) => read_points(p)?,
        (None, Some(s)) => slice_points(parse_slice(s)?, a.spacing)?,
        (None, None) => return Err(Error::Config("one of --points or --slice is required".into())),
    };
    let kept: Vec<Vec<f64>> = pts
        .iter()
        .filter(|p| !sample.geometry.contains(&p[..]))
        .map(|p| p.to_vec())
        .collect();
    let skipped = pts.len() - kept.len();
    if skipped > 0 {
        eprintln!("skipped {skipped} points inside buildings");
    }
    let stats = w.stats()?;
    let ns = normalize_sample(&sample, stats)?;
    let queries = if kept.is_empty() {
        Matrix::zeros(0, 3)
    } else {
        normalize_coords(&Matrix::from_rows(&kept)?)
    };
    crate::encoders::check_normalized(&queries)?;
    let draw = w.draw(&ns.inputs.geometry, ns.inputs.volume.rows(), &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    let inputs: &ModelInputs = &ns.inputs;
    let out = w.predict_chunked(inputs, &draw, &queries, a.chunk)?;
    let bundle = to_physical(&queries, &out, stats);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(&a.out)?);
    writeln!(f, "x,y,z,vx,vy,vz,p,theta,k,eps")?;
    for (r, p) in kept.iter().enumerate() {
        let vals: Vec<String> = p
            .iter()
            .copied()
            .chain(bundle.fields.row(r).iter().copied())
            .map(|v| format!("{v:e}"))
            .collect();
        writeln!(f, "{}", vals.join(","))?;
    }
    f.flush()?;
    println!("wrote {} rows to {}", kept.len(), a.out.display());
    Ok((kept.len(), skipped))
}

pub fn parse_steps(s: &str) -> Result<Vec<Variant>> {
    let mut v: Vec<Variant> = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(Error::Config("--steps lists no variant".into()));
    }
    v.sort();
    v.dedup();
    Ok(v)
}

/// Per-variant aggregate means over the evaluated split.
#[derive(Clone, Debug)]
pub struct AblationTable {
    pub steps: Vec<Variant>,
    pub num_params: Vec<usize>,
    /// `(field, metric) -> one mean per step`.
    pub rows: BTreeMap<(String, Metric), Vec<f64>>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<8}{:<8}", "field", "metric");
        for v in &self.steps {
            s.push_str(&format!("{:>14}", v.to_string()));
        }
        s.push('\n');
        s.push_str(&format!("{:<16}", "params"));
        for n in &self.num_params {
            s.push_str(&format!("{n:>14}"));
        }
        s.push('\n');
        for (field, _) in METRIC_FIELDS {
            for m in Metric::ALL {
                if let Some(vals) = self.rows.get(&(field.to_string(), m)) {
                    s.push_str(&format!("{field:<8}{:<8}", m.name()));
                    for v in vals {
                        s.push_str(&format!("{v:>14.4e}"));
                    }
                    s.push('\n');
                }
            }
        }
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|((f, m), vals)| json!({"field": f, "metric": m.name(), "values": vals}))
            .collect();
        json!({
            "steps": self.steps.iter().map(|v| v.to_string()).collect::<Vec<_>>(),
            "num_params": self.num_params,
            "rows": rows,
        })
    }
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<AblationTable> {
    let steps = parse_steps(&a.steps)?;
    let base = load_config(a.config.as_deref())?;
    fs::create_dir_all(&a.out)?;
    let mut echo = base.to_text();
    echo.push_str(&format!(
        "# every step shares seed = {} and eval_seed = {}\nsteps = {}\n",
        base.train.seed,
        base.eval_seed,
        a.steps
    ));
    fs::write(a.out.join("config.txt"), echo)?;
    let mut table = AblationTable {
        steps: steps.clone(),
        num_params: Vec::new(),
        rows: BTreeMap::new(),
    };
    for (k, &v) in steps.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.model.variant = v;
        let dir = a.out.join(v.to_string());
        log::info!("training {v}");
        let outcome = train_with(&cfg, &a.data, &dir, None)?;
        table.num_params.push(outcome.weights.num_params());
        let per_sample = evaluate_split(Some(&outcome.weights), &a.data, &a.split, None, DEFAULT_CHUNK, cfg.eval_seed)?;
        write_metric_reports(&dir, &per_sample)?;
        for row in &aggregate_by_class(&per_sample)["all"] {
            table
                .rows
                .entry((row.field.clone(), row.metric))
                .or_insert_with(|| vec![f64::NAN; steps.len()])[k] = row.mean;
        }
    }
    let text = table.to_text();
    fs::write(a.out.join("ablation.txt"), &text)?;
    fs::write(
        a.out.join("ablation.json"),
        serde_json::to_string_pretty(&table.to_json()).expect("serializable"),
    )?;
    print!("{text}");
    Ok(table)
}
