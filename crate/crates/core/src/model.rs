//! Full model: configuration, ablation variants, forward pass, chunked
//! prediction and weight persistence.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::attention::{rope_table, AnchorIndexSet};
use crate::autodiff::{Graph, Var};
use crate::dataset::{denormalize_coords, NormalizationStats};
use crate::encoders::{ContextEncoder, GeometryDraw, GeometryEncoder, GeometryInputs, VolumeEncoder};
use crate::error::{Error, Result};
use crate::nn::{count_parameters, init_params, ParamSpec, ParamStore, Parameterized};
use crate::processor::{Decoder, Processor, N_FIELDS};
use crate::supernode::DEFAULT_MAX_DEGREE;
use crate::tensor::Matrix;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"ABSWIFT1";
pub const FORMAT_VERSION: &str = "1";
pub const RNG_POLICY: &str =
    "chacha8;init=normal(0,0.02)-by-sorted-name;forward=terrain-supernodes,obstacle-supernodes,anchors";
pub const DEFAULT_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    /// Merged geometry cloud, no context encoder, linear head.
    Step1,
    /// Split terrain/obstacle encoder with cross-attention.
    Step2,
    /// Adds the profile context encoder.
    Step3,
    /// Per-field decoder heads; the full model.
    Step4,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Step1, Variant::Step2, Variant::Step3, Variant::Step4];

    pub fn number(self) -> u8 {
        self as u8 + 1
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step{}", self.number())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        let n = t.strip_prefix("step").unwrap_or(&t);
        match n {
            "1" => Ok(Variant::Step1),
            "2" => Ok(Variant::Step2),
            "3" => Ok(Variant::Step3),
            "4" => Ok(Variant::Step4),
            "0" => Err(Error::Unsupported(
                "variant step0 (separate surface branch) is not implemented; choose step1..step4".into(),
            )),
            _ => Err(Error::Config(format!("unknown variant `{s}`; expected step1..step4"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VariantFlags {
    pub split_geometry: bool,
    pub context_encoder: bool,
    pub field_heads: bool,
}

pub fn apply_variant(config: &ModelConfig) -> VariantFlags {
    let v = config.variant;
    VariantFlags {
        split_geometry: v >= Variant::Step2,
        context_encoder: v >= Variant::Step3,
        field_heads: v >= Variant::Step4,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub n_obs: usize,
    pub n_gnd: usize,
    pub n_obs_sn: usize,
    pub n_gnd_sn: usize,
    pub r_obs: f64,
    pub r_gnd: f64,
    pub max_degree: usize,
    pub n_vol_anchor: usize,
    pub n_processor_blocks: usize,
    pub n_decoder_blocks: usize,
    pub variant: Variant,
}

impl ModelConfig {
    /// Full-size reference configuration.
    pub fn full() -> Self {
        Self {
            d: 192,
            heads: 3,
            n_obs: 4096,
            n_gnd: 4096,
            n_obs_sn: 1024,
            n_gnd_sn: 1024,
            r_obs: 1.0,
            r_gnd: 5.0,
            max_degree: DEFAULT_MAX_DEGREE,
            n_vol_anchor: 8192,
            n_processor_blocks: 3,
            n_decoder_blocks: 4,
            variant: Variant::Step4,
        }
    }

    /// Single-CPU configuration.
    pub fn desk() -> Self {
        Self {
            d: 48,
            heads: 3,
            n_obs: 512,
            n_gnd: 512,
            n_obs_sn: 128,
            n_gnd_sn: 128,
            r_obs: 40.0,
            r_gnd: 60.0,
            max_degree: DEFAULT_MAX_DEGREE,
            n_vol_anchor: 256,
            n_processor_blocks: 3,
            n_decoder_blocks: 4,
            variant: Variant::Step4,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.heads == 0 || self.d % self.heads != 0 {
            bad.push(format!("d={} is not divisible by heads={}", self.d, self.heads));
        } else if (self.d / self.heads) % 2 != 0 {
            bad.push(format!("head width d/heads={} must be even", self.d / self.heads));
        }
        for (name, v) in [
            ("d", self.d),
            ("n_obs", self.n_obs),
            ("n_gnd", self.n_gnd),
            ("n_obs_sn", self.n_obs_sn),
            ("n_gnd_sn", self.n_gnd_sn),
            ("max_degree", self.max_degree),
            ("n_vol_anchor", self.n_vol_anchor),
            ("n_processor_blocks", self.n_processor_blocks),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be positive"));
            }
        }
        if self.n_obs_sn > self.n_obs {
            bad.push(format!("n_obs_sn={} exceeds n_obs={}", self.n_obs_sn, self.n_obs));
        }
        if self.n_gnd_sn > self.n_gnd {
            bad.push(format!("n_gnd_sn={} exceeds n_gnd={}", self.n_gnd_sn, self.n_gnd));
        }
        for (name, r) in [("r_obs", self.r_obs), ("r_gnd", self.r_gnd)] {
            if !(r > 0.0 && r.is_finite()) {
                bad.push(format!("{name}={r} must be positive"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn to_header(&self) -> BTreeMap<String, String> {
        let mut h = BTreeMap::new();
        for (k, v) in self.fields() {
            h.insert(format!("config.{k}"), v);
        }
        h
    }

    fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d", self.d.to_string()),
            ("heads", self.heads.to_string()),
            ("n_obs", self.n_obs.to_string()),
            ("n_gnd", self.n_gnd.to_string()),
            ("n_obs_sn", self.n_obs_sn.to_string()),
            ("n_gnd_sn", self.n_gnd_sn.to_string()),
            ("r_obs", self.r_obs.to_string()),
            ("r_gnd", self.r_gnd.to_string()),
            ("max_degree", self.max_degree.to_string()),
            ("n_vol_anchor", self.n_vol_anchor.to_string()),
            ("n_processor_blocks", self.n_processor_blocks.to_string()),
            ("n_decoder_blocks", self.n_decoder_blocks.to_string()),
            ("variant", self.variant.to_string()),
        ]
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{v}`")))
        }
        match key {
            "d" => self.d = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "n_obs" => self.n_obs = num(key, value)?,
            "n_gnd" => self.n_gnd = num(key, value)?,
            "n_obs_sn" => self.n_obs_sn = num(key, value)?,
            "n_gnd_sn" => self.n_gnd_sn = num(key, value)?,
            "r_obs" => self.r_obs = num(key, value)?,
            "r_gnd" => self.r_gnd = num(key, value)?,
            "max_degree" => self.max_degree = num(key, value)?,
            "n_vol_anchor" => self.n_vol_anchor = num(key, value)?,
            "n_processor_blocks" => self.n_processor_blocks = num(key, value)?,
            "n_decoder_blocks" => self.n_decoder_blocks = num(key, value)?,
            "variant" => self.variant = value.parse()?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_header(h: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::desk();
        for (k, _) in Self::desk().fields() {
            let v = h
                .get(&format!("config.{k}"))
                .ok_or_else(|| Error::Config(format!("weight header lacks `config.{k}`")))?;
            c.set(k, v)?;
        }
        Ok(c)
    }

    /// Field-by-field differences against `found`, as `name: expected X, found Y`.
    pub fn diff(&self, found: &ModelConfig) -> Vec<String> {
        self.fields()
            .into_iter()
            .zip(found.fields())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, b)| format!("{}: expected {}, found {}", a.0, a.1, b.1))
            .collect()
    }
}

/// Layer layout derived from a configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub config: ModelConfig,
    pub geometry: GeometryEncoder,
    pub context: Option<ContextEncoder>,
    pub volume: VolumeEncoder,
    pub processor: Processor,
    pub decoder: Decoder,
}

impl Architecture {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let flags = apply_variant(config);
        let d = config.d;
        Ok(Self {
            geometry: GeometryEncoder::new(
                d,
                config.heads,
                flags.split_geometry,
                config.n_gnd_sn,
                config.n_obs_sn,
                config.r_gnd,
                config.r_obs,
                config.max_degree,
            )?,
            context: flags.context_encoder.then(|| ContextEncoder::new(d)),
            volume: VolumeEncoder::new(d),
            processor: Processor::new(d, config.heads, config.n_processor_blocks)?,
            decoder: Decoder::new(d, config.heads, config.n_decoder_blocks, flags.field_heads)?,
            config: config.clone(),
        })
    }

    pub fn head_width(&self) -> usize {
        self.config.d / self.config.heads
    }
}

impl Parameterized for Architecture {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.geometry.param_specs();
        if let Some(c) = &self.context {
            v.extend(c.param_specs());
        }
        v.extend(self.volume.param_specs());
        v.extend(self.processor.param_specs());
        v.extend(self.decoder.param_specs());
        v
    }
}

/// Normalized model inputs for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInputs {
    pub geometry: GeometryInputs,
    /// Normalized flattened profile, 256 values.
    pub profile: Vec<f64>,
    /// Normalized query coordinates, `n x 3`.
    pub volume: Matrix,
}

/// Random choices of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardDraw {
    pub geometry: GeometryDraw,
    /// Sorted rows of the volume sequence used as anchors.
    pub anchors: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub arch: Architecture,
    pub params: ParamStore,
    pub stats: Option<NormalizationStats>,
}

pub fn build<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ModelWeights> {
    let arch = Architecture::new(config)?;
    let params = init_params(&arch.param_specs(), rng);
    Ok(ModelWeights {
        arch,
        params,
        stats: None,
    })
}

impl ModelWeights {
    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn num_params(&self) -> usize {
        count_parameters(&self.params)
    }

    /// Draws supernodes, then `n_vol_anchor` anchors among `n_vol` volume rows.
    pub fn draw<R: Rng + ?Sized>(&self, geometry: &GeometryInputs, n_vol: usize, rng: &mut R) -> Result<ForwardDraw> {
        let geometry = self.arch.geometry.draw(geometry, rng)?;
        let anchors = AnchorIndexSet::sample(rng, n_vol, self.config().n_vol_anchor)?;
        Ok(ForwardDraw {
            geometry,
            anchors: anchors.as_slice().to_vec(),
        })
    }

    /// Records the forward pass on `g`; returns the `n_vol x 7` normalized output.
    pub fn forward_graph(&self, g: &mut Graph, inputs: &ModelInputs, draw: &ForwardDraw) -> Result<Var> {
        let arch = &self.arch;
        let p = &self.params;
        AnchorIndexSet::new(draw.anchors.clone(), inputs.volume.rows())?;
        let (geom, tg, _) = arch.geometry.forward(g, p, &inputs.geometry, &draw.geometry)?;
        let ctx = match &arch.context {
            Some(c) => Some(c.forward(g, p, &inputs.profile)?),
            None => None,
        };
        let vol = arch.volume.forward(g, p, &inputs.volume, ctx)?;
        let tv = rope_table(&inputs.volume, arch.head_width())?;
        let (_, vol) = arch.processor.forward(g, p, geom, &tg, vol, &tv, &draw.anchors)?;
        arch.decoder.forward(g, p, vol, &tv, &draw.anchors)
    }

    pub fn forward_with(&self, inputs: &ModelInputs, draw: &ForwardDraw) -> Result<Matrix> {
        let mut g = Graph::new();
        let y = self.forward_graph(&mut g, inputs, draw)?;
        let out = g.value(y).clone();
        if !out.is_finite() {
            return Err(Error::Numeric("forward pass produced non-finite values".into()));
        }
        Ok(out)
    }

    /// One-shot forward pass with fresh supernode and anchor draws.
    pub fn forward<R: Rng + ?Sized>(&self, inputs: &ModelInputs, rng: &mut R) -> Result<Matrix> {
        let draw = self.draw(&inputs.geometry, inputs.volume.rows(), rng)?;
        self.forward_with(inputs, &draw)
    }

    /// Decodes `queries` (normalized coordinates) in chunks, each chunk run
    /// together with the anchor rows of `inputs.volume` selected by `draw`.
    pub fn predict_chunked(
        &self,
        inputs: &ModelInputs,
        draw: &ForwardDraw,
        queries: &Matrix,
        chunk: usize,
    ) -> Result<Matrix> {
        if chunk == 0 {
            return Err(Error::InvalidInput("chunk size must be positive".into()));
        }
        let anchor_coords = inputs.volume.gather_rows(&draw.anchors);
        let na = anchor_coords.rows();
        let starts: Vec<usize> = (0..queries.rows()).step_by(chunk).collect();
        let parts = starts
            .par_iter()
            .map(|&s| {
                let e = (s + chunk).min(queries.rows());
                let sub = ModelInputs {
                    geometry: inputs.geometry.clone(),
                    profile: inputs.profile.clone(),
                    volume: Matrix::vstack(&[&anchor_coords, &queries.slice_rows(s, e)])?,
                };
                let sub_draw = ForwardDraw {
                    geometry: draw.geometry.clone(),
                    anchors: (0..na).collect(),
                };
                let out = self.forward_with(&sub, &sub_draw)?;
                Ok(out.slice_rows(na, out.rows()))
            })
            .collect::<Result<Vec<Matrix>>>()?;
        let refs: Vec<&Matrix> = parts.iter().collect();
        if refs.is_empty() {
            return Ok(Matrix::zeros(0, N_FIELDS));
        }
        Matrix::vstack(&refs)
    }

    pub fn stats(&self) -> Result<&NormalizationStats> {
        self.stats
            .as_ref()
            .ok_or_else(|| Error::Config("weights carry no normalization statistics".into()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, encode_weights(self))?;
        Ok(())
    }
}

/// Physical-unit prediction: `(vx, vy, vz, p, theta, k, eps)` per point.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    /// Meters.
    pub coords: Matrix,
    pub fields: Matrix,
}

/// Replaces the base-10 logarithms of k and eps with their values.
pub fn exponentiate_turbulence(fields: &mut Matrix) {
    for r in 0..fields.rows() {
        let row = fields.row_mut(r);
        row[5] = 10f64.powf(row[5]);
        row[6] = 10f64.powf(row[6]);
    }
}

/// Undoes output standardization and the base-10 logarithm of k and eps.
pub fn to_physical(normalized_coords: &Matrix, normalized_fields: &Matrix, stats: &NormalizationStats) -> PredictionBundle {
    let mut fields = stats.denormalize_fields(normalized_fields);
    exponentiate_turbulence(&mut fields);
    PredictionBundle {
        coords: denormalize_coords(normalized_coords),
        fields,
    }
}

fn header_map(w: &ModelWeights) -> BTreeMap<String, String> {
    let mut h = w.config().to_header();
    if let Some(s) = &w.stats {
        h.extend(s.to_header());
    }
    h.insert("format_version".into(), FORMAT_VERSION.into());
    h.insert("rng_policy".into(), RNG_POLICY.into());
    h
}

pub fn encode_weights(w: &ModelWeights) -> Vec<u8> {
    let header: String = header_map(w).iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(w.params.len() as u64).to_le_bytes());
    for (name, m) in &w.params {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        out.extend_from_slice(&(m.as_slice().len() as u64).to_le_bytes());
        for &v in m.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.pos as u64;
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        if v > self.buf.len() as u64 {
            return Err(Error::Format {
                offset: at,
                msg: format!("{what} {v} exceeds the file size"),
            });
        }
        Ok(v as usize)
    }
}

pub fn decode_weights(buf: &[u8]) -> Result<ModelWeights> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8, "magic")? != WEIGHTS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "not a weight file (bad magic)".into(),
        });
    }
    let hl = c.len("header length")?;
    let at = c.pos as u64;
    let text = std::str::from_utf8(c.take(hl, "header")?).map_err(|e| Error::Format {
        offset: at,
        msg: format!("header is not UTF-8: {e}"),
    })?;
    let mut header = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
            offset: at,
            msg: format!("header line `{line}` lacks `=`"),
        })?;
        header.insert(k.to_string(), v.to_string());
    }
    let version = header.get("format_version").cloned().unwrap_or_default();
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION.into(),
            found: version,
        });
    }
    let config = ModelConfig::from_header(&header)?;
    let stats = if header.contains_key("stats.field.vx.mean") {
        Some(NormalizationStats::from_header(&header)?)
    } else {
        None
    };
    let arch = Architecture::new(&config)?;
    let n = c.len("array count")?;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let nl = c.len("name length")?;
        let at = c.pos as u64;
        let name = std::str::from_utf8(c.take(nl, "array name")?)
            .map_err(|_| Error::Format {
                offset: at,
                msg: "array name is not UTF-8".into(),
            })?
            .to_string();
        let rows = c.len("rows")?;
        let cols = c.len("cols")?;
        let at = c.pos as u64;
        let len = c.len("array length")?;
        if len != rows * cols {
            return Err(Error::Format {
                offset: at,
                msg: format!("array `{name}` declares {len} values for shape {rows}x{cols}"),
            });
        }
        let data = c
            .take(4 * len, "array values")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        params.insert(name, Matrix::from_vec(rows, cols, data)?);
    }
    if c.pos != buf.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            msg: "trailing bytes after the last array".into(),
        });
    }
    for spec in arch.param_specs() {
        match params.get(&spec.name) {
            Some(m) if m.shape() == (spec.rows, spec.cols) => {}
            Some(m) => {
                return Err(Error::Config(format!(
                    "array `{}`: expected shape {}x{}, found {}x{}",
                    spec.name,
                    spec.rows,
                    spec.cols,
                    m.rows(),
                    m.cols()
                )))
            }
            None => return Err(Error::Config(format!("weight file lacks array `{}`", spec.name))),
        }
    }
    if params.len() != arch.param_specs().len() {
        return Err(Error::Config("weight file holds arrays not used by its configuration".into()));
    }
    Ok(ModelWeights { arch, params, stats })
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    decode_weights(&fs::read(path)?)
}

/// Loads weights and rejects any configuration difference from `expected`.
pub fn load_weights_expecting(path: &Path, expected: &ModelConfig) -> Result<ModelWeights> {
    let w = load_weights(path)?;
    let diff = expected.diff(w.config());
    if !diff.is_empty() {
        return Err(Error::Config(format!("weight configuration mismatch: {}", diff.join("; "))));
    }
    Ok(w)
}
