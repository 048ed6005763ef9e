//! Dense layers, GeLU MLPs, layer norm and parameter bookkeeping.
//!
//! Layers are lightweight descriptors: they own a hierarchical name prefix and
//! their dimensions, while the numbers live in a [`ParamStore`] keyed by
//! `"<prefix>.<tensor>"`. This keeps the full parameter set of a model a pure
//! function of its configuration and makes persistence a flat map dump.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{gelu_scalar, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub type ParamStore = BTreeMap<String, Matrix>;

pub const INIT_STD: f64 = 0.02;

/// Exact erf-form GeLU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    gelu_scalar(x)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

/// Anything that declares trainable tensors.
pub trait Parameterized {
    fn param_specs(&self) -> Vec<ParamSpec>;

    fn num_params(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }
}

/// Materializes specs in name order so the draw sequence depends only on the
/// name set. Values are rounded to `f32` so persisted weights reload exactly.
pub fn init_params<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> ParamStore {
    let mut sorted: Vec<&ParamSpec> = specs.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let mut store = ParamStore::new();
    for spec in sorted {
        let data: Vec<f64> = match spec.init {
            Init::Zeros => vec![0.0; spec.numel()],
            Init::Ones => vec![1.0; spec.numel()],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..spec.numel())
                    .map(|_| dist.sample(rng) as f32 as f64)
                    .collect()
            }
        };
        let m = Matrix::from_vec(spec.rows, spec.cols, data).expect("spec sizes agree");
        store.insert(spec.name.clone(), m);
    }
    store
}

pub fn count_parameters(store: &ParamStore) -> usize {
    store.values().map(|m| m.rows() * m.cols()).sum()
}

pub(crate) fn fetch(g: &mut Graph, store: &ParamStore, name: &str) -> Result<Var> {
    let m = store
        .get(name)
        .ok_or_else(|| Error::Config(format!("missing parameter tensor `{name}`")))?;
    Ok(g.param(name, m))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl DenseLayer {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self {
            name: name.into(),
            d_in,
            d_out,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, width) = g.shape(x);
        if width != self.d_in {
            return Err(Error::Shape(format!(
                "`{}` expects input width {} but got {width}",
                self.name, self.d_in
            )));
        }
        let w = fetch(g, store, &self.weight_name())?;
        let b = fetch(g, store, &self.bias_name())?;
        g.linear(x, w, Some(b))
    }
}

impl Parameterized for DenseLayer {
    fn param_specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec {
                name: self.weight_name(),
                rows: self.d_out,
                cols: self.d_in,
                init: Init::Normal(INIT_STD),
            },
            ParamSpec {
                name: self.bias_name(),
                rows: 1,
                cols: self.d_out,
                init: Init::Zeros,
            },
        ]
    }
}

/// Dense layers with GeLU between consecutive layers (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct MlpBlock {
    pub name: String,
    pub layers: Vec<DenseLayer>,
}

impl MlpBlock {
    /// `d_in -> hidden -> d_out`, the single-hidden-layer shape used everywhere.
    pub fn new(name: impl Into<String>, d_in: usize, hidden: usize, d_out: usize) -> Self {
        let name = name.into();
        Self {
            layers: vec![
                DenseLayer::new(format!("{name}.fc1"), d_in, hidden),
                DenseLayer::new(format!("{name}.fc2"), hidden, d_out),
            ],
            name,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.layers[0].d_out
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.gelu(h);
            }
        }
        Ok(h)
    }
}

impl Parameterized for MlpBlock {
    fn param_specs(&self) -> Vec<ParamSpec> {
        self.layers.iter().flat_map(|l| l.param_specs()).collect()
    }
}

/// Evaluates an MLP on a single input vector.
pub fn mlp_forward(input: &[f64], block: &MlpBlock, store: &ParamStore) -> Result<Vec<f64>> {
    if input.len() != block.d_in() {
        return Err(Error::Shape(format!(
            "`{}` expects input length {} but got {}",
            block.name,
            block.d_in(),
            input.len()
        )));
    }
    let mut g = Graph::new();
    let x = g.input(Matrix::row_vector(input));
    let y = block.forward(&mut g, store, x)?;
    Ok(g.value(y).as_slice().to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer {
    pub name: String,
    pub d: usize,
}

impl NormLayer {
    pub fn new(name: impl Into<String>, d: usize) -> Self {
        Self { name: name.into(), d }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = fetch(g, store, &format!("{}.scale", self.name))?;
        let b = fetch(g, store, &format!("{}.shift", self.name))?;
        g.layer_norm(x, s, b)
    }
}

impl Parameterized for NormLayer {
    fn param_specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec {
                name: format!("{}.scale", self.name),
                rows: 1,
                cols: self.d,
                init: Init::Ones,
            },
            ParamSpec {
                name: format!("{}.shift", self.name),
                rows: 1,
                cols: self.d,
                init: Init::Zeros,
            },
        ]
    }
}

/// Sine/cosine features of 3-D coordinates: for each axis, `pairs_per_axis`
/// interleaved `(sin, cos)` pairs with wavelengths spaced geometrically from 1
/// to 1000 coordinate units. Output width is `6 * pairs_per_axis`.
pub fn sincos_embed(coords: &Matrix, pairs_per_axis: usize) -> Matrix {
    let n = coords.rows();
    let width = 6 * pairs_per_axis;
    let freqs: Vec<f64> = (0..pairs_per_axis)
        .map(|j| {
            let frac = if pairs_per_axis > 1 {
                j as f64 / (pairs_per_axis - 1) as f64
            } else {
                1.0
            };
            2.0 * std::f64::consts::PI / 1000f64.powf(frac)
        })
        .collect();
    let mut out = Matrix::zeros(n, width);
    for r in 0..n {
        let c = coords.row(r);
        let o = out.row_mut(r);
        for axis in 0..3 {
            for (j, f) in freqs.iter().enumerate() {
                let a = f * c[axis];
                let base = axis * 2 * pairs_per_axis + 2 * j;
                o[base] = a.sin();
                o[base + 1] = a.cos();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-9);
        assert!(gelu(-10.0).abs() < 1e-9);
        // erf form, not the tanh approximation: Phi(1) = 0.8413447460685429
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
    }

    #[test]
    fn gelu_derivative_matches_central_differences() {
        let h = 1e-4;
        let mut x = -5.0;
        while x <= 5.0 {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            let an = crate::autodiff::gelu_grad_scalar(x);
            let rel = (fd - an).abs() / an.abs().max(1e-12);
            // near the derivative's root the relative error is dominated by
            // the O(h^2) truncation term, so also accept a tiny absolute error
            assert!(rel < 1e-5 || (fd - an).abs() < 1e-9, "x={x}: fd {fd} an {an}");
            x += 0.05;
        }
    }

    #[test]
    fn dense_parameter_counts() {
        assert_eq!(DenseLayer::new("l", 2, 3).num_params(), 9);
        assert_eq!(MlpBlock::new("m", 192, 768, 192).num_params(), 295_872);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let block = MlpBlock::new("m", 3, 5, 2);
        let mut store = init_params(&block.param_specs(), &mut ChaCha8Rng::seed_from_u64(0));
        for m in store.values_mut() {
            m.scale(0.0);
        }
        assert_eq!(mlp_forward(&[1.0, -2.0, 0.5], &block, &store).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_dense_layer_passes_input_through() {
        let block = MlpBlock {
            name: "id".into(),
            layers: vec![DenseLayer::new("id.fc1", 4, 4)],
        };
        let mut store = ParamStore::new();
        store.insert("id.fc1.weight".into(), Matrix::identity(4));
        store.insert("id.fc1.bias".into(), Matrix::zeros(1, 4));
        let v = [0.3, -1.0, 2.5, 7.0];
        assert_eq!(mlp_forward(&v, &block, &store).unwrap(), v.to_vec());
    }

    #[test]
    fn random_mlp_matches_hand_rolled_arithmetic() {
        let block = MlpBlock::new("m", 3, 5, 2);
        let store = init_params(&block.param_specs(), &mut ChaCha8Rng::seed_from_u64(7));
        let mut store = store;
        // larger weights so the GeLU nonlinearity matters
        for m in store.values_mut() {
            for x in m.as_mut_slice() {
                *x *= 40.0;
            }
        }
        let input = [0.7, -1.3, 2.1];
        let w1 = &store["m.fc1.weight"];
        let b1 = &store["m.fc1.bias"];
        let w2 = &store["m.fc2.weight"];
        let b2 = &store["m.fc2.bias"];
        let mut hidden = [0.0; 5];
        for (o, h) in hidden.iter_mut().enumerate() {
            let mut s = b1.get(0, o);
            for (i, x) in input.iter().enumerate() {
                s += w1.get(o, i) * x;
            }
            let cdf = 0.5 * (1.0 + libm::erf(s / 2f64.sqrt()));
            *h = s * cdf;
        }
        let mut expected = [0.0; 2];
        for (o, e) in expected.iter_mut().enumerate() {
            let mut s = b2.get(0, o);
            for (i, h) in hidden.iter().enumerate() {
                s += w2.get(o, i) * h;
            }
            *e = s;
        }
        let got = mlp_forward(&input, &block, &store).unwrap();
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn shape_error_names_both_dimensions() {
        let block = MlpBlock::new("m", 3, 5, 2);
        let store = init_params(&block.param_specs(), &mut ChaCha8Rng::seed_from_u64(0));
        let err = mlp_forward(&[1.0; 4], &block, &store).unwrap_err().to_string();
        assert!(err.contains('3') && err.contains('4'), "{err}");
    }

    #[test]
    fn init_is_seeded_and_f32_exact() {
        let block = MlpBlock::new("m", 6, 8, 3);
        let a = init_params(&block.param_specs(), &mut ChaCha8Rng::seed_from_u64(5));
        let b = init_params(&block.param_specs(), &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        for m in a.values() {
            for &x in m.as_slice() {
                assert_eq!(x, x as f32 as f64);
            }
        }
        assert_eq!(a["m.fc1.bias"].as_slice(), &[0.0; 8]);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let norm = NormLayer::new("n", 6);
        let store = init_params(&norm.param_specs(), &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let x = g.input(Matrix::row_vector(&[1.0, 4.0, -2.0, 0.5, 9.0, 3.0]));
        let y = norm.forward(&mut g, &store, x).unwrap();
        let v = g.value(y).as_slice();
        let mean = v.iter().sum::<f64>() / 6.0;
        let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn sincos_origin_is_zero_one_interleave() {
        let e = sincos_embed(&Matrix::zeros(1, 3), 4);
        for (i, v) in e.row(0).iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }
}
