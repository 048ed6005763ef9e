//! Physics blocks that mix the geometry and volume sequences, and the
//! anchored decoder with its output heads.

use std::sync::Arc;

use crate::attention::{rope_table, AnchorIndexSet, KeySource, PositionedSequence, TransformerBlock};
use crate::autodiff::{Graph, RopeTable, Var};
use crate::error::{Error, Result};
use crate::nn::{DenseLayer, MlpBlock, ParamSpec, ParamStore, Parameterized};
use crate::tensor::Matrix;

/// Output columns: velocity (3), pressure, potential temperature, log10 k, log10 eps.
pub const N_FIELDS: usize = 7;
pub const FIELD_NAMES: [&str; N_FIELDS] = ["vx", "vy", "vz", "p", "theta", "log_k", "log_eps"];

/// One self-attention block and one cross-attention block, each applied to
/// both branches.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicsBlock {
    pub self_block: TransformerBlock,
    pub cross_block: TransformerBlock,
}

impl PhysicsBlock {
    pub fn new(name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            self_block: TransformerBlock::new(format!("{name}.self"), d, heads)?,
            cross_block: TransformerBlock::new(format!("{name}.cross"), d, heads)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        geom: Var,
        tg: &Arc<RopeTable>,
        vol: Var,
        tv: &Arc<RopeTable>,
        anchors: &[usize],
    ) -> Result<(Var, Var)> {
        let geom = self.self_block.forward(g, store, geom, tg, KeySource::Itself)?;
        let vol = self.self_block.forward(g, store, vol, tv, KeySource::ItselfAnchors(anchors))?;
        let geom = self
            .cross_block
            .forward(g, store, geom, tg, KeySource::OtherAnchors(vol, tv, anchors))?;
        let vol = self.cross_block.forward(g, store, vol, tv, KeySource::Other(geom, tg))?;
        Ok((geom, vol))
    }
}

impl Parameterized for PhysicsBlock {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.self_block.param_specs();
        v.extend(self.cross_block.param_specs());
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Processor {
    pub blocks: Vec<PhysicsBlock>,
}

impl Processor {
    pub fn new(d: usize, heads: usize, n_blocks: usize) -> Result<Self> {
        Ok(Self {
            blocks: (0..n_blocks)
                .map(|i| PhysicsBlock::new(&format!("processor.{i}"), d, heads))
                .collect::<Result<_>>()?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut geom: Var,
        tg: &Arc<RopeTable>,
        mut vol: Var,
        tv: &Arc<RopeTable>,
        anchors: &[usize],
    ) -> Result<(Var, Var)> {
        for b in &self.blocks {
            (geom, vol) = b.forward(g, store, geom, tg, vol, tv, anchors)?;
        }
        Ok((geom, vol))
    }
}

impl Parameterized for Processor {
    fn param_specs(&self) -> Vec<ParamSpec> {
        self.blocks.iter().flat_map(|b| b.param_specs()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FieldHeads {
    /// One dense map to all seven outputs.
    Linear(DenseLayer),
    /// Separate MLPs for velocity, pressure, theta, log k and log eps.
    PerField(Vec<MlpBlock>),
}

pub const HEAD_NAMES: [(&str, usize); 5] = [("velocity", 3), ("pressure", 1), ("theta", 1), ("log_k", 1), ("log_eps", 1)];

impl FieldHeads {
    pub fn linear(d: usize) -> Self {
        FieldHeads::Linear(DenseLayer::new("head.linear", d, N_FIELDS))
    }

    pub fn per_field(d: usize) -> Self {
        FieldHeads::PerField(
            HEAD_NAMES
                .iter()
                .map(|(n, w)| MlpBlock::new(format!("head.{n}"), d, 4 * d, *w))
                .collect(),
        )
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            FieldHeads::Linear(l) => l.forward(g, store, x),
            FieldHeads::PerField(heads) => {
                let outs = heads
                    .iter()
                    .map(|h| h.forward(g, store, x))
                    .collect::<Result<Vec<_>>>()?;
                g.concat_cols(&outs)
            }
        }
    }
}

impl Parameterized for FieldHeads {
    fn param_specs(&self) -> Vec<ParamSpec> {
        match self {
            FieldHeads::Linear(l) => l.param_specs(),
            FieldHeads::PerField(h) => h.iter().flat_map(|m| m.param_specs()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub blocks: Vec<TransformerBlock>,
    pub heads: FieldHeads,
}

impl Decoder {
    pub fn new(d: usize, heads: usize, n_blocks: usize, per_field: bool) -> Result<Self> {
        Ok(Self {
            blocks: (0..n_blocks)
                .map(|i| TransformerBlock::new(format!("decoder.{i}"), d, heads))
                .collect::<Result<_>>()?,
            heads: if per_field {
                FieldHeads::per_field(d)
            } else {
                FieldHeads::linear(d)
            },
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut vol: Var,
        tv: &Arc<RopeTable>,
        anchors: &[usize],
    ) -> Result<Var> {
        for b in &self.blocks {
            vol = b.forward(g, store, vol, tv, KeySource::ItselfAnchors(anchors))?;
        }
        self.heads.forward(g, store, vol)
    }
}

impl Parameterized for Decoder {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v: Vec<ParamSpec> = self.blocks.iter().flat_map(|b| b.param_specs()).collect();
        v.extend(self.heads.param_specs());
        v
    }
}

fn check_anchors(anchors: &AnchorIndexSet, n: usize) -> Result<()> {
    if anchors.as_slice().iter().any(|&i| i >= n) || anchors.is_empty() {
        return Err(Error::InvalidInput(format!(
            "anchor set of {} indices is not valid for {n} volume tokens",
            anchors.len()
        )));
    }
    Ok(())
}

/// Evaluates the processor outside of a training graph.
pub fn run_processor(
    geom: &PositionedSequence,
    vol: &PositionedSequence,
    anchors: &AnchorIndexSet,
    processor: &Processor,
    store: &ParamStore,
) -> Result<(Matrix, Matrix)> {
    check_anchors(anchors, vol.len())?;
    let dh = head_width(processor.blocks.first().map(|b| &b.self_block))?;
    let mut g = Graph::new();
    let tg = rope_table(&geom.positions, dh)?;
    let tv = rope_table(&vol.positions, dh)?;
    let ug = g.input(geom.tokens.clone());
    let uv = g.input(vol.tokens.clone());
    let (ug, uv) = processor.forward(&mut g, store, ug, &tg, uv, &tv, anchors.as_slice())?;
    Ok((g.value(ug).clone(), g.value(uv).clone()))
}

/// Evaluates the decoder outside of a training graph; returns `n x 7`.
pub fn run_decoder(
    vol: &PositionedSequence,
    anchors: &AnchorIndexSet,
    decoder: &Decoder,
    store: &ParamStore,
) -> Result<Matrix> {
    check_anchors(anchors, vol.len())?;
    let mut g = Graph::new();
    let dh = match decoder.blocks.first() {
        Some(b) => b.attn.d_head(),
        None => 2,
    };
    let tv = rope_table(&vol.positions, dh)?;
    let uv = g.input(vol.tokens.clone());
    let y = decoder.forward(&mut g, store, uv, &tv, anchors.as_slice())?;
    Ok(g.value(y).clone())
}

fn head_width(block: Option<&TransformerBlock>) -> Result<usize> {
    block
        .map(|b| b.attn.d_head())
        .ok_or_else(|| Error::Config("processor has no blocks".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const D: usize = 12;

    fn seq(rng: &mut ChaCha8Rng, n: usize) -> PositionedSequence {
        let tokens = Matrix::from_vec(n, D, (0..n * D).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let positions = Matrix::from_vec(n, 3, (0..n * 3).map(|_| rng.random_range(0.0..1000.0)).collect()).unwrap();
        PositionedSequence::new(tokens, positions).unwrap()
    }

    fn silence(store: &mut ParamStore, blocks: &[&TransformerBlock]) {
        for b in blocks {
            for name in [b.attn.o.weight_name(), b.mlp.layers[1].weight_name()] {
                let w = store.get_mut(&name).unwrap();
                *w = Matrix::zeros(w.rows(), w.cols());
            }
        }
    }

    #[test]
    fn silenced_processor_is_identity() {
        let p = Processor::new(D, 3, 2).unwrap();
        let mut store = init_params(&p.param_specs(), &mut ChaCha8Rng::seed_from_u64(0));
        let blocks: Vec<&TransformerBlock> = p.blocks.iter().flat_map(|b| [&b.self_block, &b.cross_block]).collect();
        silence(&mut store, &blocks);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let geom = seq(&mut rng, 5);
        let vol = seq(&mut rng, 9);
        let anchors = AnchorIndexSet::new(vec![0, 4, 7], 9).unwrap();
        let (g, v) = run_processor(&geom, &vol, &anchors, &p, &store).unwrap();
        assert_eq!(g, geom.tokens);
        assert_eq!(v, vol.tokens);
    }

    #[test]
    fn processor_shapes_preserved() {
        let p = Processor::new(D, 3, 1).unwrap();
        let store = init_params(&p.param_specs(), &mut ChaCha8Rng::seed_from_u64(0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [1, 7, 100] {
            let geom = seq(&mut rng, n);
            let vol = seq(&mut rng, n);
            let anchors = AnchorIndexSet::sample(&mut rng, n, n.min(4)).unwrap();
            let (g, v) = run_processor(&geom, &vol, &anchors, &p, &store).unwrap();
            assert_eq!(g.shape(), (n, D));
            assert_eq!(v.shape(), (n, D));
        }
    }

    #[test]
    fn geometry_reaches_volume() {
        let p = Processor::new(D, 3, 1).unwrap();
        let store = init_params(&p.param_specs(), &mut ChaCha8Rng::seed_from_u64(0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geom = seq(&mut rng, 6);
        let vol = seq(&mut rng, 8);
        let anchors = AnchorIndexSet::new(vec![1, 2, 5], 8).unwrap();
        let (_, a) = run_processor(&geom, &vol, &anchors, &p, &store).unwrap();
        let mut moved = geom.clone();
        moved.tokens.set(0, 0, moved.tokens.get(0, 0) + 1.0);
        let (_, b) = run_processor(&moved, &vol, &anchors, &p, &store).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-9);
    }

    #[test]
    fn decoder_output_and_head_independence() {
        let dec = Decoder::new(D, 3, 2, true).unwrap();
        let mut store = init_params(&dec.param_specs(), &mut ChaCha8Rng::seed_from_u64(4));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vol = seq(&mut rng, 10);
        let anchors = AnchorIndexSet::new(vec![0, 3, 9], 10).unwrap();
        let a = run_decoder(&vol, &anchors, &dec, &store).unwrap();
        assert_eq!(a.shape(), (10, N_FIELDS));
        let w = store.get_mut("head.pressure.fc2.weight").unwrap();
        w.set(0, 0, w.get(0, 0) + 0.5);
        let b = run_decoder(&vol, &anchors, &dec, &store).unwrap();
        for r in 0..10 {
            for c in 0..N_FIELDS {
                if c == 3 {
                    assert_ne!(a.get(r, c), b.get(r, c));
                } else {
                    assert_eq!(a.get(r, c), b.get(r, c));
                }
            }
        }
    }

    #[test]
    fn single_point_decoder_matches_sublayer_composition() {
        let dec = Decoder::new(D, 3, 1, false).unwrap();
        let store = init_params(&dec.param_specs(), &mut ChaCha8Rng::seed_from_u64(6));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vol = seq(&mut rng, 1);
        let anchors = AnchorIndexSet::all(1).unwrap();
        let got = run_decoder(&vol, &anchors, &dec, &store).unwrap();

        // with a single key the attention output is its value projection
        let dense = |name: &str, x: &[f64]| -> Vec<f64> {
            let w = &store[&format!("{name}.weight")];
            let b = &store[&format!("{name}.bias")];
            (0..w.rows())
                .map(|o| b.get(0, o) + (0..w.cols()).map(|i| w.get(o, i) * x[i]).sum::<f64>())
                .collect()
        };
        let norm = |x: &[f64]| -> Vec<f64> {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / x.len() as f64;
            x.iter().map(|a| (a - m) / (v + 1e-5).sqrt()).collect()
        };
        let x = vol.tokens.row(0).to_vec();
        let h = norm(&x);
        let attn = dense("decoder.0.attn.o", &dense("decoder.0.attn.v", &h));
        let y: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
        let h2: Vec<f64> = dense("decoder.0.mlp.fc1", &norm(&y)).into_iter().map(crate::nn::gelu).collect();
        let m = dense("decoder.0.mlp.fc2", &h2);
        let z: Vec<f64> = y.iter().zip(&m).map(|(a, b)| a + b).collect();
        let out = dense("head.linear", &z);
        for c in 0..N_FIELDS {
            assert!((got.get(0, c) - out[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn block_parameter_count_at_full_width() {
        let b = PhysicsBlock::new("p", 192, 3).unwrap();
        assert_eq!(b.num_params(), 2 * 444_864);
        assert_eq!(FieldHeads::per_field(192).num_params(), 746_503);
    }
}
