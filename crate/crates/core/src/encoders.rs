//! Input branches: geometry (terrain and obstacle clouds), meteorological
//! context, and volume query points.

use std::sync::Arc;

use rand::Rng;

use crate::attention::{rope_table, KeySource, TransformerBlock};
use crate::autodiff::{Graph, RopeTable, Var};
use crate::error::{Error, Result};
use crate::nn::{sincos_embed, MlpBlock, ParamSpec, ParamStore, Parameterized};
use crate::profiles::PROFILE_LEN;
use crate::supernode::{select_supernodes, PointCloud, SupernodePooling, SupernodeSelection};
use crate::tensor::Matrix;

/// Upper bound of normalized coordinates on every axis.
pub const COORD_SPAN: f64 = 1000.0;
const COORD_SLACK: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GeometryInputs {
    /// Ground points with two feature columns (inverse Obukhov length, roughness).
    pub terrain: PointCloud,
    /// Building surface points, no features.
    pub obstacles: PointCloud,
}

impl GeometryInputs {
    /// Single cloud with the terrain features copied onto every obstacle point.
    pub fn merged(&self) -> Result<PointCloud> {
        let f = self.terrain.num_features();
        let mut obs_feat = Matrix::zeros(self.obstacles.len(), f);
        let first = self.terrain.features.row(0).to_vec();
        for r in 0..self.obstacles.len() {
            obs_feat.row_mut(r).copy_from_slice(&first);
        }
        PointCloud::new(
            Matrix::vstack(&[&self.terrain.coords, &self.obstacles.coords])?,
            Matrix::vstack(&[&self.terrain.features, &obs_feat])?,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedGeometry {
    /// Terrain tokens first, then obstacle tokens.
    pub tokens: Matrix,
    pub positions: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometryDraw {
    pub terrain: SupernodeSelection,
    /// Absent for the merged-cloud encoder.
    pub obstacles: Option<SupernodeSelection>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometryEncoder {
    pub terrain_pool: SupernodePooling,
    pub obstacle_pool: Option<SupernodePooling>,
    pub self_block: TransformerBlock,
    pub cross_block: Option<TransformerBlock>,
    pub n_terrain_sn: usize,
    pub n_obstacle_sn: usize,
    pub r_terrain: f64,
    pub r_obstacle: f64,
    pub max_degree: usize,
}

pub const TERRAIN_FEATURES: usize = 2;

impl GeometryEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        d: usize,
        heads: usize,
        split: bool,
        n_terrain_sn: usize,
        n_obstacle_sn: usize,
        r_terrain: f64,
        r_obstacle: f64,
        max_degree: usize,
    ) -> Result<Self> {
        Ok(Self {
            terrain_pool: SupernodePooling::new("geometry.terrain_pool", d, TERRAIN_FEATURES),
            obstacle_pool: split.then(|| SupernodePooling::new("geometry.obstacle_pool", d, 0)),
            self_block: TransformerBlock::new("geometry.self", d, heads)?,
            cross_block: if split {
                Some(TransformerBlock::new("geometry.cross", d, heads)?)
            } else {
                None
            },
            n_terrain_sn,
            n_obstacle_sn,
            r_terrain,
            r_obstacle,
            max_degree,
        })
    }

    pub fn is_split(&self) -> bool {
        self.obstacle_pool.is_some()
    }

    pub fn n_tokens(&self) -> usize {
        self.n_terrain_sn + self.n_obstacle_sn
    }

    pub fn draw<R: Rng + ?Sized>(&self, inputs: &GeometryInputs, rng: &mut R) -> Result<GeometryDraw> {
        if self.is_split() {
            Ok(GeometryDraw {
                terrain: select_supernodes(&inputs.terrain, self.n_terrain_sn, self.r_terrain, self.max_degree, rng)?,
                obstacles: Some(select_supernodes(
                    &inputs.obstacles,
                    self.n_obstacle_sn,
                    self.r_obstacle,
                    self.max_degree,
                    rng,
                )?),
            })
        } else {
            let merged = inputs.merged()?;
            Ok(GeometryDraw {
                terrain: select_supernodes(&merged, self.n_tokens(), self.r_terrain, self.max_degree, rng)?,
                obstacles: None,
            })
        }
    }

    /// Returns the token sequence, its rotary table and supernode positions.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &GeometryInputs,
        draw: &GeometryDraw,
    ) -> Result<(Var, Arc<RopeTable>, Matrix)> {
        let dh = self.self_block.attn.d_head();
        match (&self.obstacle_pool, &self.cross_block, &draw.obstacles) {
            (Some(obs_pool), Some(cross), Some(obs_sel)) => {
                let pos_g = inputs.terrain.coords.gather_rows(&draw.terrain.indices);
                let pos_o = inputs.obstacles.coords.gather_rows(&obs_sel.indices);
                let tg = rope_table(&pos_g, dh)?;
                let to = rope_table(&pos_o, dh)?;
                let ug = self.terrain_pool.forward(g, store, &inputs.terrain, &draw.terrain)?;
                let uo = obs_pool.forward(g, store, &inputs.obstacles, obs_sel)?;
                let ug = self.self_block.forward(g, store, ug, &tg, KeySource::Itself)?;
                let uo = self.self_block.forward(g, store, uo, &to, KeySource::Itself)?;
                let ug = cross.forward(g, store, ug, &tg, KeySource::Other(uo, &to))?;
                let uo = cross.forward(g, store, uo, &to, KeySource::Other(ug, &tg))?;
                let tokens = g.concat_rows(&[ug, uo])?;
                let positions = Matrix::vstack(&[&pos_g, &pos_o])?;
                let table = rope_table(&positions, dh)?;
                Ok((tokens, table, positions))
            }
            (None, None, None) => {
                let merged = inputs.merged()?;
                let positions = merged.coords.gather_rows(&draw.terrain.indices);
                let table = rope_table(&positions, dh)?;
                let u = self.terrain_pool.forward(g, store, &merged, &draw.terrain)?;
                let u = self.self_block.forward(g, store, u, &table, KeySource::Itself)?;
                Ok((u, table, positions))
            }
            _ => Err(Error::Config(
                "geometry draw does not match the encoder layout (split vs merged)".into(),
            )),
        }
    }
}

impl Parameterized for GeometryEncoder {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.terrain_pool.param_specs();
        if let Some(p) = &self.obstacle_pool {
            v.extend(p.param_specs());
        }
        v.extend(self.self_block.param_specs());
        if let Some(c) = &self.cross_block {
            v.extend(c.param_specs());
        }
        v
    }
}

pub fn encode_geometry<R: Rng + ?Sized>(
    inputs: &GeometryInputs,
    encoder: &GeometryEncoder,
    store: &ParamStore,
    rng: &mut R,
) -> Result<EncodedGeometry> {
    let draw = encoder.draw(inputs, rng)?;
    let mut g = Graph::new();
    let (tokens, _, positions) = encoder.forward(&mut g, store, inputs, &draw)?;
    Ok(EncodedGeometry {
        tokens: g.value(tokens).clone(),
        positions,
    })
}

/// MLP over the flattened four-field profile (256 values).
#[derive(Clone, Debug, PartialEq)]
pub struct ContextEncoder {
    pub mlp: MlpBlock,
}

impl ContextEncoder {
    pub fn new(d: usize) -> Self {
        Self {
            mlp: MlpBlock::new("context", PROFILE_LEN, d, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, profile: &[f64]) -> Result<Var> {
        if profile.len() != PROFILE_LEN {
            return Err(Error::Shape(format!(
                "context encoder expects {PROFILE_LEN} profile values, got {}",
                profile.len()
            )));
        }
        let x = g.input(Matrix::row_vector(profile));
        self.mlp.forward(g, store, x)
    }
}

impl Parameterized for ContextEncoder {
    fn param_specs(&self) -> Vec<ParamSpec> {
        self.mlp.param_specs()
    }
}

pub fn encode_context(profile: &[f64], encoder: &ContextEncoder, store: &ParamStore) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let y = encoder.forward(&mut g, store, profile)?;
    Ok(g.value(y).as_slice().to_vec())
}

/// Sine/cosine embedding of query coordinates followed by an MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeEncoder {
    pub pairs_per_axis: usize,
    pub mlp: MlpBlock,
}

impl VolumeEncoder {
    pub fn new(d: usize) -> Self {
        let pairs_per_axis = (d / 6).max(1);
        Self {
            pairs_per_axis,
            mlp: MlpBlock::new("volume", 6 * pairs_per_axis, d, d),
        }
    }

    pub fn embed(&self, coords: &Matrix) -> Result<Matrix> {
        check_normalized(coords)?;
        Ok(sincos_embed(coords, self.pairs_per_axis))
    }

    /// `context`, when given, is a `1 x d` row added to every output row.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, coords: &Matrix, context: Option<Var>) -> Result<Var> {
        let e = g.input(self.embed(coords)?);
        let u = self.mlp.forward(g, store, e)?;
        match context {
            Some(c) => g.add_row(u, c),
            None => Ok(u),
        }
    }
}

impl Parameterized for VolumeEncoder {
    fn param_specs(&self) -> Vec<ParamSpec> {
        self.mlp.param_specs()
    }
}

pub fn check_normalized(coords: &Matrix) -> Result<()> {
    if coords.cols() != 3 {
        return Err(Error::Shape(format!("coordinates need 3 columns, got {}", coords.cols())));
    }
    for r in 0..coords.rows() {
        for &v in coords.row(r) {
            if !(-COORD_SLACK..=COORD_SPAN + COORD_SLACK).contains(&v) {
                return Err(Error::InvalidInput(format!(
                    "normalized coordinate {v} in row {r} lies outside [0, {COORD_SPAN}]"
                )));
            }
        }
    }
    Ok(())
}

pub fn encode_volume(
    coords: &Matrix,
    context: &[f64],
    encoder: &VolumeEncoder,
    store: &ParamStore,
) -> Result<Matrix> {
    let mut g = Graph::new();
    let c = g.input(Matrix::row_vector(context));
    let y = encoder.forward(&mut g, store, coords, Some(c))?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use crate::profiles::{compute_profiles, flatten_profiles, StabilityParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize, f: usize, flat: bool) -> PointCloud {
        let mut c = Matrix::zeros(n, 3);
        for r in 0..n {
            c.set(r, 0, rng.random_range(0.0..1000.0));
            c.set(r, 1, rng.random_range(0.0..1000.0));
            c.set(r, 2, if flat { 0.0 } else { rng.random_range(0.0..500.0) });
        }
        let mut feat = Matrix::zeros(n, f);
        for r in 0..n {
            for k in 0..f {
                feat.set(r, k, 0.3 * (k as f64 + 1.0));
            }
        }
        PointCloud::new(c, feat).unwrap()
    }

    fn inputs(seed: u64) -> GeometryInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GeometryInputs {
            terrain: cloud(&mut rng, 60, 2, true),
            obstacles: cloud(&mut rng, 50, 0, false),
        }
    }

    fn encoder(split: bool) -> GeometryEncoder {
        GeometryEncoder::new(12, 2, split, 10, 8, 200.0, 150.0, 16).unwrap()
    }

    #[test]
    fn geometry_token_count_and_determinism() {
        let enc = encoder(true);
        let store = init_params(&enc.param_specs(), &mut ChaCha8Rng::seed_from_u64(0));
        let inp = inputs(1);
        let a = encode_geometry(&inp, &enc, &store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = encode_geometry(&inp, &enc, &store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.tokens.shape(), (18, 12));
        assert_eq!(a, b);
        let merged = encoder(false);
        let store = init_params(&merged.param_specs(), &mut ChaCha8Rng::seed_from_u64(0));
        let m = encode_geometry(&inp, &merged, &store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(m.tokens.shape(), (18, 12));
    }

    #[test]
    fn silenced_cross_block_leaves_branches_independent() {
        let enc = encoder(true);
        let mut store = init_params(&enc.param_specs(), &mut ChaCha8Rng::seed_from_u64(3));
        let cross = enc.cross_block.as_ref().unwrap();
        for name in [cross.attn.o.weight_name(), cross.mlp.layers[1].weight_name()] {
            let w = store.get_mut(&name).unwrap();
            *w = Matrix::zeros(w.rows(), w.cols());
        }
        let inp = inputs(4);
        let draw = enc.draw(&inp, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut g = Graph::new();
        let (tokens, _, _) = enc.forward(&mut g, &store, &inp, &draw).unwrap();
        let got = g.value(tokens).clone();

        let mut g = Graph::new();
        let obs_sel = draw.obstacles.as_ref().unwrap();
        let tg = rope_table(&inp.terrain.coords.gather_rows(&draw.terrain.indices), 6).unwrap();
        let to = rope_table(&inp.obstacles.coords.gather_rows(&obs_sel.indices), 6).unwrap();
        let ug = enc.terrain_pool.forward(&mut g, &store, &inp.terrain, &draw.terrain).unwrap();
        let uo = enc
            .obstacle_pool
            .as_ref()
            .unwrap()
            .forward(&mut g, &store, &inp.obstacles, obs_sel)
            .unwrap();
        let ug = enc.self_block.forward(&mut g, &store, ug, &tg, KeySource::Itself).unwrap();
        let uo = enc.self_block.forward(&mut g, &store, uo, &to, KeySource::Itself).unwrap();
        let expect = Matrix::vstack(&[g.value(ug), g.value(uo)]).unwrap();
        assert!(got.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn context_encoder_count_zero_and_sensitivity() {
        let enc = ContextEncoder::new(192);
        assert_eq!(enc.num_params(), 86_400);
        let small = ContextEncoder::new(8);
        let zero: ParamStore = small
            .param_specs()
            .iter()
            .map(|s| (s.name.clone(), Matrix::zeros(s.rows, s.cols)))
            .collect();
        let prof = flatten_profiles(&compute_profiles(&StabilityParams::new(0.05, 0.2).unwrap()).unwrap());
        assert!(encode_context(&prof, &small, &zero).unwrap().iter().all(|&v| v == 0.0));
        let store = init_params(&small.param_specs(), &mut ChaCha8Rng::seed_from_u64(0));
        let mut other = prof.clone();
        other[200] += 0.5;
        assert_ne!(
            encode_context(&prof, &small, &store).unwrap(),
            encode_context(&other, &small, &store).unwrap()
        );
    }

    #[test]
    fn volume_encoder_is_rowwise_with_additive_context() {
        let enc = VolumeEncoder::new(12);
        let store = init_params(&enc.param_specs(), &mut ChaCha8Rng::seed_from_u64(1));
        let coords = Matrix::from_rows(&[
            vec![10.0, 20.0, 30.0],
            vec![500.0, 1.0, 999.0],
            vec![10.0, 20.0, 30.0],
            vec![0.0, 0.0, 0.0],
        ])
        .unwrap();
        let zero_ctx = encode_volume(&coords, &[0.0; 12], &enc, &store).unwrap();
        let mut g = Graph::new();
        let e = g.input(enc.embed(&coords).unwrap());
        let m = enc.mlp.forward(&mut g, &store, e).unwrap();
        assert_eq!(&zero_ctx, g.value(m));
        assert_eq!(zero_ctx.row(0), zero_ctx.row(2));

        let ctx: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        let with = encode_volume(&coords, &ctx, &enc, &store).unwrap();
        for r in 0..4 {
            for c in 0..12 {
                assert_eq!(with.get(r, c), zero_ctx.get(r, c) + ctx[c]);
            }
        }
        let perm = [3, 1, 0, 2];
        let shuffled = encode_volume(&coords.gather_rows(&perm), &ctx, &enc, &store).unwrap();
        assert!(shuffled.max_abs_diff(&with.gather_rows(&perm)) < 1e-12);

        let origin = enc.embed(&Matrix::zeros(1, 3)).unwrap();
        for (i, &v) in origin.row(0).iter().enumerate() {
            assert_eq!(v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn out_of_range_coordinates_rejected() {
        let enc = VolumeEncoder::new(12);
        let store = init_params(&enc.param_specs(), &mut ChaCha8Rng::seed_from_u64(1));
        let bad = Matrix::row_vector(&[0.0, 1001.0, 5.0]);
        assert!(matches!(encode_volume(&bad, &[0.0; 12], &enc, &store), Err(Error::InvalidInput(_))));
    }
}
