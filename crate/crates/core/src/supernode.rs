//! Supernode pooling: compress a point cloud into a fixed number of tokens by
//! averaging learned messages from every cloud point within a radius of each
//! randomly chosen supernode. Optional per-point features ride along with the
//! relative-position messages and with the supernode's own embedding.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{sincos_embed, DenseLayer, MlpBlock, ParamSpec, ParamStore, Parameterized};
use crate::tensor::Matrix;

pub const DEFAULT_MAX_DEGREE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    /// `n x 3`
    pub coords: Matrix,
    /// `n x f`, `f` may be zero.
    pub features: Matrix,
}

impl PointCloud {
    pub fn new(coords: Matrix, features: Matrix) -> Result<Self> {
        if coords.cols() != 3 {
            return Err(Error::Shape(format!(
                "point coordinates need 3 columns, got {}",
                coords.cols()
            )));
        }
        if coords.rows() == 0 {
            return Err(Error::InvalidInput("point cloud is empty".into()));
        }
        if features.rows() != coords.rows() {
            return Err(Error::Shape(format!(
                "{} points but {} feature rows",
                coords.rows(),
                features.rows()
            )));
        }
        if !coords.is_finite() {
            return Err(Error::InvalidInput("non-finite point coordinates".into()));
        }
        Ok(Self { coords, features })
    }

    pub fn without_features(coords: Matrix) -> Result<Self> {
        let n = coords.rows();
        Self::new(coords, Matrix::zeros(n, 0))
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.rows() == 0
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupernodeSelection {
    pub indices: Vec<usize>,
    pub radius: f64,
    pub max_degree: usize,
}

/// Uniform draw of `n_sn` distinct supernodes, sorted ascending.
pub fn select_supernodes<R: Rng + ?Sized>(
    cloud: &PointCloud,
    n_sn: usize,
    radius: f64,
    max_degree: usize,
    rng: &mut R,
) -> Result<SupernodeSelection> {
    if n_sn > cloud.len() {
        return Err(Error::Sizing(format!(
            "requested {n_sn} supernodes from a cloud of {} points",
            cloud.len()
        )));
    }
    if !(radius > 0.0) || max_degree == 0 {
        return Err(Error::Config(format!(
            "supernode radius {radius} and max degree {max_degree} must be positive"
        )));
    }
    let mut indices = rand::seq::index::sample(rng, cloud.len(), n_sn).into_vec();
    indices.sort_unstable();
    Ok(SupernodeSelection {
        indices,
        radius,
        max_degree,
    })
}

/// Uniform grid over point coordinates with cubic cells of side `cell`.
pub struct SpatialGrid<'a> {
    coords: &'a Matrix,
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl<'a> SpatialGrid<'a> {
    pub fn build(coords: &'a Matrix, cell: f64) -> Self {
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for i in 0..coords.rows() {
            cells.entry(Self::key(coords.row(i), cell)).or_default().push(i);
        }
        Self { coords, cell, cells }
    }

    fn key(p: &[f64], cell: f64) -> (i64, i64, i64) {
        (
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        )
    }

    /// Points within `radius` (<= the cell size) of `center`, nearest first,
    /// ties by lower index, truncated to `max_degree`.
    pub fn query(&self, center: &[f64], radius: f64, max_degree: usize) -> Vec<usize> {
        debug_assert!(radius <= self.cell * (1.0 + 1e-12));
        let (cx, cy, cz) = Self::key(center, self.cell);
        let r2 = radius * radius;
        let mut hits: Vec<(f64, usize)> = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(list) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &j in list {
                            let d2 = dist2(center, self.coords.row(j));
                            if d2 <= r2 {
                                hits.push((d2, j));
                            }
                        }
                    }
                }
            }
        }
        hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        hits.truncate(max_degree);
        hits.into_iter().map(|(_, j)| j).collect()
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Neighbor lists of arbitrary centers: cloud points within `radius`,
/// nearest first with lower-index tie-breaking, at most `max_degree` each.
pub fn radius_neighbors(cloud: &PointCloud, centers: &Matrix, radius: f64, max_degree: usize) -> Vec<Vec<usize>> {
    let grid = SpatialGrid::build(&cloud.coords, radius);
    (0..centers.rows())
        .map(|c| grid.query(centers.row(c), radius, max_degree))
        .collect()
}

/// Neighbor lists for supernodes that are themselves cloud points. The
/// supernode always appears first in its own list, even among duplicates.
pub fn supernode_neighbors(cloud: &PointCloud, selection: &SupernodeSelection) -> Vec<Vec<usize>> {
    let grid = SpatialGrid::build(&cloud.coords, selection.radius);
    selection
        .indices
        .iter()
        .map(|&s| {
            let found = grid.query(cloud.coords.row(s), selection.radius, selection.max_degree + 1);
            let mut list = Vec::with_capacity(selection.max_degree);
            list.push(s);
            list.extend(found.into_iter().filter(|&j| j != s));
            list.truncate(selection.max_degree);
            list
        })
        .collect()
}

/// Learned pooling layer. Messages see `gelu(dense(dx, dy, dz, |d|))` joined
/// with the neighbor's features; the output projection sees the mean message,
/// the supernode's sine/cosine position embedding and its own features.
#[derive(Clone, Debug, PartialEq)]
pub struct SupernodePooling {
    pub name: String,
    pub d: usize,
    pub n_features: usize,
    pub rel_embed: DenseLayer,
    pub message: MlpBlock,
    pub proj: DenseLayer,
}

impl SupernodePooling {
    pub fn new(name: impl Into<String>, d: usize, n_features: usize) -> Self {
        let name = name.into();
        Self {
            rel_embed: DenseLayer::new(format!("{name}.rel_embed"), 4, d),
            message: MlpBlock::new(format!("{name}.message"), d + n_features, d, d),
            proj: DenseLayer::new(format!("{name}.proj"), 2 * d + n_features, d),
            name,
            d,
            n_features,
        }
    }

    /// Sine/cosine embedding of supernode positions, zero-padded to `d`.
    pub fn position_embedding(&self, coords: &Matrix) -> Matrix {
        let raw = sincos_embed(coords, (self.d / 6).max(1));
        let mut out = Matrix::zeros(coords.rows(), self.d);
        let w = raw.cols().min(self.d);
        for r in 0..coords.rows() {
            out.row_mut(r)[..w].copy_from_slice(&raw.row(r)[..w]);
        }
        out
    }

    /// Returns the `n_sn x d` token sequence.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cloud: &PointCloud,
        selection: &SupernodeSelection,
    ) -> Result<Var> {
        if cloud.num_features() != self.n_features {
            return Err(Error::Shape(format!(
                "`{}` expects {} point features, cloud has {}",
                self.name,
                self.n_features,
                cloud.num_features()
            )));
        }
        let neighbors = supernode_neighbors(cloud, selection);
        let edges: usize = neighbors.iter().map(Vec::len).sum();
        let mut rel = Matrix::zeros(edges, 4);
        let mut feat = Matrix::zeros(edges, self.n_features);
        let mut offsets = Vec::with_capacity(neighbors.len() + 1);
        offsets.push(0);
        let mut e = 0;
        for (&s, list) in selection.indices.iter().zip(&neighbors) {
            let cs = cloud.coords.row(s);
            for &j in list {
                let cj = cloud.coords.row(j);
                let d = [cj[0] - cs[0], cj[1] - cs[1], cj[2] - cs[2]];
                let mag = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                rel.row_mut(e).copy_from_slice(&[d[0], d[1], d[2], mag]);
                feat.row_mut(e).copy_from_slice(cloud.features.row(j));
                e += 1;
            }
            offsets.push(e);
        }
        let rel = g.input(rel);
        let x = self.rel_embed.forward(g, store, rel)?;
        let mut x = g.gelu(x);
        if self.n_features > 0 {
            let f = g.input(feat);
            x = g.concat_cols(&[x, f])?;
        }
        let msg = self.message.forward(g, store, x)?;
        let agg = g.segment_mean(msg, &offsets)?;

        let sn_coords = cloud.coords.gather_rows(&selection.indices);
        let mut own = vec![agg, g.input(self.position_embedding(&sn_coords))];
        if self.n_features > 0 {
            own.push(g.input(cloud.features.gather_rows(&selection.indices)));
        }
        let joined = g.concat_cols(&own)?;
        self.proj.forward(g, store, joined)
    }
}

impl Parameterized for SupernodePooling {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.rel_embed.param_specs();
        v.extend(self.message.param_specs());
        v.extend(self.proj.param_specs());
        v
    }
}

/// Evaluates a pooling layer outside of a training graph.
pub fn supernode_encode(
    cloud: &PointCloud,
    selection: &SupernodeSelection,
    layer: &SupernodePooling,
    store: &ParamStore,
) -> Result<Matrix> {
    let mut g = Graph::new();
    let y = layer.forward(&mut g, store, cloud, selection)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, f: usize, scale: f64) -> PointCloud {
        let coords = Matrix::from_vec(n, 3, (0..3 * n).map(|_| rng.random_range(0.0..scale)).collect()).unwrap();
        let features = Matrix::from_vec(n, f, (0..n * f).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        PointCloud::new(coords, features).unwrap()
    }

    #[test]
    fn selection_sizes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cloud = random_cloud(&mut rng, 10, 0, 1.0);
        let all = select_supernodes(&cloud, 10, 0.5, 4, &mut rng).unwrap();
        assert_eq!(all.indices, (0..10).collect::<Vec<_>>());
        assert!(matches!(select_supernodes(&cloud, 11, 0.5, 4, &mut rng), Err(Error::Sizing(_))));
        let a = select_supernodes(&cloud, 3, 0.5, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = select_supernodes(&cloud, 3, 0.5, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_supernode_frequency_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = random_cloud(&mut rng, 10, 0, 1.0);
        let mut counts = [0usize; 10];
        for _ in 0..10_000 {
            counts[select_supernodes(&cloud, 1, 0.5, 4, &mut rng).unwrap().indices[0]] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.1).abs() <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn single_point_neighbors_itself() {
        let cloud = PointCloud::without_features(Matrix::row_vector(&[3.0, 4.0, 5.0])).unwrap();
        let n = radius_neighbors(&cloud, &cloud.coords, 0.01, 8);
        assert_eq!(n, vec![vec![0]]);
    }

    #[test]
    fn grid_search_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = random_cloud(&mut rng, 20, 0, 1.0);
        let got = radius_neighbors(&cloud, &cloud.coords, 0.3, 100);
        for (c, list) in got.iter().enumerate() {
            let mut expect: Vec<(f64, usize)> = (0..20)
                .map(|j| (dist2(cloud.coords.row(c), cloud.coords.row(j)), j))
                .filter(|(d, _)| *d <= 0.09)
                .collect();
            expect.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            assert_eq!(list, &expect.iter().map(|x| x.1).collect::<Vec<_>>());
        }
    }

    #[test]
    fn truncation_keeps_nearest_then_lowest_index() {
        // center at origin, four points at distance 1, one at 0.5
        let coords = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.0, 0.5],
            vec![-1.0, 0.0, 0.0],
        ])
        .unwrap();
        let cloud = PointCloud::without_features(coords).unwrap();
        let got = radius_neighbors(&cloud, &Matrix::zeros(1, 3), 1.5, 2);
        assert_eq!(got, vec![vec![3, 0]]);
    }

    #[test]
    fn isolated_supernode_token_formula() {
        let cloud = PointCloud::without_features(Matrix::from_rows(&[vec![0.0, 0.0, 0.0], vec![50.0, 50.0, 50.0]]).unwrap()).unwrap();
        let layer = SupernodePooling::new("p", 12, 0);
        let store = init_params(&layer.param_specs(), &mut ChaCha8Rng::seed_from_u64(3));
        let sel = SupernodeSelection {
            indices: vec![1],
            radius: 1.0,
            max_degree: 32,
        };
        let got = supernode_encode(&cloud, &sel, &layer, &store).unwrap();

        let mut g = Graph::new();
        let z = g.input(Matrix::zeros(1, 4));
        let e = layer.rel_embed.forward(&mut g, &store, z).unwrap();
        let e = g.gelu(e);
        let m = layer.message.forward(&mut g, &store, e).unwrap();
        let pe = g.input(layer.position_embedding(&Matrix::row_vector(&[50.0, 50.0, 50.0])));
        let j = g.concat_cols(&[m, pe]).unwrap();
        let expect = layer.proj.forward(&mut g, &store, j).unwrap();
        assert_eq!(&got, g.value(expect));
    }

    fn dense(store: &ParamStore, l: &DenseLayer, x: &[f64]) -> Vec<f64> {
        let w = &store[&l.weight_name()];
        let b = &store[&l.bias_name()];
        (0..l.d_out)
            .map(|o| b.get(0, o) + (0..l.d_in).map(|i| w.get(o, i) * x[i]).sum::<f64>())
            .collect()
    }

    #[test]
    fn matches_per_neighbor_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud = random_cloud(&mut rng, 6, 2, 1.0);
        let layer = SupernodePooling::new("p", 6, 2);
        let store = init_params(&layer.param_specs(), &mut rng);
        let sel = SupernodeSelection {
            indices: vec![1, 4],
            radius: 0.6,
            max_degree: 32,
        };
        let got = supernode_encode(&cloud, &sel, &layer, &store).unwrap();
        for (row, &s) in sel.indices.iter().enumerate() {
            let cs = cloud.coords.row(s);
            let mut sum = vec![0.0; 6];
            let mut count = 0.0;
            for j in 0..6 {
                let cj = cloud.coords.row(j);
                let d: Vec<f64> = (0..3).map(|a| cj[a] - cs[a]).collect();
                let mag = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                if mag > 0.6 {
                    continue;
                }
                let mut e: Vec<f64> = dense(&store, &layer.rel_embed, &[d[0], d[1], d[2], mag])
                    .into_iter()
                    .map(crate::nn::gelu)
                    .collect();
                e.extend_from_slice(cloud.features.row(j));
                let m = crate::nn::mlp_forward(&e, &layer.message, &store).unwrap();
                for (a, b) in sum.iter_mut().zip(m) {
                    *a += b;
                }
                count += 1.0;
            }
            let mut joined: Vec<f64> = sum.iter().map(|v| v / count).collect();
            joined.extend(sincos_embed(&Matrix::row_vector(cs), 1).into_vec());
            joined.extend_from_slice(cloud.features.row(s));
            let expect = dense(&store, &layer.proj, &joined);
            for (c, v) in expect.iter().enumerate() {
                assert!((got.get(row, c) - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn far_points_have_no_influence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cloud = random_cloud(&mut rng, 30, 1, 1.0);
        // park point 29 far away, then move it further
        cloud.coords.row_mut(29).copy_from_slice(&[100.0, 100.0, 100.0]);
        let layer = SupernodePooling::new("p", 6, 1);
        let store = init_params(&layer.param_specs(), &mut rng);
        let sel = SupernodeSelection {
            indices: (0..10).collect(),
            radius: 0.4,
            max_degree: 32,
        };
        let a = supernode_encode(&cloud, &sel, &layer, &store).unwrap();
        cloud.coords.row_mut(29).copy_from_slice(&[200.0, 150.0, 120.0]);
        cloud.features.set(29, 0, 7.0);
        let b = supernode_encode(&cloud, &sel, &layer, &store).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn messages_depend_on_relative_geometry_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cloud = random_cloud(&mut rng, 40, 0, 1.0);
        let layer = SupernodePooling::new("p", 6, 0);
        let mut store = init_params(&layer.param_specs(), &mut rng);
        let w = store.get_mut(&layer.proj.weight_name()).unwrap();
        for o in 0..6 {
            for i in 6..12 {
                w.set(o, i, 0.0);
            }
        }
        let sel = SupernodeSelection {
            indices: vec![0, 5, 9, 20],
            radius: 0.5,
            max_degree: 8,
        };
        let a = supernode_encode(&cloud, &sel, &layer, &store).unwrap();
        let shifted = PointCloud::without_features(cloud.coords.map(|v| v + 0.25)).unwrap();
        let b = supernode_encode(&shifted, &sel, &layer, &store).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn storage_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cloud = random_cloud(&mut rng, 25, 2, 1.0);
        let layer = SupernodePooling::new("p", 6, 2);
        let store = init_params(&layer.param_specs(), &mut rng);
        let sel = SupernodeSelection {
            indices: vec![2, 8, 13],
            radius: 0.7,
            max_degree: 64,
        };
        let a = supernode_encode(&cloud, &sel, &layer, &store).unwrap();
        let perm: Vec<usize> = (0..25).rev().collect();
        let shuffled = PointCloud::new(cloud.coords.gather_rows(&perm), cloud.features.gather_rows(&perm)).unwrap();
        let remapped = SupernodeSelection {
            indices: sel.indices.iter().map(|&i| 24 - i).collect(),
            ..sel.clone()
        };
        let b = supernode_encode(&shuffled, &remapped, &layer, &store).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }
}
