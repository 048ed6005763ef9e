use rand::Rng;

use crate::error::{Error, Result};
use crate::profiles::{StabilityParams, INV_LMO_RANGE, Z0_RANGE};
use crate::tensor::Matrix;

/// Side of the square built area, m.
pub const BUILT_AREA: f64 = 100.0;
/// Zone of interest `[0, x] x [0, y] x [0, z]`, m. The wind blows along +x.
pub const ZONE: [f64; 3] = [400.0, 100.0, 50.0];
pub const HEIGHT_RANGE: (f64, f64) = (5.0, 40.0);
pub const FOOTPRINT_RANGE: (f64, f64) = (5.0, 15.0);
pub const MAX_ATTEMPTS: usize = 10_000;
pub const NEUTRAL_BAND: f64 = 0.005;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Building {
    pub cx: f64,
    pub cy: f64,
    /// Extent along x.
    pub width: f64,
    /// Extent along y.
    pub depth: f64,
    pub height: f64,
}

impl Building {
    pub fn x_range(&self) -> (f64, f64) {
        (self.cx - self.width / 2.0, self.cx + self.width / 2.0)
    }

    pub fn y_range(&self) -> (f64, f64) {
        (self.cy - self.depth / 2.0, self.cy + self.depth / 2.0)
    }

    /// Plan-view rectangles sharing a region of positive area.
    pub fn overlaps(&self, other: &Building) -> bool {
        let (ax0, ax1) = self.x_range();
        let (bx0, bx1) = other.x_range();
        let (ay0, ay1) = self.y_range();
        let (by0, by1) = other.y_range();
        ax0 < bx1 && bx0 < ax1 && ay0 < by1 && by0 < ay1
    }

    /// Strict interior test; surface points count as outside.
    pub fn contains(&self, p: &[f64]) -> bool {
        let (x0, x1) = self.x_range();
        let (y0, y1) = self.y_range();
        p[0] > x0 && p[0] < x1 && p[1] > y0 && p[1] < y1 && p[2] >= 0.0 && p[2] < self.height
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometrySample {
    pub buildings: Vec<Building>,
}

impl GeometrySample {
    pub fn contains(&self, p: &[f64]) -> bool {
        self.buildings.iter().any(|b| b.contains(p))
    }
}

pub fn generate_geometry<R: Rng + ?Sized>(rng: &mut R, n_buildings: usize) -> Result<GeometrySample> {
    if n_buildings == 0 {
        return Err(Error::Config("at least one building is required".into()));
    }
    let mut buildings: Vec<Building> = Vec::with_capacity(n_buildings);
    for i in 0..n_buildings {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let width = rng.random_range(FOOTPRINT_RANGE.0..=FOOTPRINT_RANGE.1);
            let depth = rng.random_range(FOOTPRINT_RANGE.0..=FOOTPRINT_RANGE.1);
            let b = Building {
                cx: rng.random_range(width / 2.0..=BUILT_AREA - width / 2.0),
                cy: rng.random_range(depth / 2.0..=BUILT_AREA - depth / 2.0),
                width,
                depth,
                height: rng.random_range(HEIGHT_RANGE.0..=HEIGHT_RANGE.1),
            };
            if buildings.iter().all(|o| !o.overlaps(&b)) {
                buildings.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement(format!(
                "could not place building {} of {n_buildings} after {MAX_ATTEMPTS} attempts; use fewer or smaller buildings",
                i + 1
            )));
        }
    }
    Ok(GeometrySample { buildings })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StabilityClass {
    Unstable,
    Neutral,
    Stable,
}

impl StabilityClass {
    pub const ALL: [StabilityClass; 3] = [StabilityClass::Unstable, StabilityClass::Neutral, StabilityClass::Stable];

    pub fn of(p: &StabilityParams) -> Self {
        if p.inv_lmo < -NEUTRAL_BAND {
            StabilityClass::Unstable
        } else if p.inv_lmo > NEUTRAL_BAND {
            StabilityClass::Stable
        } else {
            StabilityClass::Neutral
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StabilityClass::Unstable => "unstable",
            StabilityClass::Neutral => "neutral",
            StabilityClass::Stable => "stable",
        }
    }
}

pub fn sample_stability<R: Rng + ?Sized>(rng: &mut R) -> StabilityParams {
    StabilityParams {
        inv_lmo: rng.random_range(INV_LMO_RANGE.0..=INV_LMO_RANGE.1),
        z0: rng.random_range(Z0_RANGE.0..=Z0_RANGE.1),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PointCounts {
    pub terrain: usize,
    pub obstacles: usize,
    pub volume: usize,
}

/// Terrain points on the ground of the zone, obstacle points on building
/// walls and roofs weighted by area, volume points in the zone outside
/// buildings. All `n x 3` in meters.
pub fn extract_point_clouds<R: Rng + ?Sized>(
    geometry: &GeometrySample,
    counts: PointCounts,
    rng: &mut R,
) -> Result<(Matrix, Matrix, Matrix)> {
    if counts.terrain == 0 || counts.obstacles == 0 || counts.volume == 0 {
        return Err(Error::Config("point counts must be positive".into()));
    }
    let mut terrain = Matrix::zeros(counts.terrain, 3);
    for r in 0..counts.terrain {
        terrain.set(r, 0, rng.random_range(0.0..=ZONE[0]));
        terrain.set(r, 1, rng.random_range(0.0..=ZONE[1]));
    }

    let faces: Vec<(usize, usize, f64)> = geometry
        .buildings
        .iter()
        .enumerate()
        .flat_map(|(i, b)| {
            let areas = face_areas(b);
            (0..5).map(move |f| (i, f, areas[f]))
        })
        .collect();
    let total: f64 = faces.iter().map(|f| f.2).sum();
    let mut obstacles = Matrix::zeros(counts.obstacles, 3);
    for r in 0..counts.obstacles {
        let mut t = rng.random_range(0.0..total);
        let mut pick = faces[faces.len() - 1];
        for f in &faces {
            if t < f.2 {
                pick = *f;
                break;
            }
            t -= f.2;
        }
        let p = point_on_face(&geometry.buildings[pick.0], pick.1, rng);
        obstacles.row_mut(r).copy_from_slice(&p);
    }

    let mut volume = Matrix::zeros(counts.volume, 3);
    let mut r = 0;
    while r < counts.volume {
        let p = [
            rng.random_range(0.0..=ZONE[0]),
            rng.random_range(0.0..=ZONE[1]),
            rng.random_range(0.0..=ZONE[2]),
        ];
        if !geometry.contains(&p) {
            volume.row_mut(r).copy_from_slice(&p);
            r += 1;
        }
    }
    Ok((terrain, obstacles, volume))
}

/// Roof, then the walls facing -x, +x, -y, +y.
pub fn face_areas(b: &Building) -> [f64; 5] {
    [
        b.width * b.depth,
        b.depth * b.height,
        b.depth * b.height,
        b.width * b.height,
        b.width * b.height,
    ]
}

fn point_on_face<R: Rng + ?Sized>(b: &Building, face: usize, rng: &mut R) -> [f64; 3] {
    let (x0, x1) = b.x_range();
    let (y0, y1) = b.y_range();
    let x = rng.random_range(x0..=x1);
    let y = rng.random_range(y0..=y1);
    let z = rng.random_range(0.0..=b.height);
    match face {
        0 => [x, y, b.height],
        1 => [x0, y, z],
        2 => [x1, y, z],
        3 => [x, y0, z],
        _ => [x, y1, z],
    }
}

/// Face index of a surface point (see [`face_areas`]), if it lies on one.
pub fn face_of(b: &Building, p: &[f64]) -> Option<usize> {
    let (x0, x1) = b.x_range();
    let (y0, y1) = b.y_range();
    let inside_x = p[0] >= x0 && p[0] <= x1;
    let inside_y = p[1] >= y0 && p[1] <= y1;
    let inside_z = p[2] >= 0.0 && p[2] <= b.height;
    if p[2] == b.height && inside_x && inside_y {
        Some(0)
    } else if p[0] == x0 && inside_y && inside_z {
        Some(1)
    } else if p[0] == x1 && inside_y && inside_z {
        Some(2)
    } else if p[1] == y0 && inside_x && inside_z {
        Some(3)
    } else if p[1] == y1 && inside_x && inside_z {
        Some(4)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_building_fits() {
        for seed in 0..50 {
            let g = generate_geometry(&mut ChaCha8Rng::seed_from_u64(seed), 1).unwrap();
            let b = g.buildings[0];
            let (x0, x1) = b.x_range();
            let (y0, y1) = b.y_range();
            assert!(x0 >= 0.0 && x1 <= 100.0 && y0 >= 0.0 && y1 <= 100.0);
            assert!((5.0..=40.0).contains(&b.height));
        }
    }

    #[test]
    fn no_plan_view_overlap() {
        for seed in 0..10 {
            let g = generate_geometry(&mut ChaCha8Rng::seed_from_u64(seed), 35).unwrap();
            for (i, a) in g.buildings.iter().enumerate() {
                for b in &g.buildings[i + 1..] {
                    let ix = a.x_range().1.min(b.x_range().1) - a.x_range().0.max(b.x_range().0);
                    let iy = a.y_range().1.min(b.y_range().1) - a.y_range().0.max(b.y_range().0);
                    assert!(ix <= 0.0 || iy <= 0.0);
                }
            }
        }
    }

    #[test]
    fn geometry_deterministic_and_saturation_reported() {
        let a = generate_geometry(&mut ChaCha8Rng::seed_from_u64(3), 8).unwrap();
        let b = generate_geometry(&mut ChaCha8Rng::seed_from_u64(3), 8).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            generate_geometry(&mut ChaCha8Rng::seed_from_u64(3), 500),
            Err(Error::Placement(_))
        ));
        assert!(generate_geometry(&mut ChaCha8Rng::seed_from_u64(3), 0).is_err());
    }

    #[test]
    fn stability_ranges_and_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draws: Vec<StabilityParams> = (0..10_000).map(|_| sample_stability(&mut rng)).collect();
        assert!(draws.iter().all(|p| p.validate().is_ok()));
        let min = draws.iter().map(|p| p.inv_lmo).fold(f64::INFINITY, f64::min);
        let max = draws.iter().map(|p| p.inv_lmo).fold(f64::NEG_INFINITY, f64::max);
        assert!(min < -0.19 && max > 0.09);
        assert_eq!(StabilityClass::of(&StabilityParams { inv_lmo: -0.006, z0: 0.1 }), StabilityClass::Unstable);
        assert_eq!(StabilityClass::of(&StabilityParams { inv_lmo: 0.005, z0: 0.1 }), StabilityClass::Neutral);
        assert_eq!(StabilityClass::of(&StabilityParams { inv_lmo: 0.0051, z0: 0.1 }), StabilityClass::Stable);
        let again = sample_stability(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(again, draws[0]);
    }

    #[test]
    fn extracted_points_respect_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = generate_geometry(&mut rng, 8).unwrap();
        let counts = PointCounts {
            terrain: 300,
            obstacles: 300,
            volume: 3000,
        };
        let (t, o, v) = extract_point_clouds(&g, counts, &mut rng).unwrap();
        assert!((0..300).all(|r| t.get(r, 2) == 0.0));
        for r in 0..3000 {
            let p = v.row(r);
            for b in &g.buildings {
                let (x0, x1) = b.x_range();
                let (y0, y1) = b.y_range();
                let inside = p[0] > x0 && p[0] < x1 && p[1] > y0 && p[1] < y1 && p[2] < b.height;
                assert!(!inside);
            }
            assert!(p[0] <= 400.0 && p[1] <= 100.0 && p[2] <= 50.0);
        }
        for r in 0..300 {
            assert!(g.buildings.iter().any(|b| face_of(b, o.row(r)).is_some()));
        }
    }

    #[test]
    fn face_sampling_follows_area() {
        let b = Building {
            cx: 50.0,
            cy: 50.0,
            width: 10.0,
            depth: 20.0,
            height: 30.0,
        };
        let g = GeometrySample { buildings: vec![b] };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let counts = PointCounts {
            terrain: 1,
            obstacles: n,
            volume: 1,
        };
        let (_, o, _) = extract_point_clouds(&g, counts, &mut rng).unwrap();
        let mut hits = [0usize; 5];
        for r in 0..n {
            hits[face_of(&b, o.row(r)).unwrap()] += 1;
        }
        let areas = face_areas(&b);
        let total: f64 = areas.iter().sum();
        for f in 0..5 {
            let expect = areas[f] / total * n as f64;
            assert!(((hits[f] as f64) - expect).abs() / expect < 0.05, "{hits:?}");
        }
    }
}
