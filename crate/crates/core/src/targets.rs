//! Regression and classification targets built from scene annotations.
//!
//! The cardinality map spreads a unit of mass uniformly over each instance
//! mask and pools it per grid cell, so it sums to the object count exactly
//! (up to rounding). The Gaussian density map is the classical alternative,
//! kept as a baseline.

use crate::error::{Error, Result};
use crate::raster::{InstanceMask, Point, PointAnnotations, Scene};

/// Row-major real-valued grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sums `factor x factor` blocks.
    pub fn pool(&self, factor: usize) -> Result<Grid> {
        check_divisible(self.width, self.height, factor)?;
        let (gw, gh) = (self.width / factor, self.height / factor);
        let mut out = Grid::zeros(gw, gh);
        for y in 0..self.height {
            for x in 0..self.width {
                out.data[(y / factor) * gw + x / factor] += self.data[y * self.width + x];
            }
        }
        Ok(out)
    }
}

fn check_divisible(width: usize, height: usize, factor: usize) -> Result<()> {
    if factor == 0 {
        return Err(Error::InvalidParameter("grid factor must be >= 1".into()));
    }
    for extent in [width, height] {
        if extent % factor != 0 {
            return Err(Error::NotDivisible { extent, factor });
        }
    }
    Ok(())
}

/// Objects per grid cell; sums to `Q`.
#[derive(Clone, Debug, PartialEq)]
pub struct CardinalityMap {
    pub grid: Grid,
    /// Pixels per cell side.
    pub factor: usize,
}

/// Gaussian-kernel density over grid cells; sums to the point count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub grid: Grid,
    /// Kernel bandwidth in pixels.
    pub sigma: f64,
}

/// Binary per-cell category labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassGrid {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<bool>,
}

impl ClassGrid {
    pub fn as_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&b| f64::from(u8::from(b))).collect()
    }
}

/// Sparse point-derived labels: positive and negative cells plus the total
/// annotated count `K`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeakGrids {
    pub width: usize,
    pub height: usize,
    pub positive: Vec<bool>,
    pub negative: Vec<bool>,
    pub count: usize,
}

impl WeakGrids {
    /// `|Omega|`, the number of annotated cells.
    pub fn annotated(&self) -> usize {
        self.positive
            .iter()
            .zip(&self.negative)
            .filter(|(p, n)| **p || **n)
            .count()
    }
}

/// Per-pixel cardinality: every mask pixel receives `1 / N_i` from each
/// mask that covers it.
pub fn pixel_cardinality(masks: &[&InstanceMask], width: usize, height: usize) -> Result<Grid> {
    let mut grid = Grid::zeros(width, height);
    for m in masks {
        if m.width() != width || m.height() != height {
            return Err(Error::ShapeMismatch(format!(
                "mask is {}x{}, grid is {width}x{height}",
                m.width(),
                m.height()
            )));
        }
        if m.area() == 0 {
            return Err(Error::EmptyMask);
        }
        let share = 1.0 / m.area() as f64;
        for &p in m.indices() {
            grid.data[p as usize] += share;
        }
    }
    Ok(grid)
}

pub fn grid_cardinality(pixel: &Grid, factor: usize) -> Result<CardinalityMap> {
    Ok(CardinalityMap {
        grid: pixel.pool(factor)?,
        factor,
    })
}

/// Cardinality map of one category of `scene`. Sub-pixel instances carry
/// no mask and therefore no mass.
pub fn scene_cardinality(scene: &Scene, category: u32, factor: usize) -> Result<CardinalityMap> {
    let pixel = pixel_cardinality(&scene.masks(category), scene.width(), scene.height())?;
    grid_cardinality(&pixel, factor)
}

/// How the density kernel bandwidth is chosen.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum SigmaRule {
    /// `max(min, scale * sqrt(mean instance area))`.
    Adaptive { scale: f64, min: f64 },
    Fixed { sigma: f64 },
}

impl Default for SigmaRule {
    fn default() -> Self {
        SigmaRule::Adaptive {
            scale: 0.25,
            min: 1.0,
        }
    }
}

impl SigmaRule {
    pub fn sigma(&self, mean_area: Option<f64>) -> f64 {
        match *self {
            SigmaRule::Adaptive { scale, min } => {
                mean_area.map_or(min, |a| (scale * a.sqrt()).max(min))
            }
            SigmaRule::Fixed { sigma } => sigma,
        }
    }
}

/// Unit-mass Gaussians at each point, truncated at `3 sigma` and the image
/// border and renormalised, then pooled to cells of `factor` pixels.
pub fn gaussian_density(
    points: &[Point],
    sigma: f64,
    width: usize,
    height: usize,
    factor: usize,
) -> Result<DensityMap> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("sigma must be > 0, got {sigma}")));
    }
    check_divisible(width, height, factor)?;
    let mut pixels = Grid::zeros(width, height);
    let reach = (3.0 * sigma).ceil() as i64;
    let cutoff = (3.0 * sigma).powi(2);
    let mut kernel = Vec::new();
    for p in points {
        let (px, py) = (p.x as i64, p.y as i64);
        if p.x as usize >= width || p.y as usize >= height {
            return Err(Error::OutOfBounds(format!(
                "point ({}, {}) outside {width}x{height}",
                p.x, p.y
            )));
        }
        kernel.clear();
        let mut mass = 0.0;
        for y in (py - reach).max(0)..=(py + reach).min(height as i64 - 1) {
            for x in (px - reach).max(0)..=(px + reach).min(width as i64 - 1) {
                let d2 = ((x - px).pow(2) + (y - py).pow(2)) as f64;
                if d2 > cutoff {
                    continue;
                }
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                mass += v;
                kernel.push((y as usize * width + x as usize, v));
            }
        }
        for &(i, v) in &kernel {
            pixels.data[i] += v / mass;
        }
    }
    Ok(DensityMap {
        grid: pixels.pool(factor)?,
        sigma,
    })
}

/// Cell is positive iff any pixel of any given mask falls inside it.
pub fn strong_class_grid(
    masks: &[&InstanceMask],
    width: usize,
    height: usize,
    factor: usize,
) -> Result<ClassGrid> {
    check_divisible(width, height, factor)?;
    let (gw, gh) = (width / factor, height / factor);
    let mut labels = vec![false; gw * gh];
    for m in masks {
        for (x, y) in m.coords() {
            if x >= width || y >= height {
                return Err(Error::OutOfBounds(format!("mask pixel ({x}, {y})")));
            }
            labels[(y / factor) * gw + x / factor] = true;
        }
    }
    Ok(ClassGrid {
        width: gw,
        height: gh,
        labels,
    })
}

/// Maps points to the cells containing them. Several points in one cell set
/// it once; a cell hit by both a positive and a negative point is positive.
pub fn weak_label_grids(
    points: &PointAnnotations,
    width: usize,
    height: usize,
    factor: usize,
) -> Result<WeakGrids> {
    check_divisible(width, height, factor)?;
    let (gw, gh) = (width / factor, height / factor);
    let cell = |p: &Point| -> Result<usize> {
        let (x, y) = (p.x as usize, p.y as usize);
        if x >= width || y >= height {
            return Err(Error::OutOfBounds(format!(
                "point ({x}, {y}) outside {width}x{height}"
            )));
        }
        Ok((y / factor) * gw + x / factor)
    };
    let mut positive = vec![false; gw * gh];
    let mut negative = vec![false; gw * gh];
    for p in &points.positive {
        positive[cell(p)?] = true;
    }
    for p in &points.negative {
        let c = cell(p)?;
        if !positive[c] {
            negative[c] = true;
        }
    }
    Ok(WeakGrids {
        width: gw,
        height: gh,
        positive,
        negative,
        count: points.count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{render_scene, InstanceSpec, ShapeKind};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(w: usize, h: usize, coords: &[(usize, usize)]) -> InstanceMask {
        InstanceMask::from_coords(w, h, coords.iter().copied()).unwrap()
    }

    #[test]
    fn pixel_cardinality_examples() {
        let m = mask(4, 4, &[(0, 0), (1, 0), (0, 1), (1, 1)]);
        let g = pixel_cardinality(&[&m], 4, 4).unwrap();
        assert_eq!(g.get(0, 0), 0.25);
        assert_eq!(g.sum(), 1.0);

        let a = mask(8, 8, &[(0, 0), (1, 0)]);
        let b = mask(8, 8, &[(3, 3), (4, 3), (5, 3), (6, 3), (7, 3)]);
        assert!((pixel_cardinality(&[&a, &b], 8, 8).unwrap().sum() - 2.0).abs() < 1e-15);

        let a = mask(4, 4, &[(1, 1), (2, 1)]);
        let b = mask(4, 4, &[(2, 1), (3, 1)]);
        let g = pixel_cardinality(&[&a, &b], 4, 4).unwrap();
        // Direct summation: 1/2 + 1/2 on the shared pixel.
        assert_eq!(g.get(2, 1), 1.0);
        assert_eq!(g.get(1, 1), 0.5);
        assert_eq!(g.sum(), 2.0);
    }

    #[test]
    fn grid_cardinality_examples() {
        let m = mask(16, 16, &[(1, 1), (2, 1), (1, 2), (2, 2)]);
        let c = grid_cardinality(&pixel_cardinality(&[&m], 16, 16).unwrap(), 8).unwrap();
        assert_eq!(c.grid.data, vec![1.0, 0.0, 0.0, 0.0]);

        let straddle = mask(16, 16, &[(6, 0), (7, 0), (8, 0), (9, 0)]);
        let c = grid_cardinality(&pixel_cardinality(&[&straddle], 16, 16).unwrap(), 8).unwrap();
        assert_eq!(c.grid.data, vec![0.5, 0.5, 0.0, 0.0]);

        assert!(matches!(
            grid_cardinality(&Grid::zeros(12, 16), 8),
            Err(Error::NotDivisible { extent: 12, factor: 8 })
        ));
    }

    #[test]
    fn density_is_unit_mass_per_point() {
        let one = gaussian_density(&[Point::new(30, 30)], 2.0, 64, 64, 8).unwrap();
        assert!((one.grid.sum() - 1.0).abs() < 1e-6);
        let pts: Vec<Point> = (0..7).map(|i| Point::new(5 + 8 * i, 3 + 7 * i)).collect();
        let many = gaussian_density(&pts, 3.0, 64, 64, 8).unwrap();
        assert!((many.grid.sum() - 7.0).abs() < 7e-6);
    }

    #[test]
    fn corner_density_keeps_unit_mass() {
        let sigma = 2.5;
        let d = gaussian_density(&[Point::new(0, 0)], sigma, 64, 64, 8).unwrap();
        assert!((d.grid.sum() - 1.0).abs() < 1e-6);
        // The raw kernel inside the image holds about a quarter of its mass
        // (numeric integration over the quadrant); renormalisation restores 1.
        let mut inside = 0.0;
        let mut full = 0.0;
        for y in -20i64..=20 {
            for x in -20i64..=20 {
                let d2 = (x * x + y * y) as f64;
                if d2 > 9.0 * sigma * sigma {
                    continue;
                }
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                full += v;
                if x >= 0 && y >= 0 {
                    inside += v;
                }
            }
        }
        assert!(inside / full > 0.25 && inside / full < 0.4);
        // All mass stays near the corner cell.
        assert!(d.grid.get(0, 0) > 0.99);
    }

    #[test]
    fn sigma_rule() {
        let rule = SigmaRule::default();
        assert_eq!(rule.sigma(Some(4.0)), 1.0);
        assert_eq!(rule.sigma(Some(400.0)), 5.0);
        assert_eq!(rule.sigma(None), 1.0);
        assert_eq!(SigmaRule::Fixed { sigma: 2.0 }.sigma(Some(400.0)), 2.0);
        assert!(gaussian_density(&[], 0.0, 8, 8, 8).is_err());
    }

    #[test]
    fn strong_class_grid_examples() {
        assert!(strong_class_grid(&[], 16, 16, 8).unwrap().labels.iter().all(|&b| !b));
        let full: Vec<(usize, usize)> = (8..16).flat_map(|y| (0..8).map(move |x| (x, y))).collect();
        let g = strong_class_grid(&[&mask(16, 16, &full)], 16, 16, 8).unwrap();
        assert_eq!(g.labels, vec![false, false, true, false]);
    }

    #[test]
    fn class_grid_matches_cell_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let coords: Vec<(usize, usize)> = (0..rng.random_range(1..20))
                .map(|_| (rng.random_range(0..32), rng.random_range(0..32)))
                .collect();
            let m = mask(32, 32, &coords);
            let g = strong_class_grid(&[&m], 32, 32, 8).unwrap();
            for cy in 0..4 {
                for cx in 0..4 {
                    let mut any = false;
                    for y in cy * 8..cy * 8 + 8 {
                        for x in cx * 8..cx * 8 + 8 {
                            any |= m.contains(x, y);
                        }
                    }
                    assert_eq!(g.labels[cy * 4 + cx], any);
                }
            }
        }
    }

    #[test]
    fn weak_grid_rules() {
        let pts = PointAnnotations {
            positive: vec![Point::new(1, 1), Point::new(9, 1), Point::new(1, 9)],
            negative: vec![],
        };
        let g = weak_label_grids(&pts, 16, 16, 8).unwrap();
        assert_eq!(g.positive.iter().filter(|&&b| b).count(), 3);
        assert_eq!(g.count, 3);

        let pts = PointAnnotations {
            positive: vec![Point::new(1, 1), Point::new(2, 2)],
            negative: vec![],
        };
        let g = weak_label_grids(&pts, 16, 16, 8).unwrap();
        assert_eq!(g.positive.iter().filter(|&&b| b).count(), 1);
        assert_eq!(g.count, 2);

        let pts = PointAnnotations {
            positive: vec![Point::new(1, 1)],
            negative: vec![Point::new(3, 3), Point::new(12, 12)],
        };
        let g = weak_label_grids(&pts, 16, 16, 8).unwrap();
        assert!(g.positive[0] && !g.negative[0]);
        assert!(g.negative[3]);
        assert_eq!(g.annotated(), 2);
    }

    fn random_scene(rng: &mut ChaCha8Rng) -> crate::raster::Scene {
        let n = rng.random_range(0..12);
        let specs: Vec<InstanceSpec> = (0..n)
            .map(|_| InstanceSpec {
                kind: if rng.random_bool(0.5) { ShapeKind::Disk } else { ShapeKind::Square },
                cx: rng.random_range(0.0..64.0),
                cy: rng.random_range(0.0..64.0),
                size: rng.random_range(1.0..9.0),
                category: 0,
                intensity: 0.8,
            })
            .collect();
        render_scene(64, 64, &specs, 0.1, 0.0, rng).unwrap()
    }

    #[test]
    fn density_and_cardinality_totals_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..40 {
            let scene = random_scene(&mut rng);
            let card = scene_cardinality(&scene, 0, 8).unwrap();
            let pts: Vec<Point> = scene
                .masks(0)
                .iter()
                .map(|m| {
                    let (cx, cy) = m.centroid();
                    let (x, y) = m.nearest_pixel(cx, cy);
                    Point::new(x as u32, y as u32)
                })
                .collect();
            let sigma = SigmaRule::default().sigma(scene.mean_area());
            let den = gaussian_density(&pts, sigma, 64, 64, 8).unwrap();
            let q = scene.count(0) as f64;
            assert!((card.grid.sum() - den.grid.sum()).abs() <= 0.01 * q.max(1.0));
        }
    }

    proptest! {
        #[test]
        fn cardinality_ignores_mask_order(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let masks: Vec<InstanceMask> = (0..rng.random_range(1..8))
                .map(|_| {
                    let coords: Vec<(usize, usize)> = (0..rng.random_range(1..30))
                        .map(|_| (rng.random_range(0..16), rng.random_range(0..16)))
                        .collect();
                    mask(16, 16, &coords)
                })
                .collect();
            let fwd: Vec<&InstanceMask> = masks.iter().collect();
            let rev: Vec<&InstanceMask> = masks.iter().rev().collect();
            let a = grid_cardinality(&pixel_cardinality(&fwd, 16, 16).unwrap(), 8).unwrap();
            let b = grid_cardinality(&pixel_cardinality(&rev, 16, 16).unwrap(), 8).unwrap();
            for (x, y) in a.grid.data.iter().zip(&b.grid.data) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            prop_assert!((a.grid.sum() - masks.len() as f64).abs() <= 1e-9 * masks.len() as f64);
        }

        #[test]
        fn weak_grids_are_disjoint(pos in prop::collection::vec((0u32..32, 0u32..32), 0..20),
                                   neg in prop::collection::vec((0u32..32, 0u32..32), 0..20)) {
            let pts = PointAnnotations {
                positive: pos.iter().map(|&(x, y)| Point::new(x, y)).collect(),
                negative: neg.iter().map(|&(x, y)| Point::new(x, y)).collect(),
            };
            let g = weak_label_grids(&pts, 32, 32, 8).unwrap();
            prop_assert!(g.positive.iter().zip(&g.negative).all(|(p, n)| !(*p && *n)));
            prop_assert!(g.positive.iter().filter(|&&b| b).count() <= g.count);
        }
    }
}
