//! Synthetic scene corpora: random shapes with exact instance masks, point
//! annotations for one query category, and a binary container format.
//!
//! Categories are tied to shape kinds (`disk` is 0, `square` is 1), so a
//! scene holding both kinds asks the classifier to tell them apart.

mod format;

pub use format::{read_corpus, write_corpus, CORPUS_MAGIC, CORPUS_VERSION};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{render_scene, InstanceSpec, Point, PointAnnotations, Scene, ShapeKind};

/// Placement attempts per object before a spec is declared infeasible.
pub const PLACEMENT_RETRIES: usize = 1000;

pub fn category_of(kind: ShapeKind) -> u32 {
    match kind {
        ShapeKind::Disk => 0,
        ShapeKind::Square => 1,
    }
}

pub fn kind_of(category: u32) -> Option<ShapeKind> {
    match category {
        0 => Some(ShapeKind::Disk),
        1 => Some(ShapeKind::Square),
        _ => None,
    }
}

/// Number of categories a model needs for any generated corpus.
pub const CATEGORY_COUNT: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Kinds that may appear. The query category is drawn from these
    /// unless `query` pins it; the other kinds act as distractors.
    pub kinds: Vec<ShapeKind>,
    pub query: Option<u32>,
    /// Inclusive range of the query-category count `Q`.
    pub count_min: usize,
    pub count_max: usize,
    /// Inclusive range of distractor objects (other kinds).
    pub distractor_min: usize,
    pub distractor_max: usize,
    /// Disk radius or square half-side, in pixels.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Range of a per-scene factor applied to every radius of the scene.
    /// It spreads object sizes across scenes rather than within them.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Minimum centre distance in units of the mean bounding radius of the
    /// pair. At 2.0 or more, shapes never share a pixel.
    pub separation: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub background: f64,
    pub noise: f64,
    pub negative_points: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            kinds: vec![ShapeKind::Disk, ShapeKind::Square],
            query: None,
            count_min: 1,
            count_max: 15,
            distractor_min: 0,
            distractor_max: 0,
            radius_min: 2.0,
            radius_max: 4.0,
            scale_min: 1.0,
            scale_max: 1.0,
            separation: 2.4,
            intensity_min: 0.6,
            intensity_max: 1.0,
            background: 0.1,
            noise: 0.03,
            negative_points: 10,
            seed: 0,
        }
    }
}

fn bounding_radius(kind: ShapeKind, size: f64) -> f64 {
    match kind {
        ShapeKind::Disk => size,
        ShapeKind::Square => size * std::f64::consts::SQRT_2,
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.image_size == 0 || self.image_size > 4096 {
            return bad(format!("image size {} out of range", self.image_size));
        }
        if self.kinds.is_empty() {
            return bad("no shape kinds".into());
        }
        if let Some(q) = self.query {
            match kind_of(q) {
                Some(k) if self.kinds.contains(&k) => {}
                _ => return bad(format!("query category {q} is not among the kinds")),
            }
        }
        if self.count_min > self.count_max {
            return bad(format!("empty count range [{}, {}]", self.count_min, self.count_max));
        }
        if self.distractor_min > self.distractor_max {
            return bad(format!(
                "empty distractor range [{}, {}]",
                self.distractor_min, self.distractor_max
            ));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max && self.radius_max.is_finite()) {
            return bad(format!("bad radius range [{}, {}]", self.radius_min, self.radius_max));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return bad(format!("bad scale range [{}, {}]", self.scale_min, self.scale_max));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return bad(format!("bad separation {}", self.separation));
        }
        if !(0.0..=1.0).contains(&self.background) || !(self.noise >= 0.0 && self.noise < 1.0) {
            return bad("background must lie in [0, 1] and noise in [0, 1)".into());
        }
        if !(self.intensity_min <= self.intensity_max
            && self.intensity_min >= 0.0
            && self.intensity_max <= 1.0)
        {
            return bad(format!(
                "bad intensity range [{}, {}]",
                self.intensity_min, self.intensity_max
            ));
        }
        let contrast_lo = (self.intensity_min - self.background).abs();
        let contrast_hi = (self.intensity_max - self.background).abs();
        let straddles = self.intensity_min <= self.background && self.background <= self.intensity_max;
        if straddles || contrast_lo.min(contrast_hi) < 0.2 {
            return bad("object intensities must differ from the background by at least 0.2".into());
        }
        let largest = self
            .kinds
            .iter()
            .map(|&k| bounding_radius(k, self.radius_max * self.scale_max))
            .fold(0.0, f64::max);
        if 2.0 * largest > self.image_size as f64 {
            return bad(format!(
                "radius {} does not fit the canvas",
                self.radius_max * self.scale_max
            ));
        }
        // Necessary condition for packing: the exclusion disks of the most
        // crowded scene, each at the smallest size, must fit in the canvas.
        let smallest = self
            .kinds
            .iter()
            .map(|&k| bounding_radius(k, self.radius_min * self.scale_min))
            .fold(f64::INFINITY, f64::min);
        let most = self.count_max + self.distractor_max;
        let excl = 0.5 * self.separation * smallest;
        let side = self.image_size as f64;
        if most as f64 * std::f64::consts::PI * excl * excl > side * side {
            return bad(format!(
                "{most} objects cannot be placed at separation {}",
                self.separation
            ));
        }
        Ok(())
    }
}

/// One generated scene with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub scene: Scene,
    pub points: PointAnnotations,
    pub category: u32,
}

impl Sample {
    /// `Q` for the query category.
    pub fn count(&self) -> usize {
        self.scene.count(self.category)
    }
}

/// Draws one scene. `Q` is uniform over the count range, placements are
/// rejection sampled, positive points are mask centroids snapped into the
/// mask, and negatives are uniform over uncovered pixels.
pub fn sample_scene<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Result<Sample> {
    spec.validate()?;
    let category = match spec.query {
        Some(q) => q,
        None => category_of(*spec.kinds.choose(rng).expect("kinds validated non-empty")),
    };
    let query_kind = kind_of(category).expect("category derived from a kind");
    let others: Vec<ShapeKind> = spec.kinds.iter().copied().filter(|&k| k != query_kind).collect();
    let q = rng.random_range(spec.count_min..=spec.count_max);
    let d = if others.is_empty() {
        0
    } else {
        rng.random_range(spec.distractor_min..=spec.distractor_max)
    };

    let mut kinds = vec![query_kind; q];
    for _ in 0..d {
        kinds.push(*others.choose(rng).expect("non-empty"));
    }
    let side = spec.image_size as f64;
    let scale = if spec.scale_min < spec.scale_max {
        rng.random_range(spec.scale_min..=spec.scale_max)
    } else {
        spec.scale_min
    };

    let mut placed: Vec<InstanceSpec> = Vec::with_capacity(kinds.len());
    for &kind in &kinds {
        let mut ok = false;
        for _ in 0..PLACEMENT_RETRIES {
            let size = scale * rng.random_range(spec.radius_min..=spec.radius_max);
            let r = bounding_radius(kind, size);
            let cx = rng.random_range(r..=side - r);
            let cy = rng.random_range(r..=side - r);
            let clear = placed.iter().all(|o| {
                let ro = bounding_radius(o.kind, o.size);
                let min = 0.5 * spec.separation * (r + ro);
                (o.cx - cx).powi(2) + (o.cy - cy).powi(2) >= min * min
            });
            if !clear {
                continue;
            }
            let candidate = InstanceSpec {
                kind,
                cx,
                cy,
                size,
                category: category_of(kind),
                intensity: rng.random_range(spec.intensity_min..=spec.intensity_max),
            };
            // With small separations a shape may hide an earlier one or
            // cover no pixel centre at all; reject those placements so the
            // rendered count stays exact.
            if candidate.rasterize(spec.image_size, spec.image_size).is_empty() {
                continue;
            }
            if spec.separation < 2.0 && !leaves_all_visible(&placed, &candidate, spec.image_size) {
                continue;
            }
            placed.push(candidate);
            ok = true;
            break;
        }
        if !ok {
            return Err(Error::Placement {
                retries: PLACEMENT_RETRIES,
                reason: format!(
                    "could not place object {} of {} ({:?})",
                    placed.len() + 1,
                    kinds.len(),
                    kind
                ),
            });
        }
    }

    let scene = render_scene(
        spec.image_size,
        spec.image_size,
        &placed,
        spec.background,
        spec.noise,
        rng,
    )?;
    debug_assert_eq!(scene.instances.len(), placed.len());

    let positive = scene
        .masks(category)
        .iter()
        .map(|m| {
            let (fx, fy) = m.centroid();
            let (x, y) = m.nearest_pixel(fx, fy);
            Point::new(x as u32, y as u32)
        })
        .collect();
    let mut negative = Vec::with_capacity(spec.negative_points);
    let mut tries = 0;
    while negative.len() < spec.negative_points && tries < PLACEMENT_RETRIES {
        tries += 1;
        let x = rng.random_range(0..spec.image_size);
        let y = rng.random_range(0..spec.image_size);
        if !scene.covered(x, y) {
            negative.push(Point::new(x as u32, y as u32));
        }
    }
    Ok(Sample {
        scene,
        points: PointAnnotations { positive, negative },
        category,
    })
}

/// Whether every shape in `placed` keeps at least one visible pixel once
/// `next` is painted on top.
fn leaves_all_visible(placed: &[InstanceSpec], next: &InstanceSpec, size: usize) -> bool {
    placed.iter().enumerate().all(|(i, o)| {
        o.rasterize(size, size).into_iter().any(|(x, y)| {
            !next.covers(x, y) && !placed[i + 1..].iter().any(|p| p.covers(x, y))
        })
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }

    /// First scene id of the split. Ids of different splits never collide
    /// below 2^40 scenes per split.
    pub fn id_base(self) -> u64 {
        (self.tag() as u64) << 40
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusEntry {
    pub id: u64,
    pub sample: Sample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: SceneSpec,
    pub split: Split,
    pub entries: Vec<CorpusEntry>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.entries.iter().map(|e| &e.sample)
    }
}

/// Rng for one scene: the scene-spec seed selects the key, the scene id the
/// stream, so output does not depend on scheduling.
pub fn scene_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Generates `n` scenes for `split` in parallel.
pub fn generate_corpus(spec: &SceneSpec, split: Split, n: usize) -> Result<Corpus> {
    spec.validate()?;
    let base = split.id_base();
    let entries = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let id = base + i;
            let sample = sample_scene(spec, &mut scene_rng(spec.seed, id))?;
            Ok(CorpusEntry { id, sample })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        spec: spec.clone(),
        split,
        entries,
    })
}
