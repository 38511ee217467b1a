//! Scene rasters, instance masks, the downscale-and-pad transform and a
//! connected-components counter.
//!
//! Images are single-channel, row-major, with intensities in `[0, 1]`.
//! Masks record only the pixels of an instance that remain visible after
//! later instances are painted over it.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};

/// Row-major single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, level: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![level; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Copies the `w x h` window at `(x0, y0)`; pixels beyond the image are
    /// filled with `pad`.
    pub fn crop_padded(&self, x0: usize, y0: usize, w: usize, h: usize, pad: f64) -> Image {
        let mut out = Image::filled(w, h, pad);
        for y in 0..h {
            let sy = y0 + y;
            if sy >= self.height {
                break;
            }
            for x in 0..w {
                let sx = x0 + x;
                if sx >= self.width {
                    break;
                }
                out.pixels[y * w + x] = self.get(sx, sy);
            }
        }
        out
    }
}

/// Visible pixels of one object instance, stored as sorted row-major
/// indices. Never empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMask {
    width: usize,
    height: usize,
    pixels: Vec<u32>,
}

impl InstanceMask {
    pub fn new(width: usize, height: usize, mut pixels: Vec<u32>) -> Result<Self> {
        pixels.sort_unstable();
        pixels.dedup();
        match pixels.last() {
            None => return Err(Error::EmptyMask),
            Some(&last) if last as usize >= width * height => {
                return Err(Error::OutOfBounds(format!(
                    "mask pixel {last} outside {width}x{height}"
                )))
            }
            _ => {}
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_coords(
        width: usize,
        height: usize,
        coords: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut pixels = Vec::new();
        for (x, y) in coords {
            if x >= width || y >= height {
                return Err(Error::OutOfBounds(format!(
                    "mask pixel ({x}, {y}) outside {width}x{height}"
                )));
            }
            pixels.push((y * width + x) as u32);
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `N_i`, the number of covered pixels.
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn indices(&self) -> &[u32] {
        &self.pixels
    }

    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pixels
            .iter()
            .map(|&p| (p as usize % self.width, p as usize / self.width))
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x < self.width
            && y < self.height
            && self.pixels.binary_search(&((y * self.width + x) as u32)).is_ok()
    }

    /// Mean pixel position in pixel-centre coordinates.
    pub fn centroid(&self) -> (f64, f64) {
        let n = self.area() as f64;
        let (sx, sy) = self
            .coords()
            .fold((0.0, 0.0), |(a, b), (x, y)| (a + x as f64 + 0.5, b + y as f64 + 0.5));
        (sx / n, sy / n)
    }

    /// Mask pixel nearest to `(fx, fy)` (pixel-centre coordinates); ties go
    /// to the lowest row-major index.
    pub fn nearest_pixel(&self, fx: f64, fy: f64) -> (usize, usize) {
        self.coords()
            .min_by(|a, b| {
                let da = (a.0 as f64 + 0.5 - fx).powi(2) + (a.1 as f64 + 0.5 - fy).powi(2);
                let db = (b.0 as f64 + 0.5 - fx).powi(2) + (b.1 as f64 + 0.5 - fy).powi(2);
                da.total_cmp(&db)
            })
            .expect("mask is never empty")
    }

    /// Runs of consecutive row-major indices as `(start, length)`.
    pub fn runs(&self) -> Vec<(u32, u32)> {
        let mut runs: Vec<(u32, u32)> = Vec::new();
        for &p in &self.pixels {
            match runs.last_mut() {
                Some((start, len)) if *start + *len == p => *len += 1,
                _ => runs.push((p, 1)),
            }
        }
        runs
    }

    pub fn from_runs(width: usize, height: usize, runs: &[(u32, u32)]) -> Result<Self> {
        let total = width * height;
        let mut pixels = Vec::new();
        let mut next = 0u64;
        for &(start, len) in runs {
            let end = start as u64 + len as u64;
            if len == 0 || (start as u64) < next || end > total as u64 {
                return Err(Error::OutOfBounds(format!(
                    "mask run ({start}, {len}) invalid for {width}x{height}"
                )));
            }
            pixels.extend(start..start + len);
            next = end;
        }
        Self::new(width, height, pixels)
    }
}

/// One object in a scene. `mask` is `None` when downscaling shrank the
/// object below one pixel; the object still counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub category: u32,
    pub mask: Option<InstanceMask>,
}

impl Instance {
    pub fn is_sub_pixel(&self) -> bool {
        self.mask.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub background: f64,
    pub instances: Vec<Instance>,
}

impl Scene {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    /// `Q` for one category.
    pub fn count(&self, category: u32) -> usize {
        self.instances.iter().filter(|i| i.category == category).count()
    }

    pub fn total_count(&self) -> usize {
        self.instances.len()
    }

    /// Pixel masks of `category`, skipping sub-pixel instances.
    pub fn masks(&self, category: u32) -> Vec<&InstanceMask> {
        self.instances
            .iter()
            .filter(|i| i.category == category)
            .filter_map(|i| i.mask.as_ref())
            .collect()
    }

    pub fn all_masks(&self) -> Vec<&InstanceMask> {
        self.instances.iter().filter_map(|i| i.mask.as_ref()).collect()
    }

    /// Whether `(x, y)` lies on any instance mask.
    pub fn covered(&self, x: usize, y: usize) -> bool {
        self.all_masks().iter().any(|m| m.contains(x, y))
    }

    pub fn mean_area(&self) -> Option<f64> {
        let masks = self.all_masks();
        if masks.is_empty() {
            return None;
        }
        Some(masks.iter().map(|m| m.area() as f64).sum::<f64>() / masks.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Point {
    pub x: u32,
    pub y: u32,
}

impl Point {
    pub fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }
}

/// Point labels for one query category: one positive point per instance
/// (`K` of them) and background negatives.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointAnnotations {
    pub positive: Vec<Point>,
    pub negative: Vec<Point>,
}

impl PointAnnotations {
    /// `K`, the annotated object count.
    pub fn count(&self) -> usize {
        self.positive.len()
    }

    /// Checks the annotation invariants against `scene` for `category`.
    pub fn validate(&self, scene: &Scene, category: u32) -> Result<()> {
        let q = scene.count(category);
        if self.positive.len() != q {
            return Err(Error::InvalidParameter(format!(
                "{} positive points for {q} instances",
                self.positive.len()
            )));
        }
        let masks = scene.masks(category);
        for p in &self.positive {
            let (x, y) = (p.x as usize, p.y as usize);
            if !masks.iter().any(|m| m.contains(x, y)) && masks.len() == q {
                return Err(Error::InvalidParameter(format!(
                    "positive point ({x}, {y}) lies on no instance"
                )));
            }
        }
        for p in &self.negative {
            if scene.covered(p.x as usize, p.y as usize) {
                return Err(Error::InvalidParameter(format!(
                    "negative point ({}, {}) lies on an instance",
                    p.x, p.y
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Square,
}

/// A shape to paint. `size` is the disk radius or the square half-side,
/// in pixels; the centre is continuous.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceSpec {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
    pub category: u32,
    pub intensity: f64,
}

impl InstanceSpec {
    /// Whether the shape covers the centre of pixel `(x, y)`.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        match self.kind {
            ShapeKind::Disk => dx * dx + dy * dy <= self.size * self.size,
            ShapeKind::Square => dx.abs() <= self.size && dy.abs() <= self.size,
        }
    }

    fn pixel_bounds(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let lo = |c: f64| (c - self.size - 1.0).floor().max(0.0) as usize;
        let hi = |c: f64, n: usize| ((c + self.size + 1.0).ceil().max(0.0) as usize).min(n);
        (lo(self.cx), hi(self.cx, width), lo(self.cy), hi(self.cy, height))
    }

    /// Pixels the shape covers on a `width x height` canvas.
    pub fn rasterize(&self, width: usize, height: usize) -> Vec<(usize, usize)> {
        let (x0, x1, y0, y1) = self.pixel_bounds(width, height);
        let mut out = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                if self.covers(x, y) {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

/// Paints `instances` back to front over a uniform background and adds
/// uniform noise in `[-noise, noise]` (clamped to `[0, 1]`). Later instances
/// occlude earlier ones; instances left with no visible pixel are dropped.
pub fn render_scene<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    instances: &[InstanceSpec],
    background: f64,
    noise: f64,
    rng: &mut R,
) -> Result<Scene> {
    let mut owner: Vec<Option<usize>> = vec![None; width * height];
    for (i, inst) in instances.iter().enumerate() {
        if !(inst.cx >= 0.0 && inst.cy >= 0.0 && inst.cx <= width as f64 && inst.cy <= height as f64)
        {
            return Err(Error::OutOfBounds(format!(
                "centre ({}, {}) outside {width}x{height}",
                inst.cx, inst.cy
            )));
        }
        if !(inst.size > 0.0) {
            return Err(Error::OutOfBounds(format!("non-positive size {}", inst.size)));
        }
        if (inst.intensity - background).abs() < 0.2 {
            return Err(Error::LowContrast {
                intensity: inst.intensity,
                background,
            });
        }
        for (x, y) in inst.rasterize(width, height) {
            owner[y * width + x] = Some(i);
        }
    }

    let mut visible: Vec<Vec<u32>> = vec![Vec::new(); instances.len()];
    let mut image = Image::filled(width, height, background);
    for (p, o) in owner.iter().enumerate() {
        if let Some(i) = *o {
            visible[i].push(p as u32);
            image.pixels[p] = instances[i].intensity;
        }
    }
    if noise > 0.0 {
        for v in &mut image.pixels {
            *v = (*v + rng.random_range(-noise..=noise)).clamp(0.0, 1.0);
        }
    }

    let mut out = Vec::new();
    for (inst, pixels) in instances.iter().zip(visible) {
        if pixels.is_empty() {
            continue;
        }
        out.push(Instance {
            category: inst.category,
            mask: Some(InstanceMask::new(width, height, pixels)?),
        });
    }
    Ok(Scene {
        image,
        background,
        instances: out,
    })
}

/// Extent of the downscaled content along an axis of length `n`.
pub fn scaled_extent(n: usize, ratio: f64) -> usize {
    ((n as f64 / ratio).floor() as usize).clamp(1, n)
}

/// Shrinks the scene by `1 / ratio` into the top-left corner and pads the
/// rest with the background level. The image is resampled bilinearly and
/// the masks by nearest neighbour; instance counts never change, and masks
/// that vanish are marked sub-pixel.
pub fn downscale_and_pad(scene: &Scene, ratio: f64) -> Result<Scene> {
    if !(ratio >= 1.0) || !ratio.is_finite() {
        return Err(Error::InvalidRatio(ratio));
    }
    let (w, h) = (scene.width(), scene.height());
    let (cw, ch) = (scaled_extent(w, ratio), scaled_extent(h, ratio));
    let src = &scene.image;
    let mut image = Image::filled(w, h, scene.background);
    for y in 0..ch {
        let sy = ((y as f64 + 0.5) * ratio - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for x in 0..cw {
            let sx = ((x as f64 + 0.5) * ratio - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let top = src.get(x0, y0) * (1.0 - fx) + src.get(x1, y0) * fx;
            let bottom = src.get(x0, y1) * (1.0 - fx) + src.get(x1, y1) * fx;
            image.pixels[y * w + x] = top * (1.0 - fy) + bottom * fy;
        }
    }

    let nearest = |o: usize, n: usize| (((o as f64 + 0.5) * ratio).floor() as usize).min(n - 1);
    let instances = scene
        .instances
        .iter()
        .map(|inst| {
            let mask = inst.mask.as_ref().and_then(|m| {
                let mut pixels = Vec::new();
                for y in 0..ch {
                    for x in 0..cw {
                        if m.contains(nearest(x, w), nearest(y, h)) {
                            pixels.push((y * w + x) as u32);
                        }
                    }
                }
                InstanceMask::new(w, h, pixels).ok()
            });
            Instance {
                category: inst.category,
                mask,
            }
        })
        .collect();
    Ok(Scene {
        image,
        background: scene.background,
        instances,
    })
}

/// Number of 4-connected components of pixels brighter than `threshold`.
pub fn oracle_count_components(image: &Image, threshold: f64) -> usize {
    let (w, h) = (image.width, image.height);
    let mut seen = vec![false; w * h];
    let mut queue = VecDeque::new();
    let mut count = 0;
    for start in 0..w * h {
        if seen[start] || image.pixels[start] <= threshold {
            continue;
        }
        count += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if !seen[q] && image.pixels[q] > threshold {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
    }
    count
}
