//! Conditioned convolutional counter with a cardinality head and a
//! classification head.
//!
//! Layout of the network, for widths `[c1, .., cn]` and head width `cn`:
//!
//! ```text
//! image [S,S,1]
//!   trunk: n stride-2 stages (3x3 conv + SiLU, plus a 3x3 refine conv after
//!          the first stage)                              -> f_{n-1}, f_n
//!   fusion: per-channel sigmoid attention from the category embedding on
//!           f_{n-1} and f_n; bottom-up merge into the classification
//!           features; an extra top-down pass (upsample, merge with the
//!           finer scale, stride-2 conv) gives the counting features
//!   count head: 3x3 conv + SiLU, 1x1 conv, softplus      -> [S/8, S/8] >= 0
//!   class head: 1x1 projection of the features, inner product with the
//!               projected embedding, learnable temperature, sigmoid
//! ```

mod checkpoint;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::raster::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the square input, in pixels.
    pub input_size: usize,
    /// Pixels per output cell side; must equal `2^widths.len()`.
    pub grid_factor: usize,
    /// Channel width of each stride-2 trunk stage.
    pub widths: Vec<usize>,
    pub embed_dim: usize,
    pub categories: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            grid_factor: 8,
            widths: vec![8, 16, 24],
            embed_dim: 8,
            categories: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn grid_size(&self) -> usize {
        self.input_size / self.grid_factor
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.widths.len() < 2 || self.widths.len() > 8 {
            return bad(format!("need 2..=8 trunk stages, got {}", self.widths.len()));
        }
        if self.grid_factor != 1 << self.widths.len() {
            return bad(format!(
                "grid factor {} does not match {} stride-2 stages",
                self.grid_factor,
                self.widths.len()
            ));
        }
        if self.input_size == 0 || self.input_size % self.grid_factor != 0 {
            return bad(format!(
                "input size {} not divisible by grid factor {}",
                self.input_size, self.grid_factor
            ));
        }
        if self.input_size > 4096 {
            return bad(format!("input size {} too large", self.input_size));
        }
        if self.widths.iter().any(|&w| w == 0 || w > 512) {
            return bad(format!("stage widths must lie in 1..=512: {:?}", self.widths));
        }
        if self.embed_dim == 0 || self.embed_dim > 512 {
            return bad(format!("embedding dim {} out of range", self.embed_dim));
        }
        if self.categories == 0 || self.categories > 4096 {
            return bad(format!("category count {} out of range", self.categories));
        }
        Ok(())
    }
}

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Trunk,
    Head,
    Embedding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub group: ParamGroup,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Conv {
    kernel: usize,
    bias: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    stages: Vec<(Conv, Option<Conv>)>,
    embedding: usize,
    attn_fine: (usize, usize),
    attn_coarse: (usize, usize),
    lateral: Conv,
    bottom_up: Conv,
    fuse_bias: usize,
    top_down_proj: Conv,
    top_down_conv: Conv,
    top_down_out: Conv,
    count_conv: Conv,
    count_out: Conv,
    cls_proj: Conv,
    text_proj: usize,
    log_temperature: usize,
    cls_bias: usize,
}

/// Initial bias of the cardinality output; every cell starts at
/// `softplus(COUNT_BIAS_INIT)`.
pub const COUNT_BIAS_INIT: f64 = -2.0;

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Param>,
}

impl Builder {
    fn push(&mut self, name: &str, shape: Vec<usize>, group: ParamGroup, values: Vec<f64>) -> usize {
        self.params.push(Param {
            name: name.to_string(),
            shape,
            values,
            group,
        });
        self.params.len() - 1
    }

    /// Centered uniform with fan-in scaling.
    fn uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, group: ParamGroup) -> usize {
        let bound = (3.0 / fan_in as f64).sqrt() * std::f64::consts::SQRT_2;
        let n = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.push(name, shape, group, values)
    }

    fn constant(&mut self, name: &str, shape: Vec<usize>, group: ParamGroup, v: f64) -> usize {
        let n = shape.iter().product();
        self.push(name, shape, group, vec![v; n])
    }

    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, stride: usize, group: ParamGroup) -> Conv {
        let kernel = self.uniform(&format!("{name}.kernel"), vec![k, k, cin, cout], k * k * cin, group);
        let bias = self.constant(&format!("{name}.bias"), vec![cout], group, 0.0);
        Conv {
            kernel,
            bias,
            stride,
            pad: k / 2,
        }
    }
}

/// The counting network. Weights live outside any tape and are bound to a
/// fresh tape on every forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CountModel {
    config: ModelConfig,
    params: Vec<Param>,
    layout: Layout,
}

/// Handles to the two head outputs (both `[S/8, S/8]`) and to the bound
/// parameters, in declaration order.
pub struct ForwardOutput {
    pub count: Var,
    pub cls: Var,
    pub params: Vec<Var>,
}

/// Head outputs of one image as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub count: Vec<f64>,
    pub cls: Vec<f64>,
}

impl Prediction {
    pub fn total(&self) -> f64 {
        self.count.iter().sum()
    }

    /// Sum of the cardinality cells whose class probability exceeds `kappa`.
    pub fn thresholded(&self, kappa: f64) -> f64 {
        self.count
            .iter()
            .zip(&self.cls)
            .filter(|(_, &p)| p > kappa)
            .map(|(c, _)| c)
            .sum()
    }
}

impl CountModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            params: Vec::new(),
        };
        use ParamGroup::*;
        let widths = &config.widths;
        let n = widths.len();
        let mut stages = Vec::with_capacity(n);
        let mut cin = 1;
        for (i, &w) in widths.iter().enumerate() {
            let down = b.conv(&format!("trunk.{i}.down"), 3, cin, w, 2, Trunk);
            let refine = (i > 0).then(|| b.conv(&format!("trunk.{i}.refine"), 3, w, w, 1, Trunk));
            stages.push((down, refine));
            cin = w;
        }
        let (fine, coarse, head, d) = (widths[n - 2], widths[n - 1], widths[n - 1], config.embed_dim);

        let embedding = {
            let len = config.categories * d;
            let values = (0..len).map(|_| b.rng.random_range(-1.0..1.0)).collect();
            b.push("embedding", vec![config.categories, d], Embedding, values)
        };
        let attn_fine = (
            b.uniform("fusion.attn_fine.weight", vec![fine, d], d, Head),
            b.constant("fusion.attn_fine.bias", vec![fine], Head, 0.0),
        );
        let attn_coarse = (
            b.uniform("fusion.attn_coarse.weight", vec![coarse, d], d, Head),
            b.constant("fusion.attn_coarse.bias", vec![coarse], Head, 0.0),
        );
        let lateral = b.conv("fusion.lateral", 3, coarse, head, 1, Head);
        let bottom_up = b.conv("fusion.bottom_up", 3, fine, head, 2, Head);
        let fuse_bias = b.constant("fusion.bias", vec![head], Head, 0.0);
        let top_down_proj = b.conv("fusion.top_down.proj", 1, head, fine, 1, Head);
        let top_down_conv = b.conv("fusion.top_down.conv", 3, fine, fine, 1, Head);
        let top_down_out = b.conv("fusion.top_down.out", 3, fine, head, 2, Head);
        let count_conv = b.conv("count.conv", 3, head, head, 1, Head);
        let count_out = b.conv("count.out", 1, head, 1, 1, Head);
        b.params[count_out.bias].values[0] = COUNT_BIAS_INIT;
        let cls_proj = b.conv("cls.proj", 1, head, d, 1, Head);
        let text_proj = b.uniform("cls.text_proj", vec![d, d], d, Head);
        let log_temperature = b.constant("cls.log_temperature", vec![1], Head, -0.5 * (d as f64).ln());
        let cls_bias = b.constant("cls.bias", vec![1], Head, 0.0);

        let layout = Layout {
            stages,
            embedding,
            attn_fine,
            attn_coarse,
            lateral,
            bottom_up,
            fuse_bias,
            top_down_proj,
            top_down_conv,
            top_down_out,
            count_conv,
            count_out,
            cls_proj,
            text_proj,
            log_temperature,
            cls_bias,
        };
        Ok(Self {
            config,
            params: b.params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// CRC-32 of every weight's bit pattern, in declaration order.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for p in &self.params {
            for v in &p.values {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }

    fn check_input(&self, tape: &Tape, image: Var, category: usize) -> Result<()> {
        let s = self.config.input_size;
        match *tape.shape(image) {
            [h, w, 1] if h == s && w == s => {}
            [h, w, _] | [h, w] => {
                return Err(Error::InputSize {
                    expected: s,
                    width: w,
                    height: h,
                })
            }
            ref other => {
                return Err(Error::ShapeMismatch(format!(
                    "image must be [H, W, 1], got {other:?}"
                )))
            }
        }
        if category >= self.config.categories {
            return Err(Error::UnknownCategory {
                category,
                categories: self.config.categories,
            });
        }
        Ok(())
    }

    /// Forward pass with the weights bound as differentiable leaves.
    pub fn forward(&self, tape: &mut Tape, image: Var, category: usize) -> Result<ForwardOutput> {
        self.check_input(tape, image, category)?;
        let params = self
            .params
            .iter()
            .map(|p| tape.param(&p.shape, &p.values))
            .collect::<Result<Vec<_>>>()?;
        self.run(tape, image, category, params)
    }

    /// Forward pass with the weights bound as constants; gradients still
    /// flow to `image` if it is differentiable.
    pub fn forward_frozen(&self, tape: &mut Tape, image: Var, category: usize) -> Result<ForwardOutput> {
        self.check_input(tape, image, category)?;
        let params = self
            .params
            .iter()
            .map(|p| tape.constant(&p.shape, &p.values))
            .collect::<Result<Vec<_>>>()?;
        self.run(tape, image, category, params)
    }

    fn run(&self, tape: &mut Tape, image: Var, category: usize, p: Vec<Var>) -> Result<ForwardOutput> {
        let l = &self.layout;
        let conv = |tape: &mut Tape, x: Var, c: &Conv| -> Result<Var> {
            let y = tape.conv2d(x, p[c.kernel], c.stride, c.pad)?;
            tape.bias_add(y, p[c.bias])
        };
        let conv_act = |tape: &mut Tape, x: Var, c: &Conv| -> Result<Var> {
            let y = conv(tape, x, c)?;
            Ok(tape.silu(y))
        };

        let mut x = image;
        let mut feats = Vec::with_capacity(l.stages.len());
        for (down, refine) in &l.stages {
            x = conv_act(tape, x, down)?;
            if let Some(r) = refine {
                x = conv_act(tape, x, r)?;
            }
            feats.push(x);
        }
        let fine = feats[feats.len() - 2];
        let coarse = feats[feats.len() - 1];

        let embed = tape.row(p[l.embedding], category)?;
        let attend = |tape: &mut Tape, f: Var, (w, b): (usize, usize)| -> Result<Var> {
            let a = tape.linear(p[w], embed)?;
            let a = tape.bias_add(a, p[b])?;
            let a = tape.sigmoid(a);
            tape.channel_scale(f, a)
        };
        let fine = attend(tape, fine, l.attn_fine)?;
        let coarse = attend(tape, coarse, l.attn_coarse)?;

        // Bottom-up merge: classification features.
        let lat = conv(tape, coarse, &l.lateral)?;
        let up = conv(tape, fine, &l.bottom_up)?;
        let merged = tape.add(lat, up)?;
        let merged = tape.bias_add(merged, p[l.fuse_bias])?;
        let cls_feat = tape.silu(merged);

        // Extra top-down pass back to the finer scale: counting features.
        let proj = conv(tape, cls_feat, &l.top_down_proj)?;
        let proj = tape.upsample2(proj)?;
        let td = tape.add(proj, fine)?;
        let td = conv_act(tape, td, &l.top_down_conv)?;
        let count_feat = conv_act(tape, td, &l.top_down_out)?;

        let g = self.config.grid_size();
        let h = conv_act(tape, count_feat, &l.count_conv)?;
        let raw = conv(tape, h, &l.count_out)?;
        let count = tape.softplus(raw);
        let count = tape.reshape(count, &[g, g])?;

        let q = conv(tape, cls_feat, &l.cls_proj)?;
        let t = tape.linear(p[l.text_proj], embed)?;
        let dot = tape.cell_dot(q, t)?;
        let temp = tape.exp(p[l.log_temperature]);
        let logit = tape.channel_scale(dot, temp)?;
        let logit = tape.bias_add(logit, p[l.cls_bias])?;
        let cls = tape.sigmoid(logit);
        let cls = tape.reshape(cls, &[g, g])?;

        Ok(ForwardOutput {
            count,
            cls,
            params: p,
        })
    }

    pub fn predict(&self, image: &Image, category: usize) -> Result<Prediction> {
        let mut tape = Tape::new();
        let x = tape.constant(&[image.height, image.width, 1], &image.pixels)?;
        let out = self.forward_frozen(&mut tape, x, category)?;
        Ok(Prediction {
            count: tape.value(out.count).to_vec(),
            cls: tape.value(out.cls).to_vec(),
        })
    }

    /// Sum of the cardinality map.
    pub fn predict_count(&self, image: &Image, category: usize) -> Result<f64> {
        Ok(self.predict(image, category)?.total())
    }

    /// Sum over cells whose class probability exceeds `kappa`.
    pub fn thresholded_count(&self, image: &Image, category: usize, kappa: f64) -> Result<f64> {
        check_kappa(kappa)?;
        Ok(self.predict(image, category)?.thresholded(kappa))
    }

    /// Splits an image of any size into model-sized tiles (padding the
    /// border tiles with `pad`) and sums the per-tile counts. Only
    /// non-overlapping tiling is supported, so `stride` must equal `tile`.
    pub fn tiled_count(
        &self,
        image: &Image,
        category: usize,
        tile: usize,
        stride: usize,
        pad: f64,
    ) -> Result<f64> {
        Ok(self.tile_counts(image, category, tile, stride, pad)?.into_iter().sum())
    }

    /// Per-tile counts in row-major tile order.
    pub fn tile_counts(
        &self,
        image: &Image,
        category: usize,
        tile: usize,
        stride: usize,
        pad: f64,
    ) -> Result<Vec<f64>> {
        if tile != self.config.input_size {
            return Err(Error::InvalidParameter(format!(
                "tile size {tile} must equal the model input size {}",
                self.config.input_size
            )));
        }
        if stride != tile {
            return Err(Error::InvalidParameter(format!(
                "stride {stride} must equal tile size {tile}"
            )));
        }
        let mut counts = Vec::new();
        for y0 in (0..image.height).step_by(stride) {
            for x0 in (0..image.width).step_by(stride) {
                let crop = image.crop_padded(x0, y0, tile, tile, pad);
                counts.push(self.predict_count(&crop, category)?);
            }
        }
        Ok(counts)
    }
}

pub(crate) fn check_kappa(kappa: f64) -> Result<()> {
    if !(0.0..1.0).contains(&kappa) {
        return Err(Error::InvalidParameter(format!("kappa must lie in [0, 1), got {kappa}")));
    }
    Ok(())
}
