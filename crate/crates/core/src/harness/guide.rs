//! Count-guided scene optimisation: a differentiable blob renderer stands
//! in for an image generator, and a frozen counter steers its latent
//! parameters towards a requested count.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::Adam;
use crate::autodiff::{sigmoid, softplus, CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::guidance_loss;
use crate::model::CountModel;
use crate::raster::Image;

/// Values per slot in the flat parameter layout.
pub const SLOT_WIDTH: usize = 5;

/// One blob: presence logit, centre in pixels, raw radius (the rendered
/// radius is `softplus(radius)`) and amplitude above the background.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobSlot {
    pub presence: f64,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobSceneParams {
    pub width: usize,
    pub height: usize,
    pub background: f64,
    /// Edge width of the soft disks, in pixels.
    pub softness: f64,
    /// Slope applied to the presence logit before the sigmoid.
    pub presence_gain: f64,
    pub slots: Vec<BlobSlot>,
}

/// Inverse of softplus, for setting a rendered radius.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Starting look of a scattered blob scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobLayout {
    pub background: f64,
    pub amplitude: f64,
    /// Rendered radius, capped so neighbouring grid cells stay apart.
    pub radius: f64,
    pub softness: f64,
    pub presence_gain: f64,
    /// Logit distance of the nearest slot on either side from zero.
    pub margin: f64,
    /// Logit spacing between successive ranks on each side.
    pub stagger: f64,
}

impl Default for BlobLayout {
    fn default() -> Self {
        Self {
            background: 0.1,
            amplitude: 0.6,
            radius: 2.5,
            softness: 0.5,
            presence_gain: 25.0,
            margin: 0.2,
            stagger: 0.1,
        }
    }
}

impl BlobSceneParams {
    /// `slots` blobs on a jittered grid, `active` of them switched on, with
    /// the default [`BlobLayout`].
    pub fn scattered(width: usize, height: usize, slots: usize, active: usize, seed: u64) -> Result<Self> {
        Self::scattered_with(width, height, slots, active, seed, &BlobLayout::default())
    }

    /// Like [`BlobSceneParams::scattered`] with an explicit layout. Presence
    /// logits are staggered by rank on both sides of zero, so slots cross
    /// the presence threshold one at a time as guidance pushes them.
    pub fn scattered_with(
        width: usize,
        height: usize,
        slots: usize,
        active: usize,
        seed: u64,
        layout: &BlobLayout,
    ) -> Result<Self> {
        if active > slots || slots == 0 {
            return Err(Error::InvalidParameter(format!("{active} active of {slots} slots")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols = (slots as f64).sqrt().ceil() as usize;
        let rows = slots.div_ceil(cols);
        let (cw, ch) = (width as f64 / cols as f64, height as f64 / rows as f64);
        let radius = layout.radius.min(0.3 * cw.min(ch));
        let mut cells: Vec<usize> = (0..cols * rows).collect();
        cells.shuffle(&mut rng);
        let mut on_ranks: Vec<usize> = (0..active).collect();
        on_ranks.shuffle(&mut rng);
        let mut off_ranks: Vec<usize> = (0..slots - active).collect();
        off_ranks.shuffle(&mut rng);
        let jitter = (0.5 * cw.min(ch) - radius - 1.0).max(0.0);
        let out = cells[..slots]
            .iter()
            .enumerate()
            .map(|(i, &cell)| {
                let (c, r) = (cell % cols, cell / cols);
                let presence = if i < active {
                    layout.margin + layout.stagger * on_ranks[i] as f64
                } else {
                    -layout.margin - layout.stagger * off_ranks[i - active] as f64
                };
                BlobSlot {
                    presence,
                    cx: (c as f64 + 0.5) * cw + rng.random_range(-jitter..=jitter),
                    cy: (r as f64 + 0.5) * ch + rng.random_range(-jitter..=jitter),
                    radius: softplus_inverse(radius),
                    amplitude: layout.amplitude,
                }
            })
            .collect();
        Ok(Self {
            width,
            height,
            background: layout.background,
            softness: layout.softness,
            presence_gain: layout.presence_gain,
            slots: out,
        })
    }

    pub fn flat(&self) -> Vec<f64> {
        self.slots
            .iter()
            .flat_map(|s| [s.presence, s.cx, s.cy, s.radius, s.amplitude])
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.slots.len() * SLOT_WIDTH);
        for (s, v) in self.slots.iter_mut().zip(values.chunks_exact(SLOT_WIDTH)) {
            *s = BlobSlot {
                presence: v[0],
                cx: v[1],
                cy: v[2],
                radius: v[3],
                amplitude: v[4],
            };
        }
    }

    pub fn clamp_centers(&mut self) {
        let (w, h) = (self.width as f64, self.height as f64);
        for s in &mut self.slots {
            s.cx = s.cx.clamp(0.0, w);
            s.cy = s.cy.clamp(0.0, h);
        }
    }

    /// Presence probability of each slot.
    pub fn presence(&self) -> Vec<f64> {
        self.slots.iter().map(|s| sigmoid(self.presence_gain * s.presence)).collect()
    }

    fn renderer(&self) -> BlobRenderer {
        BlobRenderer {
            width: self.width,
            height: self.height,
            background: self.background,
            softness: self.softness,
            gain: self.presence_gain,
        }
    }

    pub fn render(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.renderer().forward(&self.flat()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct BlobRenderer {
    width: usize,
    height: usize,
    background: f64,
    softness: f64,
    gain: f64,
}

/// Per-pixel quantities of one slot.
struct SlotTerm {
    presence: f64,
    amplitude: f64,
    kernel: f64,
    dx: f64,
    dy: f64,
    dist: f64,
}

const DIST_EPS: f64 = 1e-12;

impl BlobRenderer {
    fn term(&self, slot: &[f64], x: usize, y: usize) -> SlotTerm {
        let dx = x as f64 + 0.5 - slot[1];
        let dy = y as f64 + 0.5 - slot[2];
        let dist = (dx * dx + dy * dy + DIST_EPS).sqrt();
        SlotTerm {
            presence: sigmoid(self.gain * slot[0]),
            amplitude: slot[4],
            kernel: sigmoid((softplus(slot[3]) - dist) / self.softness),
            dx,
            dy,
            dist,
        }
    }

    fn forward(&self, flat: &[f64]) -> Vec<f64> {
        let mut out = vec![self.background; self.width * self.height];
        for slot in flat.chunks_exact(SLOT_WIDTH) {
            for y in 0..self.height {
                for x in 0..self.width {
                    let t = self.term(slot, x, y);
                    out[y * self.width + x] += t.presence * t.amplitude * t.kernel;
                }
            }
        }
        out
    }
}

impl CustomOp for BlobRenderer {
    fn name(&self) -> &str {
        "blob_render"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], grad_output: &[f64]) -> Vec<Vec<f64>> {
        let flat = inputs[0];
        let mut grad = vec![0.0; flat.len()];
        for (slot, g) in flat.chunks_exact(SLOT_WIDTH).zip(grad.chunks_exact_mut(SLOT_WIDTH)) {
            let radius_slope = sigmoid(slot[3]);
            for y in 0..self.height {
                for x in 0..self.width {
                    let go = grad_output[y * self.width + x];
                    if go == 0.0 {
                        continue;
                    }
                    let t = self.term(slot, x, y);
                    let edge = go * t.presence * t.amplitude * t.kernel * (1.0 - t.kernel) / self.softness;
                    g[0] += go * t.amplitude * t.kernel * t.presence * (1.0 - t.presence) * self.gain;
                    g[1] += edge * t.dx / t.dist;
                    g[2] += edge * t.dy / t.dist;
                    g[3] += edge * radius_slope;
                    g[4] += go * t.presence * t.kernel;
                }
            }
        }
        vec![grad]
    }
}

/// Renders the blob scene whose flat parameters are held by `params`
/// (shape `[slots, 5]`); returns an image of shape `[H, W, 1]`.
pub fn render_blob_scene(tape: &mut Tape, params: Var, meta: &BlobSceneParams) -> Result<Var> {
    let shape = tape.shape(params).to_vec();
    if shape != [meta.slots.len(), SLOT_WIDTH] {
        return Err(Error::ShapeMismatch(format!(
            "blob parameters {shape:?}, expected [{}, {SLOT_WIDTH}]",
            meta.slots.len()
        )));
    }
    let r = meta.renderer();
    let value = r.forward(tape.value(params));
    tape.custom(&[params], &[meta.height, meta.width, 1], value, Box::new(r))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Requested count `Q_req`.
    pub requested: f64,
    pub category: u32,
    pub max_steps: usize,
    pub step_size: f64,
    /// Steps without an improvement above `min_improvement` before stopping.
    pub patience: usize,
    pub min_improvement: f64,
    /// Optimise presence and centres only, keeping radius and amplitude at
    /// their starting values.
    pub fixed_appearance: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            requested: 5.0,
            category: 0,
            max_steps: 150,
            step_size: 5e-3,
            patience: 20,
            min_improvement: 1e-3,
            fixed_appearance: true,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.requested >= 0.0 && self.requested.is_finite()) {
            return Err(Error::InvalidParameter(format!("requested count {}", self.requested)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) || self.patience == 0 {
            return Err(Error::InvalidParameter("step size must be > 0 and patience >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuideStep {
    pub step: usize,
    /// Guidance loss `|predicted - requested|`.
    pub loss: f64,
    pub predicted: f64,
    /// Whether the proposed update was kept; a rejected update halves the
    /// step scale and leaves the parameters unchanged.
    pub accepted: bool,
    pub step_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Entry 0 is the starting point; each later entry is one update.
    pub steps: Vec<GuideStep>,
    pub stopped_on_plateau: bool,
}

impl Trajectory {
    pub fn final_loss(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.loss)
    }

    pub fn final_predicted(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.predicted)
    }

    /// Trailing moving average of the loss with the given window.
    pub fn smoothed_loss(&self, window: usize) -> Vec<f64> {
        let losses: Vec<f64> = self.steps.iter().map(|s| s.loss).collect();
        (0..losses.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(window.max(1));
                losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }
}

struct Evaluation {
    loss: f64,
    predicted: f64,
    grad: Vec<f64>,
}

fn evaluate_blobs(model: &CountModel, params: &BlobSceneParams, cfg: &GuidanceConfig) -> Result<Evaluation> {
    let mut tape = Tape::new();
    let flat = params.flat();
    let p = tape.param(&[params.slots.len(), SLOT_WIDTH], &flat)?;
    let image = render_blob_scene(&mut tape, p, params)?;
    let out = model.forward_frozen(&mut tape, image, cfg.category as usize)?;
    let loss = guidance_loss(&mut tape, out.count, cfg.requested)?;
    let predicted = tape.value(out.count).iter().sum();
    let grads = tape.backward(loss)?;
    let mut grad = grads.get_or_zeros(p, flat.len());
    let loss = tape.scalar(loss);
    if cfg.fixed_appearance {
        for g in grad.chunks_exact_mut(SLOT_WIDTH) {
            g[3] = 0.0;
            g[4] = 0.0;
        }
    }
    Ok(Evaluation {
        loss,
        predicted,
        grad,
    })
}

/// Adaptive-moment descent on the guidance loss with respect to the blob
/// parameters only. An update that raises the loss is rejected and the
/// step scale halved, so the recorded loss never increases. The trajectory holds at most
/// `max_steps` entries, the starting point included. Stops at that budget
/// or when the loss has not improved by more than `min_improvement`
/// for `patience` updates.
pub fn guide_optimize(
    model: &CountModel,
    params: BlobSceneParams,
    cfg: &GuidanceConfig,
) -> Result<(BlobSceneParams, Trajectory)> {
    cfg.validate()?;
    let input = model.config().input_size;
    if params.width != input || params.height != input {
        return Err(Error::InputSize {
            expected: input,
            width: params.width,
            height: params.height,
        });
    }
    let mut current = params;
    current.clamp_centers();
    let mut eval = evaluate_blobs(model, &current, cfg)?;
    if !eval.loss.is_finite() {
        return Err(Error::GuidanceDiverged { step: 0, loss: eval.loss });
    }
    let mut traj = Trajectory {
        steps: vec![GuideStep {
            step: 0,
            loss: eval.loss,
            predicted: eval.predicted,
            accepted: true,
            step_scale: 1.0,
        }],
        stopped_on_plateau: false,
    };
    let mut opt = Adam::new([eval.grad.len()]);
    let mut best = eval.loss;
    let mut stale = 0;
    let mut scale = 1.0;
    for step in 1..cfg.max_steps {
        let snapshot = opt.clone();
        let mut flat = current.flat();
        opt.step(&mut [&mut flat], &[eval.grad.clone()], &[cfg.step_size * scale]);
        let mut candidate = current.clone();
        candidate.set_flat(&flat);
        candidate.clamp_centers();
        let next = evaluate_blobs(model, &candidate, cfg)?;
        if !next.loss.is_finite() {
            return Err(Error::GuidanceDiverged { step, loss: next.loss });
        }
        let accepted = next.loss <= eval.loss;
        if accepted {
            current = candidate;
            eval = next;
        } else {
            opt = snapshot;
            scale *= 0.5;
        }
        traj.steps.push(GuideStep {
            step,
            loss: eval.loss,
            predicted: eval.predicted,
            accepted,
            step_scale: scale,
        });
        if eval.loss < best - cfg.min_improvement {
            best = eval.loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                traj.stopped_on_plateau = true;
                break;
            }
        }
    }
    Ok((current, traj))
}

/// Repeated guidance runs over a range of requested counts, each scored by
/// the connected-component oracle on the final rendered scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuideSuiteConfig {
    pub requested: Vec<u32>,
    pub seeds_per_count: usize,
    pub slots: usize,
    /// Slots switched on at the start.
    pub active: usize,
    pub layout: BlobLayout,
    /// Intensity threshold of the component oracle. The default is the
    /// layout background plus 0.2, the smallest contrast the scene
    /// generator accepts for an object.
    pub oracle_threshold: f64,
    /// Largest accepted `|predicted - requested|` for a successful run.
    pub tolerance: f64,
    pub seed: u64,
    /// Step budget, step size and plateau rule; `requested` is overridden
    /// per run.
    pub guidance: GuidanceConfig,
}

impl Default for GuideSuiteConfig {
    fn default() -> Self {
        Self {
            requested: (3..=9).collect(),
            seeds_per_count: 20,
            slots: 12,
            active: 5,
            layout: BlobLayout::default(),
            oracle_threshold: 0.3,
            tolerance: 0.5,
            seed: 0,
            guidance: GuidanceConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuideRun {
    pub requested: u32,
    pub seed: u64,
    pub initial_predicted: f64,
    pub final_predicted: f64,
    pub oracle_count: usize,
    pub success: bool,
    pub trajectory: Trajectory,
    pub params: BlobSceneParams,
}

/// Runs every (requested count, seed) pair in parallel. Run `i` starts
/// from `BlobSceneParams::scattered` seeded with `cfg.seed + i`.
pub fn run_guide_suite(model: &CountModel, cfg: &GuideSuiteConfig) -> Result<Vec<GuideRun>> {
    use rayon::prelude::*;
    if cfg.requested.is_empty() || cfg.seeds_per_count == 0 {
        return Err(Error::InvalidParameter("guidance suite has no runs".into()));
    }
    let size = model.config().input_size;
    let jobs: Vec<(u32, u64)> = cfg
        .requested
        .iter()
        .flat_map(|&q| (0..cfg.seeds_per_count).map(move |k| (q, k)))
        .enumerate()
        .map(|(i, (q, _))| (q, cfg.seed.wrapping_add(i as u64)))
        .collect();
    jobs.par_iter()
        .map(|&(requested, seed)| {
            let start = BlobSceneParams::scattered_with(size, size, cfg.slots, cfg.active, seed, &cfg.layout)?;
            let gcfg = GuidanceConfig {
                requested: requested as f64,
                ..cfg.guidance.clone()
            };
            let (params, trajectory) = guide_optimize(model, start, &gcfg)?;
            let oracle_count = crate::raster::oracle_count_components(&params.render(), cfg.oracle_threshold);
            let final_predicted = trajectory.final_predicted();
            Ok(GuideRun {
                requested,
                seed,
                initial_predicted: trajectory.steps[0].predicted,
                final_predicted,
                oracle_count,
                success: (final_predicted - requested as f64).abs() <= cfg.tolerance
                    && oracle_count == requested as usize,
                trajectory,
                params,
            })
        })
        .collect()
}
