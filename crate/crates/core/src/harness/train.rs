use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{Stage, TargetKind, TrainConfig};
use super::metrics::{evaluate, Inference};
use super::optim::Adam;
use crate::autodiff::Tape;
use crate::datagen::{Corpus, Sample};
use crate::error::{Error, Result};
use crate::losses::{
    density_loss, squared_map_loss, strong_cls_loss, strong_count_loss, weak_cls_loss,
    weak_count_loss, weighted_total,
};
use crate::model::{CountModel, ParamGroup};
use crate::targets::{
    gaussian_density, scene_cardinality, strong_class_grid, weak_label_grids, CardinalityMap,
    ClassGrid, DensityMap, WeakGrids,
};

/// Corpora for one stage. `strong` supplies the mixed-in strong share of
/// weak-stage batches; `val` drives early stopping.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub primary: &'a Corpus,
    pub strong: Option<&'a Corpus>,
    pub val: Option<&'a Corpus>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-sample count and classification losses, unweighted.
    pub count_loss: f64,
    pub cls_loss: f64,
    /// Mean weighted objective.
    pub total_loss: f64,
    pub val_mae: Option<f64>,
    pub strong_samples: usize,
    pub weak_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose weights were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

enum CountTarget {
    Cardinality(CardinalityMap),
    Density(DensityMap),
}

enum Target {
    Strong { count: CountTarget, class: ClassGrid },
    Weak(WeakGrids),
}

fn strong_target(s: &Sample, cfg: &TrainConfig, factor: usize) -> Result<Target> {
    let scene = &s.scene;
    if scene.instances.iter().any(|i| i.category == s.category && i.mask.is_none()) {
        return Err(Error::CorpusStage(
            "strong supervision needs a mask for every instance".into(),
        ));
    }
    let masks = scene.masks(s.category);
    let (w, h) = (scene.width(), scene.height());
    let count = match cfg.target {
        TargetKind::Cardinality => CountTarget::Cardinality(scene_cardinality(scene, s.category, factor)?),
        TargetKind::Density => {
            let mean_area = (!masks.is_empty())
                .then(|| masks.iter().map(|m| m.area() as f64).sum::<f64>() / masks.len() as f64);
            let sigma = cfg.sigma.sigma(mean_area);
            CountTarget::Density(gaussian_density(&s.points.positive, sigma, w, h, factor)?)
        }
    };
    Ok(Target::Strong {
        count,
        class: strong_class_grid(&masks, w, h, factor)?,
    })
}

fn check_corpus(model: &CountModel, corpus: &Corpus) -> Result<()> {
    let c = model.config();
    for e in &corpus.entries {
        let img = &e.sample.scene.image;
        if img.width != c.input_size || img.height != c.input_size {
            return Err(Error::InputSize {
                expected: c.input_size,
                width: img.width,
                height: img.height,
            });
        }
        if e.sample.category as usize >= c.categories {
            return Err(Error::UnknownCategory {
                category: e.sample.category as usize,
                categories: c.categories,
            });
        }
    }
    Ok(())
}

struct SampleLoss {
    count: f64,
    cls: f64,
    total: f64,
    grads: Vec<Vec<f64>>,
}

fn sample_loss(
    model: &CountModel,
    s: &Sample,
    target: &Target,
    cfg: &TrainConfig,
    warmup: bool,
) -> Result<SampleLoss> {
    let mut tape = Tape::new();
    let img = &s.scene.image;
    let x = tape.constant(&[img.height, img.width, 1], &img.pixels)?;
    let out = model.forward(&mut tape, x, s.category as usize)?;
    let w = &cfg.weights;
    let (count, cls, alpha, beta) = match target {
        Target::Strong { count, class } => {
            let c = match count {
                CountTarget::Cardinality(map) if warmup => squared_map_loss(&mut tape, out.count, &map.grid)?,
                CountTarget::Density(map) if warmup => squared_map_loss(&mut tape, out.count, &map.grid)?,
                CountTarget::Cardinality(map) => strong_count_loss(&mut tape, out.count, map)?,
                CountTarget::Density(map) => density_loss(&mut tape, out.count, map)?,
            };
            let k = strong_cls_loss(&mut tape, out.cls, class)?;
            (c, Some(k), w.alpha1, w.beta1)
        }
        Target::Weak(grids) => {
            let c = weak_count_loss(&mut tape, out.count, grids.count as f64)?;
            let k = if grids.annotated() > 0 {
                Some(weak_cls_loss(&mut tape, out.cls, grids)?)
            } else {
                None
            };
            (c, k, w.alpha2, w.beta2)
        }
    };
    let total = match cls {
        Some(k) => weighted_total(&mut tape, count, k, alpha, beta)?,
        None => tape.scale(count, alpha),
    };
    let grads = tape.backward(total)?;
    Ok(SampleLoss {
        count: tape.scalar(count),
        cls: cls.map(|k| tape.scalar(k)).unwrap_or(0.0),
        total: tape.scalar(total),
        grads: out
            .params
            .iter()
            .zip(model.params())
            .map(|(&v, p)| grads.get_or_zeros(v, p.values.len()))
            .collect(),
    })
}

/// Runs one training stage and returns the weights of the best validation
/// epoch (the last epoch when no validation corpus is given).
pub fn train_stage(model: CountModel, data: TrainData<'_>, cfg: &TrainConfig) -> Result<(CountModel, TrainLog)> {
    cfg.validate()?;
    let mut model = model;
    let factor = model.config().grid_factor;
    if data.primary.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    check_corpus(&model, data.primary)?;
    let primary: Vec<Target> = match cfg.stage {
        Stage::Strong => data
            .primary
            .samples()
            .map(|s| strong_target(s, cfg, factor))
            .collect::<Result<_>>()?,
        Stage::Weak => data
            .primary
            .samples()
            .map(|s| {
                let img = &s.scene.image;
                weak_label_grids(&s.points, img.width, img.height, factor).map(Target::Weak)
            })
            .collect::<Result<_>>()?,
    };
    let (n_strong, n_weak) = cfg.batch_mix();
    let mixed: Option<(&Corpus, Vec<Target>)> = match (cfg.stage, n_strong) {
        (Stage::Weak, n) if n > 0 => {
            let strong = data.strong.filter(|c| !c.is_empty()).ok_or_else(|| {
                Error::CorpusStage("weak stage with gamma > 0 needs a strong corpus".into())
            })?;
            check_corpus(&model, strong)?;
            let targets = strong
                .samples()
                .map(|s| strong_target(s, cfg, factor))
                .collect::<Result<_>>()?;
            Some((strong, targets))
        }
        _ => None,
    };
    if let Some(val) = data.val {
        check_corpus(&model, val)?;
    }

    let lr_of = |g: ParamGroup, scale: f64| -> f64 {
        scale
            * match g {
                ParamGroup::Trunk => cfg.lr_trunk,
                ParamGroup::Head => cfg.lr_heads,
                ParamGroup::Embedding if cfg.freeze_embedding => 0.0,
                ParamGroup::Embedding => cfg.lr_heads,
            }
    };
    let mut opt = Adam::new(model.params().iter().map(|p| p.values.len()));
    let mut best: Option<(f64, usize, CountModel)> = None;
    let mut stale = 0;
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    // Cursor into the strong corpus; it keeps cycling across epochs.
    let mut strong_order: Vec<usize> = Vec::new();
    let mut strong_pos = 0;
    let mut strong_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    strong_rng.set_stream(u64::MAX);

    let per_batch = match cfg.stage {
        Stage::Strong => n_strong,
        Stage::Weak => n_weak.max(1),
    };

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..data.primary.len()).collect();
        order.shuffle(&mut rng);
        let warmup = epoch < cfg.warmup_epochs;
        let lrs: Vec<f64> = model
            .params()
            .iter()
            .map(|p| lr_of(p.group, cfg.lr_scale(epoch)))
            .collect();

        let (mut sum_count, mut sum_cls, mut sum_total, mut seen) = (0.0, 0.0, 0.0, 0usize);
        let (mut strong_seen, mut weak_seen) = (0, 0);
        for (batch_idx, chunk) in order.chunks(per_batch).enumerate() {
            let mut jobs: Vec<(&Sample, &Target)> = chunk
                .iter()
                .map(|&i| (&data.primary.entries[i].sample, &primary[i]))
                .collect();
            match cfg.stage {
                Stage::Strong => strong_seen += jobs.len(),
                Stage::Weak => weak_seen += jobs.len(),
            }
            if let Some((corpus, targets)) = &mixed {
                for _ in 0..n_strong {
                    if strong_pos == strong_order.len() {
                        strong_order = (0..corpus.len()).collect();
                        strong_order.shuffle(&mut strong_rng);
                        strong_pos = 0;
                    }
                    let i = strong_order[strong_pos];
                    strong_pos += 1;
                    jobs.push((&corpus.entries[i].sample, &targets[i]));
                    strong_seen += 1;
                }
            }
            let losses: Vec<SampleLoss> = jobs
                .par_iter()
                .map(|(s, t)| sample_loss(&model, s, t, cfg, warmup))
                .collect::<Result<_>>()?;
            let inv = 1.0 / losses.len() as f64;
            let mut grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.values.len()]).collect();
            for l in &losses {
                if !l.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: batch_idx,
                        detail: format!("loss {} (count {}, cls {})", l.total, l.count, l.cls),
                    });
                }
                sum_count += l.count;
                sum_cls += l.cls;
                sum_total += l.total;
                seen += 1;
                for (acc, g) in grads.iter_mut().zip(&l.grads) {
                    for (a, &b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            for g in &mut grads {
                for v in g.iter_mut() {
                    *v *= inv;
                }
            }
            if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    detail: format!("non-finite gradient for {}", model.params()[i].name),
                });
            }
            let mut bufs: Vec<&mut [f64]> = model.params_mut().iter_mut().map(|p| p.values.as_mut_slice()).collect();
            opt.step(&mut bufs, &grads, &lrs);
        }

        let val_mae = match data.val {
            Some(val) if !val.is_empty() => Some(evaluate(&model, val, Inference::default())?.mae),
            _ => None,
        };
        let n = seen.max(1) as f64;
        log.epochs.push(EpochLog {
            epoch,
            count_loss: sum_count / n,
            cls_loss: sum_cls / n,
            total_loss: sum_total / n,
            val_mae,
            strong_samples: strong_seen,
            weak_samples: weak_seen,
        });

        if let Some(mae) = val_mae {
            match &best {
                Some((b, _, _)) if mae >= *b => {
                    stale += 1;
                    if stale >= cfg.patience {
                        log.stopped_early = true;
                        break;
                    }
                }
                _ => {
                    best = Some((mae, epoch, model.clone()));
                    stale = 0;
                }
            }
        }
    }
    match best {
        Some((_, epoch, m)) => {
            log.best_epoch = epoch;
            Ok((m, log))
        }
        None => {
            log.best_epoch = log.epochs.len() - 1;
            Ok((model, log))
        }
    }
}
