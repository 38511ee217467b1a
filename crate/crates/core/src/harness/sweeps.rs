use rayon::prelude::*;

use super::metrics::{truths, Metrics};
use crate::datagen::Corpus;
use crate::error::{Error, Result};
use crate::model::{check_kappa, CountModel, Prediction};
use crate::raster::downscale_and_pad;

pub const DEFAULT_RATIOS: [f64; 5] = [1.0, 1.5, 2.0, 3.0, 4.0];

/// Largest per-image count accepted by the size-bias protocol.
pub const SIZE_BIAS_MAX_COUNT: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct SizeBiasRow {
    pub model: String,
    pub ratio: f64,
    /// Mean of `pred(ratio) - pred(1.0)` over images.
    pub mean_drift: f64,
    pub mean_abs_drift: f64,
    pub mae: f64,
    pub n: usize,
}

/// Drift restricted to one object-size class.
#[derive(Clone, Debug, PartialEq)]
pub struct SizeClassRow {
    pub model: String,
    pub ratio: f64,
    /// 0 holds the images with the smallest objects.
    pub size_class: usize,
    pub mean_drift: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SizeBiasReport {
    pub rows: Vec<SizeBiasRow>,
    pub classes: Vec<SizeClassRow>,
    /// Upper mean-object-area bound of each class except the last.
    pub class_bounds: Vec<f64>,
}

impl SizeBiasReport {
    pub fn row(&self, model: &str, ratio: f64) -> Option<&SizeBiasRow> {
        self.rows.iter().find(|r| r.model == model && r.ratio == ratio)
    }

    pub fn class_drift(&self, model: &str, ratio: f64) -> Vec<f64> {
        let mut rows: Vec<&SizeClassRow> = self
            .classes
            .iter()
            .filter(|r| r.model == model && r.ratio == ratio)
            .collect();
        rows.sort_by_key(|r| r.size_class);
        rows.iter().map(|r| r.mean_drift).collect()
    }
}

/// Mean visible area of the query-category objects of each image.
fn mean_object_area(corpus: &Corpus) -> Vec<f64> {
    corpus
        .samples()
        .map(|s| {
            let masks = s.scene.masks(s.category);
            if masks.is_empty() {
                0.0
            } else {
                masks.iter().map(|m| m.area() as f64).sum::<f64>() / masks.len() as f64
            }
        })
        .collect()
}

/// Downscales every image by each ratio (padding back to full size with
/// the background level) and records how each model's count moves relative
/// to its prediction on the original image. Images are also split into
/// `size_classes` equal-frequency groups by mean object area.
pub fn size_bias_sweep(
    models: &[(&str, &CountModel)],
    corpus: &Corpus,
    ratios: &[f64],
    size_classes: usize,
) -> Result<SizeBiasReport> {
    if !ratios.contains(&1.0) {
        return Err(Error::InvalidParameter("ratios must include 1.0".into()));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(s) = corpus.samples().find(|s| s.count() > SIZE_BIAS_MAX_COUNT) {
        return Err(Error::InvalidParameter(format!(
            "size-bias corpus holds an image with {} objects (limit {SIZE_BIAS_MAX_COUNT})",
            s.count()
        )));
    }
    let size_classes = size_classes.max(1);
    let truth = truths(corpus);
    let areas = mean_object_area(corpus);
    let mut sorted = areas.clone();
    sorted.sort_by(f64::total_cmp);
    let class_bounds: Vec<f64> = (1..size_classes)
        .map(|k| sorted[(k * sorted.len() / size_classes).min(sorted.len() - 1)])
        .collect();
    let class_of = |a: f64| class_bounds.iter().filter(|&&b| a >= b).count();
    let classes_of: Vec<usize> = areas.iter().map(|&a| class_of(a)).collect();

    let mut rows = Vec::new();
    let mut classes = Vec::new();
    for &(name, model) in models {
        let base = predict_scaled(model, corpus, 1.0)?;
        for &ratio in ratios {
            let preds = if ratio == 1.0 {
                base.clone()
            } else {
                predict_scaled(model, corpus, ratio)?
            };
            let drift: Vec<f64> = preds.iter().zip(&base).map(|(p, b)| p - b).collect();
            let n = drift.len() as f64;
            let metrics = Metrics::from_pairs(&preds, &truth)?;
            rows.push(SizeBiasRow {
                model: name.to_string(),
                ratio,
                mean_drift: drift.iter().sum::<f64>() / n,
                mean_abs_drift: drift.iter().map(|d| d.abs()).sum::<f64>() / n,
                mae: metrics.mae,
                n: drift.len(),
            });
            for class in 0..size_classes {
                let members: Vec<f64> = drift
                    .iter()
                    .zip(&classes_of)
                    .filter(|(_, &c)| c == class)
                    .map(|(d, _)| *d)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                classes.push(SizeClassRow {
                    model: name.to_string(),
                    ratio,
                    size_class: class,
                    mean_drift: members.iter().sum::<f64>() / members.len() as f64,
                    n: members.len(),
                });
            }
        }
    }
    Ok(SizeBiasReport {
        rows,
        classes,
        class_bounds,
    })
}

fn predict_scaled(model: &CountModel, corpus: &Corpus, ratio: f64) -> Result<Vec<f64>> {
    corpus
        .entries
        .par_iter()
        .map(|e| {
            let s = &e.sample;
            let scene = downscale_and_pad(&s.scene, ratio)?;
            model.predict_count(&scene.image, s.category as usize)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdRow {
    pub kappa: f64,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdReport {
    pub rows: Vec<ThresholdRow>,
    /// Per-image counts, `counts[i][j]` for image `i` at `kappas[j]`.
    pub counts: Vec<Vec<f64>>,
    pub best_kappa: f64,
}

/// Evaluates the model at each threshold; the head outputs are computed
/// once per image.
pub fn threshold_sweep(model: &CountModel, corpus: &Corpus, kappas: &[f64]) -> Result<ThresholdReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if kappas.is_empty() {
        return Err(Error::InvalidParameter("no thresholds to sweep".into()));
    }
    for &k in kappas {
        check_kappa(k)?;
    }
    let preds: Vec<Prediction> = corpus
        .entries
        .par_iter()
        .map(|e| model.predict(&e.sample.scene.image, e.sample.category as usize))
        .collect::<Result<_>>()?;
    let counts: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| kappas.iter().map(|&k| p.thresholded(k)).collect())
        .collect();
    let truth = truths(corpus);
    let rows = kappas
        .iter()
        .enumerate()
        .map(|(j, &kappa)| {
            let col: Vec<f64> = counts.iter().map(|c| c[j]).collect();
            Ok(ThresholdRow {
                kappa,
                metrics: Metrics::from_pairs(&col, &truth)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best_kappa = rows
        .iter()
        .min_by(|a, b| a.metrics.mae.total_cmp(&b.metrics.mae))
        .map(|r| r.kappa)
        .expect("non-empty");
    Ok(ThresholdReport {
        rows,
        counts,
        best_kappa,
    })
}
