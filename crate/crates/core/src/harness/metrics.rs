use rayon::prelude::*;

use crate::datagen::Corpus;
use crate::error::{Error, Result};
use crate::model::{check_kappa, CountModel};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub n: usize,
}

impl Metrics {
    /// From signed per-image errors `pred - truth`.
    pub fn from_errors(errors: &[f64]) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let n = errors.len() as f64;
        let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / n;
        let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
        Ok(Self {
            mae,
            rmse,
            n: errors.len(),
        })
    }

    pub fn from_pairs(preds: &[f64], truths: &[f64]) -> Result<Self> {
        if preds.len() != truths.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} predictions for {} truths",
                preds.len(),
                truths.len()
            )));
        }
        let errors: Vec<f64> = preds.iter().zip(truths).map(|(p, t)| p - t).collect();
        Self::from_errors(&errors)
    }
}

/// How counts are read off the model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Inference {
    pub kappa: f64,
    /// Split larger images into model-sized tiles and sum.
    pub tiled: bool,
}

impl Default for Inference {
    fn default() -> Self {
        Self {
            kappa: 0.0,
            tiled: false,
        }
    }
}

/// Per-image predicted counts, in corpus order.
pub fn predict_corpus(model: &CountModel, corpus: &Corpus, inference: Inference) -> Result<Vec<f64>> {
    check_kappa(inference.kappa)?;
    let size = model.config().input_size;
    corpus
        .entries
        .par_iter()
        .map(|e| {
            let s = &e.sample;
            let image = &s.scene.image;
            let category = s.category as usize;
            if inference.tiled {
                let mut total = 0.0;
                for y0 in (0..image.height).step_by(size) {
                    for x0 in (0..image.width).step_by(size) {
                        let tile = image.crop_padded(x0, y0, size, size, s.scene.background);
                        total += model.predict(&tile, category)?.thresholded(inference.kappa);
                    }
                }
                Ok(total)
            } else {
                Ok(model.predict(image, category)?.thresholded(inference.kappa))
            }
        })
        .collect()
}

pub fn truths(corpus: &Corpus) -> Vec<f64> {
    corpus.samples().map(|s| s.count() as f64).collect()
}

pub fn evaluate(model: &CountModel, corpus: &Corpus, inference: Inference) -> Result<Metrics> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let preds = predict_corpus(model, corpus, inference)?;
    Metrics::from_pairs(&preds, &truths(corpus))
}
