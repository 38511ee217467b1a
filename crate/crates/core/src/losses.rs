//! Training and guidance objectives as scalar nodes on a [`Tape`].
//!
//! Count losses are L1 summed over cells, so they are measured in objects.
//! Classification losses are binary cross-entropy averaged over the cells
//! they cover, with probabilities clamped to `[BCE_EPS, 1 - BCE_EPS]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::targets::{CardinalityMap, ClassGrid, DensityMap, Grid, WeakGrids};

pub const BCE_EPS: f64 = 1e-7;

/// Weights of the strong objective (`alpha1`, `beta1`), the weak objective
/// (`alpha2`, `beta2`) and the strong-sample share `gamma` of each
/// weak-stage batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha1: f64,
    pub beta1: f64,
    pub alpha2: f64,
    pub beta2: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            beta1: 0.1,
            alpha2: 1.0,
            beta2: 0.1,
            gamma: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha1", self.alpha1),
            ("beta1", self.beta1),
            ("alpha2", self.alpha2),
            ("beta2", self.beta2),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidParameter(format!(
                "gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

fn check_grid(tape: &Tape, pred: Var, width: usize, height: usize, what: &str) -> Result<()> {
    let shape = tape.shape(pred);
    let ok = match *shape {
        [h, w] | [h, w, 1] => h == height && w == width,
        _ => false,
    };
    if !ok {
        return Err(Error::ShapeMismatch(format!(
            "{what}: prediction {shape:?} vs target {height}x{width}"
        )));
    }
    Ok(())
}

/// `sum |pred - y_den|` over cells.
pub fn density_loss(tape: &mut Tape, pred: Var, target: &DensityMap) -> Result<Var> {
    check_grid(tape, pred, target.grid.width, target.grid.height, "density_loss")?;
    tape.l1_diff(pred, &target.grid.data)
}

/// `sum |pred - y_car|` over cells.
pub fn strong_count_loss(tape: &mut Tape, pred: Var, target: &CardinalityMap) -> Result<Var> {
    check_grid(tape, pred, target.grid.width, target.grid.height, "strong_count_loss")?;
    tape.l1_diff(pred, &target.grid.data)
}

/// `sum (pred - y)^2` over cells. Used only to warm up the count head before
/// the absolute-error objective takes over: with sparse targets the
/// absolute error pushes every empty cell down with constant force, and a
/// freshly initialised network collapses to an all-zero map.
pub fn squared_map_loss(tape: &mut Tape, pred: Var, target: &Grid) -> Result<Var> {
    check_grid(tape, pred, target.width, target.height, "squared_map_loss")?;
    let shape = tape.shape(pred).to_vec();
    let neg: Vec<f64> = target.data.iter().map(|v| -v).collect();
    let t = tape.constant(&shape, &neg)?;
    let d = tape.add(pred, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.reduce_sum(sq))
}

/// Mean BCE over all cells.
pub fn strong_cls_loss(tape: &mut Tape, probs: Var, target: &ClassGrid) -> Result<Var> {
    check_grid(tape, probs, target.width, target.height, "strong_cls_loss")?;
    let n = target.labels.len();
    tape.bce(probs, &target.as_f64(), &vec![1.0; n], n as f64, BCE_EPS)
}

/// BCE averaged over the annotated cells only: positives pull towards 1,
/// negatives towards 0, all other cells are ignored.
pub fn weak_cls_loss(tape: &mut Tape, probs: Var, target: &WeakGrids) -> Result<Var> {
    check_grid(tape, probs, target.width, target.height, "weak_cls_loss")?;
    let omega = target.annotated();
    if omega == 0 {
        return Err(Error::EmptyAnnotation);
    }
    let labels: Vec<f64> = target.positive.iter().map(|&p| f64::from(u8::from(p))).collect();
    let weight: Vec<f64> = target
        .positive
        .iter()
        .zip(&target.negative)
        .map(|(&p, &n)| f64::from(u8::from(p || n)))
        .collect();
    tape.bce(probs, &labels, &weight, omega as f64, BCE_EPS)
}

/// `|sum(pred) - target|`.
fn total_count_deviation(tape: &mut Tape, pred: Var, target: f64, what: &str) -> Result<Var> {
    if !(target >= 0.0) || !target.is_finite() {
        return Err(Error::InvalidParameter(format!("{what}: count must be >= 0, got {target}")));
    }
    let total = tape.reduce_sum(pred);
    tape.l1_diff(total, &[target])
}

pub fn weak_count_loss(tape: &mut Tape, pred: Var, count: f64) -> Result<Var> {
    total_count_deviation(tape, pred, count, "weak_count_loss")
}

/// Deviation of the predicted total from the requested count. Its gradient
/// reaches every upstream leaf, including the input image.
pub fn guidance_loss(tape: &mut Tape, pred: Var, requested: f64) -> Result<Var> {
    total_count_deviation(tape, pred, requested, "guidance_loss")
}

/// `alpha * count + beta * cls`.
pub fn weighted_total(tape: &mut Tape, count: Var, cls: Var, alpha: f64, beta: f64) -> Result<Var> {
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "loss weights must be >= 0, got alpha={alpha}, beta={beta}"
        )));
    }
    let a = tape.scale(count, alpha);
    let b = tape.scale(cls, beta);
    tape.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::targets::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(width: usize, height: usize, data: Vec<f64>) -> Grid {
        Grid {
            width,
            height,
            data,
        }
    }

    fn density(data: Vec<f64>) -> DensityMap {
        DensityMap {
            grid: grid(2, 2, data),
            sigma: 1.0,
        }
    }

    fn cardinality(data: Vec<f64>) -> CardinalityMap {
        CardinalityMap {
            grid: grid(2, 2, data),
            factor: 8,
        }
    }

    fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.scalar(v)
    }

    #[test]
    fn density_loss_examples() {
        let t = vec![0.2, 0.0, 0.5, 0.3];
        let d = density(t.clone());
        assert_eq!(eval(|tp| { let p = tp.param(&[2, 2], &t)?; density_loss(tp, p, &d) }), 0.0);
        let shifted: Vec<f64> = t.iter().map(|v| v + 0.1).collect();
        let l = eval(|tp| { let p = tp.param(&[2, 2], &shifted)?; density_loss(tp, p, &d) });
        assert!((l - 0.4).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let point: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = grad_check(|tp, p| density_loss(tp, p, &d), &[2, 2], &point, 1e-5).unwrap();
        assert!(r.at_kink.is_empty() && r.max_rel_error <= 1e-6, "{r:?}");
        let mut tape = Tape::new();
        let p = tape.param(&[2, 2], &shifted).unwrap();
        let l = density_loss(&mut tape, p, &d).unwrap();
        assert_eq!(tape.backward(l).unwrap().get(p).unwrap(), &[1.0; 4]);

        let mut tape = Tape::new();
        let p = tape.param(&[3, 3], &[0.0; 9]).unwrap();
        assert!(matches!(density_loss(&mut tape, p, &d), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn strong_count_loss_examples() {
        let y = cardinality(vec![1.5, 0.5, 2.0, 1.0]);
        assert_eq!(eval(|tp| { let p = tp.param(&[2, 2], &[1.5, 0.5, 2.0, 1.0])?; strong_count_loss(tp, p, &y) }), 0.0);
        assert_eq!(eval(|tp| { let p = tp.param(&[2, 2], &[0.0; 4])?; strong_count_loss(tp, p, &y) }), 5.0);
        let r = grad_check(|tp, p| strong_count_loss(tp, p, &y), &[2, 2], &[0.3, 1.1, -0.4, 2.2], 1e-5).unwrap();
        assert!(r.at_kink.is_empty() && r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn strong_cls_loss_examples() {
        let labels = ClassGrid {
            width: 2,
            height: 1,
            labels: vec![true, false],
        };
        let half = eval(|tp| { let p = tp.param(&[1, 2], &[0.5, 0.5])?; strong_cls_loss(tp, p, &labels) });
        assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
        let hand = eval(|tp| { let p = tp.param(&[1, 2], &[0.9, 0.2])?; strong_cls_loss(tp, p, &labels) });
        let expected = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((hand - expected).abs() < 1e-12);
        assert!((hand - 0.1643).abs() < 1e-4);
        let exact = eval(|tp| { let p = tp.param(&[1, 2], &[1.0, 0.0])?; strong_cls_loss(tp, p, &labels) });
        assert!(exact <= -(1.0 - BCE_EPS).ln() + 1e-15);
    }

    #[test]
    fn weak_cls_loss_examples() {
        let weak = WeakGrids {
            width: 3,
            height: 2,
            positive: vec![true, false, false, true, false, false],
            negative: vec![false, true, false, false, true, false],
            count: 2,
        };
        let half = eval(|tp| { let p = tp.param(&[2, 3], &[0.5; 6])?; weak_cls_loss(tp, p, &weak) });
        assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
        let exact = [1.0 - BCE_EPS, BCE_EPS, 0.3, 1.0 - BCE_EPS, BCE_EPS, 0.9];
        let near_zero = eval(|tp| { let p = tp.param(&[2, 3], &exact)?; weak_cls_loss(tp, p, &weak) });
        assert!(near_zero < 1e-6);
        let mut perturbed = exact;
        perturbed[2] = 0.01;
        perturbed[5] = 0.77;
        let same = eval(|tp| { let p = tp.param(&[2, 3], &perturbed)?; weak_cls_loss(tp, p, &weak) });
        assert_eq!(same, near_zero);

        let empty = WeakGrids {
            width: 3,
            height: 2,
            positive: vec![false; 6],
            negative: vec![false; 6],
            count: 0,
        };
        let mut tape = Tape::new();
        let p = tape.param(&[2, 3], &[0.5; 6]).unwrap();
        assert!(matches!(weak_cls_loss(&mut tape, p, &empty), Err(Error::EmptyAnnotation)));
    }

    #[test]
    fn weak_count_loss_examples() {
        assert_eq!(eval(|tp| { let p = tp.param(&[2, 2], &[1.0, 2.0, 3.0, 4.0])?; weak_count_loss(tp, p, 10.0) }), 0.0);
        assert_eq!(eval(|tp| { let p = tp.param(&[2, 2], &[1.0, 2.0, 3.0, 1.5])?; weak_count_loss(tp, p, 10.0) }), 2.5);
        let mut tape = Tape::new();
        let p = tape.param(&[2, 2], &[1.0, 2.0, 3.0, 1.5]).unwrap();
        let l = weak_count_loss(&mut tape, p, 10.0).unwrap();
        assert_eq!(tape.backward(l).unwrap().get(p).unwrap(), &[-1.0; 4]);
        let r = grad_check(|tp, p| weak_count_loss(tp, p, 10.0), &[2, 2], &[1.0, 2.0, 3.0, 1.5], 1e-5).unwrap();
        assert!(r.at_kink.is_empty() && r.max_rel_error <= 1e-6);
    }

    #[test]
    fn weighted_total_examples() {
        let total = |c: f64, l: f64, a: f64, b: f64| {
            eval(|tp| {
                let c = tp.param(&[1], &[c])?;
                let l = tp.param(&[1], &[l])?;
                weighted_total(tp, c, l, a, b)
            })
        };
        assert!((total(2.0, 0.5, 1.0, 0.1) - 2.05).abs() < 1e-12);
        assert_eq!(total(2.0, 0.5, 0.0, 1.0), 0.5);
        assert_eq!(total(0.0, 0.0, 1.0, 0.1), 0.0);
        // Linear in (alpha, beta).
        assert!((total(2.0, 0.5, 3.0, 0.3) - 3.0 * total(2.0, 0.5, 1.0, 0.1)).abs() < 1e-12);
    }

    #[test]
    fn guidance_loss_examples() {
        assert_eq!(eval(|tp| { let p = tp.param(&[1, 3], &[1.0, 1.5, 0.5])?; guidance_loss(tp, p, 3.0) }), 0.0);
        assert_eq!(eval(|tp| { let p = tp.param(&[1, 3], &[1.0, 1.5, 0.5])?; guidance_loss(tp, p, 9.0) }), 6.0);
        let mut tape = Tape::new();
        let p = tape.param(&[1], &[1.0]).unwrap();
        assert!(guidance_loss(&mut tape, p, -1.0).is_err());
    }

    #[test]
    fn loss_weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { gamma: 1.5, ..Default::default() }.validate().is_err());
        assert!(LossWeights { beta2: -0.1, ..Default::default() }.validate().is_err());
    }
}
