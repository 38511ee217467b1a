use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over
    /// the coordinates that were not excluded.
    pub max_rel_error: f64,
    pub worst_coordinate: Option<usize>,
    pub checked: usize,
    /// Coordinates where the one-sided differences disagree, i.e. the
    /// function has a kink at the point. They are excluded from the error.
    pub at_kink: Vec<usize>,
}

impl GradCheckReport {
    pub fn flagged_kink(&self) -> bool {
        !self.at_kink.is_empty()
    }
}

/// Checks every coordinate of `point`.
pub fn grad_check<F>(f: F, shape: &[usize], point: &[f64], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, shape, point, step, &coords)
}

/// Checks only the listed coordinates; useful when each evaluation is a
/// full model forward pass.
pub fn grad_check_coords<F>(
    f: F,
    shape: &[usize],
    point: &[f64],
    step: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!("step must be > 0, got {step}")));
    }
    let eval = |x: &[f64], coordinate: usize| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param(shape, x)?;
        let y = f(&mut tape, v)?;
        let out = tape.scalar(y);
        if out.is_finite() {
            Ok(out)
        } else {
            Err(Error::NonFiniteEvaluation { coordinate })
        }
    };

    let mut tape = Tape::new();
    let x = tape.param(shape, point)?;
    let y = f(&mut tape, x)?;
    let center = tape.scalar(y);
    if !center.is_finite() {
        return Err(Error::NonFiniteEvaluation { coordinate: usize::MAX });
    }
    let analytic = tape.backward(y)?.get_or_zeros(x, point.len());

    let kink_tol = 1e3 * step;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: None,
        checked: 0,
        at_kink: Vec::new(),
    };
    let mut probe = point.to_vec();
    for &i in coords {
        probe[i] = point[i] + step;
        let plus = eval(&probe, i)?;
        probe[i] = point[i] - step;
        let minus = eval(&probe, i)?;
        probe[i] = point[i];

        let numeric = (plus - minus) / (2.0 * step);
        let forward = (plus - center) / step;
        let backward = (center - minus) / step;
        if (forward - backward).abs() > kink_tol * numeric.abs().max(1.0) {
            report.at_kink.push(i);
            continue;
        }
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_error || report.worst_coordinate.is_none() {
            report.max_rel_error = rel;
            report.worst_coordinate = Some(i);
        }
    }
    Ok(report)
}

/// Central-difference step used by [`check_primitives`].
pub const PRIMITIVE_STEP: f64 = 1e-5;

fn random_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// `sum(w * y)` with fixed random weights, so every output element gets a
/// distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tape.value(y).len();
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(&shape, &random_values(&mut rng, n))?;
    let p = tape.mul(y, w)?;
    Ok(tape.reduce_sum(p))
}

type Case = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// Gradient checks of every differentiable tape operation, each at a
/// random point drawn from `seed` away from kinks. Binary operations are
/// checked with respect to each operand.
pub fn check_primitives(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = random_values(&mut rng, 4 * 4 * 3);
    let other = random_values(&mut rng, 4 * 4 * 3);
    let chan = random_values(&mut rng, 3);
    let table = random_values(&mut rng, 4 * 3);
    let mat = random_values(&mut rng, 5 * 3);
    let kernel = random_values(&mut rng, 3 * 3 * 3 * 2);
    let probs: Vec<f64> = table.iter().map(|v| 0.5 + 0.4 * v).collect();
    let shape: &[usize] = &[4, 4, 3];

    let (o1, o2) = (other.clone(), other.clone());
    let (c1, c2, c3) = (chan.clone(), chan.clone(), chan.clone());
    let (k1, x1) = (kernel.clone(), xs.clone());
    let m = mat.clone();
    let cases: Vec<(&'static str, &[usize], Vec<f64>, Case)> = vec![
        ("sigmoid", shape, xs.clone(), Box::new(|t, x| { let y = t.sigmoid(x); weighted_sum(t, y, 1) })),
        ("silu", shape, xs.clone(), Box::new(|t, x| { let y = t.silu(x); weighted_sum(t, y, 2) })),
        ("softplus", shape, xs.clone(), Box::new(|t, x| { let y = t.softplus(x); weighted_sum(t, y, 3) })),
        ("exp", shape, xs.clone(), Box::new(|t, x| { let y = t.exp(x); weighted_sum(t, y, 4) })),
        ("scale", shape, xs.clone(), Box::new(|t, x| { let y = t.scale(x, -1.7); weighted_sum(t, y, 5) })),
        ("offset", shape, xs.clone(), Box::new(|t, x| { let y = t.offset(x, 0.3); weighted_sum(t, y, 6) })),
        ("add", shape, xs.clone(), Box::new(move |t, x| {
            let b = t.constant(&[4, 4, 3], &o1)?;
            let y = t.add(x, b)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 7)
        })),
        ("mul", shape, xs.clone(), Box::new(|t, x| { let y = t.mul(x, x)?; weighted_sum(t, y, 8) })),
        ("bias_add", &[3], chan.clone(), Box::new(move |t, b| {
            let x = t.constant(&[2, 2, 3], &c1.iter().cycle().take(12).copied().collect::<Vec<_>>())?;
            let y = t.bias_add(x, b)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 9)
        })),
        ("channel_scale/x", shape, xs.clone(), Box::new(move |t, x| {
            let s = t.constant(&[3], &c2)?;
            let y = t.channel_scale(x, s)?;
            weighted_sum(t, y, 10)
        })),
        ("channel_scale/s", &[3], chan.clone(), Box::new(|t, s| {
            let x = t.constant(&[1, 2, 3], &[0.3, -0.2, 0.9, 1.1, 0.5, -0.7])?;
            let y = t.channel_scale(x, s)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 11)
        })),
        ("reduce_sum", shape, xs.clone(), Box::new(|t, x| { let y = t.mul(x, x)?; Ok(t.reduce_sum(y)) })),
        ("l1_diff", shape, xs.clone(), Box::new(|t, x| t.l1_diff(x, &[0.05; 48]))),
        ("grid_pool_sum", shape, xs.clone(), Box::new(|t, x| {
            let y = t.grid_pool_sum(x, 2)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 12)
        })),
        ("upsample2", shape, xs.clone(), Box::new(|t, x| {
            let y = t.upsample2(x)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 13)
        })),
        ("linear/w", &[5, 3], mat.clone(), Box::new(move |t, w| {
            let x = t.constant(&[3], &c3)?;
            let y = t.linear(w, x)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 14)
        })),
        ("linear/x", &[3], chan.clone(), Box::new(move |t, x| {
            let w = t.constant(&[5, 3], &m)?;
            let y = t.linear(w, x)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 15)
        })),
        ("cell_dot/features", shape, xs.clone(), Box::new(|t, f| {
            let v = t.constant(&[3], &[0.4, -1.2, 0.8])?;
            let y = t.cell_dot(f, v)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 16)
        })),
        ("cell_dot/vector", &[3], chan.clone(), Box::new(move |t, v| {
            let f = t.constant(&[4, 4, 3], &o2)?;
            let y = t.cell_dot(f, v)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 17)
        })),
        ("row", &[4, 3], table.clone(), Box::new(|t, tb| {
            let r = t.row(tb, 2)?;
            let y = t.mul(r, r)?;
            weighted_sum(t, y, 18)
        })),
        ("reshape", shape, xs.clone(), Box::new(|t, x| {
            let y = t.reshape(x, &[16, 3])?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 19)
        })),
        ("bce", &[4, 3], probs, Box::new(|t, p| {
            let target: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
            let weight: Vec<f64> = (0..12).map(|i| if i % 5 == 0 { 0.0 } else { 1.0 }).collect();
            t.bce(p, &target, &weight, 9.0, 1e-7)
        })),
        ("conv2d/input", shape, xs.clone(), Box::new(move |t, x| {
            let k = t.constant(&[3, 3, 3, 2], &k1)?;
            let y = t.conv2d(x, k, 2, 1)?;
            weighted_sum(t, y, 20)
        })),
        ("conv2d/kernel", &[3, 3, 3, 2], kernel.clone(), Box::new(move |t, k| {
            let x = t.constant(&[4, 4, 3], &x1)?;
            let y = t.conv2d(x, k, 1, 1)?;
            weighted_sum(t, y, 21)
        })),
    ];
    cases
        .into_iter()
        .map(|(name, shape, point, f)| Ok((name, grad_check(f, shape, &point, PRIMITIVE_STEP)?)))
        .collect()
}
