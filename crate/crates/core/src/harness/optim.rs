/// Adaptive-moment optimizer over a list of flat parameter buffers.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m,
            v,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. `lrs[i]` is the rate of buffer `i`; a zero rate leaves
    /// the buffer and its moments untouched.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], lrs: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let lr = lrs[i];
            if lr == 0.0 {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p.iter_mut().zip(&grads[i]).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_the_rate() {
        let mut opt = Adam::new([3]);
        let mut w = vec![1.0, -2.0, 0.5];
        opt.step(&mut [&mut w], &[vec![4.0, -0.1, 0.0]], &[0.01]);
        assert!((w[0] - 0.99).abs() < 1e-9);
        assert!((w[1] + 1.99).abs() < 1e-9);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut opt = Adam::new([2]);
        let mut w = vec![3.0, -4.0];
        for _ in 0..3000 {
            let g = vec![2.0 * (w[0] - 1.0), 2.0 * (w[1] + 1.0)];
            opt.step(&mut [&mut w], &[g], &[0.01]);
        }
        assert!((w[0] - 1.0).abs() < 1e-3 && (w[1] + 1.0).abs() < 1e-3, "{w:?}");
    }

    #[test]
    fn zero_rate_freezes() {
        let mut opt = Adam::new([1, 1]);
        let (mut a, mut b) = (vec![1.0], vec![1.0]);
        opt.step(&mut [&mut a, &mut b], &[vec![1.0], vec![1.0]], &[0.1, 0.0]);
        assert!(a[0] < 1.0);
        assert_eq!(b[0], 1.0);
    }
}
