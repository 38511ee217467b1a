/// Logistic function, split by sign so `exp` never overflows.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(super) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub co: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Input coordinate for output index `o` and kernel tap `k`, if inside
    /// the unpadded input.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.pad).filter(|&i| i < extent)
    }
}

pub(super) fn conv2d_forward(g: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; oh * ow * g.co];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = (oy * ow + ox) * g.co;
            let acc = &mut out[o..o + g.co];
            for ky in 0..g.kh {
                let Some(iy) = g.source(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.source(ox, kx, g.w) else { continue };
                    let xin = &x[(iy * g.w + ix) * g.c..][..g.c];
                    let kbase = (ky * g.kw + kx) * g.c * g.co;
                    for (ci, &xv) in xin.iter().enumerate() {
                        let krow = &k[kbase + ci * g.co..][..g.co];
                        for (a, &kv) in acc.iter_mut().zip(krow) {
                            *a += xv * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(super) fn conv2d_backward_input(g: &ConvGeom, k: &[f64], gy: &[f64], gx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for oy in 0..oh {
        for ox in 0..ow {
            let gout = &gy[(oy * ow + ox) * g.co..][..g.co];
            for ky in 0..g.kh {
                let Some(iy) = g.source(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.source(ox, kx, g.w) else { continue };
                    let gin = &mut gx[(iy * g.w + ix) * g.c..][..g.c];
                    let kbase = (ky * g.kw + kx) * g.c * g.co;
                    for (ci, d) in gin.iter_mut().enumerate() {
                        let krow = &k[kbase + ci * g.co..][..g.co];
                        *d += krow.iter().zip(gout).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    }
}

pub(super) fn conv2d_backward_kernel(g: &ConvGeom, x: &[f64], gy: &[f64], gk: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for oy in 0..oh {
        for ox in 0..ow {
            let gout = &gy[(oy * ow + ox) * g.co..][..g.co];
            for ky in 0..g.kh {
                let Some(iy) = g.source(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.source(ox, kx, g.w) else { continue };
                    let xin = &x[(iy * g.w + ix) * g.c..][..g.c];
                    let kbase = (ky * g.kw + kx) * g.c * g.co;
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &mut gk[kbase + ci * g.co..][..g.co];
                        for (d, &b) in krow.iter_mut().zip(gout) {
                            *d += xv * b;
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn pool_forward(x: &[f64], h: usize, w: usize, c: usize, f: usize) -> Vec<f64> {
    let (gh, gw) = (h / f, w / f);
    let mut out = vec![0.0; gh * gw * c];
    for y in 0..h {
        for xx in 0..w {
            let src = &x[(y * w + xx) * c..][..c];
            let dst = &mut out[((y / f) * gw + xx / f) * c..][..c];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

pub(super) fn pool_backward(gy: &[f64], gx: &mut [f64], h: usize, w: usize, c: usize, f: usize) {
    let gw = w / f;
    for y in 0..h {
        for xx in 0..w {
            let src = &gy[((y / f) * gw + xx / f) * c..][..c];
            let dst = &mut gx[(y * w + xx) * c..][..c];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}
