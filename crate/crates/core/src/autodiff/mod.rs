//! Define-by-run reverse-mode automatic differentiation over dense `f64`
//! arrays.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Each
//! primitive returns a [`Var`], a handle to the node holding its values.
//! [`Tape::backward`] then walks the tape in reverse and returns a
//! [`Gradients`] store for that seed. Spatial arrays use a row-major
//! `[height, width, channels]` layout; convolution kernels are
//! `[kh, kw, c_in, c_out]`.
//!
//! The tape is rebuilt for every forward pass. Nodes created with
//! [`Tape::constant`] (and anything computed only from constants) are
//! skipped during backpropagation.

mod gradcheck;
mod kernels;

pub use gradcheck::{check_primitives, grad_check, grad_check_coords, GradCheckReport, PRIMITIVE_STEP};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A primitive whose forward pass is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp {
    fn name(&self) -> &str;

    /// Returns one gradient buffer per input, each the length of that input.
    fn backward(&self, inputs: &[&[f64]], output: &[f64], grad_output: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    Constant,
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    Exp(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    BiasAdd {
        x: Var,
        bias: Var,
    },
    ChannelScale {
        x: Var,
        scale: Var,
    },
    ReduceSum(Var),
    L1Diff {
        a: Var,
        target: Vec<f64>,
    },
    GridPoolSum {
        x: Var,
        factor: usize,
    },
    Upsample2(Var),
    Linear {
        weight: Var,
        x: Var,
    },
    CellDot {
        features: Var,
        vector: Var,
    },
    Row {
        table: Var,
        row: usize,
    },
    Reshape(Var),
    Bce {
        probs: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
        norm: f64,
        eps: f64,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records primitive applications in topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when `v` did not influence
    /// the seed.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_values(shape: &[usize], values: &[f64]) -> Result<()> {
    let expected = numel(shape);
    if expected != values.len() {
        return Err(Error::ShapeValueMismatch {
            shape: shape.to_vec(),
            expected,
            actual: values.len(),
        });
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(())
}

fn hwc(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w] => Ok((h, w, 1)),
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::ShapeMismatch(format!(
            "expected a [H, W] or [H, W, C] array, got {shape:?}"
        ))),
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_flag(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let node = &self.nodes[x.0];
        let value = node.value.iter().map(|&v| f(v)).collect();
        let shape = node.shape.clone();
        let needs = node.needs_grad;
        self.push(shape, value, op, needs)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Registers a differentiable leaf.
    pub fn param(&mut self, shape: &[usize], values: &[f64]) -> Result<Var> {
        check_values(shape, values)?;
        Ok(self.push(shape.to_vec(), values.to_vec(), Op::Leaf, true))
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], values: &[f64]) -> Result<Var> {
        check_values(shape, values)?;
        Ok(self.push(shape.to_vec(), values.to_vec(), Op::Constant, false))
    }

    /// Cross-correlation of an `[H, W, C]` input with a `[kh, kw, C, C']`
    /// kernel under zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (h, w, c) = hwc(self.shape(input))?;
        let (kh, kw, kc, co) = match *self.shape(kernel) {
            [a, b, c, d] => (a, b, c, d),
            ref s => {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d kernel must be [kh, kw, c_in, c_out], got {s:?}"
                )))
            }
        };
        if kc != c {
            return Err(Error::ShapeMismatch(format!(
                "conv2d kernel expects {kc} input channels, input has {c}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidParameter("conv2d stride must be >= 1".into()));
        }
        if kh == 0 || kw == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::ShapeMismatch(format!(
                "conv2d kernel {kh}x{kw} does not fit padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let geom = kernels::ConvGeom {
            h,
            w,
            c,
            kh,
            kw,
            co,
            stride,
            pad,
        };
        let value = kernels::conv2d_forward(&geom, self.value(input), self.value(kernel));
        let needs = self.grad_flag(&[input, kernel]);
        Ok(self.push(
            vec![geom.out_h(), geom.out_w(), co],
            value,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
            needs,
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * kernels::sigmoid(v), Op::Silu(x))
    }

    /// `ln(1 + exp(x))`, computed without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, kernels::softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, x: Var, amount: f64) -> Var {
        self.unary(x, |v| v + amount, Op::Offset(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.grad_flag(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.grad_flag(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), needs))
    }

    /// Adds `bias[c]` to every element whose last index is `c`.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = last_dim(self.shape(x));
        if numel(self.shape(bias)) != c {
            return Err(Error::ShapeMismatch(format!(
                "bias of {} elements for last dimension {c}",
                numel(self.shape(bias))
            )));
        }
        let b = self.value(bias);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % c])
            .collect();
        let needs = self.grad_flag(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::BiasAdd { x, bias }, needs))
    }

    /// Multiplies every element whose last index is `c` by `scale[c]`.
    pub fn channel_scale(&mut self, x: Var, scale: Var) -> Result<Var> {
        let c = last_dim(self.shape(x));
        if numel(self.shape(scale)) != c {
            return Err(Error::ShapeMismatch(format!(
                "scale of {} elements for last dimension {c}",
                numel(self.shape(scale))
            )));
        }
        let s = self.value(scale);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * s[i % c])
            .collect();
        let needs = self.grad_flag(&[x, scale]);
        Ok(self.push(
            self.shape(x).to_vec(),
            value,
            Op::ChannelScale { x, scale },
            needs,
        ))
    }

    /// Sum of all elements as a `[1]` array. The sum of an empty array is 0.
    pub fn reduce_sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        let needs = self.grad_flag(&[x]);
        self.push(vec![1], vec![total], Op::ReduceSum(x), needs)
    }

    /// `sum |a - target|` with subgradient `sign(a - target)`, `sign(0) = 0`.
    pub fn l1_diff(&mut self, a: Var, target: &[f64]) -> Result<Var> {
        if numel(self.shape(a)) != target.len() {
            return Err(Error::ShapeMismatch(format!(
                "l1_diff: {} elements vs target of {}",
                numel(self.shape(a)),
                target.len()
            )));
        }
        let total = self
            .value(a)
            .iter()
            .zip(target)
            .map(|(x, t)| (x - t).abs())
            .sum();
        let needs = self.grad_flag(&[a]);
        Ok(self.push(
            vec![1],
            vec![total],
            Op::L1Diff {
                a,
                target: target.to_vec(),
            },
            needs,
        ))
    }

    /// Sums non-overlapping `factor x factor` spatial blocks.
    pub fn grid_pool_sum(&mut self, x: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (h, w, c) = hwc(&shape)?;
        if factor == 0 {
            return Err(Error::InvalidParameter("pool factor must be >= 1".into()));
        }
        for extent in [h, w] {
            if extent % factor != 0 {
                return Err(Error::NotDivisible { extent, factor });
            }
        }
        let value = kernels::pool_forward(self.value(x), h, w, c, factor);
        let mut out_shape = shape.clone();
        out_shape[0] = h / factor;
        out_shape[1] = w / factor;
        let needs = self.grad_flag(&[x]);
        Ok(self.push(out_shape, value, Op::GridPoolSum { x, factor }, needs))
    }

    /// Nearest-neighbour 2x spatial upsampling of an `[H, W, C]` array.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = hwc(self.shape(x))?;
        let src = self.value(x);
        let mut value = vec![0.0; 4 * h * w * c];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let s = ((y / 2) * w + xx / 2) * c;
                let d = (y * 2 * w + xx) * c;
                value[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        let needs = self.grad_flag(&[x]);
        Ok(self.push(vec![2 * h, 2 * w, c], value, Op::Upsample2(x), needs))
    }

    /// `weight [out, in] x vector [in] -> [out]`.
    pub fn linear(&mut self, weight: Var, x: Var) -> Result<Var> {
        let (out, inp) = match *self.shape(weight) {
            [o, i] => (o, i),
            ref s => {
                return Err(Error::ShapeMismatch(format!(
                    "linear weight must be 2-D, got {s:?}"
                )))
            }
        };
        if numel(self.shape(x)) != inp {
            return Err(Error::ShapeMismatch(format!(
                "linear expects {inp} inputs, got {}",
                numel(self.shape(x))
            )));
        }
        let wv = self.value(weight);
        let xv = self.value(x);
        let value = (0..out)
            .map(|o| wv[o * inp..(o + 1) * inp].iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        let needs = self.grad_flag(&[weight, x]);
        Ok(self.push(vec![out], value, Op::Linear { weight, x }, needs))
    }

    /// Inner product of every feature vector (last dimension) with `vector`;
    /// the last dimension of the result has extent 1.
    pub fn cell_dot(&mut self, features: Var, vector: Var) -> Result<Var> {
        let shape = self.shape(features).to_vec();
        let d = last_dim(&shape);
        if numel(self.shape(vector)) != d {
            return Err(Error::ShapeMismatch(format!(
                "cell_dot: features of depth {d}, vector of {}",
                numel(self.shape(vector))
            )));
        }
        let f = self.value(features);
        let v = self.value(vector);
        let value = f
            .chunks_exact(d.max(1))
            .map(|cell| cell.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect();
        let mut out_shape = shape;
        if let Some(last) = out_shape.last_mut() {
            *last = 1;
        }
        let needs = self.grad_flag(&[features, vector]);
        Ok(self.push(out_shape, value, Op::CellDot { features, vector }, needs))
    }

    /// Row `row` of a 2-D table.
    pub fn row(&mut self, table: Var, row: usize) -> Result<Var> {
        let (rows, cols) = match *self.shape(table) {
            [r, c] => (r, c),
            ref s => {
                return Err(Error::ShapeMismatch(format!(
                    "row lookup needs a 2-D table, got {s:?}"
                )))
            }
        };
        if row >= rows {
            return Err(Error::ShapeMismatch(format!(
                "row {row} out of range for {rows} rows"
            )));
        }
        let value = self.value(table)[row * cols..(row + 1) * cols].to_vec();
        let needs = self.grad_flag(&[table]);
        Ok(self.push(vec![cols], value, Op::Row { table, row }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape(x)
            )));
        }
        let value = self.value(x).to_vec();
        let needs = self.grad_flag(&[x]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), needs))
    }

    /// Weighted binary cross-entropy
    /// `-(1/norm) sum w [t ln p + (1 - t) ln(1 - p)]` with `p` clamped to
    /// `[eps, 1 - eps]`. The gradient is zero where the clamp is active.
    pub fn bce(
        &mut self,
        probs: Var,
        target: &[f64],
        weight: &[f64],
        norm: f64,
        eps: f64,
    ) -> Result<Var> {
        let n = numel(self.shape(probs));
        if target.len() != n || weight.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "bce: {n} predictions, {} targets, {} weights",
                target.len(),
                weight.len()
            )));
        }
        if !(norm > 0.0) {
            return Err(Error::InvalidParameter(format!("bce norm must be > 0, got {norm}")));
        }
        let total: f64 = self
            .value(probs)
            .iter()
            .zip(target.iter().zip(weight))
            .map(|(&p, (&t, &w))| {
                if w == 0.0 {
                    return 0.0;
                }
                let p = p.clamp(eps, 1.0 - eps);
                -w * (t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let needs = self.grad_flag(&[probs]);
        Ok(self.push(
            vec![1],
            vec![total / norm],
            Op::Bce {
                probs,
                target: target.to_vec(),
                weight: weight.to_vec(),
                norm,
                eps,
            },
            needs,
        ))
    }

    /// Records a caller-computed node whose gradient rule is `op`.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: &[usize],
        value: Vec<f64>,
        op: Box<dyn CustomOp>,
    ) -> Result<Var> {
        if numel(shape) != value.len() {
            return Err(Error::ShapeValueMismatch {
                shape: shape.to_vec(),
                expected: numel(shape),
                actual: value.len(),
            });
        }
        let needs = self.grad_flag(inputs);
        Ok(self.push(
            shape.to_vec(),
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            needs,
        ))
    }

    /// Reverse-mode accumulation from a scalar `seed`. Every call starts
    /// from fresh buffers, so repeated calls do not accumulate.
    pub fn backward(&self, seed: Var) -> Result<Gradients> {
        let seed_node = &self.nodes[seed.0];
        if seed_node.value.len() != 1 {
            return Err(Error::NonScalarSeed(seed_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[seed.0] = Some(vec![1.0]);

        for idx in (0..=seed.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let (h, w, c) = hwc(self.shape(*input)).expect("validated at record time");
                let ks = self.shape(*kernel);
                let geom = kernels::ConvGeom {
                    h,
                    w,
                    c,
                    kh: ks[0],
                    kw: ks[1],
                    co: ks[3],
                    stride: *stride,
                    pad: *pad,
                };
                let x = self.value(*input);
                let k = self.value(*kernel);
                if self.wants(*input) {
                    let gi = slot(grads, *input, x.len());
                    kernels::conv2d_backward_input(&geom, k, g, gi);
                }
                if self.wants(*kernel) {
                    let gk = slot(grads, *kernel, k.len());
                    kernels::conv2d_backward_kernel(&geom, x, g, gk);
                }
            }
            Op::Sigmoid(x) => {
                let gx = slot(grads, *x, y.len());
                for ((d, &gy), &s) in gx.iter_mut().zip(g).zip(y) {
                    *d += gy * s * (1.0 - s);
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let gx = slot(grads, *x, y.len());
                for ((d, &gy), &v) in gx.iter_mut().zip(g).zip(xv) {
                    let s = kernels::sigmoid(v);
                    *d += gy * (s + v * s * (1.0 - s));
                }
            }
            Op::Softplus(x) => {
                let xv = self.value(*x);
                let gx = slot(grads, *x, y.len());
                for ((d, &gy), &v) in gx.iter_mut().zip(g).zip(xv) {
                    *d += gy * kernels::sigmoid(v);
                }
            }
            Op::Exp(x) => {
                let gx = slot(grads, *x, y.len());
                for ((d, &gy), &e) in gx.iter_mut().zip(g).zip(y) {
                    *d += gy * e;
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        axpy(slot(grads, v, g.len()), 1.0, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b);
                    let ga = slot(grads, *a, g.len());
                    for ((d, &gy), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gy * o;
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    let gb = slot(grads, *b, g.len());
                    for ((d, &gy), &o) in gb.iter_mut().zip(g).zip(av) {
                        *d += gy * o;
                    }
                }
            }
            Op::Scale(x, f) => axpy(slot(grads, *x, g.len()), *f, g),
            Op::Offset(x) | Op::Reshape(x) => axpy(slot(grads, *x, g.len()), 1.0, g),
            Op::BiasAdd { x, bias } => {
                if self.wants(*x) {
                    axpy(slot(grads, *x, g.len()), 1.0, g);
                }
                if self.wants(*bias) {
                    let c = numel(self.shape(*bias));
                    let gb = slot(grads, *bias, c);
                    for (i, &gy) in g.iter().enumerate() {
                        gb[i % c] += gy;
                    }
                }
            }
            Op::ChannelScale { x, scale } => {
                let c = numel(self.shape(*scale));
                if self.wants(*x) {
                    let s = self.value(*scale);
                    let gx = slot(grads, *x, g.len());
                    for (i, (d, &gy)) in gx.iter_mut().zip(g).enumerate() {
                        *d += gy * s[i % c];
                    }
                }
                if self.wants(*scale) {
                    let xv = self.value(*x);
                    let gs = slot(grads, *scale, c);
                    for (i, (&gy, &v)) in g.iter().zip(xv).enumerate() {
                        gs[i % c] += gy * v;
                    }
                }
            }
            Op::ReduceSum(x) => {
                let gx = slot(grads, *x, numel(self.shape(*x)));
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }
            Op::L1Diff { a, target } => {
                let av = self.value(*a);
                let ga = slot(grads, *a, av.len());
                for ((d, &v), &t) in ga.iter_mut().zip(av).zip(target) {
                    *d += g[0] * sign(v - t);
                }
            }
            Op::GridPoolSum { x, factor } => {
                let (h, w, c) = hwc(self.shape(*x)).expect("validated at record time");
                let gx = slot(grads, *x, h * w * c);
                kernels::pool_backward(g, gx, h, w, c, *factor);
            }
            Op::Upsample2(x) => {
                let (h, w, c) = hwc(self.shape(*x)).expect("validated at record time");
                let gx = slot(grads, *x, h * w * c);
                for yy in 0..2 * h {
                    for xx in 0..2 * w {
                        let s = ((yy / 2) * w + xx / 2) * c;
                        let d = (yy * 2 * w + xx) * c;
                        axpy(&mut gx[s..s + c], 1.0, &g[d..d + c]);
                    }
                }
            }
            Op::Linear { weight, x } => {
                let inp = self.shape(*weight)[1];
                let wv = self.value(*weight);
                let xv = self.value(*x);
                if self.wants(*weight) {
                    let gw = slot(grads, *weight, wv.len());
                    for (o, &gy) in g.iter().enumerate() {
                        axpy(&mut gw[o * inp..(o + 1) * inp], gy, xv);
                    }
                }
                if self.wants(*x) {
                    let gx = slot(grads, *x, inp);
                    for (o, &gy) in g.iter().enumerate() {
                        axpy(gx, gy, &wv[o * inp..(o + 1) * inp]);
                    }
                }
            }
            Op::CellDot { features, vector } => {
                let fv = self.value(*features);
                let vv = self.value(*vector);
                let d = vv.len().max(1);
                if self.wants(*features) {
                    let gf = slot(grads, *features, fv.len());
                    for (cell, &gy) in gf.chunks_exact_mut(d).zip(g) {
                        axpy(cell, gy, vv);
                    }
                }
                if self.wants(*vector) {
                    let gv = slot(grads, *vector, vv.len());
                    for (cell, &gy) in fv.chunks_exact(d).zip(g) {
                        axpy(gv, gy, cell);
                    }
                }
            }
            Op::Row { table, row } => {
                let cols = g.len();
                let gt = slot(grads, *table, numel(self.shape(*table)));
                axpy(&mut gt[row * cols..(row + 1) * cols], 1.0, g);
            }
            Op::Bce {
                probs,
                target,
                weight,
                norm,
                eps,
            } => {
                let pv = self.value(*probs);
                let gp = slot(grads, *probs, pv.len());
                for (i, d) in gp.iter_mut().enumerate() {
                    let (p, t, w) = (pv[i], target[i], weight[i]);
                    if w == 0.0 || p < *eps || p > 1.0 - *eps {
                        continue;
                    }
                    *d += g[0] * -w * (t / p - (1.0 - t) / (1.0 - p)) / norm;
                }
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&[f64]> = inputs.iter().map(|v| self.value(*v)).collect();
                let input_grads = op.backward(&values, y, g);
                debug_assert_eq!(input_grads.len(), inputs.len(), "{}", op.name());
                for (v, gi) in inputs.iter().zip(input_grads) {
                    if self.wants(*v) {
                        axpy(slot(grads, *v, gi.len()), 1.0, &gi);
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub use kernels::{sigmoid, softplus};
