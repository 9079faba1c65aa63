//! Minimal tape-based reverse-mode automatic differentiation over dense
//! `f64` tensors.
//!
//! Every op appends a node to a [`Tape`] and returns a [`Var`] handle.
//! Nodes are created in topological order, so [`Tape::backward`] is a
//! single reverse sweep. Image tensors use NCHW layout; scalars have shape
//! `[1]`.
//!
//! ```
//! use csou::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
//! ```

mod conv;
pub mod gradcheck;

use std::sync::Arc;

use crate::error::{Error, Result};
use conv::ConvGeom;

/// Row-major dense matrix shared by every tape that applies it.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMap {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMap {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(DenseMap { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `M v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `Mᵀ v`.
    pub fn apply_t(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, &s) in self.data.chunks_exact(self.cols).zip(v) {
            if s != 0.0 {
                out.iter_mut().zip(row).for_each(|(o, a)| *o += s * a);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    Recip(Var),
    Silu(Var),
    Tanh(Var),
    Softplus(Var),
    Relu(Var),
    SoftThreshold {
        x: Var,
        theta: Var,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Concat(Vec<Var>),
    ChannelMean(Var),
    ChannelMax {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Softmax(Var),
    BlockMean {
        input: Var,
        ratio: usize,
    },
    Upsample {
        input: Var,
        ratio: usize,
    },
    Linear {
        input: Var,
        map: Arc<DenseMap>,
        transpose: bool,
    },
    Sum(Var),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) without overflow
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn as4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match shape {
        &[a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::Shape(format!(
            "{what} must be 4-d [B, C, H, W], got {shape:?}"
        ))),
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor {
                shape: self.nodes[v.0].value.shape.clone(),
                data: g.clone(),
            })
    }

    /// Clears gradient buffers so `backward` may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = &self.nodes[a.0].value;
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| f(v)).collect(),
        };
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta
                .data
                .iter()
                .zip(&tb.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |v| v * k)
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddConst(a), |v| v + k)
    }

    fn scalar_of(&self, s: Var, what: &str) -> Result<f64> {
        let t = self.value(s);
        if t.numel() != 1 {
            return Err(Error::Shape(format!(
                "{what}: expected a one-element tensor, got {:?}",
                t.shape
            )));
        }
        Ok(t.data[0])
    }

    /// Tensor times a one-element tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let k = self.scalar_of(s, "mul_scalar")?;
        let rg = self.rg(a) || self.rg(s);
        let t = &self.nodes[a.0].value;
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v * k).collect(),
        };
        Ok(self.push(value, Op::MulScalar(a, s), rg))
    }

    /// Tensor plus a one-element tensor.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let k = self.scalar_of(s, "add_scalar")?;
        let rg = self.rg(a) || self.rg(s);
        let t = &self.nodes[a.0].value;
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v + k).collect(),
        };
        Ok(self.push(value, Op::AddScalar(a, s), rg))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |v| 1.0 / v)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |v| v * sigmoid(v))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |v| v.max(0.0))
    }

    /// `sign(x)·max(0, |x| − θ)` with `θ` either the shape of `x` or a
    /// single element. The subgradient at `|x| = θ` is zero.
    pub fn soft_threshold(&mut self, x: Var, theta: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let tt = &self.nodes[theta.0].value;
        let data: Vec<f64> = if tt.numel() == 1 {
            let t = tt.data[0];
            tx.data
                .iter()
                .map(|&v| crate::solvers::shrink(v, t))
                .collect()
        } else if tt.shape == tx.shape {
            tx.data
                .iter()
                .zip(&tt.data)
                .map(|(&v, &t)| crate::solvers::shrink(v, t))
                .collect()
        } else {
            return Err(Error::Shape(format!(
                "soft_threshold: threshold {:?} does not broadcast over {:?}",
                tt.shape, tx.shape
            )));
        };
        let value = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        let rg = self.rg(x) || self.rg(theta);
        Ok(self.push(value, Op::SoftThreshold { x, theta }, rg))
    }

    /// Stride-1 cross-correlation. `input` is `[B, Cin, H, W]`, `weight`
    /// `[Cout, Cin, k, k]`, `bias` `[Cout]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
    ) -> Result<Var> {
        let [batch, cin, h, w] = as4(self.shape(input), "conv2d input")?;
        let [cout, wcin, k, k2] = as4(self.shape(weight), "conv2d weight")?;
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv2d: channel axis mismatch, input has {cin}, weight expects {wcin}"
            )));
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv2d: kernel axes must be square and odd, got {k}x{k2}"
            )));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::Shape(format!(
                "conv2d: spatial axes {h}x{w} too small for kernel {k} with padding {padding}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::Shape(format!(
                    "conv2d: bias axis must be [{cout}], got {:?}",
                    self.shape(b)
                )));
            }
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            k,
            pad: padding,
        };
        let data = conv::forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor {
            shape: vec![batch, cout, geom.out_h(), geom.out_w()],
            data,
        };
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let [b, _, h, w] = as4(self.shape(first), "concat input")?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let [pb, pc, ph, pw] = as4(self.shape(p), "concat input")?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::Shape(format!(
                    "concat: {:?} incompatible with {:?}",
                    self.shape(p),
                    self.shape(first)
                )));
            }
            channels.push(pc);
        }
        let ctot: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(b * ctot * plane);
        for bi in 0..b {
            for (&p, &pc) in parts.iter().zip(&channels) {
                let src = &self.value(p).data()[bi * pc * plane..][..pc * plane];
                data.extend_from_slice(src);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor {
                shape: vec![b, ctot, h, w],
                data,
            },
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    /// Mean over the channel axis, `[B, C, H, W] -> [B, 1, H, W]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = as4(self.shape(x), "channel_mean input")?;
        if c == 0 {
            return Err(Error::Shape("channel_mean over zero channels".into()));
        }
        let plane = h * w;
        let src = self.value(x).data();
        let mut data = vec![0.0; b * plane];
        for bi in 0..b {
            let dst = &mut data[bi * plane..][..plane];
            for ci in 0..c {
                let s = &src[(bi * c + ci) * plane..][..plane];
                dst.iter_mut().zip(s).for_each(|(d, v)| *d += v);
            }
            dst.iter_mut().for_each(|d| *d /= c as f64);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![b, 1, h, w],
                data,
            },
            Op::ChannelMean(x),
            rg,
        ))
    }

    /// Max over the channel axis; gradient goes to the lowest-index maximum.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = as4(self.shape(x), "channel_max input")?;
        if c == 0 {
            return Err(Error::Shape("channel_max over zero channels".into()));
        }
        let plane = h * w;
        let src = self.value(x).data();
        let mut data = vec![f64::NEG_INFINITY; b * plane];
        let mut argmax = vec![0usize; b * plane];
        for bi in 0..b {
            for ci in 0..c {
                let s = &src[(bi * c + ci) * plane..][..plane];
                for p in 0..plane {
                    if s[p] > data[bi * plane + p] {
                        data[bi * plane + p] = s[p];
                        argmax[bi * plane + p] = ci;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![b, 1, h, w],
                data,
            },
            Op::ChannelMax { input: x, argmax },
            rg,
        ))
    }

    /// Spatial mean, `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = as4(self.shape(x), "global_avg_pool input")?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::Shape("global_avg_pool over an empty plane".into()));
        }
        let src = self.value(x).data();
        let data: Vec<f64> = (0..b * c)
            .map(|i| src[i * plane..][..plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![b, c],
                data,
            },
            Op::GlobalAvgPool(x),
            rg,
        ))
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = match self.shape(a) {
            &[n, k] => (n, k),
            s => return Err(Error::Shape(format!("matmul lhs must be 2-d, got {s:?}"))),
        };
        let m = match self.shape(b) {
            &[k2, m] if k2 == k => m,
            s => {
                return Err(Error::Shape(format!(
                    "matmul: inner axis mismatch, lhs [{n}, {k}] vs rhs {s:?}"
                )))
            }
        };
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let av = ta[i * k + p];
                let brow = &tb[p * m..][..m];
                data[i * m..][..m]
                    .iter_mut()
                    .zip(brow)
                    .for_each(|(d, bv)| *d += av * bv);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {shape:?}",
                self.shape(a)
            )));
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: self.value(a).data.clone(),
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let last = *t
            .shape
            .last()
            .ok_or_else(|| Error::Shape("softmax of a 0-d tensor".into()))?;
        if last == 0 {
            return Err(Error::Shape("softmax over an empty axis".into()));
        }
        let mut data = t.data.clone();
        for row in data.chunks_exact_mut(last) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data,
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Mean over `ratio x ratio` spatial blocks.
    pub fn block_mean(&mut self, x: Var, ratio: usize) -> Result<Var> {
        let [b, c, h, w] = as4(self.shape(x), "block_mean input")?;
        if ratio == 0 || h % ratio != 0 || w % ratio != 0 {
            return Err(Error::Shape(format!(
                "block_mean: {h}x{w} is not a multiple of {ratio}"
            )));
        }
        let (oh, ow) = (h / ratio, w / ratio);
        let src = self.value(x).data();
        let mut data = vec![0.0; b * c * oh * ow];
        let inv = 1.0 / (ratio * ratio) as f64;
        for p in 0..b * c {
            for r in 0..h {
                let row = &src[(p * h + r) * w..][..w];
                let drow = &mut data[(p * oh + r / ratio) * ow..][..ow];
                for (d, blk) in drow.iter_mut().zip(row.chunks_exact(ratio)) {
                    *d += blk.iter().sum::<f64>() * inv;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![b, c, oh, ow],
                data,
            },
            Op::BlockMean { input: x, ratio },
            rg,
        ))
    }

    /// Nearest-neighbour replication by `ratio` along both spatial axes.
    pub fn upsample(&mut self, x: Var, ratio: usize) -> Result<Var> {
        let [b, c, h, w] = as4(self.shape(x), "upsample input")?;
        if ratio == 0 {
            return Err(Error::Shape("upsample ratio must be >= 1".into()));
        }
        let (oh, ow) = (h * ratio, w * ratio);
        let src = self.value(x).data();
        let mut data = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            for r in 0..oh {
                let srow = &src[(p * h + r / ratio) * w..][..w];
                let drow = &mut data[(p * oh + r) * ow..][..ow];
                for (col, d) in drow.iter_mut().enumerate() {
                    *d = srow[col / ratio];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![b, c, oh, ow],
                data,
            },
            Op::Upsample { input: x, ratio },
            rg,
        ))
    }

    /// `M x` (or `Mᵀ x`) of the flattened input, reshaped to `shape`.
    pub fn linear(
        &mut self,
        x: Var,
        map: &Arc<DenseMap>,
        transpose: bool,
        shape: &[usize],
    ) -> Result<Var> {
        let (inner, outer) = if transpose {
            (map.rows, map.cols)
        } else {
            (map.cols, map.rows)
        };
        if self.value(x).numel() != inner {
            return Err(Error::Shape(format!(
                "linear: input has {} entries, map expects {inner}",
                self.value(x).numel()
            )));
        }
        if shape.iter().product::<usize>() != outer {
            return Err(Error::Shape(format!(
                "linear: output shape {shape:?} does not hold {outer} entries"
            )));
        }
        let src = self.value(x).data();
        let data = if transpose {
            map.apply_t(src)
        } else {
            map.apply(src)
        };
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Linear {
                input: x,
                map: Arc::clone(map),
                transpose,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().map(|v| v * v).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumSquares(a), rg)
    }

    /// Reverse sweep from a one-element `loss`; gradients of leaves are then
    /// available through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            propagate(nodes, grads, i, &g);
        }
        Ok(())
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let out = &nodes[i].value.data;
    let val = |v: Var| &nodes[v.0].value.data;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                if let Some(ga) = acc(nodes, grads, v) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += sign * s);
                }
            }
        }
        Op::Sub(a, b) => {
            for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                if let Some(ga) = acc(nodes, grads, v) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += sign * s);
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).clone(), val(*b).clone());
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(&bv) {
                    *d += s * y;
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for ((d, s), x) in gb.iter_mut().zip(g).zip(&av) {
                    *d += s * x;
                }
            }
        }
        Op::Scale(a, k) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += k * s);
            }
        }
        Op::AddConst(a) | Op::Reshape(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        Op::MulScalar(a, s) => {
            let k = val(*s)[0];
            let dot: f64 = g.iter().zip(val(*a)).map(|(x, y)| x * y).sum();
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, gv)| *d += k * gv);
            }
            if let Some(gs) = acc(nodes, grads, *s) {
                gs[0] += dot;
            }
        }
        Op::AddScalar(a, s) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
            }
            if let Some(gs) = acc(nodes, grads, *s) {
                gs[0] += g.iter().sum::<f64>();
            }
        }
        Op::Recip(a) => {
            let y = out.clone();
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((d, s), r) in ga.iter_mut().zip(g).zip(&y) {
                    *d -= s * r * r;
                }
            }
        }
        Op::Silu(a) => {
            let x = val(*a).clone();
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((d, s), &x) in ga.iter_mut().zip(g).zip(&x) {
                    let sg = sigmoid(x);
                    *d += s * sg * (1.0 + x * (1.0 - sg));
                }
            }
        }
        Op::Tanh(a) => {
            let y = out.clone();
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((d, s), t) in ga.iter_mut().zip(g).zip(&y) {
                    *d += s * (1.0 - t * t);
                }
            }
        }
        Op::Softplus(a) => {
            let x = val(*a).clone();
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((d, s), &x) in ga.iter_mut().zip(g).zip(&x) {
                    *d += s * sigmoid(x);
                }
            }
        }
        Op::Relu(a) => {
            let x = val(*a).clone();
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((d, s), &x) in ga.iter_mut().zip(g).zip(&x) {
                    if x > 0.0 {
                        *d += s;
                    }
                }
            }
        }
        Op::SoftThreshold { x, theta } => {
            let xv = val(*x).clone();
            let tv = val(*theta).clone();
            let th = |j: usize| if tv.len() == 1 { tv[0] } else { tv[j] };
            if let Some(gx) = acc(nodes, grads, *x) {
                for (j, d) in gx.iter_mut().enumerate() {
                    if xv[j].abs() > th(j) {
                        *d += g[j];
                    }
                }
            }
            if let Some(gt) = acc(nodes, grads, *theta) {
                let scalar = gt.len() == 1;
                for j in 0..xv.len() {
                    if xv[j].abs() > th(j) {
                        let v = -xv[j].signum() * g[j];
                        if scalar {
                            gt[0] += v;
                        } else {
                            gt[j] += v;
                        }
                    }
                }
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let iv = val(*input).clone();
            let wv = val(*weight).clone();
            let mut gi = acc(nodes, grads, *input).map(std::mem::take);
            let mut gw = acc(nodes, grads, *weight).map(std::mem::take);
            let mut gb = bias.and_then(|b| acc(nodes, grads, b)).map(std::mem::take);
            conv::backward(
                geom,
                &iv,
                &wv,
                g,
                gi.as_deref_mut(),
                gw.as_deref_mut(),
                gb.as_deref_mut(),
            );
            if let Some(v) = gi {
                grads[input.0] = Some(v);
            }
            if let Some(v) = gw {
                grads[weight.0] = Some(v);
            }
            if let (Some(v), Some(b)) = (gb, bias) {
                grads[b.0] = Some(v);
            }
        }
        Op::Concat(parts) => {
            let shape = &nodes[i].value.shape;
            let (b, ctot, plane) = (shape[0], shape[1], shape[2] * shape[3]);
            let mut coff = 0;
            for &p in parts {
                let pc = nodes[p.0].value.shape[1];
                if let Some(gp) = acc(nodes, grads, p) {
                    for bi in 0..b {
                        let src = &g[(bi * ctot + coff) * plane..][..pc * plane];
                        gp[bi * pc * plane..][..pc * plane]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                }
                coff += pc;
            }
        }
        Op::ChannelMean(x) => {
            let s = &nodes[x.0].value.shape;
            let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
            if let Some(gx) = acc(nodes, grads, *x) {
                let inv = 1.0 / c as f64;
                for bi in 0..b {
                    let src = &g[bi * plane..][..plane];
                    for ci in 0..c {
                        gx[(bi * c + ci) * plane..][..plane]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s * inv);
                    }
                }
            }
        }
        Op::ChannelMax { input, argmax } => {
            let s = &nodes[input.0].value.shape;
            let (c, plane) = (s[1], s[2] * s[3]);
            if let Some(gx) = acc(nodes, grads, *input) {
                for (j, &ci) in argmax.iter().enumerate() {
                    let (bi, p) = (j / plane, j % plane);
                    gx[(bi * c + ci) * plane + p] += g[j];
                }
            }
        }
        Op::GlobalAvgPool(x) => {
            let s = &nodes[x.0].value.shape;
            let plane = s[2] * s[3];
            if let Some(gx) = acc(nodes, grads, *x) {
                let inv = 1.0 / plane as f64;
                for (j, gv) in g.iter().enumerate() {
                    gx[j * plane..][..plane]
                        .iter_mut()
                        .for_each(|d| *d += gv * inv);
                }
            }
        }
        Op::MatMul(a, b) => {
            let (n, k) = (nodes[a.0].value.shape[0], nodes[a.0].value.shape[1]);
            let m = nodes[b.0].value.shape[1];
            let (av, bv) = (val(*a).clone(), val(*b).clone());
            if let Some(ga) = acc(nodes, grads, *a) {
                for r in 0..n {
                    for p in 0..k {
                        ga[r * k + p] += (0..m).map(|q| g[r * m + q] * bv[p * m + q]).sum::<f64>();
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for r in 0..n {
                    for p in 0..k {
                        let a_rp = av[r * k + p];
                        for q in 0..m {
                            gb[p * m + q] += a_rp * g[r * m + q];
                        }
                    }
                }
            }
        }
        Op::Softmax(a) => {
            let y = out.clone();
            let last = *nodes[i].value.shape.last().unwrap();
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((gr, yr), dr) in g
                    .chunks_exact(last)
                    .zip(y.chunks_exact(last))
                    .zip(ga.chunks_exact_mut(last))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..last {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::BlockMean { input, ratio } => {
            let s = &nodes[input.0].value.shape;
            let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
            let (oh, ow) = (h / ratio, w / ratio);
            let inv = 1.0 / (ratio * ratio) as f64;
            if let Some(gx) = acc(nodes, grads, *input) {
                for p in 0..bc {
                    for r in 0..h {
                        let grow = &g[(p * oh + r / ratio) * ow..][..ow];
                        let drow = &mut gx[(p * h + r) * w..][..w];
                        for (col, d) in drow.iter_mut().enumerate() {
                            *d += grow[col / ratio] * inv;
                        }
                    }
                }
            }
        }
        Op::Upsample { input, ratio } => {
            let s = &nodes[input.0].value.shape;
            let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
            let (oh, ow) = (h * ratio, w * ratio);
            if let Some(gx) = acc(nodes, grads, *input) {
                for p in 0..bc {
                    for r in 0..oh {
                        let grow = &g[(p * oh + r) * ow..][..ow];
                        let drow = &mut gx[(p * h + r / ratio) * w..][..w];
                        for (j, blk) in drow.iter_mut().zip(grow.chunks_exact(*ratio)) {
                            *j += blk.iter().sum::<f64>();
                        }
                    }
                }
            }
        }
        Op::Linear {
            input,
            map,
            transpose,
        } => {
            if let Some(gx) = acc(nodes, grads, *input) {
                let back = if *transpose {
                    map.apply(g)
                } else {
                    map.apply_t(g)
                };
                gx.iter_mut().zip(&back).for_each(|(d, b)| *d += b);
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::SumSquares(a) => {
            let x = val(*a).clone();
            if let Some(ga) = acc(nodes, grads, *a) {
                for (d, x) in ga.iter_mut().zip(&x) {
                    *d += 2.0 * x * g[0];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
