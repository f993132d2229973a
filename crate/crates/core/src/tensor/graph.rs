use super::conv::{self, Geometry};
use super::ops;
use super::{Parameter, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Element-wise unary operations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Abs,
    Neg,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Exp,
    Square,
    /// `0.5 z^2` for `|z| <= delta`, else `delta (|z| - delta/2)`.
    Huber(f64),
    Scale(f64),
    Offset(f64),
}

/// Element-wise binary operations. Shapes must match unless one side is a
/// one-element tensor, which broadcasts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Reduce(Reduce, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Geometry,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Geometry,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    Narrow {
        input: Var,
        start: usize,
    },
    Warp {
        source: Var,
        flow: Var,
    },
    SpatialDiff {
        input: Var,
        axis: usize,
    },
    Upsample2x(Var),
    BceWithLogits {
        logits: Var,
        target: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Single-use reverse-mode differentiation tape.
///
/// Every operation validates its inputs, evaluates eagerly and records how
/// to propagate gradients. [`Graph::backward`] may run once per graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn param(&mut self, p: &Parameter) -> Result<Var> {
        self.leaf(p.tensor.clone(), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = match kind {
            Unary::Abs => x.map(f64::abs),
            Unary::Neg => x.map(|v| -v),
            Unary::Relu => x.map(|v| v.max(0.0)),
            Unary::LeakyRelu(s) => x.map(|v| if v > 0.0 { v } else { s * v }),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Exp => x.map(f64::exp),
            Unary::Square => x.map(|v| v * v),
            Unary::Huber(d) => {
                if d <= 0.0 {
                    return Err(Error::invalid("huber delta must be positive"));
                }
                x.map(|z| {
                    let a = z.abs();
                    if a <= d {
                        0.5 * z * z
                    } else {
                        d * (a - 0.5 * d)
                    }
                })
            }
            Unary::Scale(c) => x.map(|v| c * v),
            Unary::Offset(c) => x.map(|v| v + c),
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::Unary(kind, a), rg, "unary")
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let f = match kind {
            Binary::Add => |p: f64, q: f64| p + q,
            Binary::Sub => |p: f64, q: f64| p - q,
            Binary::Mul => |p: f64, q: f64| p * q,
        };
        let value = if x.shape() == y.shape() {
            x.zip_map(y, f)?
        } else if y.is_scalar() {
            let q = y.item();
            x.map(|p| f(p, q))
        } else if x.is_scalar() {
            let p = x.item();
            y.map(|q| f(p, q))
        } else {
            return Err(mismatch("binary", x, y));
        };
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Binary(kind, a, b), rg, "binary")
    }

    pub fn reduce(&mut self, kind: Reduce, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Empty { op: "reduce" });
        }
        let v = match kind {
            Reduce::Sum => x.sum(),
            Reduce::Mean => x.mean(),
        };
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(v), Op::Reduce(kind, a), rg, "reduce")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Scale(c), a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, a)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduce::Sum, a)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduce::Mean, a)
    }

    /// Sum of several vars of equal shape.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or(Error::Empty { op: "add_all" })?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// 2-D cross-correlation. `input` is `[N, Cin, H, W]`, `weight` is
    /// `[Cout, Cin, K, K]`, `bias` is `[Cout]`. Output spatial size is
    /// `(H + 2p - K) / s + 1`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (x, wt) = (self.value(input), self.value(weight));
        if x.ndim() != 4 || wt.ndim() != 4 || x.shape()[1] != wt.shape()[1] {
            return Err(mismatch("conv2d", x, wt));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        let [n, cin, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [cout, _, kh, kw] = [wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]];
        let oh = conv::conv2d_output_size(h, kh, stride, padding);
        let ow = conv::conv2d_output_size(w, kw, stride, padding);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(mismatch("conv2d", x, wt));
        };
        let geom = Geometry {
            batch: n,
            lo_c: cout,
            lo_h: oh,
            lo_w: ow,
            hi_c: cin,
            hi_h: h,
            hi_w: w,
            kh,
            kw,
            stride,
            pad: padding,
        };
        let mut out = vec![0.0; n * cout * oh * ow];
        conv::gather(&geom, x.data(), wt.data(), &mut out);
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.len() != cout {
                return Err(mismatch("conv2d bias", bv, wt));
            }
            conv::add_bias(&mut out, bv.data(), n, oh * ow);
        }
        let value = Tensor::new(vec![n, cout, oh, ow], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
            "conv2d",
        )
    }

    /// Transposed convolution (the adjoint of [`Graph::conv2d`]). `weight`
    /// is `[Cin, Cout, K, K]`; output size is `(H - 1) s - 2p + K`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (x, wt) = (self.value(input), self.value(weight));
        if x.ndim() != 4 || wt.ndim() != 4 || x.shape()[1] != wt.shape()[0] {
            return Err(mismatch("conv_transpose2d", x, wt));
        }
        if stride == 0 {
            return Err(Error::invalid("conv_transpose2d stride must be >= 1"));
        }
        let [n, cin, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [_, cout, kh, kw] = [wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]];
        let oh = conv::conv_transpose2d_output_size(h, kh, stride, padding);
        let ow = conv::conv_transpose2d_output_size(w, kw, stride, padding);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(mismatch("conv_transpose2d", x, wt));
        };
        let geom = Geometry {
            batch: n,
            lo_c: cin,
            lo_h: h,
            lo_w: w,
            hi_c: cout,
            hi_h: oh,
            hi_w: ow,
            kh,
            kw,
            stride,
            pad: padding,
        };
        let mut out = vec![0.0; n * cout * oh * ow];
        conv::scatter(&geom, x.data(), wt.data(), &mut out);
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.len() != cout {
                return Err(mismatch("conv_transpose2d bias", bv, wt));
            }
            conv::add_bias(&mut out, bv.data(), n, oh * ow);
        }
        let value = Tensor::new(vec![n, cout, oh, ow], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        self.push(
            value,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
            "conv_transpose2d",
        )
    }

    /// `input [N, in] x weight[out, in]^T + bias[out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (x, wt) = (self.value(input), self.value(weight));
        if x.ndim() != 2 || wt.ndim() != 2 || x.shape()[1] != wt.shape()[1] {
            return Err(mismatch("linear", x, wt));
        }
        let (n, k) = (x.shape()[0], x.shape()[1]);
        let m = wt.shape()[0];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &x.data()[i * k..(i + 1) * k];
            for j in 0..m {
                let wr = &wt.data()[j * k..(j + 1) * k];
                out[i * m + j] = row.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.len() != m {
                return Err(mismatch("linear bias", bv, wt));
            }
            for i in 0..n {
                for j in 0..m {
                    out[i * m + j] += bv.data()[j];
                }
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        self.push(value, Op::Linear { input, weight, bias }, rg, "linear")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Reshape(a), rg, "reshape")
    }

    /// Concatenates `[N, C_i, ...]` tensors along axis 1.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self.value(*inputs.first().ok_or(Error::Empty { op: "concat" })?);
        let n = first.shape()[0];
        let rest: Vec<usize> = first.shape()[2..].to_vec();
        let inner: usize = rest.iter().product();
        let mut channels = 0;
        for &v in inputs {
            let t = self.value(v);
            if t.ndim() < 2 || t.shape()[0] != n || t.shape()[2..] != rest[..] {
                return Err(mismatch("concat", first, t));
            }
            channels += t.shape()[1];
        }
        let mut out = Vec::with_capacity(n * channels * inner);
        for b in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = vec![n, channels];
        shape.extend(rest);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(inputs);
        self.push(value, Op::Concat(inputs.to_vec()), rg, "concat")
    }

    /// Channels `start..start+len` of an `[N, C, ...]` tensor.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() < 2 || len == 0 || start + len > t.shape()[1] {
            return Err(Error::InvalidShape {
                op: "narrow",
                detail: format!("channels {start}..{} of {:?}", start + len, t.shape()),
            });
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let inner: usize = t.shape()[2..].iter().product();
        let mut out = Vec::with_capacity(n * len * inner);
        for b in 0..n {
            let base = (b * c + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[1] = len;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Narrow { input: a, start }, rg, "narrow")
    }

    /// Bilinear backward warp with border clamping. `source` is
    /// `[N, C, H, W]`, `flow` is `[N, 2, H, W]` holding `(u, v)` in pixels;
    /// `out(x) = source(x + flow(x))`.
    pub fn warp(&mut self, source: Var, flow: Var) -> Result<Var> {
        let (s, f) = (self.value(source), self.value(flow));
        if s.ndim() != 4
            || f.ndim() != 4
            || f.shape()[1] != 2
            || s.shape()[0] != f.shape()[0]
            || s.shape()[2..] != f.shape()[2..]
        {
            return Err(mismatch("warp", s, f));
        }
        let [n, c, h, w] = [s.shape()[0], s.shape()[1], s.shape()[2], s.shape()[3]];
        let (out, _) = ops::warp_forward(s.data(), f.data(), n, c, h, w);
        let value = Tensor::new(s.shape().to_vec(), out)?;
        let rg = self.rg(&[source, flow]);
        self.push(value, Op::Warp { source, flow }, rg, "warp")
    }

    /// Forward difference along x (`axis = 0`) or y (`axis = 1`) of the two
    /// trailing dimensions.
    pub fn spatial_diff(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() < 2 || axis > 1 {
            return Err(Error::invalid("spatial_diff needs >= 2 dims and axis 0 or 1"));
        }
        let (h, w) = t.hw();
        if (axis == 0 && w < 2) || (axis == 1 && h < 2) {
            return Err(Error::InvalidShape {
                op: "spatial_diff",
                detail: format!("{:?} too small along axis {axis}", t.shape()),
            });
        }
        let outer = t.len() / (h * w);
        let out = ops::spatial_diff(t.data(), outer, h, w, axis);
        let mut shape = t.shape().to_vec();
        let nd = shape.len();
        if axis == 0 {
            shape[nd - 1] -= 1;
        } else {
            shape[nd - 2] -= 1;
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::SpatialDiff { input: a, axis }, rg, "spatial_diff")
    }

    /// Nearest-neighbour 2x upsampling of the two trailing dimensions.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() < 2 {
            return Err(Error::invalid("upsample2x needs >= 2 dims"));
        }
        let (h, w) = t.hw();
        let outer = t.len() / (h * w);
        let out = ops::upsample2x(t.data(), outer, h, w);
        let mut shape = t.shape().to_vec();
        let nd = shape.len();
        shape[nd - 2] *= 2;
        shape[nd - 1] *= 2;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Upsample2x(a), rg, "upsample2x")
    }

    /// Element-wise binary cross-entropy of `sigmoid(logits)` against
    /// `target`, in the overflow-free form.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        let (x, t) = (self.value(logits), self.value(target));
        let value = x.zip_map(t, |x, t| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())?;
        let rg = self.rg(&[logits, target]);
        self.push(value, Op::BceWithLogits { logits, target }, rg, "bce_with_logits")
    }

    /// Propagates `d loss / d node` to every node that requires gradients.
    /// Gradients accumulate across multiple uses of a node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            let shape = self.nodes[i].value.shape().to_vec();
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            self.nodes[i].grad = Some(Tensor::new(shape, g)?);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn broadcast_grad(&self, v: Var, g: Vec<f64>) -> Vec<f64> {
        if self.nodes[v.0].value.len() == g.len() {
            g
        } else {
            vec![g.iter().sum()]
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Unary(kind, a) => {
                let x = self.nodes[a.0].value.data();
                let ga: Vec<f64> = match kind {
                    Unary::Abs => x.iter().zip(g).map(|(&x, &g)| g * x.signum() * (x != 0.0) as u8 as f64).collect(),
                    Unary::Neg => g.iter().map(|g| -g).collect(),
                    Unary::Relu => x.iter().zip(g).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect(),
                    Unary::LeakyRelu(s) => x.iter().zip(g).map(|(&x, &g)| if x > 0.0 { g } else { s * g }).collect(),
                    Unary::Sigmoid => out.iter().zip(g).map(|(&y, &g)| g * y * (1.0 - y)).collect(),
                    Unary::Exp => out.iter().zip(g).map(|(&y, &g)| g * y).collect(),
                    Unary::Square => x.iter().zip(g).map(|(&x, &g)| 2.0 * x * g).collect(),
                    Unary::Huber(d) => x
                        .iter()
                        .zip(g)
                        .map(|(&z, &g)| if z.abs() <= d { g * z } else { g * d * z.signum() })
                        .collect(),
                    Unary::Scale(c) => g.iter().map(|g| c * g).collect(),
                    Unary::Offset(_) => g.to_vec(),
                };
                self.accumulate(grads, a, ga);
            }
            &Op::Binary(kind, a, b) => {
                let (xa, xb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let at = |t: &Tensor, k: usize| if t.is_scalar() { t.item() } else { t.data()[k] };
                let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                    Binary::Add => (g.to_vec(), g.to_vec()),
                    Binary::Sub => (g.to_vec(), g.iter().map(|g| -g).collect()),
                    Binary::Mul => (
                        g.iter().enumerate().map(|(k, g)| g * at(xb, k)).collect(),
                        g.iter().enumerate().map(|(k, g)| g * at(xa, k)).collect(),
                    ),
                };
                let ga = self.broadcast_grad(a, ga);
                let gb = self.broadcast_grad(b, gb);
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            &Op::Reduce(kind, a) => {
                let n = self.nodes[a.0].value.len();
                let v = match kind {
                    Reduce::Sum => g[0],
                    Reduce::Mean => g[0] / n as f64,
                };
                self.accumulate(grads, a, vec![v; n]);
            }
            &Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let x = self.nodes[input.0].value.data();
                let w = self.nodes[weight.0].value.data();
                if self.nodes[input.0].requires_grad {
                    let mut gi = vec![0.0; x.len()];
                    conv::scatter(&geom, g, w, &mut gi);
                    self.accumulate(grads, input, gi);
                }
                if self.nodes[weight.0].requires_grad {
                    let mut gw = vec![0.0; w.len()];
                    conv::weight_grad(&geom, g, x, &mut gw);
                    self.accumulate(grads, weight, gw);
                }
                if let Some(b) = bias {
                    let gb = conv::channel_sums(g, geom.batch, geom.lo_c, geom.lo_h * geom.lo_w);
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let x = self.nodes[input.0].value.data();
                let w = self.nodes[weight.0].value.data();
                if self.nodes[input.0].requires_grad {
                    let mut gi = vec![0.0; x.len()];
                    conv::gather(&geom, g, w, &mut gi);
                    self.accumulate(grads, input, gi);
                }
                if self.nodes[weight.0].requires_grad {
                    let mut gw = vec![0.0; w.len()];
                    conv::weight_grad(&geom, x, g, &mut gw);
                    self.accumulate(grads, weight, gw);
                }
                if let Some(b) = bias {
                    let gb = conv::channel_sums(g, geom.batch, geom.hi_c, geom.hi_h * geom.hi_w);
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let (n, k) = (x.shape()[0], x.shape()[1]);
                let m = w.shape()[0];
                if self.nodes[input.0].requires_grad {
                    let mut gi = vec![0.0; n * k];
                    for r in 0..n {
                        for j in 0..m {
                            let gv = g[r * m + j];
                            let wr = &w.data()[j * k..(j + 1) * k];
                            for (o, wv) in gi[r * k..(r + 1) * k].iter_mut().zip(wr) {
                                *o += gv * wv;
                            }
                        }
                    }
                    self.accumulate(grads, input, gi);
                }
                if self.nodes[weight.0].requires_grad {
                    let mut gw = vec![0.0; m * k];
                    for r in 0..n {
                        let xr = &x.data()[r * k..(r + 1) * k];
                        for j in 0..m {
                            let gv = g[r * m + j];
                            for (o, xv) in gw[j * k..(j + 1) * k].iter_mut().zip(xr) {
                                *o += gv * xv;
                            }
                        }
                    }
                    self.accumulate(grads, weight, gw);
                }
                if let Some(b) = bias {
                    let mut gb = vec![0.0; m];
                    for r in 0..n {
                        for j in 0..m {
                            gb[j] += g[r * m + j];
                        }
                    }
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Reshape(a) => self.accumulate(grads, a, g.to_vec()),
            Op::Concat(inputs) => {
                let n = node.value.shape()[0];
                let total_c = node.value.shape()[1];
                let inner: usize = node.value.shape()[2..].iter().product();
                let mut offset = 0;
                for &v in inputs {
                    let c = self.nodes[v.0].value.shape()[1];
                    if self.nodes[v.0].requires_grad {
                        let mut gv = Vec::with_capacity(n * c * inner);
                        for b in 0..n {
                            let base = (b * total_c + offset) * inner;
                            gv.extend_from_slice(&g[base..base + c * inner]);
                        }
                        self.accumulate(grads, v, gv);
                    }
                    offset += c;
                }
            }
            &Op::Narrow { input, start } => {
                let src = &self.nodes[input.0].value;
                let (n, c) = (src.shape()[0], src.shape()[1]);
                let len = node.value.shape()[1];
                let inner: usize = src.shape()[2..].iter().product();
                let mut gi = vec![0.0; src.len()];
                for b in 0..n {
                    let dst = (b * c + start) * inner;
                    let from = b * len * inner;
                    gi[dst..dst + len * inner].copy_from_slice(&g[from..from + len * inner]);
                }
                self.accumulate(grads, input, gi);
            }
            &Op::Warp { source, flow } => {
                let s = &self.nodes[source.0].value;
                let f = &self.nodes[flow.0].value;
                let [n, c, h, w] = [s.shape()[0], s.shape()[1], s.shape()[2], s.shape()[3]];
                let (gs, gf) = ops::warp_backward(s.data(), f.data(), g, n, c, h, w);
                self.accumulate(grads, source, gs);
                self.accumulate(grads, flow, gf);
            }
            &Op::SpatialDiff { input, axis } => {
                let t = &self.nodes[input.0].value;
                let (h, w) = t.hw();
                let gi = ops::spatial_diff_backward(g, t.len() / (h * w), h, w, axis);
                self.accumulate(grads, input, gi);
            }
            &Op::Upsample2x(a) => {
                let t = &self.nodes[a.0].value;
                let (h, w) = t.hw();
                let gi = ops::upsample2x_backward(g, t.len() / (h * w), h, w);
                self.accumulate(grads, a, gi);
            }
            &Op::BceWithLogits { logits, target } => {
                let x = self.nodes[logits.0].value.data();
                let t = self.nodes[target.0].value.data();
                let gl = x.iter().zip(t).zip(g).map(|((&x, &t), &g)| g * (sigmoid(x) - t)).collect();
                let gt = x.iter().zip(g).map(|(&x, &g)| -g * x).collect();
                self.accumulate(grads, logits, gl);
                self.accumulate(grads, target, gt);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 2.0, 0.0])).unwrap();
        let a = g.abs(x).unwrap();
        assert_eq!(g.value(a).data(), &[1.0, 2.0, 0.0]);
        let z = g.constant(Tensor::scalar(0.0)).unwrap();
        let s = g.add(x, z).unwrap();
        assert_eq!(g.value(s), g.value(x));
        let sg = g.unary(Unary::Sigmoid, z).unwrap();
        assert_eq!(g.value(sg).item(), 0.5);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[2], 1000.0)).unwrap();
        assert!(matches!(g.unary(Unary::Exp, a), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn reduce_examples() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let m = g.mean(x).unwrap();
        assert_eq!(g.value(m).item(), 2.0);
        g.backward(m).unwrap();
        for v in g.grad(x).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[4])).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, -2.0])).unwrap();
        let sq = g.unary(Unary::Square, x).unwrap();
        let m = g.mean(sq).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[2])).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
    }

    #[test]
    fn backward_on_vector_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[3.0, 4.0])).unwrap();
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[7.0, 9.0]);
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).item(), 9.0);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let data: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 4, 5], &data)).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(t(&[1, 1, 3, 3], &k)).unwrap();
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_channel_mismatch_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3])).unwrap();
        assert!(g.conv2d(x, w, None, 1, 0).is_err());
    }

    #[test]
    fn concat_narrow_roundtrip() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64)).unwrap();
        let b = g.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| 100.0 + i as f64)).unwrap();
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 4, 2, 2]);
        let back = g.narrow(c, 1, 3).unwrap();
        assert_eq!(g.value(back), g.value(b));
    }

    #[test]
    fn bce_matches_direct_formula() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-2.0, 0.0, 3.0])).unwrap();
        let y = g.constant(t(&[3], &[0.0, 1.0, 1.0])).unwrap();
        let l = g.bce_with_logits(x, y).unwrap();
        let expect = |x: f64, y: f64| {
            let p = 1.0 / (1.0 + (-x).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        };
        for (k, (&xv, &yv)) in [-2.0, 0.0, 3.0].iter().zip(&[0.0, 1.0, 1.0]).enumerate() {
            assert!((g.value(l).data()[k] - expect(xv, yv)).abs() < 1e-12);
        }
    }
}
