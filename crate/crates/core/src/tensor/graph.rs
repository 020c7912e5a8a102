use super::{Tensor, TensorError};

/// Handle to a node of a [`Graph`]. Ids grow with creation order, so every
/// node's inputs carry smaller ids than the node itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sqrt,
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ReduceKind {
    Sum,
    Mean,
}

enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Shift {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Custom {
        x: Var,
        derivative: Box<dyn Fn(f64) -> f64>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Reduce {
        x: Var,
        kind: ReduceKind,
        axis: Option<usize>,
    },
    /// Output `o` is the mean of input entries `picks[o*k..(o+1)*k]`.
    Select {
        x: Var,
        picks: Vec<usize>,
        k: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    NormalizeRows {
        x: Var,
        denoms: Vec<f64>,
        clamped: Vec<bool>,
    },
    Diagonal {
        x: Var,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode computation graph.
///
/// Nodes are appended as operations run; [`Graph::backward`] walks them in
/// reverse creation order and accumulates gradients into every node that
/// requires one. A graph is single-threaded state.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
    warnings: Vec<String>,
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu(x: f64) -> f64 {
    // tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scalar GELU (tanh approximation) outside of any graph.
pub fn gelu_scalar(x: f64) -> f64 {
    gelu(x)
}

/// Scalar logistic function outside of any graph.
pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.node(v).value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by the last backward pass, if the node took part.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    /// Non-fatal numerical notes raised while building the graph.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Clears gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = if is_suffix(&sb, &sa) {
            sa.clone()
        } else if is_suffix(&sa, &sb) {
            sb.clone()
        } else {
            return Err(TensorError::Shape {
                op: "broadcast",
                left: sa,
                right: sb,
            });
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n: usize = out_shape.iter().product();
        let (na, nb) = (av.len(), bv.len());
        if kind == BinaryKind::Div && bv.contains(&0.0) {
            return Err(TensorError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (av[i % na], bv[i % nb]);
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, data)?, rg, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if matches!(kind, UnaryKind::Log | UnaryKind::Sqrt) {
            if let Some(bad) = xv.data().iter().find(|v| **v <= 0.0 || v.is_nan()) {
                return Err(TensorError::Domain {
                    op: if kind == UnaryKind::Log {
                        "log"
                    } else {
                        "sqrt"
                    },
                    detail: format!("input {bad} is not strictly positive"),
                });
            }
        }
        let out = xv.map(|v| match kind {
            UnaryKind::Neg => -v,
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Sqrt => v.sqrt(),
            UnaryKind::Relu => v.max(0.0),
            UnaryKind::Gelu => gelu(v),
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Tanh => v.tanh(),
        });
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Unary { kind, x }))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(out, rg, Op::Scale { x, factor })
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let out = self.value(x).map(|v| v + offset);
        let rg = self.rg(x);
        self.push(out, rg, Op::Shift { x })
    }

    /// Elementwise clamp; the gradient is zero wherever the bound is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(out, rg, Op::Clamp { x, lo, hi })
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn custom_unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        derivative: impl Fn(f64) -> f64 + 'static,
    ) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(
            out,
            rg,
            Op::Custom {
                x,
                derivative: Box::new(derivative),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = av[i * k + p];
                if s == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, bb) in row.iter_mut().zip(brow) {
                    *o += s * bb;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.value(x).dims2()?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, rg, Op::Transpose { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Reshape { x }))
    }

    /// Temporal convolution of `x: [T, C_in]` with `w: [K, C_in, C_out]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let (t, cin) = self.value(x).dims2()?;
        let ws = self.shape(w).to_vec();
        let [k, wcin, cout] = ws[..] else {
            return Err(TensorError::Rank {
                op: "conv1d",
                expected: 3,
                shape: ws,
            });
        };
        if wcin != cin {
            return Err(TensorError::Shape {
                op: "conv1d",
                left: vec![t, cin],
                right: ws,
            });
        }
        if self.shape(bias) != [cout] {
            return Err(TensorError::Shape {
                op: "conv1d bias",
                left: vec![cout],
                right: self.shape(bias).to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument(
                "conv1d stride must be >= 1".into(),
            ));
        }
        if k > t + 2 * padding {
            return Err(TensorError::InvalidArgument(format!(
                "conv1d kernel {k} exceeds padded length {}",
                t + 2 * padding
            )));
        }
        let t_out = (t + 2 * padding - k) / stride + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(bias).data();
        let mut out = Vec::with_capacity(t_out * cout);
        for _ in 0..t_out {
            out.extend_from_slice(bv);
        }
        for to in 0..t_out {
            let orow = &mut out[to * cout..(to + 1) * cout];
            for kk in 0..k {
                let ti = (to * stride + kk) as isize - padding as isize;
                if ti < 0 || ti >= t as isize {
                    continue;
                }
                let xrow = &xv[ti as usize * cin..(ti as usize + 1) * cin];
                for (c, &xval) in xrow.iter().enumerate() {
                    let wrow = &wv[(kk * cin + c) * cout..(kk * cin + c + 1) * cout];
                    for (o, wval) in orow.iter_mut().zip(wrow) {
                        *o += xval * wval;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(bias);
        Ok(self.push(
            Tensor::new(vec![t_out, cout], out)?,
            rg,
            Op::Conv1d {
                x,
                w,
                bias,
                stride,
                padding,
            },
        ))
    }

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<(), TensorError> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(TensorError::Axis { op, axis, rank });
        }
        Ok(())
    }

    fn reduce(
        &mut self,
        x: Var,
        kind: ReduceKind,
        axis: Option<usize>,
    ) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let out = match axis {
            None => {
                let s = xv.sum();
                let v = match kind {
                    ReduceKind::Sum => s,
                    ReduceKind::Mean => s / xv.numel() as f64,
                };
                Tensor::scalar(v)
            }
            Some(ax) => {
                self.check_axis(x, ax, "reduce")?;
                let xv = self.value(x);
                let shape = xv.shape();
                let (outer, len, inner) = split_axis(shape, ax);
                let d = xv.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            out[o * inner + i] += d[(o * len + l) * inner + i];
                        }
                    }
                }
                if kind == ReduceKind::Mean {
                    for v in &mut out {
                        *v /= len as f64;
                    }
                }
                let mut s = shape.to_vec();
                s.remove(ax);
                Tensor::new(s, out)?
            }
        };
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Reduce { x, kind, axis }))
    }

    /// Sum over `axis`, or over everything when `axis` is `None`.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce(x, ReduceKind::Sum, axis)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce(x, ReduceKind::Mean, axis)
    }

    /// Maximum along `axis`; ties resolve to the lowest index.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.topk_mean(x, axis, 1)
    }

    /// Mean of the `k` largest entries along `axis`. Ties resolve to the
    /// lowest index and the gradient reaches only the selected entries.
    pub fn topk_mean(&mut self, x: Var, axis: usize, k: usize) -> Result<Var, TensorError> {
        self.check_axis(x, axis, "topk_mean")?;
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        if k == 0 || k > len {
            return Err(TensorError::InvalidArgument(format!(
                "top-k with k={k} on an axis of length {len}"
            )));
        }
        let d = xv.data();
        let mut picks = Vec::with_capacity(outer * inner * k);
        let mut out = Vec::with_capacity(outer * inner);
        let mut idx: Vec<usize> = Vec::with_capacity(len);
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                idx.clear();
                idx.extend(0..len);
                // stable sort keeps lower indices first among equal values
                idx.sort_by(|&p, &q| d[at(q)].total_cmp(&d[at(p)]));
                let mut s = 0.0;
                for &l in &idx[..k] {
                    picks.push(at(l));
                    s += d[at(l)];
                }
                out.push(s / k as f64);
            }
        }
        let mut s = shape;
        s.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(s, out)?, rg, Op::Select { x, picks, k }))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var, TensorError> {
        self.check_axis(x, axis, "softmax")?;
        let xv = self.value(x);
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let d = xv.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| d[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..len).map(|l| (d[at(l)] - m).exp()).sum();
                let lz = z.ln();
                for l in 0..len {
                    out[at(l)] = if log {
                        d[at(l)] - m - lz
                    } else {
                        (d[at(l)] - m).exp() / z
                    };
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        let op = if log {
            Op::LogSoftmax { x, axis }
        } else {
            Op::Softmax { x, axis }
        };
        Ok(self.push(t, rg, op))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.softmax_impl(x, axis, true)
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument(
                "layer_norm eps must be > 0".into(),
            ));
        }
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or(TensorError::Rank {
            op: "layer_norm",
            expected: 1,
            shape: shape.clone(),
        })?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::Shape {
                    op: "layer_norm affine",
                    left: shape.clone(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let d = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = d.len() / c;
        let mut xhat = vec![0.0; d.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; d.len()];
        for r in 0..rows {
            let row = &d[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Concatenates rank-2 tensors along their last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
        let (rows, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(TensorError::Shape {
                    op: "concat",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (rows, cols) = self.value(x).dims2()?;
        if len == 0 || start + len > cols {
            return Err(TensorError::InvalidArgument(format!(
                "column slice {start}..{} out of {cols}",
                start + len
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![rows, len], out)?,
            rg,
            Op::Slice { x, start },
        ))
    }

    /// Divides each row by `max(‖row‖₂, eps)`. Rows whose norm falls below
    /// `eps` are reported through [`Graph::warnings`].
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var, TensorError> {
        let (rows, cols) = self.value(x).dims2()?;
        let xv = self.value(x);
        let mut denoms = Vec::with_capacity(rows);
        let mut clamped = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = xv.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = norm.max(eps);
            denoms.push(d);
            clamped.push(norm <= eps);
            out.extend(row.iter().map(|v| v / d));
        }
        let n_clamped = clamped.iter().filter(|c| **c).count();
        if n_clamped > 0 {
            self.warnings.push(format!(
                "normalize_rows: {n_clamped} row(s) with norm below {eps:e} clamped"
            ));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            rg,
            Op::NormalizeRows { x, denoms, clamped },
        ))
    }

    /// Main diagonal of a square matrix.
    pub fn diagonal(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.value(x).dims2()?;
        if r != c {
            return Err(TensorError::Shape {
                op: "diagonal",
                left: vec![r, c],
                right: vec![r, r],
            });
        }
        let xv = self.value(x).data();
        let out = (0..r).map(|i| xv[i * r + i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(out), rg, Op::Diagonal { x }))
    }

    /// Propagates gradients from a one-element `loss` to every node that
    /// requires one. Gradients add onto whatever earlier passes left, but a
    /// second call without [`Graph::zero_grad`] is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => add_into(acc, &g),
                None => node.grad = Some(g),
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let (na, nb) = (av.len(), bv.len());
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i % na] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => *gi,
                            BinaryKind::Mul => gi * bv[i % nb],
                            BinaryKind::Div => gi / bv[i % nb],
                        };
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % nb] += match kind {
                            BinaryKind::Add => *gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * av[i % na],
                            BinaryKind::Div => {
                                let bb = bv[i % nb];
                                -gi * av[i % na] / (bb * bb)
                            }
                        };
                    }
                }
            }
            Op::Unary { kind, x } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..g.len() {
                        let (xi, yi) = (xv[i], yv[i]);
                        gx[i] += g[i]
                            * match kind {
                                UnaryKind::Neg => -1.0,
                                UnaryKind::Exp => yi,
                                UnaryKind::Log => 1.0 / xi,
                                UnaryKind::Sqrt => 0.5 / yi,
                                UnaryKind::Relu => {
                                    if xi > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryKind::Gelu => gelu_grad(xi),
                                UnaryKind::Sigmoid => yi * (1.0 - yi),
                                UnaryKind::Tanh => 1.0 - yi * yi,
                            };
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (d, gi) in gx.iter_mut().zip(g) {
                        *d += gi * factor;
                    }
                }
            }
            Op::Shift { x } | Op::Reshape { x } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..g.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Custom { x, derivative } => {
                let xv = self.value(*x).data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * derivative(xv[i]);
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    // ga[i,p] += sum_j g[i,j] b[p,j]
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    // gb[p,j] += sum_i a[i,p] g[i,j]
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = av[i * k + p];
                            if s == 0.0 {
                                continue;
                            }
                            for (d, gi) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += s * gi;
                            }
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                bias,
                stride,
                padding,
            } => {
                let (t, cin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let (k, cout) = (self.shape(*w)[0], self.shape(*w)[2]);
                let t_out = node.value.shape()[0];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let tap = |to: usize, kk: usize| -> Option<usize> {
                    let ti = (to * stride + kk) as isize - *padding as isize;
                    (ti >= 0 && ti < t as isize).then_some(ti as usize)
                };
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for to in 0..t_out {
                        add_into(gb, &g[to * cout..(to + 1) * cout]);
                    }
                }
                if let Some(gw) = slot(nodes, grads, *w) {
                    for to in 0..t_out {
                        let grow = &g[to * cout..(to + 1) * cout];
                        for kk in 0..k {
                            let Some(ti) = tap(to, kk) else { continue };
                            for c in 0..cin {
                                let xval = xv[ti * cin + c];
                                let base = (kk * cin + c) * cout;
                                for (d, gi) in gw[base..base + cout].iter_mut().zip(grow) {
                                    *d += xval * gi;
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    for to in 0..t_out {
                        let grow = &g[to * cout..(to + 1) * cout];
                        for kk in 0..k {
                            let Some(ti) = tap(to, kk) else { continue };
                            for c in 0..cin {
                                let base = (kk * cin + c) * cout;
                                let s: f64 = wv[base..base + cout]
                                    .iter()
                                    .zip(grow)
                                    .map(|(a, b)| a * b)
                                    .sum();
                                gx[ti * cin + c] += s;
                            }
                        }
                    }
                }
            }
            Op::Reduce { x, kind, axis } => {
                let shape = self.shape(*x).to_vec();
                if let Some(gx) = slot(nodes, grads, *x) {
                    match axis {
                        None => {
                            let s = match kind {
                                ReduceKind::Sum => g[0],
                                ReduceKind::Mean => g[0] / gx.len() as f64,
                            };
                            for d in gx.iter_mut() {
                                *d += s;
                            }
                        }
                        Some(ax) => {
                            let (outer, len, inner) = split_axis(&shape, *ax);
                            let f = match kind {
                                ReduceKind::Sum => 1.0,
                                ReduceKind::Mean => 1.0 / len as f64,
                            };
                            for o in 0..outer {
                                for l in 0..len {
                                    for i in 0..inner {
                                        gx[(o * len + l) * inner + i] += f * g[o * inner + i];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Select { x, picks, k } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (o, gi) in g.iter().enumerate() {
                        for &p in &picks[o * k..(o + 1) * k] {
                            gx[p] += gi / *k as f64;
                        }
                    }
                }
            }
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let y = node.value.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            if log {
                                let gs: f64 = (0..len).map(|l| g[at(l)]).sum();
                                for l in 0..len {
                                    gx[at(l)] += g[at(l)] - y[at(l)].exp() * gs;
                                }
                            } else {
                                let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                                for l in 0..len {
                                    gx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.shape(*gamma)[0];
                let gam = self.value(*gamma).data();
                let rows = rstd.len();
                if let Some(gb) = slot(nodes, grads, *beta) {
                    for r in 0..rows {
                        add_into(gb, &g[r * c..(r + 1) * c]);
                    }
                }
                if let Some(gg) = slot(nodes, grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    for r in 0..rows {
                        let xh = &xhat[r * c..(r + 1) * c];
                        let dxh: Vec<f64> = (0..c).map(|j| g[r * c + j] * gam[j]).collect();
                        let m1 = dxh.iter().sum::<f64>() / c as f64;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[r * c + j] += rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if let Some(gp) = slot(nodes, grads, p) {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                let cols = self.shape(*x)[1];
                let (rows, len) = (node.value.shape()[0], node.value.shape()[1]);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for r in 0..rows {
                        add_into(
                            &mut gx[r * cols + start..r * cols + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                }
            }
            Op::NormalizeRows { x, denoms, clamped } => {
                let cols = self.shape(*x)[1];
                let y = node.value.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (r, (&d, &cl)) in denoms.iter().zip(clamped).enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                        let dot = if cl {
                            0.0
                        } else {
                            yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>()
                        };
                        for j in 0..cols {
                            gx[r * cols + j] += (gr[j] - yr[j] * dot) / d;
                        }
                    }
                }
            }
            Op::Diagonal { x } => {
                let n = self.shape(*x)[0];
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..n {
                        gx[i * n + i] += g[i];
                    }
                }
            }
        }
    }
}
