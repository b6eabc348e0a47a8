use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom, Padding};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Log,
    Relu,
    Abs,
    Square,
    Sqrt,
    Clamp01,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, usize),
    Binary(Binary, usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Linear { x: usize, w: usize, b: usize },
    Sum(usize),
    SumAxis { x: usize, outer: usize, axis_len: usize, inner: usize },
    MaxAxis { x: usize, arg: Vec<usize> },
    LogSoftmax(usize),
    Gather { x: usize, cols: usize, idx: Vec<usize> },
    Reshape(usize),
    Conv1d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    MaxPool { x: usize, arg: Vec<usize> },
    Upsample { x: usize, rows: usize, len: usize, factor: usize },
    Concat { a: usize, b: usize, n: usize, a_block: usize, b_block: usize },
    SqDist { e: usize, c: usize, n: usize, l: usize, m: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Records one differentiable computation. Built per step and consumed by
/// [`Tape::backward`].
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every tracked node of a consumed tape.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `var`; `None` if it was not tracked.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.idx).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copies `tensor` onto the tape. It is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let tracked = tensor.requires_grad();
        let value = Tensor::from_parts(tensor.shape.clone(), tensor.data.clone());
        self.push(value, Op::Leaf, tracked)
    }

    /// Copies `tensor` onto the tape as an untracked constant regardless of its flag.
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        let value = Tensor::from_parts(tensor.shape.clone(), tensor.data.clone());
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        debug_assert_eq!(var.tape, self.id, "variable from another tape");
        &self.nodes[var.idx].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.idx >= self.nodes.len() {
            return Err(Error::Detached);
        }
        Ok(var.idx)
    }

    fn tracked(&self, idx: usize) -> bool {
        self.nodes[idx].tracked
    }

    fn finish(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, tracked: bool) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        Ok(self.push(Tensor::from_parts(shape, data), op, tracked))
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        let name = match kind {
            Unary::Neg => "neg",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Relu => "relu",
            Unary::Abs => "abs",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Clamp01 => "clamp01",
        };
        if matches!(kind, Unary::Log) {
            if let Some(bad) = x.data.iter().find(|&&v| v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        if matches!(kind, Unary::Sqrt) {
            if let Some(bad) = x.data.iter().find(|&&v| v < 0.0) {
                return Err(Error::Domain {
                    op: "sqrt",
                    detail: format!("negative input {bad}"),
                });
            }
        }
        let f: fn(f64) -> f64 = match kind {
            Unary::Neg => |v| -v,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Relu => |v| v.max(0.0),
            Unary::Abs => f64::abs,
            Unary::Square => |v| v * v,
            Unary::Sqrt => f64::sqrt,
            Unary::Clamp01 => |v| v.clamp(0.0, 1.0),
        };
        let data = x.data.iter().map(|&v| f(v)).collect();
        let shape = x.shape.clone();
        let tracked = self.tracked(ia);
        self.finish(name, shape, data, Op::Unary(kind, ia), tracked)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        if x.shape != y.shape {
            return Err(Error::shape(name, format!("{:?} vs {:?}", x.shape, y.shape)));
        }
        let data = x
            .data
            .iter()
            .zip(&y.data)
            .map(|(&u, &v)| match kind {
                Binary::Add => u + v,
                Binary::Sub => u - v,
                Binary::Mul => u * v,
            })
            .collect();
        let shape = x.shape.clone();
        let tracked = self.tracked(ia) || self.tracked(ib);
        self.finish(name, shape, data, Op::Binary(kind, ia, ib), tracked)
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

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }

    /// Clamps to `[0, 1]`. Gradient passes where the input lies in the closed interval.
    pub fn clamp01(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Clamp01, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        let data = x.data.iter().map(|v| v * factor).collect();
        let shape = x.shape.clone();
        let tracked = self.tracked(ia);
        self.finish("scale", shape, data, Op::Scale(ia, factor), tracked)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        let data = x.data.iter().map(|v| v + offset).collect();
        let shape = x.shape.clone();
        let tracked = self.tracked(ia);
        self.finish("add_scalar", shape, data, Op::AddScalar(ia), tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if x.rank() != 2 || y.rank() != 2 || x.shape[1] != y.shape[0] {
            return Err(Error::shape("matmul", format!("{:?} · {:?}", x.shape, y.shape)));
        }
        let (n, k, p) = (x.shape[0], x.shape[1], y.shape[1]);
        let data = kernels::matmul(&x.data, &y.data, n, k, p);
        let tracked = self.tracked(ia) || self.tracked(ib);
        self.finish("matmul", vec![n, p], data, Op::MatMul(ia, ib), tracked)
    }

    /// Affine map `x[n×in] · w[in×out] + b[out]` with the bias added to every row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (xv, wv, bv) = (&self.nodes[ix].value, &self.nodes[iw].value, &self.nodes[ib].value);
        if xv.rank() != 2 || wv.rank() != 2 || xv.shape[1] != wv.shape[0] || bv.shape != [wv.shape[1]] {
            return Err(Error::shape(
                "linear",
                format!("x {:?}, w {:?}, b {:?}", xv.shape, wv.shape, bv.shape),
            ));
        }
        let (n, k, p) = (xv.shape[0], xv.shape[1], wv.shape[1]);
        let mut data = kernels::matmul(&xv.data, &wv.data, n, k, p);
        for row in data.chunks_mut(p.max(1)) {
            for (o, bias) in row.iter_mut().zip(&bv.data) {
                *o += bias;
            }
        }
        let tracked = self.tracked(ix) || self.tracked(iw) || self.tracked(ib);
        self.finish("linear", vec![n, p], data, Op::Linear { x: ix, w: iw, b: ib }, tracked)
    }

    /// Sum of every element into a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let total = self.nodes[ia].value.data.iter().sum();
        let tracked = self.tracked(ia);
        self.finish("sum", Vec::new(), vec![total], Op::Sum(ia), tracked)
    }

    fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        Ok((outer, shape[axis], inner))
    }

    /// Sum along `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        let (outer, axis_len, inner) = Self::axis_split(&x.shape, axis)?;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..axis_len {
                let src = &x.data[(o * axis_len + j) * inner..(o * axis_len + j + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = x.shape.clone();
        shape.remove(axis);
        let tracked = self.tracked(ia);
        self.finish(
            "sum_axis",
            shape,
            data,
            Op::SumAxis {
                x: ia,
                outer,
                axis_len,
                inner,
            },
            tracked,
        )
    }

    /// Mean of every element; errors on an empty tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (_, axis_len, _) = Self::axis_split(self.shape(a), axis)?;
        if axis_len == 0 {
            return Err(Error::shape("mean_axis", "empty axis"));
        }
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / axis_len as f64)
    }

    /// Maximum along `axis` (or over everything when `None`), with the winning
    /// positions along that axis. The gradient is routed to the first maximum.
    pub fn max_with_index(&mut self, a: Var, axis: Option<usize>) -> Result<(Var, Vec<usize>)> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        if x.is_empty() {
            return Err(Error::shape("max", "empty tensor"));
        }
        let (outer, axis_len, inner, shape) = match axis {
            None => (1, x.len(), 1, Vec::new()),
            Some(ax) => {
                let (o, l, i) = Self::axis_split(&x.shape, ax)?;
                let mut s = x.shape.clone();
                s.remove(ax);
                (o, l, i, s)
            }
        };
        let mut data = Vec::with_capacity(outer * inner);
        let mut flat = Vec::with_capacity(outer * inner);
        let mut positions = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * axis_len + j) * inner + i;
                let mut best = 0;
                for j in 1..axis_len {
                    if x.data[at(j)] > x.data[at(best)] {
                        best = j;
                    }
                }
                data.push(x.data[at(best)]);
                flat.push(at(best));
                positions.push(best);
            }
        }
        let tracked = self.tracked(ia);
        let var = self.finish("max", shape, data, Op::MaxAxis { x: ia, arg: flat }, tracked)?;
        Ok((var, positions))
    }

    /// Row-wise log-softmax of an `n × l` matrix, stabilized by the row maximum.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        if x.rank() != 2 || x.shape[1] < 2 {
            return Err(Error::shape("log_softmax", format!("need n × l with l ≥ 2, got {:?}", x.shape)));
        }
        if x.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "log_softmax" });
        }
        let data = kernels::log_softmax_rows(&x.data, x.shape[1]);
        let shape = x.shape.clone();
        let tracked = self.tracked(ia);
        self.finish("log_softmax", shape, data, Op::LogSoftmax(ia), tracked)
    }

    /// Picks `x[i, idx[i]]` from an `n × l` matrix into a length-`n` vector.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        if x.rank() != 2 || x.shape[0] != idx.len() {
            return Err(Error::shape("gather_rows", format!("{:?} with {} indices", x.shape, idx.len())));
        }
        let cols = x.shape[1];
        if let Some(&bad) = idx.iter().find(|&&j| j >= cols) {
            return Err(Error::InvalidLabel { label: bad, classes: cols });
        }
        let data = idx.iter().enumerate().map(|(i, &j)| x.data[i * cols + j]).collect();
        let tracked = self.tracked(ia);
        self.finish(
            "gather_rows",
            vec![idx.len()],
            data,
            Op::Gather {
                x: ia,
                cols,
                idx: idx.to_vec(),
            },
            tracked,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        if shape.iter().product::<usize>() != x.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", x.shape, shape)));
        }
        let data = x.data.clone();
        let tracked = self.tracked(ia);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Reshape(ia), tracked))
    }

    /// Cross-correlation of `x[n × c_in × len]` (or `[c_in × len]`) with
    /// `w[c_out × c_in × k]`, plus an optional per-channel bias.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let ix = self.check(x)?;
        let iw = self.check(w)?;
        let ib = b.map(|b| self.check(b)).transpose()?;
        let xv = &self.nodes[ix].value;
        let wv = &self.nodes[iw].value;
        let (n, c_in, len, batched) = match xv.shape[..] {
            [c, l] => (1, c, l, false),
            [n, c, l] => (n, c, l, true),
            _ => return Err(Error::shape("conv1d", format!("input must be rank 2 or 3, got {:?}", xv.shape))),
        };
        if wv.rank() != 3 || wv.shape[1] != c_in {
            return Err(Error::shape("conv1d", format!("kernel {:?} for {c_in} input channels", wv.shape)));
        }
        let (c_out, k) = (wv.shape[0], wv.shape[2]);
        if let Some(ib) = ib {
            if self.nodes[ib].value.shape != [c_out] {
                return Err(Error::shape("conv1d", format!("bias {:?} for {c_out} channels", self.nodes[ib].value.shape)));
            }
        }
        let geom = ConvGeom::new(n, c_in, len, c_out, k, stride, padding).ok_or_else(|| {
            Error::shape("conv1d", format!("kernel {k} (stride {stride}) does not fit input length {len}"))
        })?;
        let data = kernels::conv1d_forward(&geom, &xv.data, &wv.data, ib.map(|i| &self.nodes[i].value.data[..]));
        let shape = if batched { vec![n, c_out, geom.out_len] } else { vec![c_out, geom.out_len] };
        let tracked = self.tracked(ix) || self.tracked(iw) || ib.is_some_and(|i| self.tracked(i));
        self.finish("conv1d", shape, data, Op::Conv1d { x: ix, w: iw, b: ib, geom }, tracked)
    }

    /// Non-overlapping max pooling of the last axis by `width`; a trailing remainder is dropped.
    pub fn maxpool1d(&mut self, x: Var, width: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = &self.nodes[ix].value;
        let len = *xv.shape.last().ok_or_else(|| Error::shape("maxpool1d", "scalar input"))?;
        if width == 0 || width > len {
            return Err(Error::shape("maxpool1d", format!("width {width} for length {len}")));
        }
        let rows = xv.len() / len;
        let (data, arg) = kernels::maxpool_forward(rows, len, width, &xv.data);
        let mut shape = xv.shape.clone();
        *shape.last_mut().unwrap() = len / width;
        let tracked = self.tracked(ix);
        self.finish("maxpool1d", shape, data, Op::MaxPool { x: ix, arg }, tracked)
    }

    /// Nearest-neighbour upsampling of the last axis by `factor`.
    pub fn upsample1d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = &self.nodes[ix].value;
        let len = *xv.shape.last().ok_or_else(|| Error::shape("upsample1d", "scalar input"))?;
        if factor == 0 {
            return Err(Error::shape("upsample1d", "factor must be positive"));
        }
        let rows = if len == 0 { 0 } else { xv.len() / len };
        let data = kernels::upsample_forward(rows, len, factor, &xv.data);
        let mut shape = xv.shape.clone();
        *shape.last_mut().unwrap() = len * factor;
        let tracked = self.tracked(ix);
        self.finish("upsample1d", shape, data, Op::Upsample { x: ix, rows, len, factor }, tracked)
    }

    /// Concatenates two `[n × c × len]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if x.rank() != 3 || y.rank() != 3 || x.shape[0] != y.shape[0] || x.shape[2] != y.shape[2] {
            return Err(Error::shape("concat_channels", format!("{:?} ++ {:?}", x.shape, y.shape)));
        }
        let n = x.shape[0];
        let a_block = x.shape[1] * x.shape[2];
        let b_block = y.shape[1] * y.shape[2];
        let data = kernels::concat_forward(n, a_block, b_block, &x.data, &y.data);
        let shape = vec![n, x.shape[1] + y.shape[1], x.shape[2]];
        let tracked = self.tracked(ia) || self.tracked(ib);
        self.finish(
            "concat_channels",
            shape,
            data,
            Op::Concat {
                a: ia,
                b: ib,
                n,
                a_block,
                b_block,
            },
            tracked,
        )
    }

    /// Squared Euclidean distances between rows of `e[n × m]` and `c[l × m]`.
    pub fn sq_distances(&mut self, e: Var, c: Var) -> Result<Var> {
        let (ie, ic) = (self.check(e)?, self.check(c)?);
        let (ev, cv) = (&self.nodes[ie].value, &self.nodes[ic].value);
        if ev.rank() != 2 || cv.rank() != 2 || ev.shape[1] != cv.shape[1] {
            return Err(Error::shape("sq_distances", format!("{:?} vs {:?}", ev.shape, cv.shape)));
        }
        let (n, m, l) = (ev.shape[0], ev.shape[1], cv.shape[0]);
        let data = kernels::sq_distances(&ev.data, &cv.data, n, l, m);
        let tracked = self.tracked(ie) || self.tracked(ic);
        self.finish("sq_distances", vec![n, l], data, Op::SqDist { e: ie, c: ic, n, l, m }, tracked)
    }

    /// Backpropagates from scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        let loss_value = &self.nodes[il].value;
        if loss_value.len() != 1 {
            return Err(Error::NotScalar(loss_value.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = self
            .nodes
            .iter()
            .map(|n| n.tracked.then(|| vec![0.0; n.value.len()]))
            .collect();
        if let Some(g) = grads[il].as_mut() {
            g[0] = 1.0;
        }
        let nodes = &self.nodes;
        for idx in (0..=il).rev() {
            if !nodes[idx].tracked {
                continue;
            }
            let gy = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !gy.iter().any(|&v| v != 0.0) && !matches!(nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(gy);
                continue;
            }
            propagate(nodes, idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, f: impl FnOnce(&mut [f64])) {
    if let Some(g) = grads[idx].as_mut() {
        f(g);
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], idx: usize, delta: &[f64]) {
    accumulate(grads, idx, |g| {
        for (a, d) in g.iter_mut().zip(delta) {
            *a += d;
        }
    });
}

fn propagate(nodes: &[Node], idx: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[idx].value.data;
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Unary(kind, a) => {
            let x = &nodes[*a].value.data;
            let kind = *kind;
            accumulate(grads, *a, |g| {
                for i in 0..g.len() {
                    let d = match kind {
                        Unary::Neg => -1.0,
                        Unary::Exp => out[i],
                        Unary::Log => 1.0 / x[i],
                        Unary::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Abs => {
                            if x[i] > 0.0 {
                                1.0
                            } else if x[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Square => 2.0 * x[i],
                        Unary::Sqrt => {
                            if out[i] > 0.0 {
                                0.5 / out[i]
                            } else {
                                0.0
                            }
                        }
                        Unary::Clamp01 => {
                            if (0.0..=1.0).contains(&x[i]) {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    g[i] += d * gy[i];
                }
            });
        }
        Op::Binary(kind, a, b) => {
            let (x, y) = (&nodes[*a].value.data, &nodes[*b].value.data);
            match kind {
                Binary::Add => {
                    add_into(grads, *a, gy);
                    add_into(grads, *b, gy);
                }
                Binary::Sub => {
                    add_into(grads, *a, gy);
                    accumulate(grads, *b, |g| g.iter_mut().zip(gy).for_each(|(a, d)| *a -= d));
                }
                Binary::Mul => {
                    accumulate(grads, *a, |g| {
                        for i in 0..g.len() {
                            g[i] += gy[i] * y[i];
                        }
                    });
                    accumulate(grads, *b, |g| {
                        for i in 0..g.len() {
                            g[i] += gy[i] * x[i];
                        }
                    });
                }
            }
        }
        Op::Scale(a, factor) => {
            accumulate(grads, *a, |g| g.iter_mut().zip(gy).for_each(|(a, d)| *a += d * factor));
        }
        Op::AddScalar(a) | Op::Reshape(a) => add_into(grads, *a, gy),
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (n, k, p) = (av.shape[0], av.shape[1], bv.shape[1]);
            if nodes[*a].tracked {
                let da = kernels::matmul_nt(gy, &bv.data, n, p, k);
                add_into(grads, *a, &da);
            }
            if nodes[*b].tracked {
                let db = kernels::matmul_tn(&av.data, gy, n, k, p);
                add_into(grads, *b, &db);
            }
        }
        Op::Linear { x, w, b } => {
            let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
            let (n, k, p) = (xv.shape[0], xv.shape[1], wv.shape[1]);
            if nodes[*x].tracked {
                let dx = kernels::matmul_nt(gy, &wv.data, n, p, k);
                add_into(grads, *x, &dx);
            }
            if nodes[*w].tracked {
                let dw = kernels::matmul_tn(&xv.data, gy, n, k, p);
                add_into(grads, *w, &dw);
            }
            accumulate(grads, *b, |g| {
                for row in gy.chunks(p.max(1)) {
                    g.iter_mut().zip(row).for_each(|(a, d)| *a += d);
                }
            });
        }
        Op::Sum(a) => {
            let s = gy[0];
            accumulate(grads, *a, |g| g.iter_mut().for_each(|v| *v += s));
        }
        Op::SumAxis {
            x,
            outer,
            axis_len,
            inner,
        } => {
            let (outer, axis_len, inner) = (*outer, *axis_len, *inner);
            accumulate(grads, *x, |g| {
                for o in 0..outer {
                    let src = &gy[o * inner..(o + 1) * inner];
                    for j in 0..axis_len {
                        let dst = &mut g[(o * axis_len + j) * inner..(o * axis_len + j + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(a, d)| *a += d);
                    }
                }
            });
        }
        Op::MaxAxis { x, arg } | Op::MaxPool { x, arg } => {
            accumulate(grads, *x, |g| {
                for (&pos, &d) in arg.iter().zip(gy) {
                    g[pos] += d;
                }
            });
        }
        Op::LogSoftmax(a) => {
            let cols = nodes[idx].value.shape[1];
            accumulate(grads, *a, |g| {
                for ((grow, gyrow), orow) in g.chunks_mut(cols).zip(gy.chunks(cols)).zip(out.chunks(cols)) {
                    let total: f64 = gyrow.iter().sum();
                    for j in 0..cols {
                        grow[j] += gyrow[j] - orow[j].exp() * total;
                    }
                }
            });
        }
        Op::Gather { x, cols, idx: picks } => {
            accumulate(grads, *x, |g| {
                for (i, (&j, &d)) in picks.iter().zip(gy).enumerate() {
                    g[i * cols + j] += d;
                }
            });
        }
        Op::Conv1d { x, w, b, geom } => {
            let (dx, dw, db) = kernels::conv1d_backward(geom, &nodes[*x].value.data, &nodes[*w].value.data, gy);
            add_into(grads, *x, &dx);
            add_into(grads, *w, &dw);
            if let Some(b) = b {
                add_into(grads, *b, &db);
            }
        }
        Op::Upsample { x, rows, len, factor } => {
            let dx = kernels::upsample_backward(*rows, *len, *factor, gy);
            add_into(grads, *x, &dx);
        }
        Op::Concat {
            a,
            b,
            n,
            a_block,
            b_block,
        } => {
            let stride = a_block + b_block;
            accumulate(grads, *a, |g| {
                for s in 0..*n {
                    let src = &gy[s * stride..s * stride + a_block];
                    g[s * a_block..(s + 1) * a_block].iter_mut().zip(src).for_each(|(v, d)| *v += d);
                }
            });
            accumulate(grads, *b, |g| {
                for s in 0..*n {
                    let src = &gy[s * stride + a_block..(s + 1) * stride];
                    g[s * b_block..(s + 1) * b_block].iter_mut().zip(src).for_each(|(v, d)| *v += d);
                }
            });
        }
        Op::SqDist { e, c, n, l, m } => {
            let (ev, cv) = (&nodes[*e].value.data, &nodes[*c].value.data);
            let (n, l, m) = (*n, *l, *m);
            let mut de = nodes[*e].tracked.then(|| vec![0.0; n * m]);
            let mut dc = nodes[*c].tracked.then(|| vec![0.0; l * m]);
            for i in 0..n {
                for k in 0..l {
                    let g = gy[i * l + k];
                    if g == 0.0 {
                        continue;
                    }
                    for j in 0..m {
                        let diff = 2.0 * g * (ev[i * m + j] - cv[k * m + j]);
                        if let Some(de) = de.as_mut() {
                            de[i * m + j] += diff;
                        }
                        if let Some(dc) = dc.as_mut() {
                            dc[k * m + j] -= diff;
                        }
                    }
                }
            }
            if let Some(de) = de {
                add_into(grads, *e, &de);
            }
            if let Some(dc) = dc {
                add_into(grads, *c, &dc);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    // Central differences of `f` at `x`, independent of the tape's backward pass.
    fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-5;
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = probe[i];
                probe[i] = orig + h;
                let up = f(&probe);
                probe[i] = orig - h;
                let down = f(&probe);
                probe[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn add_and_relu() {
        let mut t = Tape::new();
        let a = t.leaf(&vec_t(&[1.0, 2.0]));
        let b = t.leaf(&vec_t(&[3.0, 4.0]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);
        let r = t.leaf(&vec_t(&[-1.0, 0.0, 2.0]));
        let r = t.relu(r).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(&vec_t(&[1.0, -3.0]).trainable());
        let s = t.square(x).unwrap();
        let l = t.sum(s).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, -6.0]);
    }

    #[test]
    fn shape_mismatch_and_log_domain() {
        let mut t = Tape::new();
        let a = t.leaf(&vec_t(&[1.0, 2.0]));
        let b = t.leaf(&vec_t(&[1.0, 2.0, 3.0]));
        assert!(matches!(t.add(a, b), Err(Error::Shape { .. })));
        let z = t.leaf(&vec_t(&[1.0, 0.0]));
        assert!(matches!(t.log(z), Err(Error::Domain { .. })));
        let n = t.leaf(&vec_t(&[-1.0]));
        assert!(matches!(t.log(n), Err(Error::Domain { .. })));
    }

    #[test]
    fn matmul_by_hand_and_identity() {
        let mut t = Tape::new();
        let a = t.leaf(&mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let ones = t.leaf(&mat(2, 1, &[1.0, 1.0]));
        let c = t.matmul(a, ones).unwrap();
        assert_eq!(t.shape(c), &[2, 1]);
        assert_eq!(t.value(c).data(), &[3.0, 7.0]);
        let eye = t.leaf(&mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let x = t.leaf(&mat(2, 1, &[5.0, -2.0]));
        let y = t.matmul(eye, x).unwrap();
        assert_eq!(t.value(y).data(), &[5.0, -2.0]);
        let bad = t.leaf(&mat(1, 3, &[1.0, 2.0, 3.0]));
        assert!(t.matmul(a, bad).is_err());
    }

    #[test]
    fn reductions() {
        let mut t = Tape::new();
        let a = t.leaf(&vec_t(&[1.0, 2.0, 3.0]));
        let s = t.sum(a).unwrap();
        assert_eq!(t.value(s).item(), 6.0);
        let m = t.leaf(&mat(2, 2, &[1.0, 3.0, 3.0, 5.0]));
        let mm = t.mean_axis(m, 0).unwrap();
        assert_eq!(t.value(mm).data(), &[2.0, 4.0]);
        let p = t.leaf(&vec_t(&[0.1, 0.7, 0.2]));
        let (mx, idx) = t.max_with_index(p, None).unwrap();
        assert_eq!(t.value(mx).item(), 0.7);
        assert_eq!(idx, vec![1]);
        assert!(matches!(t.sum_axis(m, 2), Err(Error::InvalidAxis { axis: 2, rank: 2 })));
    }

    #[test]
    fn reduction_gradients_broadcast() {
        let x0 = [0.3, -1.2, 0.8, 0.5, 2.0, -0.4];
        let f = |x: &[f64]| -> (f64, Option<Vec<f64>>) {
            let mut t = Tape::new();
            let v = t.leaf(&Tensor::new(vec![2, 3], x.to_vec()).unwrap().trainable());
            let m = t.mean_axis(v, 1).unwrap();
            let sq = t.square(m).unwrap();
            let (mx, _) = t.max_with_index(v, Some(0)).unwrap();
            let s1 = t.sum(sq).unwrap();
            let s2 = t.sum(mx).unwrap();
            let l = t.add(s1, s2).unwrap();
            let val = t.value(l).item();
            let g = t.backward(l).unwrap();
            (val, g.get(v).map(|g| g.to_vec()))
        };
        let analytic = f(&x0).1.unwrap();
        let numeric = numeric_grad(&x0, |x| f(x).0);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-7, "{a} vs {n}");
        }
    }

    #[test]
    fn log_softmax_stability() {
        let mut t = Tape::new();
        let a = t.leaf(&mat(1, 2, &[0.0, 0.0]));
        let l = t.log_softmax(a).unwrap();
        let half = 0.5f64.ln();
        assert!((t.value(l).data()[0] - half).abs() < 1e-15);
        assert!((t.value(l).data()[1] - half).abs() < 1e-15);
        let big = t.leaf(&mat(1, 2, &[1000.0, 0.0]));
        let l = t.log_softmax(big).unwrap();
        assert!(t.value(l).data()[0].abs() < 1e-300);
        let row = t.leaf(&mat(1, 3, &[1.0, 2.0, 3.0]));
        let l = t.log_softmax(row).unwrap();
        let total: f64 = t.value(l).data().iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let narrow = t.leaf(&mat(2, 1, &[1.0, 2.0]));
        assert!(t.log_softmax(narrow).is_err());
    }

    #[test]
    fn backward_edge_cases() {
        let mut t = Tape::new();
        let x = t.leaf(&vec_t(&[1.0, 2.0]).trainable());
        let c = t.leaf(&Tensor::scalar(3.0));
        let g = t.backward(c).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0]);

        let mut t = Tape::new();
        let x = t.leaf(&vec_t(&[0.5, -2.0, 3.0]).trainable());
        let e = t.exp(x).unwrap();
        let l = t.log(e).unwrap();
        let s = t.sum(l).unwrap();
        let g = t.backward(s).unwrap();
        for v in g.get(x).unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }

        let mut t = Tape::new();
        let x = t.leaf(&vec_t(&[1.0, 2.0]).trainable());
        assert!(matches!(t.backward(x), Err(Error::NotScalar(_))));

        let mut other = Tape::new();
        let foreign = other.leaf(&Tensor::scalar(1.0));
        let t = Tape::new();
        assert!(matches!(t.backward(foreign), Err(Error::Detached)));
    }

    #[test]
    fn forward_does_not_mutate_inputs() {
        let src = vec_t(&[1.0, -2.0, 3.0]).trainable();
        let copy = src.clone();
        let mut t = Tape::new();
        let x = t.leaf(&src);
        let y = t.abs(x).unwrap();
        let s = t.sum(y).unwrap();
        let _ = t.backward(s).unwrap();
        assert_eq!(src, copy);
    }
}
