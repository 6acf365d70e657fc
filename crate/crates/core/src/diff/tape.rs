use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;

use super::{cosine, dot, norm, pairwise_sum, sigmoid, ParamId, ParamSet, Shape, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Gather { param: ParamId, rows: Vec<usize> },
    Affine { w: usize, x: usize, b: Option<usize> },
    Concat { a: usize, b: usize },
    Tanh(usize),
    Sigmoid(usize),
    Mul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddScalar(usize),
    Relu(usize),
    MeanRows(usize),
    SumRows(usize),
    Cosine { a: usize, b: usize, degenerate: bool },
    Dropout { x: usize, mask: Vec<f64> },
    Slice { x: usize, start: usize },
    Fit { x: usize },
    Sum(Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed ops for one forward/backward pass.
///
/// A tape is single-use: after [`Tape::backward`] it refuses a second pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    degenerate_cosines: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, shapes: &[Shape]) -> Error {
    let shapes = shapes
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ");
    Error::Shape { op, shapes }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
            backward_done: false,
            degenerate_cosines: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of cosine evaluations that hit a zero-norm operand.
    pub fn degenerate_cosines(&self) -> usize {
        self.degenerate_cosines
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Tape("variable was not recorded on this tape".into()));
        }
        Ok(v.idx)
    }

    fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.idx].value.shape()
    }

    /// Scalar value of a length-1 variable.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.idx].value.data()[0]
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if value.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(op_name.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Constant, false)
    }

    /// Registers a parameter; repeated calls return the same variable.
    pub fn param(&mut self, id: ParamId, set: &ParamSet) -> Result<Var> {
        if let Some(&idx) = self.params.get(&id) {
            return Ok(Var { tape: self.id, idx });
        }
        let p = set.get(id);
        let v = self.push("param", p.value.clone(), Op::Param(id), p.trainable)?;
        self.params.insert(id, v.idx);
        Ok(v)
    }

    /// Selects rows of a matrix parameter (embedding lookup) without copying the rest.
    pub fn gather(&mut self, id: ParamId, set: &ParamSet, rows: &[usize]) -> Result<Var> {
        let p = set.get(id);
        let shape = p.value.shape();
        let Shape::Matrix(n, d) = shape else {
            return Err(shape_err("gather", &[shape]));
        };
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::Shape {
                    op: "gather",
                    shapes: format!("row {r} out of range for {shape}"),
                });
            }
            data.extend_from_slice(p.value.row(r));
        }
        let value = Tensor::new(Shape::Matrix(rows.len(), d), data)?;
        self.push(
            "gather",
            value,
            Op::Gather {
                param: id,
                rows: rows.to_vec(),
            },
            p.trainable,
        )
    }

    /// `W x + b` for a vector `x`, or row-wise `X Wᵀ + b` for a matrix `X`.
    pub fn affine(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        let (wi, xi) = (self.idx(w)?, self.idx(x)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let ws = self.node(wi).value.shape();
        let xs = self.node(xi).value.shape();
        let Shape::Matrix(out, inp) = ws else {
            return Err(shape_err("affine", &[ws, xs]));
        };
        if xs.cols() != inp {
            return Err(shape_err("affine", &[ws, xs]));
        }
        if let Some(bi) = bi {
            let bs = self.node(bi).value.shape();
            if bs != Shape::Vector(out) {
                return Err(shape_err("affine", &[ws, xs, bs]));
            }
        }
        let n = xs.rows();
        let wv = self.node(wi).value.data();
        let xv = self.node(xi).value.data();
        let mut y = vec![0.0; n * out];
        for i in 0..n {
            let xr = &xv[i * inp..(i + 1) * inp];
            for o in 0..out {
                y[i * out + o] = dot(&wv[o * inp..(o + 1) * inp], xr);
            }
        }
        if let Some(bi) = bi {
            let bv = self.node(bi).value.data();
            for row in y.chunks_mut(out) {
                row.iter_mut().zip(bv).for_each(|(a, b)| *a += b);
            }
        }
        let shape = match xs {
            Shape::Vector(_) => Shape::Vector(out),
            Shape::Matrix(..) => Shape::Matrix(n, out),
        };
        let rg = self.rg(wi) || self.rg(xi) || bi.is_some_and(|b| self.rg(b));
        self.push("affine", Tensor::new(shape, y)?, Op::Affine { w: wi, x: xi, b: bi }, rg)
    }

    /// Concatenation of two vectors, or column-wise of two matrices with equal rows.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.node(ai).value.shape(), self.node(bi).value.shape());
        let (value, shape) = match (sa, sb) {
            (Shape::Vector(m), Shape::Vector(n)) => {
                let mut v = self.node(ai).value.data().to_vec();
                v.extend_from_slice(self.node(bi).value.data());
                (v, Shape::Vector(m + n))
            }
            (Shape::Matrix(r1, c1), Shape::Matrix(r2, c2)) if r1 == r2 => {
                let (av, bv) = (&self.node(ai).value, &self.node(bi).value);
                let mut v = Vec::with_capacity(r1 * (c1 + c2));
                for r in 0..r1 {
                    v.extend_from_slice(av.row(r));
                    v.extend_from_slice(bv.row(r));
                }
                (v, Shape::Matrix(r1, c1 + c2))
            }
            _ => return Err(shape_err("concat", &[sa, sb])),
        };
        let rg = self.rg(ai) || self.rg(bi);
        self.push("concat", Tensor::new(shape, value)?, Op::Concat { a: ai, b: bi }, rg)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let xi = self.idx(x)?;
        let src = &self.node(xi).value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape(), data)?;
        let rg = self.rg(xi);
        self.push(name, value, op(xi), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: impl FnOnce(usize, usize) -> Op) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.node(ai).value.shape(), self.node(bi).value.shape());
        if sa != sb {
            return Err(shape_err(name, &[sa, sb]));
        }
        let data = self
            .node(ai)
            .value
            .data()
            .iter()
            .zip(self.node(bi).value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(ai) || self.rg(bi);
        self.push(name, Tensor::new(sa, data)?, op(ai, bi), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    fn reduce_rows(&mut self, name: &'static str, x: Var, scale_by_count: bool) -> Result<Var> {
        let xi = self.idx(x)?;
        let src = &self.node(xi).value;
        let Shape::Matrix(n, c) = src.shape() else {
            return Err(shape_err(name, &[src.shape()]));
        };
        if n == 0 && scale_by_count {
            return Err(shape_err(name, &[src.shape()]));
        }
        let mut out = vec![0.0; c];
        let mut column = vec![0.0; n];
        for (j, o) in out.iter_mut().enumerate() {
            for (i, slot) in column.iter_mut().enumerate() {
                *slot = src.data()[i * c + j];
            }
            *o = pairwise_sum(&column);
            if scale_by_count {
                *o /= n as f64;
            }
        }
        let rg = self.rg(xi);
        let op = if scale_by_count { Op::MeanRows(xi) } else { Op::SumRows(xi) };
        self.push(name, Tensor::vector(out), op, rg)
    }

    /// Column means of an `n x c` matrix (n >= 1), summed pairwise.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.reduce_rows("mean_rows", x, true)
    }

    /// Column sums of an `n x c` matrix, summed pairwise.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        self.reduce_rows("sum_rows", x, false)
    }

    /// Cosine similarity of two vectors. A zero-norm operand yields -1 with zero
    /// gradient and bumps [`Tape::degenerate_cosines`].
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.node(ai).value.shape(), self.node(bi).value.shape());
        if !matches!(sa, Shape::Vector(_)) || sa != sb {
            return Err(shape_err("cosine", &[sa, sb]));
        }
        let (value, degenerate) = match cosine(self.node(ai).value.data(), self.node(bi).value.data()) {
            Some(c) => (c, false),
            None => {
                self.degenerate_cosines += 1;
                (-1.0, true)
            }
        };
        let rg = self.rg(ai) || self.rg(bi);
        self.push(
            "cosine",
            Tensor::vector(vec![value]),
            Op::Cosine {
                a: ai,
                b: bi,
                degenerate,
            },
            rg,
        )
    }

    /// Inverted dropout. Identity when `train` is false or `rate` is zero.
    pub fn dropout(&mut self, x: Var, rate: f64, train: bool, rng: &mut Rng) -> Result<Var> {
        let xi = self.idx(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let src = &self.node(xi).value;
        let mask: Vec<f64> = (0..src.data().len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(src.shape(), data)?;
        let rg = self.rg(xi);
        self.push("dropout", value, Op::Dropout { x: xi, mask }, rg)
    }

    /// Contiguous sub-vector `x[start..start + len]`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.node(xi).value.shape();
        match s {
            Shape::Vector(n) if start + len <= n => {}
            _ => return Err(shape_err("slice", &[s, Shape::Vector(start + len)])),
        }
        let data = self.node(xi).value.data()[start..start + len].to_vec();
        let rg = self.rg(xi);
        self.push("slice", Tensor::vector(data), Op::Slice { x: xi, start }, rg)
    }

    /// Truncates or zero-pads a vector to `len`.
    pub fn fit(&mut self, x: Var, len: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.node(xi).value.shape();
        if !matches!(s, Shape::Vector(_)) {
            return Err(shape_err("fit", &[s]));
        }
        let mut data = self.node(xi).value.data().to_vec();
        data.resize(len, 0.0);
        let rg = self.rg(xi);
        self.push("fit", Tensor::vector(data), Op::Fit { x: xi }, rg)
    }

    /// Sum of scalars (length-1 variables).
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let mut ids = Vec::with_capacity(xs.len());
        let mut values = Vec::with_capacity(xs.len());
        for &x in xs {
            let i = self.idx(x)?;
            let s = self.node(i).value.shape();
            if s.len() != 1 {
                return Err(shape_err("sum", &[s]));
            }
            values.push(self.node(i).value.data()[0]);
            ids.push(i);
        }
        let rg = ids.iter().any(|&i| self.rg(i));
        self.push("sum", Tensor::vector(vec![pairwise_sum(&values)]), Op::Sum(ids), rg)
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    /// Back-propagates from a scalar `loss`, accumulating into `params` grads.
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet) -> Result<()> {
        if self.backward_done {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        let li = self.idx(loss)?;
        if self.node(li).value.shape().len() != 1 {
            return Err(shape_err("backward", &[self.node(li).value.shape()]));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(g) = grads[i].as_ref() else { continue };
            match &node.op {
                Op::Param(id) if node.requires_grad => {
                    let p = params.get_mut(*id);
                    p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                Op::Gather { param, rows } if node.requires_grad => {
                    let p = params.get_mut(*param);
                    let d = p.value.shape().cols();
                    for (k, &r) in rows.iter().enumerate() {
                        let dst = &mut p.grad[r * d..(r + 1) * d];
                        dst.iter_mut().zip(&g[k * d..(k + 1) * d]).for_each(|(a, b)| *a += b);
                    }
                }
                _ => {}
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[j].requires_grad {
                return;
            }
            let buf = grads[j].get_or_insert_with(|| vec![0.0; self.nodes[j].value.data().len()]);
            f(buf);
        };
        match &node.op {
            Op::Constant | Op::Param(_) | Op::Gather { .. } => {}
            Op::Affine { w, x, b } => {
                let ws = self.nodes[*w].value.shape();
                let (out, inp) = (ws.rows(), ws.cols());
                let n = self.nodes[*x].value.shape().rows();
                let wv = self.nodes[*w].value.data();
                let xv = self.nodes[*x].value.data();
                acc(*x, &mut |dx| {
                    for r in 0..n {
                        let dxr = &mut dx[r * inp..(r + 1) * inp];
                        for o in 0..out {
                            let go = g[r * out + o];
                            if go != 0.0 {
                                dxr.iter_mut().zip(&wv[o * inp..(o + 1) * inp]).for_each(|(a, w)| *a += go * w);
                            }
                        }
                    }
                });
                acc(*w, &mut |dw| {
                    for r in 0..n {
                        let xr = &xv[r * inp..(r + 1) * inp];
                        for o in 0..out {
                            let go = g[r * out + o];
                            if go != 0.0 {
                                dw[o * inp..(o + 1) * inp].iter_mut().zip(xr).for_each(|(a, x)| *a += go * x);
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for row in g.chunks(out) {
                            db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                    });
                }
            }
            Op::Concat { a, b } => {
                let sa = self.nodes[*a].value.shape();
                let sb = self.nodes[*b].value.shape();
                let (ca, cb) = (sa.cols(), sb.cols());
                let rows = sa.rows();
                acc(*a, &mut |da| {
                    for r in 0..rows {
                        let src = &g[r * (ca + cb)..r * (ca + cb) + ca];
                        da[r * ca..(r + 1) * ca].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                });
                acc(*b, &mut |db| {
                    for r in 0..rows {
                        let src = &g[r * (ca + cb) + ca..(r + 1) * (ca + cb)];
                        db[r * cb..(r + 1) * cb].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &mut |dx| {
                    for k in 0..dx.len() {
                        dx[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |dx| {
                    for k in 0..dx.len() {
                        dx[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.nodes[*x].value.data();
                acc(*x, &mut |dx| {
                    for k in 0..dx.len() {
                        if xv[k] > 0.0 {
                            dx[k] += g[k];
                        }
                    }
                });
            }
            Op::AddScalar(x) => acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(a, b)| *a += b)),
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * av[k];
                    }
                });
            }
            Op::MeanRows(x) | Op::SumRows(x) => {
                let s = self.nodes[*x].value.shape();
                let (n, c) = (s.rows(), s.cols());
                let scale = if matches!(node.op, Op::MeanRows(_)) { 1.0 / n as f64 } else { 1.0 };
                acc(*x, &mut |dx| {
                    for r in 0..n {
                        dx[r * c..(r + 1) * c].iter_mut().zip(g).for_each(|(a, b)| *a += b * scale);
                    }
                });
            }
            Op::Cosine { a, b, degenerate } => {
                if *degenerate {
                    return;
                }
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                let (na, nb) = (norm(av), norm(bv));
                let c = node.value.data()[0];
                let g0 = g[0];
                // d cos / da = b / (|a||b|) - cos * a / |a|^2
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g0 * (bv[k] / (na * nb) - c * av[k] / (na * na));
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g0 * (av[k] / (na * nb) - c * bv[k] / (nb * nb));
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * mask[k];
                    }
                });
            }
            Op::Slice { x, start } => {
                acc(*x, &mut |d| {
                    d[*start..*start + g.len()].iter_mut().zip(g).for_each(|(a, b)| *a += b);
                });
            }
            Op::Fit { x } => {
                acc(*x, &mut |d| {
                    let n = d.len().min(g.len());
                    d[..n].iter_mut().zip(&g[..n]).for_each(|(a, b)| *a += b);
                });
            }
            Op::Sum(ids) => {
                for &j in ids {
                    acc(j, &mut |d| d[0] += g[0]);
                }
            }
        }
    }
}

/// Tape handles of one LSTM cell's parameters; gates are stacked `[i, f, g, o]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    /// `4H x input`
    pub w_input: Var,
    /// `4H x recurrent`
    pub w_recurrent: Var,
    /// `4H`
    pub bias: Var,
}

/// Standard LSTM cell: `i, f, o = sigmoid`, `g = tanh`,
/// `c' = f*c + i*g`, `h' = o*tanh(c')`. Returns `(h', c')`.
pub fn lstm_cell(tape: &mut Tape, x: Var, recurrent: Var, c: Var, params: &LstmVars) -> Result<(Var, Var)> {
    let hidden = tape.shape(c).len();
    let gates_x = tape.affine(params.w_input, x, Some(params.bias))?;
    let gates_h = tape.affine(params.w_recurrent, recurrent, None)?;
    if tape.shape(gates_x).len() != 4 * hidden {
        return Err(shape_err("lstm_cell", &[tape.shape(gates_x), tape.shape(c)]));
    }
    let gates = tape.add(gates_x, gates_h)?;
    let i = tape.slice(gates, 0, hidden)?;
    let f = tape.slice(gates, hidden, hidden)?;
    let g = tape.slice(gates, 2 * hidden, hidden)?;
    let o = tape.slice(gates, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next)?;
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn vparam(set: &mut ParamSet, name: &str, data: Vec<f64>) -> ParamId {
        set.add(name, Tensor::vector(data), true).unwrap()
    }

    #[test]
    fn cosine_self_similarity() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.3, -1.2, 4.0])).unwrap();
        let c = t.cosine(x, x).unwrap();
        assert!((t.scalar(c) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_is_worst() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let y = t.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        let c = t.cosine(x, y).unwrap();
        assert_eq!(t.scalar(c), -1.0);
        assert_eq!(t.degenerate_cosines(), 1);
    }

    #[test]
    fn tanh_scalar() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.35])).unwrap();
        let y = t.tanh(x).unwrap();
        assert!((t.scalar(y) - 0.336_375_544_9).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = t.constant(Tensor::vector(vec![1.0])).unwrap();
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2]") && err.contains("[1]"), "{err}");
        let w = t.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        let err = t.affine(w, a, None).unwrap_err().to_string();
        assert!(err.contains("affine"), "{err}");
    }

    #[test]
    fn non_finite_trips() {
        let mut t = Tape::new();
        let r = t.constant(Tensor::vector(vec![f64::NAN]));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn lstm_zero_params_zero_output() {
        let mut t = Tape::new();
        let h = 3;
        let zeros = |t: &mut Tape, s| t.constant(Tensor::zeros(s)).unwrap();
        let p = LstmVars {
            w_input: zeros(&mut t, Shape::Matrix(4 * h, 2)),
            w_recurrent: zeros(&mut t, Shape::Matrix(4 * h, 5)),
            bias: zeros(&mut t, Shape::Vector(4 * h)),
        };
        let x = t.constant(Tensor::vector(vec![0.4, -2.0])).unwrap();
        let rec = t.constant(Tensor::vector(vec![1.0; 5])).unwrap();
        let c = zeros(&mut t, Shape::Vector(h));
        let (hn, cn) = lstm_cell(&mut t, x, rec, c, &p).unwrap();
        assert!(t.value(hn).data().iter().all(|&v| v == 0.0));
        assert!(t.value(cn).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_independent_of_param_has_zero_grad() {
        let mut set = ParamSet::new();
        let p = vparam(&mut set, "p", vec![1.0, 2.0]);
        let q = vparam(&mut set, "q", vec![0.5, 0.5]);
        let mut t = Tape::new();
        let _pv = t.param(p, &set).unwrap();
        let qv = t.param(q, &set).unwrap();
        let loss = t.cosine(qv, qv).unwrap();
        t.backward(loss, &mut set).unwrap();
        assert!(set.get(p).grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn double_backward_is_rejected() {
        let mut set = ParamSet::new();
        let p = vparam(&mut set, "p", vec![1.0]);
        let mut t = Tape::new();
        let x = t.param(p, &set).unwrap();
        let y = t.tanh(x).unwrap();
        t.backward(y, &mut set).unwrap();
        assert!(matches!(t.backward(y, &mut set), Err(Error::Tape(_))));
    }

    #[test]
    fn foreign_variable_is_rejected() {
        let mut set = ParamSet::new();
        let mut a = Tape::new();
        let x = a.constant(Tensor::vector(vec![1.0])).unwrap();
        let mut b = Tape::new();
        assert!(matches!(b.tanh(x), Err(Error::Tape(_))));
        assert!(matches!(b.backward(x, &mut set), Err(Error::Tape(_))));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut t = Tape::new();
        let mut r = rng::seeded(0);
        let x = t.constant(Tensor::vector(vec![1.0, -2.0, 3.0])).unwrap();
        assert_eq!(t.dropout(x, 0.5, false, &mut r).unwrap(), x);
        assert_eq!(t.dropout(x, 0.0, true, &mut r).unwrap(), x);
        let y = t.dropout(x, 0.5, true, &mut r).unwrap();
        for (a, b) in t.value(y).data().iter().zip(t.value(x).data()) {
            assert!(*a == 0.0 || (*a - 2.0 * b).abs() < 1e-12);
        }
        assert!(t.dropout(x, 1.0, true, &mut r).is_err());
    }

    #[test]
    fn mean_rows_permutation() {
        let rows = [[0.1, 1e8], [0.2, -1e8], [0.3, 3.0], [1e-3, 7.0]];
        let perm = [2, 0, 3, 1];
        let mut t = Tape::new();
        let a = t
            .constant(Tensor::matrix(4, 2, rows.iter().flatten().copied().collect()).unwrap())
            .unwrap();
        let b = t
            .constant(Tensor::matrix(4, 2, perm.iter().flat_map(|&i| rows[i]).collect()).unwrap())
            .unwrap();
        let ma = t.mean_rows(a).unwrap();
        let mb = t.mean_rows(b).unwrap();
        for (x, y) in t.value(ma).data().iter().zip(t.value(mb).data()) {
            assert!((x - y).abs() <= 1e-9);
        }
    }
}
