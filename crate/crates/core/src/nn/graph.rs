//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every forward call appends a node holding its value; `backward` walks the
//! tape in reverse and accumulates gradients into every node that requires
//! one. The tape is rebuilt for each forward pass.

use super::conv::{self, ConvDims, ConvGeom};
use super::tensor::Tensor;
use crate::error::{dim_err, numeric_err, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Dense { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, k: Var, t: Option<Var>, dims: ConvDims },
    Tanh(Var),
    StopGrad(Var),
    SignSte(Var),
    StraightThrough { source: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    MeanAbs(Var),
    Mask(Var, Vec<f64>),
    Reshape(Var),
    SumSq(Var),
    Sum(Var),
    Gather { table: Var, rows: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; receives a gradient on `backward`.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.grads[v.0].as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `x Wᵀ + b`. `x` is `[batch, ...]` and is flattened to `[batch, d_in]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.len() != 2 {
            return Err(dim_err!("dense weight W must be [d_out, d_in], got {:?}", ws));
        }
        let (d_out, d_in) = (ws[0], ws[1]);
        let batch = xs.first().copied().unwrap_or(0);
        let per: usize = xs.iter().skip(1).product();
        if xs.len() < 2 || per != d_in {
            return Err(dim_err!(
                "dense input x {:?} does not match W [{}, {}]",
                xs,
                d_out,
                d_in
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(dim_err!(
                    "dense bias b {:?} does not match d_out={}",
                    self.shape(b),
                    d_out
                ));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; batch * d_out];
        for r in 0..batch {
            let xr = &xd[r * d_in..(r + 1) * d_in];
            for o in 0..d_out {
                let wr = &wd[o * d_in..(o + 1) * d_in];
                out[r * d_out + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                for (o, bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![batch, d_out], out)?,
            Op::Dense { x, w, b },
            rg,
        ))
    }

    /// Grouped 2-D cross-correlation of `x` `[batch, C_in, H, W]` with
    /// kernel `k` `[C_out, C_in/g, kh, kw]` plus per-channel bias `t`.
    pub fn conv2d(&mut self, x: Var, k: Var, t: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let dims = ConvDims::resolve(self.shape(x), self.shape(k), geom)?;
        if let Some(t) = t {
            if self.shape(t) != [dims.c_out] {
                return Err(dim_err!(
                    "conv2d bias t {:?} does not match C_out={}",
                    self.shape(t),
                    dims.c_out
                ));
            }
        }
        let shape = dims.out_shape();
        let mut out = vec![0.0; shape.iter().product()];
        conv::forward(
            &dims,
            self.value(x).data(),
            self.value(k).data(),
            t.map(|t| self.value(t).data()),
            &mut out,
        );
        let rg = self.rg(x) || self.rg(k) || t.is_some_and(|t| self.rg(t));
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x, k, t, dims }, rg))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64, rg: bool) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(t, op, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let rg = self.rg(x);
        self.map(x, Op::Tanh(x), f64::tanh, rg)
    }

    /// Identity forward; blocks the gradient to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        // keeps the input in the backward walk so it still gets a (zero) grad
        let rg = self.rg(x);
        self.push(t, Op::StopGrad(x), rg)
    }

    /// `sign(x)` with `sign(0) = +1`; backward passes the gradient where
    /// `|x| <= 1`.
    pub fn sign_ste(&mut self, x: Var) -> Var {
        let rg = self.rg(x);
        self.map(x, Op::SignSte(x), sign, rg)
    }

    /// `source + sg(target - source)` fused so the forward value is
    /// bitwise `target` while the whole gradient goes to `source`.
    pub fn straight_through(&mut self, source: Var, target: Var) -> Result<Var> {
        if self.shape(source) != self.shape(target) {
            return Err(dim_err!(
                "straight-through source {:?} vs target {:?}",
                self.shape(source),
                self.shape(target)
            ));
        }
        let t = self.value(target).clone();
        let rg = self.rg(source);
        Ok(self.push(t, Op::StraightThrough { source }, rg))
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(dim_err!(
                "elementwise operands {:?} and {:?} differ",
                va.shape(),
                vb.shape()
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let rg = self.rg(a);
        self.map(a, Op::Scale(a, c), |x| x * c, rg)
    }

    /// Multiply every entry of `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(dim_err!("scale_by factor must have one element"));
        }
        let c = self.value(s).data()[0];
        let rg = self.rg(a) || self.rg(s);
        Ok(self.map(a, Op::ScaleBy(a, s), |x| x * c, rg))
    }

    /// `‖a‖₁ / len(a)` as a one-element tensor.
    pub fn mean_abs(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.data().iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::MeanAbs(a), rg)
    }

    /// Elementwise product with a constant mask (values and gradients).
    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let v = self.value(a);
        if v.len() != mask.len() {
            return Err(dim_err!(
                "mask of length {} for tensor {:?}",
                mask.len(),
                v.shape()
            ));
        }
        let data = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Mask(a, mask), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// `Σ a²` as a one-element tensor.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumSq(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean over the leading (batch) dimension of the per-sample squared
    /// Frobenius error `‖pred − target‖²`.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let batch = self.value(pred).batch().max(1);
        let d = self.sub(pred, target)?;
        let s = self.sum_sq(d);
        Ok(self.scale(s, 1.0 / batch as f64))
    }

    /// Concatenate rows of `table` `[K, m]` in the order given by `rows`,
    /// reshaped to `shape`.
    pub fn gather_rows(&mut self, table: Var, rows: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(dim_err!("gather table must be [K, m], got {:?}", ts));
        }
        let (k, m) = (ts[0], ts[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= k) {
            return Err(dim_err!("gather row {} out of range for K={}", bad, k));
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(rows.len() * m);
        for &r in &rows {
            data.extend_from_slice(&td[r * m..(r + 1) * m]);
        }
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(table);
        Ok(self.push(t, Op::Gather { table, rows }, rg))
    }

    /// Reverse sweep from the one-element `loss`. Previous gradients are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(dim_err!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            ));
        }
        if !self.value(loss).data()[0].is_finite() {
            return Err(numeric_err!("loss is not finite"));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Split borrows: node values are read while gradient slots are written.
        let nodes = std::mem::take(&mut self.nodes);
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.data();
        let grads = &mut self.grads;
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let ws = nodes[w.0].value.shape();
                let (d_out, d_in) = (ws[0], ws[1]);
                let batch = g.len() / d_out;
                if let Some(dx) = slot(grads, &nodes, *x) {
                    let wd = val(*w);
                    for r in 0..batch {
                        let dxr = &mut dx[r * d_in..(r + 1) * d_in];
                        for o in 0..d_out {
                            let go = g[r * d_out + o];
                            if go != 0.0 {
                                let wr = &wd[o * d_in..(o + 1) * d_in];
                                for (d, wv) in dxr.iter_mut().zip(wr) {
                                    *d += go * wv;
                                }
                            }
                        }
                    }
                }
                if let Some(dw) = slot(grads, &nodes, *w) {
                    let xd = val(*x);
                    for r in 0..batch {
                        let xr = &xd[r * d_in..(r + 1) * d_in];
                        for o in 0..d_out {
                            let go = g[r * d_out + o];
                            if go != 0.0 {
                                let dwr = &mut dw[o * d_in..(o + 1) * d_in];
                                for (d, xv) in dwr.iter_mut().zip(xr) {
                                    *d += go * xv;
                                }
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(db) = slot(grads, &nodes, *b) {
                        for row in g.chunks(d_out) {
                            for (d, gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, k, t, dims } => {
                // materialize optional slots one at a time to satisfy the borrow checker
                let mut dx = slot(grads, &nodes, *x).map(std::mem::take);
                let mut dk = slot(grads, &nodes, *k).map(std::mem::take);
                let mut dt = t.and_then(|t| slot(grads, &nodes, t).map(std::mem::take));
                conv::backward(
                    dims,
                    val(*x),
                    val(*k),
                    g,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    dt.as_deref_mut(),
                );
                if let Some(d) = dx {
                    grads[x.0] = Some(d);
                }
                if let Some(d) = dk {
                    grads[k.0] = Some(d);
                }
                if let (Some(d), Some(t)) = (dt, t) {
                    grads[t.0] = Some(d);
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(dx) = slot(grads, &nodes, *x) {
                    for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::StopGrad(x) => {
                slot(grads, &nodes, *x);
            }
            Op::SignSte(x) => {
                let xd = val(*x);
                if let Some(dx) = slot(grads, &nodes, *x) {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(xd) {
                        if xv.abs() <= 1.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::StraightThrough { source } => {
                if let Some(dx) = slot(grads, &nodes, *source) {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if let Some(da) = slot(grads, &nodes, *a) {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(db) = slot(grads, &nodes, *b) {
                    for (d, gv) in db.iter_mut().zip(g) {
                        if neg {
                            *d -= gv;
                        } else {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = slot(grads, &nodes, *a) {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(val(*b)) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = slot(grads, &nodes, *b) {
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(val(*a)) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = slot(grads, &nodes, *a) {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                }
            }
            Op::ScaleBy(a, s) => {
                let c = val(*s)[0];
                if let Some(da) = slot(grads, &nodes, *a) {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                }
                let dot: f64 = g.iter().zip(val(*a)).map(|(x, y)| x * y).sum();
                if let Some(ds) = slot(grads, &nodes, *s) {
                    ds[0] += dot;
                }
            }
            Op::MeanAbs(a) => {
                let ad = val(*a);
                let scale = g[0] / ad.len() as f64;
                if let Some(da) = slot(grads, &nodes, *a) {
                    for (d, av) in da.iter_mut().zip(ad) {
                        if *av != 0.0 {
                            *d += scale * av.signum();
                        }
                    }
                }
            }
            Op::Mask(a, m) => {
                if let Some(da) = slot(grads, &nodes, *a) {
                    for ((d, gv), mv) in da.iter_mut().zip(g).zip(m) {
                        *d += gv * mv;
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(da) = slot(grads, &nodes, *a) {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::SumSq(a) => {
                let ad = val(*a);
                if let Some(da) = slot(grads, &nodes, *a) {
                    for (d, av) in da.iter_mut().zip(ad) {
                        *d += 2.0 * g[0] * av;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = slot(grads, &nodes, *a) {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Gather { table, rows } => {
                let m = nodes[table.0].value.shape()[1];
                if let Some(dt) = slot(grads, &nodes, *table) {
                    for (j, &r) in rows.iter().enumerate() {
                        for t in 0..m {
                            dt[r * m + t] += g[j * m + t];
                        }
                    }
                }
            }
        }
        self.nodes = nodes;
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}
