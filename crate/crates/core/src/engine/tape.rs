//! Eager tape for the model's fixed primitive set.
//!
//! Each primitive computes its output when it is recorded and stores what its
//! adjoint needs. [`Tape::backward`] replays the records in reverse order.

use std::sync::Arc;

use super::tensor::{matmul, matmul_at, matmul_bt, Matrix, Real};
use crate::error::{Error, Result};
use crate::so3;

pub type Slot = usize;
pub type ParamId = usize;

/// Trilinear gather weights: for every point, eight `(node, weight)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Stencil<T> {
    pub nodes: usize,
    pub corners: Vec<[(u32, T); 8]>,
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Rigid {
        x: Slot,
        rotation: ParamId,
        translation: ParamId,
    },
    ModTable {
        latent: ParamId,
        cond: Option<ParamId>,
        m: ParamId,
        mu: ParamId,
    },
    Gather {
        table: Slot,
        stencil: Arc<Stencil<T>>,
    },
    Dense {
        x: Slot,
        w: ParamId,
        b: ParamId,
    },
    Sine {
        x: Slot,
        omega: T,
    },
    ModSine {
        u: Slot,
        mods: Slot,
        omega: T,
    },
    Softmax {
        x: Slot,
    },
    SquaredError {
        pred: Slot,
        target: Slot,
        channels: Arc<Vec<usize>>,
        scale: T,
    },
    CrossEntropy {
        logits: Slot,
        labels: Arc<Vec<u8>>,
        scale: T,
    },
    Sum {
        a: Slot,
        b: Slot,
        wa: T,
        wb: T,
    },
}

#[derive(Debug)]
enum Cache<T> {
    None,
    Cos(Matrix<T>),
    Rigid { rot: so3::Mat3, jac: [so3::Mat3; 3] },
    Probs(Matrix<T>),
    Stacked(Matrix<T>),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    out: Slot,
    cache: Cache<T>,
}

/// Parameter gradients from a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub params: Vec<Matrix<T>>,
    /// Node indices in the order the backward pass visited them.
    pub visited: Vec<usize>,
}

pub struct Tape<'p, T: Real> {
    params: &'p [&'p Matrix<T>],
    nodes: Vec<Node<T>>,
    values: Vec<Matrix<T>>,
    frozen: Vec<bool>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p [&'p Matrix<T>]) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            values: Vec::new(),
            frozen: vec![false; params.len()],
        }
    }

    /// Skip gradient computation for a parameter; its gradient stays zero.
    pub fn freeze(&mut self, id: ParamId) {
        self.frozen[id] = true;
    }

    pub fn value(&self, s: Slot) -> &Matrix<T> {
        &self.values[s]
    }

    pub fn take_value(&mut self, s: Slot) -> Matrix<T> {
        std::mem::replace(&mut self.values[s], Matrix::zeros(0, 0))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Matrix<T>, cache: Cache<T>) -> Slot {
        let out = self.values.len();
        self.values.push(value);
        self.nodes.push(Node { op, out, cache });
        out
    }

    fn param(&self, id: ParamId) -> &'p Matrix<T> {
        self.params[id]
    }

    pub fn input(&mut self, m: Matrix<T>) -> Slot {
        self.push(Op::Input, m, Cache::None)
    }

    /// Rows of `x` (B x 3) mapped by `exp(r) x + t`.
    pub fn rigid(&mut self, x: Slot, rotation: ParamId, translation: ParamId) -> Result<Slot> {
        let (r, t) = (self.param(rotation), self.param(translation));
        if r.len() != 3 || t.len() != 3 || self.values[x].cols != 3 {
            return Err(Error::Shape("rigid transform expects 3-vectors".into()));
        }
        let axis: [f64; 3] = std::array::from_fn(|i| r.data[i].f64());
        let rot = so3::exp(axis);
        let jac = so3::exp_jacobian(axis);
        let rt = Matrix::from_vec(3, 3, (0..9).map(|k| T::of(rot[k / 3][k % 3])).collect());
        let xin = &self.values[x];
        let mut out = Matrix::zeros(xin.rows, 3);
        matmul_bt(xin, &rt, T::zero(), &mut out);
        for row in out.data.chunks_exact_mut(3) {
            for d in 0..3 {
                row[d] = row[d] + t.data[d];
            }
        }
        Ok(self.push(
            Op::Rigid {
                x,
                rotation,
                translation,
            },
            out,
            Cache::Rigid { rot, jac },
        ))
    }

    /// Per-node modulation table `[z_n ; xi] M^T + mu` (nodes x 2H).
    pub fn mod_table(
        &mut self,
        latent: ParamId,
        cond: Option<ParamId>,
        m: ParamId,
        mu: ParamId,
    ) -> Result<Slot> {
        let z = self.param(latent);
        let q = cond.map(|c| self.param(c).len()).unwrap_or(0);
        let mm = self.param(m);
        let mu_v = self.param(mu);
        if mm.cols != z.cols + q || mu_v.len() != mm.rows {
            return Err(Error::Shape(format!(
                "modulation matrix {}x{} incompatible with latent width {} + {q}",
                mm.rows, mm.cols, z.cols
            )));
        }
        let mut stacked = Matrix::zeros(z.rows, z.cols + q);
        for n in 0..z.rows {
            let row = stacked.row_mut(n);
            row[..z.cols].copy_from_slice(z.row(n));
            if let Some(c) = cond {
                row[z.cols..].copy_from_slice(&self.param(c).data);
            }
        }
        let mut out = Matrix::zeros(z.rows, mm.rows);
        for n in 0..z.rows {
            out.row_mut(n).copy_from_slice(&mu_v.data);
        }
        matmul_bt(&stacked, mm, T::one(), &mut out);
        Ok(self.push(
            Op::ModTable {
                latent,
                cond,
                m,
                mu,
            },
            out,
            Cache::Stacked(stacked),
        ))
    }

    pub fn gather(&mut self, table: Slot, stencil: Arc<Stencil<T>>) -> Result<Slot> {
        let tab = &self.values[table];
        if tab.rows != stencil.nodes {
            return Err(Error::Shape(format!(
                "stencil expects {} nodes, table has {}",
                stencil.nodes, tab.rows
            )));
        }
        let mut out = Matrix::zeros(stencil.corners.len(), tab.cols);
        for (p, corners) in stencil.corners.iter().enumerate() {
            let dst = out.row_mut(p);
            for &(n, w) in corners {
                if w == T::zero() {
                    continue;
                }
                for (d, &s) in dst.iter_mut().zip(tab.row(n as usize)) {
                    *d = *d + w * s;
                }
            }
        }
        Ok(self.push(Op::Gather { table, stencil }, out, Cache::None))
    }

    /// `x W^T + b`.
    pub fn dense(&mut self, x: Slot, w: ParamId, b: ParamId) -> Result<Slot> {
        let (wm, bm) = (self.param(w), self.param(b));
        let xin = &self.values[x];
        if wm.cols != xin.cols || bm.len() != wm.rows {
            return Err(Error::Shape(format!(
                "dense layer {}x{} applied to input of width {}",
                wm.rows, wm.cols, xin.cols
            )));
        }
        let mut out = Matrix::zeros(xin.rows, wm.rows);
        for r in 0..xin.rows {
            out.row_mut(r).copy_from_slice(&bm.data);
        }
        matmul_bt(xin, wm, T::one(), &mut out);
        Ok(self.push(Op::Dense { x, w, b }, out, Cache::None))
    }

    /// `sin(omega x)`.
    pub fn sine(&mut self, x: Slot, omega: T) -> Slot {
        let xin = &self.values[x];
        let mut out = Matrix::zeros(xin.rows, xin.cols);
        let mut cos = Matrix::zeros(xin.rows, xin.cols);
        for ((o, c), &v) in out.data.iter_mut().zip(cos.data.iter_mut()).zip(&xin.data) {
            let (s, k) = (omega * v).sin_cos();
            *o = s;
            *c = k;
        }
        self.push(Op::Sine { x, omega }, out, Cache::Cos(cos))
    }

    /// `sin(omega * alpha * u + beta)` with `mods = [alpha | beta]`.
    pub fn mod_sine(&mut self, u: Slot, mods: Slot, omega: T) -> Result<Slot> {
        let (uv, mv) = (&self.values[u], &self.values[mods]);
        let h = uv.cols;
        if mv.cols != 2 * h || mv.rows != uv.rows {
            return Err(Error::Shape(format!(
                "modulation {}x{} does not match pre-activation {}x{}",
                mv.rows, mv.cols, uv.rows, h
            )));
        }
        let mut out = Matrix::zeros(uv.rows, h);
        let mut cos = Matrix::zeros(uv.rows, h);
        for p in 0..uv.rows {
            let (ur, mr) = (uv.row(p), mv.row(p));
            let (alpha, beta) = mr.split_at(h);
            let base = p * h;
            for j in 0..h {
                let (s, k) = (omega * alpha[j] * ur[j] + beta[j]).sin_cos();
                out.data[base + j] = s;
                cos.data[base + j] = k;
            }
        }
        Ok(self.push(Op::ModSine { u, mods, omega }, out, Cache::Cos(cos)))
    }

    pub fn softmax(&mut self, x: Slot) -> Slot {
        let out = softmax_rows(&self.values[x]);
        self.push(Op::Softmax { x }, out, Cache::None)
    }

    /// `scale * sum over rows and listed channels of (pred - target)^2`.
    pub fn squared_error(
        &mut self,
        pred: Slot,
        target: Slot,
        channels: Arc<Vec<usize>>,
        scale: T,
    ) -> Result<Slot> {
        let (p, t) = (&self.values[pred], &self.values[target]);
        if p.shape() != t.shape() || channels.iter().any(|&c| c >= p.cols) {
            return Err(Error::Shape("squared error operands disagree".into()));
        }
        let mut acc = T::zero();
        for r in 0..p.rows {
            let (pr, tr) = (p.row(r), t.row(r));
            for &c in channels.iter() {
                let d = pr[c] - tr[c];
                acc = acc + d * d;
            }
        }
        let out = Matrix::from_vec(1, 1, vec![acc * scale]);
        Ok(self.push(
            Op::SquaredError {
                pred,
                target,
                channels,
                scale,
            },
            out,
            Cache::None,
        ))
    }

    /// `scale * sum over rows of -log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Slot, labels: Arc<Vec<u8>>, scale: T) -> Result<Slot> {
        let lg = &self.values[logits];
        if labels.len() != lg.rows || labels.iter().any(|&l| usize::from(l) >= lg.cols) {
            return Err(Error::Shape("labels do not match logits".into()));
        }
        let probs = softmax_rows(lg);
        let mut acc = T::zero();
        for (r, &l) in labels.iter().enumerate() {
            let row = lg.row(r);
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            acc = acc + lse - row[usize::from(l)];
        }
        let out = Matrix::from_vec(1, 1, vec![acc * scale]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels,
                scale,
            },
            out,
            Cache::Probs(probs),
        ))
    }

    /// `wa a + wb b`.
    pub fn sum(&mut self, a: Slot, b: Slot, wa: T, wb: T) -> Result<Slot> {
        let (av, bv) = (&self.values[a], &self.values[b]);
        if av.shape() != bv.shape() {
            return Err(Error::Shape("sum operands disagree".into()));
        }
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| wa * x + wb * y).collect();
        let out = Matrix::from_vec(av.rows, av.cols, data);
        Ok(self.push(Op::Sum { a, b, wa, wb }, out, Cache::None))
    }

    /// Backward pass seeded with `d output = seed` (a scalar output).
    pub fn backward(&self, output: Slot, seed: T) -> Result<Gradients<T>> {
        let v = &self.values[output];
        self.backward_with(output, Matrix::from_vec(v.rows, v.cols, vec![seed; v.len()]))
    }

    pub fn backward_with(&self, output: Slot, adjoint: Matrix<T>) -> Result<Gradients<T>> {
        if adjoint.shape() != self.values[output].shape() {
            return Err(Error::Shape(format!(
                "adjoint {:?} does not match output {:?}",
                adjoint.shape(),
                self.values[output].shape()
            )));
        }
        let mut adj: Vec<Option<Matrix<T>>> = (0..self.values.len()).map(|_| None).collect();
        adj[output] = Some(adjoint);
        let mut grads: Vec<Matrix<T>> = self
            .params
            .iter()
            .map(|p| Matrix::zeros(p.rows, p.cols))
            .collect();
        let mut visited = Vec::new();

        for (idx, node) in self.nodes.iter().enumerate().rev() {
            let Some(g) = adj[node.out].take() else {
                continue;
            };
            visited.push(idx);
            match (&node.op, &node.cache) {
                (Op::Input, _) => {}
                (
                    Op::Rigid {
                        x,
                        rotation,
                        translation,
                    },
                    Cache::Rigid { rot, jac },
                ) => {
                    let xin = &self.values[*x];
                    let rm = Matrix::from_vec(3, 3, (0..9).map(|k| T::of(rot[k / 3][k % 3])).collect());
                    let mut dx = Matrix::zeros(xin.rows, 3);
                    matmul(&g, &rm, T::zero(), &mut dx);
                    accumulate(&mut adj[*x], dx);
                    // G = g^T x, dr_k = <dR/dr_k, G>
                    let mut gx = Matrix::zeros(3, 3);
                    matmul_at(&g, xin, T::zero(), &mut gx);
                    for k in 0..3 {
                        let mut s = 0.0;
                        for i in 0..3 {
                            for j in 0..3 {
                                s += jac[k][i][j] * gx.at(i, j).f64();
                            }
                        }
                        grads[*rotation].data[k] = grads[*rotation].data[k] + T::of(s);
                    }
                    for row in g.data.chunks_exact(3) {
                        for d in 0..3 {
                            grads[*translation].data[d] = grads[*translation].data[d] + row[d];
                        }
                    }
                }
                (
                    Op::ModTable {
                        latent,
                        cond,
                        m,
                        mu,
                    },
                    Cache::Stacked(stacked),
                ) => {
                    let mm = self.param(*m);
                    if !self.frozen[*m] {
                        let mut dm = Matrix::zeros(mm.rows, mm.cols);
                        matmul_at(&g, stacked, T::zero(), &mut dm);
                        grads[*m].add_assign(&dm);
                    }
                    if !self.frozen[*mu] {
                        add_col_sums(&mut grads[*mu], &g);
                    }
                    let mut dz = Matrix::zeros(stacked.rows, stacked.cols);
                    matmul(&g, mm, T::zero(), &mut dz);
                    let d = self.param(*latent).cols;
                    for n in 0..dz.rows {
                        let row = dz.row(n);
                        let gl = grads[*latent].row_mut(n);
                        for (a, &b) in gl.iter_mut().zip(&row[..d]) {
                            *a = *a + b;
                        }
                        if let Some(c) = cond {
                            for (a, &b) in grads[*c].data.iter_mut().zip(&row[d..]) {
                                *a = *a + b;
                            }
                        }
                    }
                }
                (Op::Gather { table, stencil }, _) => {
                    let cols = g.cols;
                    let mut dt = Matrix::zeros(stencil.nodes, cols);
                    for (p, corners) in stencil.corners.iter().enumerate() {
                        let src = g.row(p);
                        for &(n, w) in corners {
                            if w == T::zero() {
                                continue;
                            }
                            for (d, &s) in dt.row_mut(n as usize).iter_mut().zip(src) {
                                *d = *d + w * s;
                            }
                        }
                    }
                    accumulate(&mut adj[*table], dt);
                }
                (Op::Dense { x, w, b }, _) => {
                    let xin = &self.values[*x];
                    let wm = self.param(*w);
                    if !self.frozen[*w] {
                        let mut dw = Matrix::zeros(wm.rows, wm.cols);
                        matmul_at(&g, xin, T::zero(), &mut dw);
                        grads[*w].add_assign(&dw);
                    }
                    if !self.frozen[*b] {
                        add_col_sums(&mut grads[*b], &g);
                    }
                    if self.needs_adjoint(*x) {
                        let mut dx = Matrix::zeros(xin.rows, xin.cols);
                        matmul(&g, wm, T::zero(), &mut dx);
                        accumulate(&mut adj[*x], dx);
                    }
                }
                (Op::Sine { x, omega }, Cache::Cos(cos)) => {
                    let data = g.data.iter().zip(&cos.data).map(|(&a, &c)| a * *omega * c).collect();
                    accumulate(&mut adj[*x], Matrix::from_vec(g.rows, g.cols, data));
                }
                (Op::ModSine { u, mods, omega }, Cache::Cos(cos)) => {
                    let (uv, mv) = (&self.values[*u], &self.values[*mods]);
                    let h = uv.cols;
                    let mut du = Matrix::zeros(uv.rows, h);
                    let mut dmods = Matrix::zeros(uv.rows, 2 * h);
                    for p in 0..uv.rows {
                        let (ur, mr) = (uv.row(p), mv.row(p));
                        let alpha = &mr[..h];
                        let base = p * h;
                        let dm_row = dmods.row_mut(p);
                        for j in 0..h {
                            let dphi = g.data[base + j] * cos.data[base + j];
                            du.data[base + j] = dphi * *omega * alpha[j];
                            dm_row[j] = dphi * *omega * ur[j];
                            dm_row[h + j] = dphi;
                        }
                    }
                    accumulate(&mut adj[*u], du);
                    accumulate(&mut adj[*mods], dmods);
                }
                (Op::Softmax { x }, _) => {
                    let p = &self.values[node.out];
                    let mut dx = Matrix::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let (pr, gr) = (p.row(r), g.row(r));
                        let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for (d, (&a, &b)) in dx.row_mut(r).iter_mut().zip(pr.iter().zip(gr)) {
                            *d = a * (b - dot);
                        }
                    }
                    accumulate(&mut adj[*x], dx);
                }
                (
                    Op::SquaredError {
                        pred,
                        target,
                        channels,
                        scale,
                    },
                    _,
                ) => {
                    let (p, t) = (&self.values[*pred], &self.values[*target]);
                    let k = g.data[0] * T::of(2.0) * *scale;
                    let mut dp = Matrix::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let (pr, tr) = (p.row(r), t.row(r));
                        let dr = dp.row_mut(r);
                        for &c in channels.iter() {
                            dr[c] = k * (pr[c] - tr[c]);
                        }
                    }
                    if self.needs_adjoint(*target) {
                        let neg = dp.data.iter().map(|&v| -v).collect();
                        accumulate(&mut adj[*target], Matrix::from_vec(p.rows, p.cols, neg));
                    }
                    accumulate(&mut adj[*pred], dp);
                }
                (
                    Op::CrossEntropy {
                        logits,
                        labels,
                        scale,
                    },
                    Cache::Probs(probs),
                ) => {
                    let k = g.data[0] * *scale;
                    let mut dl = probs.clone();
                    for (r, &l) in labels.iter().enumerate() {
                        let row = dl.row_mut(r);
                        row[usize::from(l)] = row[usize::from(l)] - T::one();
                        for v in row.iter_mut() {
                            *v = *v * k;
                        }
                    }
                    accumulate(&mut adj[*logits], dl);
                }
                (Op::Sum { a, b, wa, wb }, _) => {
                    let da = g.data.iter().map(|&v| v * *wa).collect();
                    let db = g.data.iter().map(|&v| v * *wb).collect();
                    accumulate(&mut adj[*a], Matrix::from_vec(g.rows, g.cols, da));
                    accumulate(&mut adj[*b], Matrix::from_vec(g.rows, g.cols, db));
                }
                (op, _) => unreachable!("cache mismatch for {op:?}"),
            }
        }
        Ok(Gradients {
            params: grads,
            visited,
        })
    }

    /// Inputs are constant leaves.
    fn needs_adjoint(&self, s: Slot) -> bool {
        !matches!(self.nodes[s].op, Op::Input)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Matrix<T>>, m: Matrix<T>) {
    match slot {
        Some(acc) => acc.add_assign(&m),
        None => *slot = Some(m),
    }
}

fn add_col_sums<T: Real>(dst: &mut Matrix<T>, g: &Matrix<T>) {
    for r in 0..g.rows {
        for (d, &v) in dst.data.iter_mut().zip(g.row(r)) {
            *d = *d + v;
        }
    }
}

pub fn softmax_rows<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let dst = out.row_mut(r);
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - mx).exp();
            total = total + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    out
}
