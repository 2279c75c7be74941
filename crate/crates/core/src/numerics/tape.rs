//! Dynamic reverse-mode recording.
//!
//! Every operation appends a node holding its output value and the handles of its
//! inputs; `backward` walks the nodes in reverse. Parameters are borrowed from a
//! [`ParamStore`] rather than copied into the tape.

use std::collections::HashMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::quantization::QuantGrid;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{sigmoid, softmax_in_place, view, MatRef, Real, Tensor};

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv1d { x: Var, w: Var, width: usize },
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    Log { x: Var, floor: T },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Slice { x: Var, rows: Range<usize>, cols: Range<usize> },
    Transpose(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Gather { src: Var, idx: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    FakeQuant { x: Var, lo: T, hi: T },
    FakeQuantSym(Var),
    FoPool { z: Var, f: Var, o: Var, c: Vec<T> },
}

enum Slot<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

struct Node<T> {
    value: Slot<T>,
    op: Op<T>,
}

/// Records operations for one forward pass.
pub struct Tape<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(1024),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Slot::Owned(t) => t,
            Slot::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Slot::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Slot::Param(id),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a)·op(b)` with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = super::tensor::matmul(self.value(a), ta, self.value(b), tb)?;
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }))
    }

    /// Causal 1-D convolution over rows: output row `t` sees input rows
    /// `t-width+1 ..= t` (zero padded before the start). `w` stacks the per-tap
    /// kernels vertically: `(width·d_in) × d_out`, oldest tap first.
    pub fn conv1d(&mut self, x: Var, w: Var, width: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, d) = (xv.rows(), xv.cols());
        if width == 0 || wv.rows() != width * d {
            return Err(Error::shape(
                "conv1d",
                format!("kernel {}×{} incompatible with width {} and input width {}", wv.rows(), wv.cols(), width, d),
            ));
        }
        let m = wv.cols();
        let mut out = Tensor::zeros(n, m);
        for j in 0..width {
            let shift = width - 1 - j;
            if shift >= n {
                continue;
            }
            let rows = n - shift;
            T::gemm(
                rows,
                d,
                m,
                MatRef::row_major(&xv.data()[..rows * d], d),
                MatRef::row_major(&wv.data()[j * d * m..(j + 1) * d * m], m),
                &mut out.data_mut()[shift * m..],
                m,
                true,
            );
        }
        Ok(self.push(out, Op::Conv1d { x, w, width }))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let ([ar, ac], [br, bc]) = (self.shape(a), self.shape(b));
        Ok(if ar == br && ac == bc {
            Broadcast::Same
        } else if br == 1 && bc == 1 {
            Broadcast::Scalar
        } else if br == 1 && bc == ac {
            Broadcast::Row
        } else if bc == 1 && br == ar {
            Broadcast::Col
        } else {
            return Err(Error::shape(op, format!("cannot broadcast {}×{} onto {}×{}", br, bc, ar, ac)));
        })
    }

    fn elementwise(&mut self, a: Var, b: Var, kind: Broadcast, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let cols = av.cols();
        let mut out = av.clone();
        let bd = bv.data();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let rhs = match kind {
                Broadcast::Same => bd[i],
                Broadcast::Row => bd[i % cols],
                Broadcast::Col => bd[i / cols],
                Broadcast::Scalar => bd[0],
            };
            *o = f(*o, rhs);
        }
        out
    }

    /// Element-wise sum; `b` may be a row, a column, or a scalar broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = self.broadcast("add", a, b)?;
        let out = self.elementwise(a, b, kind, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b, kind)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = self.broadcast("sub", a, b)?;
        let out = self.elementwise(a, b, kind, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b, kind)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = self.broadcast("mul", a, b)?;
        let out = self.elementwise(a, b, kind, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b, kind)))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let c = self.scalar(factor);
        self.mul(a, c)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Natural log of `max(x, floor)`.
    pub fn log(&mut self, x: Var, floor: T) -> Var {
        let out = self.value(x).map(|v| v.max(floor).ln());
        self.push(out, Op::Log { x, floor })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0])[0];
        if parts.iter().any(|&p| self.shape(p)[0] != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0])[1];
        if parts.iter().any(|&p| self.shape(p)[1] != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let xv = self.value(x);
        if rows.end > xv.rows() || cols.end > xv.cols() || rows.start > rows.end || cols.start > cols.end {
            return Err(Error::shape(
                "slice",
                format!("{:?}×{:?} out of bounds for {}×{}", rows, cols, xv.rows(), xv.cols()),
            ));
        }
        let mut out = Tensor::zeros(rows.len(), cols.len());
        for (o, r) in rows.clone().enumerate() {
            out.row_mut(o).copy_from_slice(&xv.row(r)[cols.clone()]);
        }
        Ok(self.push(out, Op::Slice { x, rows, cols }))
    }

    pub fn slice_cols(&mut self, x: Var, cols: Range<usize>) -> Result<Var> {
        let rows = self.shape(x)[0];
        self.slice(x, 0..rows, cols)
    }

    pub fn slice_rows(&mut self, x: Var, rows: Range<usize>) -> Result<Var> {
        let cols = self.shape(x)[1];
        self.slice(x, rows, 0..cols)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x))
    }

    /// Row-wise layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (n, d) = (xv.rows(), xv.cols());
        if gv.shape() != [1, d] || bv.shape() != [1, d] {
            return Err(Error::shape("layer_norm", format!("gain/bias must be 1×{}", d)));
        }
        let dt = T::cast_from(d as f64);
        let mut out = Tensor::zeros(n, d);
        let mut xhat = vec![T::zero(); n * d];
        let mut inv_std = vec![T::zero(); n];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let inv = (var + eps).sqrt().recip();
            inv_std[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out.set(r, c, h * gv.data()[c] + bv.data()[c]);
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// Row gather: output row `i` is `src[idx[i]]`.
    pub fn gather(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        if let Some(&bad) = idx.iter().find(|&&i| i >= sv.rows()) {
            return Err(Error::shape("gather", format!("row {} of {}", bad, sv.rows())));
        }
        let mut out = Tensor::zeros(idx.len(), sv.cols());
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(sv.row(i));
        }
        Ok(self.push(out, Op::Gather { src, idx: idx.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(x).clone().reshape(rows, cols)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Simulated 8-bit quantization with a straight-through gradient inside `[lo, hi]`.
    pub fn fake_quant(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let grid = QuantGrid::from_range(lo, hi);
        let out = self.value(x).map(|v| T::cast_from(grid.fake_quant(v.as_f64())));
        self.push(
            out,
            Op::FakeQuant {
                x,
                lo: T::cast_from(lo),
                hi: T::cast_from(hi),
            },
        )
    }

    /// Symmetric per-tensor 8-bit simulation for weights (the exact max magnitude
    /// maps to level 127); the gradient passes straight through.
    pub fn fake_quant_symmetric(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs())).max(1e-6);
        let scale = m / 127.0;
        let out = xv.map(|v| T::cast_from((v.as_f64() / scale).round().clamp(-127.0, 127.0) * scale));
        self.push(out, Op::FakeQuantSym(x))
    }

    /// QRNN fo-pooling over rows: `c_t = f_t⊙c_{t−1} + (1−f_t)⊙z_t` with
    /// `c_0 = 0`, output `h_t = o_t⊙c_t`.
    pub fn fo_pool(&mut self, z: Var, f: Var, o: Var) -> Result<Var> {
        let (zv, fv, ov) = (self.value(z), self.value(f), self.value(o));
        if zv.shape() != fv.shape() || zv.shape() != ov.shape() {
            return Err(Error::shape("fo_pool", format!("{:?} {:?} {:?}", zv.shape(), fv.shape(), ov.shape())));
        }
        let (n, s) = (zv.rows(), zv.cols());
        let mut c = vec![T::zero(); n * s];
        let mut h = Tensor::zeros(n, s);
        for t in 0..n {
            for j in 0..s {
                let i = t * s + j;
                let prev = if t == 0 { T::zero() } else { c[i - s] };
                let ft = fv.data()[i];
                c[i] = ft * prev + (T::one() - ft) * zv.data()[i];
                h.data_mut()[i] = ov.data()[i] * c[i];
            }
        }
        Ok(self.push(h, Op::FoPool { z, f, o, c }))
    }

    /// Accumulate `d loss / d param` for every parameter reachable from `loss`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients<T>) -> Result<()> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut g: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        g.resize_with(loss.0 + 1, || None);
        g[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            let node = &self.nodes[i];
            let y = match &node.value {
                Slot::Owned(t) => t,
                Slot::Param(id) => self.params.get(*id),
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => grads.accumulate(*id, y.rows(), y.cols(), &dy),
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, n) = (y.rows(), y.cols());
                    let k = if *ta { av.rows() } else { av.cols() };
                    let dyv = MatRef::row_major(&dy, n);
                    let dyt = MatRef::transposed(&dy, n);
                    {
                        let da = grad_slot(&mut g, *a, av.len());
                        if !*ta {
                            // dA(m×k) = dY · op(B)ᵀ
                            T::gemm(m, n, k, dyv, view(bv, !*tb), da, k, true);
                        } else {
                            // A is k×m: dA = op(B) · dYᵀ
                            T::gemm(k, n, m, view(bv, *tb), dyt, da, m, true);
                        }
                    }
                    let db = grad_slot(&mut g, *b, bv.len());
                    if !*tb {
                        // dB(k×n) = op(A)ᵀ · dY
                        T::gemm(k, m, n, view(av, !*ta), dyv, db, n, true);
                    } else {
                        // B is n×k: dB = dYᵀ · op(A)
                        T::gemm(n, m, k, dyt, view(av, *ta), db, k, true);
                    }
                }
                Op::Conv1d { x, w, width } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, d, m) = (xv.rows(), xv.cols(), wv.cols());
                    for j in 0..*width {
                        let shift = width - 1 - j;
                        if shift >= n {
                            continue;
                        }
                        let rows = n - shift;
                        let dys = &dy[shift * m..];
                        {
                            let dx = grad_slot(&mut g, *x, xv.len());
                            T::gemm(
                                rows,
                                m,
                                d,
                                MatRef::row_major(dys, m),
                                MatRef::transposed(&wv.data()[j * d * m..(j + 1) * d * m], m),
                                &mut dx[..rows * d],
                                d,
                                true,
                            );
                        }
                        let dw = grad_slot(&mut g, *w, wv.len());
                        T::gemm(
                            d,
                            rows,
                            m,
                            MatRef::transposed(&xv.data()[..rows * d], d),
                            MatRef::row_major(dys, m),
                            &mut dw[j * d * m..(j + 1) * d * m],
                            m,
                            true,
                        );
                    }
                }
                Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                    add_into(grad_slot(&mut g, *a, dy.len()), &dy);
                    let bl = self.value(*b).len();
                    let db = grad_slot(&mut g, *b, bl);
                    reduce_broadcast(db, &dy, *kind, y.cols(), |v| v * sign);
                }
                Op::Mul(a, b, kind) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let cols = y.cols();
                    {
                        let da = grad_slot(&mut g, *a, av.len());
                        let bd = bv.data();
                        for (i, d) in da.iter_mut().enumerate() {
                            let rhs = match kind {
                                Broadcast::Same => bd[i],
                                Broadcast::Row => bd[i % cols],
                                Broadcast::Col => bd[i / cols],
                                Broadcast::Scalar => bd[0],
                            };
                            *d += dy[i] * rhs;
                        }
                    }
                    let prod: Vec<T> = dy.iter().zip(av.data()).map(|(d, a)| *d * *a).collect();
                    let db = grad_slot(&mut g, *b, bv.len());
                    reduce_broadcast(db, &prod, *kind, cols, |v| v);
                }
                Op::Sigmoid(x) => {
                    let dx = grad_slot(&mut g, *x, dy.len());
                    for ((d, &s), &u) in dx.iter_mut().zip(y.data()).zip(&dy) {
                        *d += u * s * (T::one() - s);
                    }
                }
                Op::Tanh(x) => {
                    let dx = grad_slot(&mut g, *x, dy.len());
                    for ((d, &t), &u) in dx.iter_mut().zip(y.data()).zip(&dy) {
                        *d += u * (T::one() - t * t);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let dx = grad_slot(&mut g, *x, dy.len());
                    for ((d, &v), &u) in dx.iter_mut().zip(xv.data()).zip(&dy) {
                        if v > T::zero() {
                            *d += u;
                        }
                    }
                }
                Op::Softmax(x) => {
                    let cols = y.cols();
                    let dx = grad_slot(&mut g, *x, dy.len());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let ur = &dy[r * cols..(r + 1) * cols];
                        let dot: T = yr.iter().zip(ur).map(|(a, b)| *a * *b).sum();
                        for c in 0..cols {
                            dx[r * cols + c] += yr[c] * (ur[c] - dot);
                        }
                    }
                }
                Op::Log { x, floor } => {
                    let xv = self.value(*x);
                    let dx = grad_slot(&mut g, *x, dy.len());
                    for ((d, &v), &u) in dx.iter_mut().zip(xv.data()).zip(&dy) {
                        if v > *floor {
                            *d += u / v;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let cols = y.cols();
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.shape(p)[1];
                        let dp = grad_slot(&mut g, p, y.rows() * pc);
                        for r in 0..y.rows() {
                            add_into(&mut dp[r * pc..(r + 1) * pc], &dy[r * cols + off..r * cols + off + pc]);
                        }
                        off += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        add_into(grad_slot(&mut g, p, len), &dy[off..off + len]);
                        off += len;
                    }
                }
                Op::Slice { x, rows, cols } => {
                    let xc = self.shape(*x)[1];
                    let xl = self.value(*x).len();
                    let dx = grad_slot(&mut g, *x, xl);
                    let w = cols.len();
                    for (o, r) in rows.clone().enumerate() {
                        add_into(&mut dx[r * xc + cols.start..r * xc + cols.end], &dy[o * w..(o + 1) * w]);
                    }
                }
                Op::Transpose(x) => {
                    let (r, c) = (y.rows(), y.cols());
                    let dx = grad_slot(&mut g, *x, dy.len());
                    for i in 0..r {
                        for j in 0..c {
                            dx[j * r + i] += dy[i * c + j];
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let d = y.cols();
                    let gv = self.value(*gain).data().to_vec();
                    {
                        let dg = grad_slot(&mut g, *gain, d);
                        for (i, u) in dy.iter().enumerate() {
                            dg[i % d] += *u * xhat[i];
                        }
                    }
                    {
                        let db = grad_slot(&mut g, *bias, d);
                        for (i, u) in dy.iter().enumerate() {
                            db[i % d] += *u;
                        }
                    }
                    let dt = T::cast_from(d as f64);
                    let dx = grad_slot(&mut g, *x, dy.len());
                    let mut dh = vec![T::zero(); d];
                    for r in 0..y.rows() {
                        for c in 0..d {
                            dh[c] = dy[r * d + c] * gv[c];
                        }
                        let hr = &xhat[r * d..(r + 1) * d];
                        let s1: T = dh.iter().copied().sum();
                        let s2: T = dh.iter().zip(hr).map(|(a, b)| *a * *b).sum();
                        for c in 0..d {
                            dx[r * d + c] += inv_std[r] / dt * (dt * dh[c] - s1 - hr[c] * s2);
                        }
                    }
                }
                Op::Gather { src, idx } => {
                    let cols = y.cols();
                    let sl = self.value(*src).len();
                    let ds = grad_slot(&mut g, *src, sl);
                    for (o, &i) in idx.iter().enumerate() {
                        add_into(&mut ds[i * cols..(i + 1) * cols], &dy[o * cols..(o + 1) * cols]);
                    }
                }
                Op::Reshape(x) => add_into(grad_slot(&mut g, *x, dy.len()), &dy),
                Op::Sum(x) => {
                    let xl = self.value(*x).len();
                    let dx = grad_slot(&mut g, *x, xl);
                    dx.iter_mut().for_each(|d| *d += dy[0]);
                }
                Op::FakeQuant { x, lo, hi } => {
                    let xv = self.value(*x);
                    let dx = grad_slot(&mut g, *x, dy.len());
                    for ((d, &v), &u) in dx.iter_mut().zip(xv.data()).zip(&dy) {
                        if v >= *lo && v <= *hi {
                            *d += u;
                        }
                    }
                }
                Op::FakeQuantSym(x) => add_into(grad_slot(&mut g, *x, dy.len()), &dy),
                Op::FoPool { z, f, o, c } => {
                    let s = y.cols();
                    let n = y.rows();
                    let (zv, fv, ov) = (self.value(*z), self.value(*f), self.value(*o));
                    let mut dz = vec![T::zero(); n * s];
                    let mut df = vec![T::zero(); n * s];
                    let mut do_ = vec![T::zero(); n * s];
                    let mut carry = vec![T::zero(); s];
                    for t in (0..n).rev() {
                        for j in 0..s {
                            let i = t * s + j;
                            do_[i] = dy[i] * c[i];
                            let dc = dy[i] * ov.data()[i] + carry[j];
                            let prev = if t == 0 { T::zero() } else { c[i - s] };
                            let ft = fv.data()[i];
                            df[i] = dc * (prev - zv.data()[i]);
                            dz[i] = dc * (T::one() - ft);
                            carry[j] = dc * ft;
                        }
                    }
                    add_into(grad_slot(&mut g, *z, n * s), &dz);
                    add_into(grad_slot(&mut g, *f, n * s), &df);
                    add_into(grad_slot(&mut g, *o, n * s), &do_);
                }
            }
        }
        Ok(())
    }
}

fn grad_slot<T: Real>(g: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    g[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn reduce_broadcast<T: Real>(db: &mut [T], dy: &[T], kind: Broadcast, cols: usize, f: impl Fn(T) -> T) {
    match kind {
        Broadcast::Same => {
            for (d, u) in db.iter_mut().zip(dy) {
                *d += f(*u);
            }
        }
        Broadcast::Row => {
            for (i, u) in dy.iter().enumerate() {
                db[i % cols] += f(*u);
            }
        }
        Broadcast::Col => {
            for (i, u) in dy.iter().enumerate() {
                db[i / cols] += f(*u);
            }
        }
        Broadcast::Scalar => {
            db[0] += f(dy.iter().copied().sum());
        }
    }
}
