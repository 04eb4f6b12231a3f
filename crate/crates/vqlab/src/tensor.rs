//! Dense tensors with reverse-mode differentiation on a recording tape.
//!
//! The surface is deliberately small: matrix multiply, equal-shape (or
//! scalar-broadcast) elementwise arithmetic, leaky ReLU, sigmoid, row bias,
//! row gather, mean squared error, and an explicit stop-gradient marker.
//! That is enough for a patch-MLP autoencoder and the quantization losses
//! while keeping every operation finite-difference checkable.
//!
//! Values entering and leaving the tape are `f32`; arithmetic and gradient
//! accumulation on the tape run in `f64` so the finite-difference oracles in
//! the test suite resolve well below their tolerances. Forward results are
//! bit-identical across runs: reductions use a fixed accumulation order.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a previous backward call")]
    TapeConsumed,
    #[error("row index {index} out of range for {rows} rows")]
    RowIndex { index: usize, rows: usize },
    #[error("gradient check: function is not deterministic ({a} vs {b})")]
    NonDeterministic { a: f64, b: f64 },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    LeakyRelu { a: usize, slope: f64 },
    Sigmoid { a: usize },
    StopGrad,
    Mse { a: usize, b: usize },
    Sum { a: usize },
    AddRowBias { x: usize, bias: usize },
    GatherRows { src: usize, indices: Vec<u32> },
    GatherElems { src: usize, indices: Vec<u32> },
    RowNormalize { a: usize },
    StraightThrough { z: usize },
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Recording tape. One tape and its tensors form a single-threaded unit of
/// work; independent tapes may run concurrently on disjoint data.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn is_scalar(shape: &[usize]) -> bool {
    numel(shape) == 1
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

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, op_name: &'static str) -> Result<TensorId> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::StopGrad => false,
            Op::StraightThrough { z } => self.nodes[*z].needs_grad,
            Op::Matmul { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::Mse { a, b }
            | Op::AddRowBias { x: a, bias: b } => self.nodes[*a].needs_grad || self.nodes[*b].needs_grad,
            Op::Scale { a, .. }
            | Op::LeakyRelu { a, .. }
            | Op::Sigmoid { a }
            | Op::Sum { a }
            | Op::GatherRows { src: a, .. }
            | Op::GatherElems { src: a, .. }
            | Op::RowNormalize { a } => self.nodes[*a].needs_grad,
        };
        let id = self.nodes.len();
        self.nodes.push(Node {
            data,
            shape,
            requires_grad: false,
            needs_grad,
            grad: None,
            op,
        });
        Ok(TensorId(id))
    }

    /// Insert a leaf tensor. `requires_grad` leaves receive accumulated
    /// gradients on [`Tape::backward`].
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        if data.len() != numel(shape) {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            data,
            shape: shape.to_vec(),
            requires_grad,
            needs_grad: requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Ok(TensorId(id))
    }

    /// Leaf from `f32` storage (exact widening).
    pub fn leaf_f32(&mut self, data: &[f32], shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        self.leaf(data.iter().map(|&v| v as f64).collect(), shape, requires_grad)
    }

    pub fn scalar(&mut self, v: f64) -> Result<TensorId> {
        self.leaf(vec![v], &[1], false)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.node(id).data
    }

    pub fn value_f32(&self, id: TensorId) -> Vec<f32> {
        self.node(id).data.iter().map(|&v| v as f32).collect()
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        self.node(id).data[0]
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`]. `None` when
    /// the tensor does not require gradients (no buffer is ever allocated).
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    pub fn grad_f32(&self, id: TensorId) -> Option<Vec<f32>> {
        self.node(id).grad.as_ref().map(|g| g.iter().map(|&v| v as f32).collect())
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(&self.node(a).data, &self.node(b).data, m, k, n);
        self.push(out, vec![m, n], Op::Matmul { a: a.0, b: b.0 }, "matmul")
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = if sa == sb {
            sa.to_vec()
        } else if is_scalar(sb) {
            sa.to_vec()
        } else if is_scalar(sa) {
            sb.to_vec()
        } else {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        };
        let (da, db) = (&self.node(a).data, &self.node(b).data);
        let out: Vec<f64> = if da.len() == db.len() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if db.len() == 1 {
            da.iter().map(|&x| f(x, db[0])).collect()
        } else {
            db.iter().map(|&y| f(da[0], y)).collect()
        };
        self.push(out, out_shape, op, op_name)
    }

    /// Elementwise sum; one side may be a scalar.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    /// Multiply by a compile-time constant (no gradient into the constant).
    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.node(a).data.iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Scale { a: a.0, c }, "scale")
    }

    pub fn leaky_relu(&mut self, a: TensorId, slope: f64) -> Result<TensorId> {
        let out: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::LeakyRelu { a: a.0, slope }, "leaky_relu")
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.node(a).data.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Sigmoid { a: a.0 }, "sigmoid")
    }

    /// Forward identity whose backward contribution is zero. The output is
    /// bit-identical to the input.
    pub fn stop_gradient(&mut self, a: TensorId) -> Result<TensorId> {
        let out = self.node(a).data.clone();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::StopGrad, "stop_gradient")
    }

    /// Mean of squared differences. Gradient to `a` is `2(a-b)/count`.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (da, db) = (&self.node(a).data, &self.node(b).data);
        let mut acc = 0.0f64;
        for (&x, &y) in da.iter().zip(db) {
            let d = x - y;
            acc += d * d;
        }
        let v = acc / da.len() as f64;
        self.push(vec![v], vec![1], Op::Mse { a: a.0, b: b.0 }, "mse")
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let v: f64 = self.node(a).data.iter().sum();
        self.push(vec![v], vec![1], Op::Sum { a: a.0 }, "sum")
    }

    /// `x` is `m x n`, `bias` has length `n`; adds the bias to every row.
    pub fn add_row_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || numel(sb) != sx[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, n) = (sx[0], sx[1]);
        let (dx, db) = (&self.node(x).data, &self.node(bias).data);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                out.push(dx[r * n + c] + db[c]);
            }
        }
        self.push(out, vec![m, n], Op::AddRowBias { x: x.0, bias: bias.0 }, "add_row_bias")
    }

    /// `x @ w + bias` in one call.
    pub fn linear(&mut self, x: TensorId, w: TensorId, bias: Option<TensorId>) -> Result<TensorId> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    /// Select rows of a matrix. Backward scatter-adds into the source rows,
    /// accumulating across duplicate indices.
    pub fn gather_rows(&mut self, src: TensorId, indices: &[u32]) -> Result<TensorId> {
        let s = self.shape(src);
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            let i = i as usize;
            if i >= rows {
                return Err(TensorError::RowIndex { index: i, rows });
            }
            out.extend_from_slice(&self.node(src).data[i * cols..(i + 1) * cols]);
        }
        self.push(
            out,
            vec![indices.len(), cols],
            Op::GatherRows { src: src.0, indices: indices.to_vec() },
            "gather_rows",
        )
    }

    /// Select individual elements (used for patchify/unpatchify index maps).
    pub fn gather_elems(&mut self, src: TensorId, indices: &[u32], out_shape: &[usize]) -> Result<TensorId> {
        if indices.len() != numel(out_shape) {
            return Err(TensorError::LengthMismatch {
                len: indices.len(),
                shape: out_shape.to_vec(),
            });
        }
        let len = self.node(src).data.len();
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            let i = i as usize;
            if i >= len {
                return Err(TensorError::RowIndex { index: i, rows: len });
            }
            out.push(self.node(src).data[i]);
        }
        self.push(
            out,
            out_shape.to_vec(),
            Op::GatherElems { src: src.0, indices: indices.to_vec() },
            "gather_elems",
        )
    }

    /// Normalize each row to unit L2 norm. Rows with near-zero norm map to
    /// zero and receive zero gradient.
    pub fn row_normalize(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "row_normalize",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (s[0], s[1]);
        let da = &self.node(a).data;
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &da[r * n..(r + 1) * n];
            let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for c in 0..n {
                    out[r * n + c] = row[c] / norm;
                }
            }
        }
        self.push(out, vec![m, n], Op::RowNormalize { a: a.0 }, "row_normalize")
    }

    /// Straight-through estimator: forward takes `z_q`'s value bit-exactly,
    /// backward passes the incoming gradient to `z` unchanged. The path that
    /// produced `z_q` receives nothing through this op.
    pub fn straight_through(&mut self, z: TensorId, z_q: TensorId) -> Result<TensorId> {
        let (sz, sq) = (self.shape(z), self.shape(z_q));
        if sz != sq {
            return Err(TensorError::ShapeMismatch {
                op: "straight_through",
                lhs: sz.to_vec(),
                rhs: sq.to_vec(),
            });
        }
        let out = self.node(z_q).data.clone();
        let shape = sq.to_vec();
        self.push(out, shape, Op::StraightThrough { z: z.0 }, "straight_through")
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar loss. Every `requires_grad` leaf reachable
    /// from the loss ends up holding its accumulated gradient (zero-filled
    /// when a stop-gradient cuts the only path). Consumes the tape: a second
    /// call is an error.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if !is_scalar(self.shape(loss)) {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        for node in &mut self.nodes {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
        {
            let n = &mut self.nodes[loss.0];
            n.grad = Some(vec![1.0; 1]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = self.nodes[i].grad.take() else { continue };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &gout);
            // keep gradients on leaves for the caller
            if matches!(self.nodes[i].op, Op::Leaf) || i == loss.0 {
                self.nodes[i].grad = Some(gout);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: usize, f: impl FnOnce(&mut Vec<f64>)) {
        if !self.nodes[target].needs_grad {
            return;
        }
        if self.nodes[target].grad.is_none() {
            let len = self.nodes[target].data.len();
            self.nodes[target].grad = Some(vec![0.0; len]);
        }
        let mut g = self.nodes[target].grad.take().unwrap();
        f(&mut g);
        self.nodes[target].grad = Some(g);
    }

    fn propagate(&mut self, out: usize, op: &Op, gout: &[f64]) {
        match *op {
            Op::Leaf | Op::StopGrad => {}
            Op::Matmul { a, b } => {
                let m = self.nodes[out].shape[0];
                let n = self.nodes[out].shape[1];
                let k = self.nodes[a].shape[1];
                let da = {
                    // dA = dC . B^T, as row dot products so both sides stream
                    let bd = &self.nodes[b].data;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        let darow = &mut da[i * k..(i + 1) * k];
                        for (p, dv) in darow.iter_mut().enumerate() {
                            let brow = &bd[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for (g, bv) in grow.iter().zip(brow) {
                                acc += g * bv;
                            }
                            *dv = acc;
                        }
                    }
                    da
                };
                let db = {
                    // dB = A^T . dC
                    let ad = &self.nodes[a].data;
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * gout[i * n + j];
                            }
                        }
                    }
                    db
                };
                self.accumulate(a, |g| add_assign(g, &da));
                self.accumulate(b, |g| add_assign(g, &db));
            }
            Op::Add { a, b } => {
                self.accumulate_broadcast(a, gout, 1.0);
                self.accumulate_broadcast(b, gout, 1.0);
            }
            Op::Sub { a, b } => {
                self.accumulate_broadcast(a, gout, 1.0);
                self.accumulate_broadcast(b, gout, -1.0);
            }
            Op::Mul { a, b } => {
                let bd = self.nodes[b].data.clone();
                let ad = self.nodes[a].data.clone();
                let ga = mul_broadcast(gout, &bd);
                let gb = mul_broadcast(gout, &ad);
                self.accumulate_broadcast(a, &ga, 1.0);
                self.accumulate_broadcast(b, &gb, 1.0);
            }
            Op::Scale { a, c } => {
                self.accumulate(a, |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += c * go;
                    }
                });
            }
            Op::LeakyRelu { a, slope } => {
                let xs = self.nodes[a].data.clone();
                self.accumulate(a, |g| {
                    for ((gi, &go), &x) in g.iter_mut().zip(gout).zip(&xs) {
                        *gi += go * if x > 0.0 { 1.0 } else { slope };
                    }
                });
            }
            Op::Sigmoid { a } => {
                let ys = self.nodes[out].data.clone();
                self.accumulate(a, |g| {
                    for ((gi, &go), &y) in g.iter_mut().zip(gout).zip(&ys) {
                        *gi += go * y * (1.0 - y);
                    }
                });
            }
            Op::Mse { a, b } => {
                let ad = self.nodes[a].data.clone();
                let bd = self.nodes[b].data.clone();
                let n = ad.len() as f64;
                let g0 = gout[0];
                self.accumulate(a, |g| {
                    for ((gi, &x), &y) in g.iter_mut().zip(&ad).zip(&bd) {
                        *gi += g0 * 2.0 * (x - y) / n;
                    }
                });
                self.accumulate(b, |g| {
                    for ((gi, &x), &y) in g.iter_mut().zip(&ad).zip(&bd) {
                        *gi -= g0 * 2.0 * (x - y) / n;
                    }
                });
            }
            Op::Sum { a } => {
                let g0 = gout[0];
                self.accumulate(a, |g| {
                    for gi in g.iter_mut() {
                        *gi += g0;
                    }
                });
            }
            Op::AddRowBias { x, bias } => {
                let n = self.nodes[out].shape[1];
                self.accumulate(x, |g| add_assign(g, gout));
                self.accumulate(bias, |g| {
                    for (r, chunk) in gout.chunks_exact(n).enumerate() {
                        let _ = r;
                        for (gi, &go) in g.iter_mut().zip(chunk) {
                            *gi += go;
                        }
                    }
                });
            }
            Op::GatherRows { src, ref indices } => {
                let cols = self.nodes[out].shape[1];
                let idx = indices.clone();
                self.accumulate(src, |g| {
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut g[i as usize * cols..(i as usize + 1) * cols];
                        for (gi, &go) in dst.iter_mut().zip(&gout[r * cols..(r + 1) * cols]) {
                            *gi += go;
                        }
                    }
                });
            }
            Op::GatherElems { src, ref indices } => {
                let idx = indices.clone();
                self.accumulate(src, |g| {
                    for (o, &i) in idx.iter().enumerate() {
                        g[i as usize] += gout[o];
                    }
                });
            }
            Op::RowNormalize { a } => {
                let (m, n) = (self.nodes[out].shape[0], self.nodes[out].shape[1]);
                let xs = self.nodes[a].data.clone();
                let ys = self.nodes[out].data.clone();
                self.accumulate(a, |g| {
                    for r in 0..m {
                        let x = &xs[r * n..(r + 1) * n];
                        let u = &ys[r * n..(r + 1) * n];
                        let go = &gout[r * n..(r + 1) * n];
                        let norm = x.iter().map(|&v| v * v).sum::<f64>().sqrt();
                        if norm <= 1e-12 {
                            continue;
                        }
                        let dot: f64 = go.iter().zip(u).map(|(&gi, &ui)| gi * ui).sum();
                        for c in 0..n {
                            g[r * n + c] += (go[c] - dot * u[c]) / norm;
                        }
                    }
                });
            }
            Op::StraightThrough { z } => {
                self.accumulate(z, |g| add_assign(g, gout));
            }
        }
    }

    /// Accumulate `sign * gout` into a target that may be a scalar broadcast
    /// against a larger output (scalar side receives the reduced sum).
    fn accumulate_broadcast(&mut self, target: usize, gout: &[f64], sign: f64) {
        let tlen = self.nodes[target].data.len();
        if tlen == gout.len() {
            self.accumulate(target, |g| {
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += sign * go;
                }
            });
        } else {
            debug_assert_eq!(tlen, 1);
            let s: f64 = gout.iter().sum();
            self.accumulate(target, |g| g[0] += sign * s);
        }
    }
}

fn add_assign(g: &mut [f64], src: &[f64]) {
    for (gi, &s) in g.iter_mut().zip(src) {
        *gi += s;
    }
}

/// Elementwise product where one side may be a scalar; result has the length
/// of the longer operand.
fn mul_broadcast(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.len() == b.len() {
        a.iter().zip(b).map(|(&x, &y)| x * y).collect()
    } else if b.len() == 1 {
        a.iter().map(|&x| x * b[0]).collect()
    } else {
        debug_assert_eq!(a.len(), 1);
        b.iter().map(|&y| a[0] * y).collect()
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// ---- gradient checking ------------------------------------------------

/// Compare the tape's reverse-mode gradient of a scalar function against
/// central finite differences, returning the maximum relative error over all
/// coordinates of all inputs.
///
/// The function is evaluated twice at the base point first; any value
/// difference means it is not deterministic and the check aborts. Functions
/// containing `stop_gradient` on the probed path are out of scope: reverse
/// mode reports zero there while finite differences see the forward value
/// move, so the two sides disagree by construction.
pub fn gradient_check_multi<F>(f: &F, inputs: &[(&[f64], &[usize])], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let eval = |points: &[Vec<f64>], with_grad: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = points
            .iter()
            .zip(inputs)
            .map(|(p, (_, shape))| tape.leaf(p.clone(), shape, with_grad))
            .collect::<Result<_>>()?;
        let loss = f(&mut tape, &ids)?;
        if !is_scalar(tape.shape(loss)) {
            return Err(TensorError::NonScalarLoss(tape.shape(loss).to_vec()));
        }
        let v = tape.scalar_value(loss);
        if !with_grad {
            return Ok((v, None));
        }
        tape.backward(loss)?;
        let grads = ids
            .iter()
            .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(id).len()]))
            .collect();
        Ok((v, Some(grads)))
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|(d, _)| d.to_vec()).collect();
    let (v0, grads) = eval(&base, true)?;
    let (v1, _) = eval(&base, false)?;
    if v0 != v1 {
        return Err(TensorError::NonDeterministic { a: v0, b: v1 });
    }
    let grads = grads.unwrap();

    let mut max_rel = 0.0f64;
    for (ti, (data, _)) in inputs.iter().enumerate() {
        for ci in 0..data.len() {
            let mut plus = base.clone();
            plus[ti][ci] += eps;
            let (fp, _) = eval(&plus, false)?;
            let mut minus = base.clone();
            minus[ti][ci] -= eps;
            let (fm, _) = eval(&minus, false)?;
            let fd = (fp - fm) / (2.0 * eps);
            let an = grads[ti][ci];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Single-input convenience wrapper around [`gradient_check_multi`].
pub fn gradient_check<F>(f: &F, x: &[f64], shape: &[usize], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    gradient_check_multi(&|tape: &mut Tape, ids: &[TensorId]| f(tape, ids[0]), &[(x, shape)], eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i2 = t.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2], false).unwrap();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], false).unwrap();
        let c = t.matmul(i2, a).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_1x2_2x1() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0], &[1, 2], false).unwrap();
        let b = t.leaf(vec![3.0, 4.0], &[2, 1], false).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.leaf(vec![0.0; 6], &[2, 3], false).unwrap();
        let b = t.leaf(vec![0.0; 4], &[2, 2], false).unwrap();
        assert!(matches!(t.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let a = rand_vec(&mut rng, 20);
        let b = rand_vec(&mut rng, 15);
        let err = gradient_check_multi(
            &|t: &mut Tape, ids: &[TensorId]| {
                let c = t.matmul(ids[0], ids[1])?;
                t.sum(c)
            },
            &[(&a, &[4, 5]), (&b, &[5, 3])],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "matmul fd error {err}");
    }

    #[test]
    fn elementwise_add_and_leaky_relu() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0], &[2], false).unwrap();
        let b = t.leaf(vec![3.0, 4.0], &[2], false).unwrap();
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c), &[4.0, 6.0]);
        let x = t.leaf(vec![-1.0], &[1], false).unwrap();
        let y = t.leaky_relu(x, 0.2).unwrap();
        assert!((t.value(y)[0] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn mul_gradient_is_product_rule() {
        let mut t = Tape::new();
        let a = t.leaf(vec![2.0], &[1], true).unwrap();
        let b = t.leaf(vec![3.0], &[1], true).unwrap();
        let c = t.mul(a, b).unwrap();
        let loss = t.sum(c).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[3.0]);
        assert_eq!(t.grad(b).unwrap(), &[2.0]);
    }

    #[test]
    fn stop_gradient_forward_is_identity_backward_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        let sg = t.stop_gradient(x).unwrap();
        assert_eq!(t.value(sg), t.value(x));

        // d/dx sum(sg(x) * x) = sg(x) = x
        let prod = t.mul(sg, x).unwrap();
        let loss = t.sum(prod).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 2.0]);

        // d/dx sum(sg(x)) = 0
        let mut t2 = Tape::new();
        let x2 = t2.leaf(vec![2.0], &[1], true).unwrap();
        let sg2 = t2.stop_gradient(x2).unwrap();
        let loss2 = t2.sum(sg2).unwrap();
        t2.backward(loss2).unwrap();
        assert_eq!(t2.grad(x2).unwrap(), &[0.0]);
    }

    #[test]
    fn mse_values_and_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.5, -0.25], &[2], false).unwrap();
        let same = t.mse(x, x).unwrap();
        assert_eq!(t.scalar_value(same), 0.0);
        let a = t.leaf(vec![0.0, 0.0], &[2], false).unwrap();
        let b = t.leaf(vec![1.0, 1.0], &[2], false).unwrap();
        let one = t.mse(a, b).unwrap();
        assert_eq!(t.scalar_value(one), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = rand_vec(&mut rng, 12);
        let v = rand_vec(&mut rng, 12);
        let err = gradient_check_multi(
            &|t: &mut Tape, ids: &[TensorId]| t.mse(ids[0], ids[1]),
            &[(&u, &[3, 4]), (&v, &[3, 4])],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "mse fd error {err}");
    }

    #[test]
    fn backward_accumulates_and_validates() {
        // loss = sum(w * x) => w.grad = x
        let mut t = Tape::new();
        let w = t.leaf(vec![0.3, -0.7], &[2], true).unwrap();
        let x = t.leaf(vec![2.0, 5.0], &[2], false).unwrap();
        let p = t.mul(w, x).unwrap();
        let loss = t.sum(p).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[2.0, 5.0]);
        assert!(matches!(t.backward(loss), Err(TensorError::TapeConsumed)));

        // two uses of the same leaf accumulate: loss = w + w
        let mut t2 = Tape::new();
        let w2 = t2.leaf(vec![1.5], &[1], true).unwrap();
        let s = t2.add(w2, w2).unwrap();
        let loss2 = t2.sum(s).unwrap();
        t2.backward(loss2).unwrap();
        assert_eq!(t2.grad(w2).unwrap(), &[2.0]);

        // non-scalar loss rejected
        let mut t3 = Tape::new();
        let v = t3.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        assert!(matches!(t3.backward(v), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut t = Tape::new();
        assert!(matches!(
            t.leaf(vec![f64::NAN], &[1], false),
            Err(TensorError::NonFinite { .. })
        ));
        let big = t.leaf(vec![1e308], &[1], false).unwrap();
        assert!(matches!(t.mul(big, big), Err(TensorError::NonFinite { op: "mul" })));
    }

    #[test]
    fn gather_rows_scatters_gradient() {
        let mut t = Tape::new();
        let m = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2], true).unwrap();
        let g = t.gather_rows(m, &[2, 0, 2]).unwrap();
        assert_eq!(t.value(g), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = t.sum(g).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(m).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);

        let mut t2 = Tape::new();
        let m2 = t2.leaf(vec![0.0; 4], &[2, 2], false).unwrap();
        assert!(matches!(t2.gather_rows(m2, &[2]), Err(TensorError::RowIndex { .. })));
    }

    #[test]
    fn straight_through_routes_gradient_to_z_only() {
        let mut t = Tape::new();
        let z = t.leaf(vec![0.1, 0.2], &[2], true).unwrap();
        let zq_src = t.leaf(vec![1.0, -1.0], &[2], true).unwrap();
        let zq = t.scale(zq_src, 2.0).unwrap();
        let st = t.straight_through(z, zq).unwrap();
        assert_eq!(t.value(st), &[2.0, -2.0]); // bit-exact copy of z_q
        let loss = t.sum(st).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(z).unwrap(), &[1.0, 1.0]);
        assert_eq!(t.grad(zq_src).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn row_normalize_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_vec(&mut rng, 12);
        let err = gradient_check(
            &|t: &mut Tape, id: TensorId| {
                let n = t.row_normalize(id)?;
                let two = t.scale(n, 2.0)?;
                t.sum(two)
            },
            &x,
            &[3, 4],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "row_normalize fd error {err}");
    }

    #[test]
    fn gradient_check_quadratic_is_nearly_exact() {
        // f = sum(x^2): analytic gradient [2, 4, 6]
        let err = gradient_check(
            &|t: &mut Tape, id: TensorId| {
                let sq = t.mul(id, id)?;
                t.sum(sq)
            },
            &[1.0, 2.0, 3.0],
            &[3],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "quadratic fd error {err}");
    }

    #[test]
    fn gradient_check_linear_regression_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_vec(&mut rng, 12);
        let x = rand_vec(&mut rng, 8);
        let y = rand_vec(&mut rng, 6);
        let err = gradient_check_multi(
            &|t: &mut Tape, ids: &[TensorId]| {
                let pred = t.matmul(ids[1], ids[0])?;
                let target = t.leaf(y.clone(), &[2, 3], false)?;
                t.mse(pred, target)
            },
            &[(&w, &[4, 3]), (&x, &[2, 4])],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "mse(Wx, y) fd error {err}");
    }

    #[test]
    fn gradient_check_disagrees_across_stop_gradient() {
        // Documented behavior: finite differences see through sg, reverse
        // mode does not. The checker reports the discrepancy; callers must
        // keep sg off the probed path.
        let err = gradient_check(
            &|t: &mut Tape, id: TensorId| {
                let sg = t.stop_gradient(id)?;
                t.sum(sg)
            },
            &[0.5, -0.5],
            &[2],
            1e-3,
        )
        .unwrap();
        assert!(err > 0.5, "sg path should show full disagreement, got {err}");
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = rand_vec(&mut rng, 30);
        let b = rand_vec(&mut rng, 42);
        let run = || {
            let mut t = Tape::new();
            let ta = t.leaf(a.clone(), &[5, 6], false).unwrap();
            let tb = t.leaf(b.clone(), &[6, 7], false).unwrap();
            let c = t.matmul(ta, tb).unwrap();
            let s = t.sigmoid(c).unwrap();
            t.value(s).to_vec()
        };
        assert_eq!(run(), run());
    }
}
