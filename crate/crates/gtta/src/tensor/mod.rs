//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A `Tape` records every operation of a forward pass (define-by-run); `backward`
//! replays the recording in reverse and accumulates gradients into every node that
//! requires them. Tensors are rank 1 or 2, stored row-major in double precision.

mod adam;
mod checkpoint;
mod gradcheck;
mod param;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, load_into_params, save_checkpoint, Checkpoint, TensorEntry};
pub use gradcheck::grad_check;
pub use param::Param;

use crate::error::TensorError;

pub type TResult<T> = std::result::Result<T, TensorError>;

/// Handle to a node on a `Tape`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Cross-entropy target: a dense distribution per row, or one class index per row.
pub enum CeTarget<'a> {
    Probs(&'a [f64]),
    Indices(&'a [usize]),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Reshape { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
    Relu { x: usize },
    LeakyRelu { x: usize, alpha: f64 },
    Elu { x: usize },
    Sigmoid { x: usize },
    Exp { x: usize },
    Log { x: usize },
    Recip { x: usize },
    Clamp { x: usize, lo: f64, hi: f64 },
    Softmax { x: usize, axis: usize },
    Reduce { kind: ReduceKind, x: usize, axis: Option<usize> },
    L2Normalize { x: usize, axis: usize, eps: f64 },
    Entropy { p: usize },
    CrossEntropy { logits: usize, targets: Vec<f64> },
    AddRowBroadcast { m: usize, row: usize },
    MulColBroadcast { m: usize, col: usize },
    StackRows { xs: Vec<usize> },
    GatherRows { x: usize, idx: Vec<usize> },
}

/// Recording of one forward pass. Node storage is struct-of-arrays so backward can
/// read values while writing gradients.
#[derive(Default)]
pub struct Tape {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    ops: Vec<Op>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn rank2(shape: &[usize]) -> TResult<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::ShapeMismatch(format!(
            "expected rank-2 tensor, got shape {other:?}"
        ))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        self.values[id.0][0]
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires: bool, op: Op) -> TensorId {
        debug_assert_eq!(numel(&shape), values.len());
        self.shapes.push(shape);
        self.values.push(values);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        TensorId(self.ops.len() - 1)
    }

    fn req(&self, id: TensorId) -> bool {
        self.requires[id.0]
    }

    /// Create a leaf tensor. Registered for gradient accumulation iff `requires_grad`.
    pub fn tensor(
        &mut self,
        shape: &[usize],
        values: Vec<f64>,
        requires_grad: bool,
    ) -> TResult<TensorId> {
        if numel(shape) != values.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {:?} holds {} elements but {} values were given",
                shape,
                numel(shape),
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(format!("leaf value {bad}")));
        }
        Ok(self.push(shape.to_vec(), values, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> TResult<TensorId> {
        self.tensor(shape, values, false)
    }

    pub fn scalar(&mut self, v: f64) -> TResult<TensorId> {
        self.tensor(&[1], vec![v], false)
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TResult<TensorId> {
        let (m, k) = rank2(self.shape(a))?;
        let (k2, n) = rank2(self.shape(b))?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul inner dims disagree: {m}x{k} vs {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        acc_ab(&mut out, &self.values[a.0], &self.values[b.0], m, k, n);
        let req = self.req(a) || self.req(b);
        Ok(self.push(vec![m, n], out, req, Op::Matmul { a: a.0, b: b.0 }))
    }

    pub fn transpose(&mut self, x: TensorId) -> TResult<TensorId> {
        let (r, c) = rank2(self.shape(x))?;
        let v = &self.values[x.0];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let req = self.req(x);
        Ok(self.push(vec![c, r], out, req, Op::Transpose { x: x.0 }))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> TResult<TensorId> {
        if numel(shape) != self.values[x.0].len() {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot reshape {:?} to {:?}",
                self.shape(x),
                shape
            )));
        }
        let v = self.values[x.0].clone();
        let req = self.req(x);
        Ok(self.push(shape.to_vec(), v, req, Op::Reshape { x: x.0 }))
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> TResult<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch(format!(
                "elementwise operands differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shapes[a.0].clone();
        let req = self.req(a) || self.req(b);
        Ok(self.push(shape, out, req, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TResult<TensorId> {
        self.binary(a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TResult<TensorId> {
        self.binary(a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TResult<TensorId> {
        self.binary(a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    fn unary(&mut self, x: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let out: Vec<f64> = self.values[x.0].iter().map(|&v| f(v)).collect();
        let shape = self.shapes[x.0].clone();
        let req = self.req(x);
        self.push(shape, out, req, op)
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        self.unary(x, |v| v * c, Op::Scale { x: x.0, c })
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        self.unary(x, |v| v + c, Op::AddScalar { x: x.0 })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.max(0.0), Op::Relu { x: x.0 })
    }

    pub fn leaky_relu(&mut self, x: TensorId, alpha: f64) -> TensorId {
        self.unary(
            x,
            |v| if v > 0.0 { v } else { alpha * v },
            Op::LeakyRelu { x: x.0, alpha },
        )
    }

    pub fn elu(&mut self, x: TensorId) -> TensorId {
        self.unary(
            x,
            |v| if v > 0.0 { v } else { v.exp() - 1.0 },
            Op::Elu { x: x.0 },
        )
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(x, sigmoid_scalar, Op::Sigmoid { x: x.0 })
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f64::exp, Op::Exp { x: x.0 })
    }

    pub fn log(&mut self, x: TensorId) -> TResult<TensorId> {
        if let Some(bad) = self.values[x.0].iter().find(|v| **v <= 0.0) {
            return Err(TensorError::DomainError(format!("log of {bad}")));
        }
        Ok(self.unary(x, f64::ln, Op::Log { x: x.0 }))
    }

    pub fn recip(&mut self, x: TensorId) -> TResult<TensorId> {
        if let Some(bad) = self.values[x.0].iter().find(|v| v.abs() < 1e-300) {
            return Err(TensorError::DomainError(format!("reciprocal of {bad}")));
        }
        Ok(self.unary(x, |v| 1.0 / v, Op::Recip { x: x.0 }))
    }

    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> TResult<TensorId> {
        if lo > hi {
            return Err(TensorError::DomainError(format!(
                "clamp bounds inverted: [{lo}, {hi}]"
            )));
        }
        Ok(self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x: x.0, lo, hi }))
    }

    // ── axis-wise ────────────────────────────────────────────────────

    fn check_axis(&self, id: TensorId, axis: usize) -> TResult<()> {
        let rank = self.shape(id).len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis`; each slice sums to 1.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> TResult<TensorId> {
        self.check_axis(x, axis)?;
        let shape = self.shapes[x.0].clone();
        let mut out = self.values[x.0].clone();
        for_each_slice_mut(&mut out, &shape, axis, |slice| {
            softmax_in_place(slice);
        });
        let req = self.req(x);
        Ok(self.push(shape, out, req, Op::Softmax { x: x.0, axis }))
    }

    pub fn reduce(&mut self, kind: ReduceKind, x: TensorId, axis: Option<usize>) -> TResult<TensorId> {
        if let Some(a) = axis {
            self.check_axis(x, a)?;
        }
        let shape = self.shapes[x.0].clone();
        let v = &self.values[x.0];
        let (out_shape, out) = match axis {
            None => {
                let r = match kind {
                    ReduceKind::Sum => v.iter().sum(),
                    ReduceKind::Mean => v.iter().sum::<f64>() / v.len() as f64,
                    ReduceKind::Max => fold_max(v),
                };
                (vec![1], vec![r])
            }
            Some(a) => {
                let (slices, slice_len) = slice_layout(&shape, a);
                let mut out = Vec::with_capacity(slices);
                for s in 0..slices {
                    let iter = slice_iter(v, &shape, a, s);
                    let r = match kind {
                        ReduceKind::Sum => iter.sum(),
                        ReduceKind::Mean => iter.sum::<f64>() / slice_len as f64,
                        ReduceKind::Max => {
                            let vals: Vec<f64> = iter.collect();
                            fold_max(&vals)
                        }
                    };
                    out.push(r);
                }
                let out_shape = if shape.len() == 1 {
                    vec![1]
                } else {
                    vec![slices]
                };
                (out_shape, out)
            }
        };
        let req = self.req(x);
        Ok(self.push(out_shape, out, req, Op::Reduce { kind, x: x.0, axis }))
    }

    pub fn reduce_sum(&mut self, x: TensorId, axis: Option<usize>) -> TResult<TensorId> {
        self.reduce(ReduceKind::Sum, x, axis)
    }

    pub fn reduce_mean(&mut self, x: TensorId, axis: Option<usize>) -> TResult<TensorId> {
        self.reduce(ReduceKind::Mean, x, axis)
    }

    pub fn reduce_max(&mut self, x: TensorId, axis: Option<usize>) -> TResult<TensorId> {
        self.reduce(ReduceKind::Max, x, axis)
    }

    /// Normalize each slice along `axis` to unit L2 norm. Slices with norm < `eps`
    /// pass through unchanged; their indices are returned as a flag list.
    pub fn l2_normalize(
        &mut self,
        x: TensorId,
        axis: usize,
        eps: f64,
    ) -> TResult<(TensorId, Vec<usize>)> {
        self.check_axis(x, axis)?;
        let shape = self.shapes[x.0].clone();
        let mut out = self.values[x.0].clone();
        let mut flagged = Vec::new();
        let mut slice_no = 0usize;
        for_each_slice_mut(&mut out, &shape, axis, |slice| {
            let norm = slice.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < eps {
                flagged.push(slice_no);
            } else {
                for v in slice.iter_mut() {
                    *v /= norm;
                }
            }
            slice_no += 1;
        });
        let req = self.req(x);
        let id = self.push(shape, out, req, Op::L2Normalize { x: x.0, axis, eps });
        Ok((id, flagged))
    }

    // ── probability ops ──────────────────────────────────────────────

    /// Per-row Shannon entropy (natural log) with 0·log 0 := 0.
    /// Accepts a single distribution `[K]` or a batch `[B, K]`.
    pub fn entropy(&mut self, p: TensorId) -> TResult<TensorId> {
        let (b, k) = dist_dims(self.shape(p))?;
        validate_rows(self.values(p), b, k, 1e-6)?;
        let v = &self.values[p.0];
        let out: Vec<f64> = (0..b).map(|i| entropy_slice(&v[i * k..(i + 1) * k])).collect();
        let req = self.req(p);
        Ok(self.push(vec![b], out, req, Op::Entropy { p: p.0 }))
    }

    /// Mean over the batch of −Σₖ t_k · log softmax(logits)_k, log-sum-exp stabilized.
    pub fn cross_entropy(&mut self, logits: TensorId, target: CeTarget) -> TResult<TensorId> {
        let (b, k) = dist_dims(self.shape(logits))?;
        let dense = match target {
            CeTarget::Probs(t) => {
                if t.len() != b * k {
                    return Err(TensorError::ShapeMismatch(format!(
                        "target length {} does not match logits {}x{}",
                        t.len(),
                        b,
                        k
                    )));
                }
                validate_rows(t, b, k, 1e-9)?;
                t.to_vec()
            }
            CeTarget::Indices(idx) => {
                if idx.len() != b {
                    return Err(TensorError::ShapeMismatch(format!(
                        "expected {b} class indices, got {}",
                        idx.len()
                    )));
                }
                let mut dense = vec![0.0; b * k];
                for (i, &c) in idx.iter().enumerate() {
                    if c >= k {
                        return Err(TensorError::IndexOutOfRange { index: c, classes: k });
                    }
                    dense[i * k + c] = 1.0;
                }
                dense
            }
        };
        let v = &self.values[logits.0];
        let mut total = 0.0;
        for i in 0..b {
            let row = &v[i * k..(i + 1) * k];
            let lse = log_sum_exp(row);
            let dot: f64 = row
                .iter()
                .zip(&dense[i * k..(i + 1) * k])
                .map(|(&l, &t)| l * t)
                .sum();
            total += lse - dot;
        }
        let req = self.req(logits);
        Ok(self.push(
            vec![1],
            vec![total / b as f64],
            req,
            Op::CrossEntropy { logits: logits.0, targets: dense },
        ))
    }

    /// Per-row KL(p‖q). Both arguments are clamped to [eps, 1] and renormalized
    /// first, so exact zeros stay finite. Result is ≥ −1e-9 and 0 when p == q.
    pub fn kl_divergence(&mut self, p: TensorId, q: TensorId, eps: f64) -> TResult<TensorId> {
        let (bp, kp) = dist_dims(self.shape(p))?;
        let (bq, kq) = dist_dims(self.shape(q))?;
        if (bp, kp) != (bq, kq) {
            return Err(TensorError::ShapeMismatch(format!(
                "kl operands differ: {bp}x{kp} vs {bq}x{kq}"
            )));
        }
        validate_rows(self.values(p), bp, kp, 1e-6)?;
        validate_rows(self.values(q), bq, kq, 1e-6)?;
        let p2 = self.reshape(p, &[bp, kp])?;
        let q2 = self.reshape(q, &[bp, kp])?;
        let pn = self.clamp_renorm(p2, eps)?;
        let qn = self.clamp_renorm(q2, eps)?;
        let lp = self.log(pn)?;
        let lq = self.log(qn)?;
        let diff = self.sub(lp, lq)?;
        let terms = self.mul(pn, diff)?;
        self.reduce_sum(terms, Some(1))
    }

    fn clamp_renorm(&mut self, x: TensorId, eps: f64) -> TResult<TensorId> {
        let c = self.clamp(x, eps, 1.0)?;
        let sums = self.reduce_sum(c, Some(1))?;
        let inv = self.recip(sums)?;
        self.mul_col_broadcast(c, inv)
    }

    // ── broadcast helpers ────────────────────────────────────────────

    /// `m[i, j] + row[j]` — bias addition.
    pub fn add_row_broadcast(&mut self, m: TensorId, row: TensorId) -> TResult<TensorId> {
        let (r, c) = rank2(self.shape(m))?;
        if numel(self.shape(row)) != c {
            return Err(TensorError::ShapeMismatch(format!(
                "row broadcast: matrix {r}x{c} vs row of {}",
                numel(self.shape(row))
            )));
        }
        let mv = &self.values[m.0];
        let rv = &self.values[row.0];
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(mv[i * c + j] + rv[j]);
            }
        }
        let req = self.req(m) || self.req(row);
        Ok(self.push(vec![r, c], out, req, Op::AddRowBroadcast { m: m.0, row: row.0 }))
    }

    /// `m[i, j] * col[i]` — per-row gating.
    pub fn mul_col_broadcast(&mut self, m: TensorId, col: TensorId) -> TResult<TensorId> {
        let (r, c) = rank2(self.shape(m))?;
        if numel(self.shape(col)) != r {
            return Err(TensorError::ShapeMismatch(format!(
                "col broadcast: matrix {r}x{c} vs col of {}",
                numel(self.shape(col))
            )));
        }
        let mv = &self.values[m.0];
        let cv = &self.values[col.0];
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(mv[i * c + j] * cv[i]);
            }
        }
        let req = self.req(m) || self.req(col);
        Ok(self.push(vec![r, c], out, req, Op::MulColBroadcast { m: m.0, col: col.0 }))
    }

    /// Stack row vectors (shape `[c]` or `[1, c]`) into a `[B, c]` matrix.
    pub fn stack_rows(&mut self, xs: &[TensorId]) -> TResult<TensorId> {
        if xs.is_empty() {
            return Err(TensorError::ShapeMismatch("stack of zero rows".into()));
        }
        let c = numel(self.shape(xs[0]));
        let mut out = Vec::with_capacity(xs.len() * c);
        let mut req = false;
        for &x in xs {
            if numel(self.shape(x)) != c {
                return Err(TensorError::ShapeMismatch(format!(
                    "stack rows of unequal width: {} vs {}",
                    numel(self.shape(x)),
                    c
                )));
            }
            out.extend_from_slice(&self.values[x.0]);
            req |= self.req(x);
        }
        Ok(self.push(
            vec![xs.len(), c],
            out,
            req,
            Op::StackRows { xs: xs.iter().map(|t| t.0).collect() },
        ))
    }

    /// Select rows of a matrix by index (repeats allowed).
    pub fn gather_rows(&mut self, x: TensorId, idx: &[usize]) -> TResult<TensorId> {
        let (r, c) = rank2(self.shape(x))?;
        let v = &self.values[x.0];
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::IndexOutOfRange { index: i, classes: r });
            }
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let req = self.req(x);
        Ok(self.push(
            vec![idx.len(), c],
            out,
            req,
            Op::GatherRows { x: x.0, idx: idx.to_vec() },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates `grad` for every tensor with
    /// `requires_grad` reachable from the loss; contributions accumulate additively.
    pub fn backward(&mut self, loss: TensorId) -> TResult<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        if !self.req(loss) {
            return Err(TensorError::DetachedTensor);
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.requires[id] {
                continue;
            }
            let Some(gout) = self.grads[id].take() else {
                continue;
            };
            backward_op(
                &self.ops[id],
                id,
                &gout,
                &self.shapes,
                &self.values,
                &self.requires,
                &mut self.grads,
            );
            self.grads[id] = Some(gout);
        }
        Ok(())
    }
}

fn ensure_grad<'a>(grads: &'a mut [Option<Vec<f64>>], id: usize, len: usize) -> &'a mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

#[allow(clippy::too_many_arguments)]
fn backward_op(
    op: &Op,
    out_id: usize,
    gout: &[f64],
    shapes: &[Vec<usize>],
    values: &[Vec<f64>],
    requires: &[bool],
    grads: &mut [Option<Vec<f64>>],
) {
    match op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = (shapes[*a][0], shapes[*a][1]);
            let n = shapes[*b][1];
            if requires[*a] {
                let g = ensure_grad(grads, *a, m * k);
                acc_abt(g, gout, &values[*b], m, n, k);
            }
            if requires[*b] {
                let g = ensure_grad(grads, *b, k * n);
                acc_atb(g, &values[*a], gout, m, k, n);
            }
        }
        Op::Transpose { x } => {
            if requires[*x] {
                let (r, c) = (shapes[*x][0], shapes[*x][1]);
                let g = ensure_grad(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] += gout[j * r + i];
                    }
                }
            }
        }
        Op::Reshape { x } => {
            if requires[*x] {
                let g = ensure_grad(grads, *x, gout.len());
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += go;
                }
            }
        }
        Op::Add { a, b } => {
            for id in [a, b] {
                if requires[*id] {
                    let g = ensure_grad(grads, *id, gout.len());
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                }
            }
        }
        Op::Sub { a, b } => {
            if requires[*a] {
                let g = ensure_grad(grads, *a, gout.len());
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += go;
                }
            }
            if requires[*b] {
                let g = ensure_grad(grads, *b, gout.len());
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi -= go;
                }
            }
        }
        Op::Mul { a, b } => {
            if requires[*a] {
                let g = ensure_grad(grads, *a, gout.len());
                for i in 0..gout.len() {
                    g[i] += gout[i] * values[*b][i];
                }
            }
            if requires[*b] {
                let g = ensure_grad(grads, *b, gout.len());
                for i in 0..gout.len() {
                    g[i] += gout[i] * values[*a][i];
                }
            }
        }
        Op::Scale { x, c } => {
            if requires[*x] {
                let g = ensure_grad(grads, *x, gout.len());
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += c * go;
                }
            }
        }
        Op::AddScalar { x } => {
            if requires[*x] {
                let g = ensure_grad(grads, *x, gout.len());
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += go;
                }
            }
        }
        Op::Relu { x } => {
            if requires[*x] {
                let xv = &values[*x];
                let g = ensure_grad(grads, *x, gout.len());
                for i in 0..gout.len() {
                    if xv[i] > 0.0 {
                        g[i] += gout[i];
                    }
                }
            }
        }
        Op::LeakyRelu { x, alpha } => {
            if requires[*x] {
                let xv = &values[*x];
                let g = ensure_grad(grads, *x, gout.len());
                for i in 0..gout.len() {
                    g[i] += gout[i] * if xv[i] > 0.0 { 1.0 } else { *alpha };
                }
            }
        }
        Op::Elu { x } => {
            if requires[*x] {
                let xv = &values[*x];
                let yv = &values[out_id];
                let g = ensure_grad(grads, *x, gout.len());
                for i in 0..gout.len() {
                    g[i] += gout[i] * if xv[i] > 0.0 { 1.0 } else { yv[i] + 1.0 };
                }
            }
        }
        Op::Sigmoid { x } => {
            if requires[*x] {
                let yv = &values[out_id];
                let g = ensure_grad(grads, *x, gout.len());
                for i in 0..gout.len() {
                    g[i] += gout[i] * yv[i] * (1.0 - yv[i]);
                }
            }
        }
        Op::Exp { x } => {
            if requires[*x] {
                let yv = &values[out_id];
                let g = ensure_grad(grads, *x, gout.len());
                for i in 0..gout.len() {
                    g[i] += gout[i] * yv[i];
                }
            }
        }
        Op::Log { x } => {
            if requires[*x] {
                let xv = &values[*x];
                let g = ensure_grad(grads, *x, gout.len());
                for i in 0..gout.len() {
                    g[i] += gout[i] / xv[i];
                }
            }
        }
        Op::Recip { x } => {
            if requires[*x] {
                let yv = &values[out_id];
                let g = ensure_grad(grads, *x, gout.len());
                for i in 0..gout.len() {
                    g[i] -= gout[i] * yv[i] * yv[i];
                }
            }
        }
        Op::Clamp { x, lo, hi } => {
            if requires[*x] {
                let xv = &values[*x];
                let g = ensure_grad(grads, *x, gout.len());
                for i in 0..gout.len() {
                    if xv[i] > *lo && xv[i] < *hi {
                        g[i] += gout[i];
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            if requires[*x] {
                let shape = shapes[out_id].clone();
                let yv = &values[out_id];
                let g = ensure_grad(grads, *x, gout.len());
                let (slices, _) = slice_layout(&shape, *axis);
                for s in 0..slices {
                    let idxs: Vec<usize> = slice_indices(&shape, *axis, s).collect();
                    let dot: f64 = idxs.iter().map(|&i| gout[i] * yv[i]).sum();
                    for &i in &idxs {
                        g[i] += yv[i] * (gout[i] - dot);
                    }
                }
            }
        }
        Op::Reduce { kind, x, axis } => {
            if requires[*x] {
                let shape = shapes[*x].clone();
                let xv = &values[*x];
                let n = xv.len();
                let g = ensure_grad(grads, *x, n);
                match axis {
                    None => match kind {
                        ReduceKind::Sum => {
                            for gi in g.iter_mut() {
                                *gi += gout[0];
                            }
                        }
                        ReduceKind::Mean => {
                            let s = gout[0] / n as f64;
                            for gi in g.iter_mut() {
                                *gi += s;
                            }
                        }
                        ReduceKind::Max => {
                            // gradient routes to the first maximal element
                            let arg = argmax_slice(xv);
                            g[arg] += gout[0];
                        }
                    },
                    Some(a) => {
                        let (slices, slice_len) = slice_layout(&shape, *a);
                        for s in 0..slices {
                            let idxs: Vec<usize> = slice_indices(&shape, *a, s).collect();
                            match kind {
                                ReduceKind::Sum => {
                                    for &i in &idxs {
                                        g[i] += gout[s];
                                    }
                                }
                                ReduceKind::Mean => {
                                    let v = gout[s] / slice_len as f64;
                                    for &i in &idxs {
                                        g[i] += v;
                                    }
                                }
                                ReduceKind::Max => {
                                    let vals: Vec<f64> = idxs.iter().map(|&i| xv[i]).collect();
                                    let arg = argmax_slice(&vals);
                                    g[idxs[arg]] += gout[s];
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::L2Normalize { x, axis, eps } => {
            if requires[*x] {
                let shape = shapes[*x].clone();
                let xv = &values[*x];
                let yv = &values[out_id];
                let g = ensure_grad(grads, *x, xv.len());
                let (slices, _) = slice_layout(&shape, *axis);
                for s in 0..slices {
                    let idxs: Vec<usize> = slice_indices(&shape, *axis, s).collect();
                    let norm = idxs.iter().map(|&i| xv[i] * xv[i]).sum::<f64>().sqrt();
                    if norm < *eps {
                        for &i in &idxs {
                            g[i] += gout[i];
                        }
                    } else {
                        let dot: f64 = idxs.iter().map(|&i| gout[i] * yv[i]).sum();
                        for &i in &idxs {
                            g[i] += (gout[i] - yv[i] * dot) / norm;
                        }
                    }
                }
            }
        }
        Op::Entropy { p } => {
            if requires[*p] {
                let pv = &values[*p];
                let k = pv.len() / gout.len();
                let g = ensure_grad(grads, *p, pv.len());
                for b in 0..gout.len() {
                    for j in 0..k {
                        let v = pv[b * k + j];
                        if v > 0.0 {
                            g[b * k + j] -= gout[b] * (v.ln() + 1.0);
                        }
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets } => {
            if requires[*logits] {
                let lv = &values[*logits];
                let (bsz, k) = if shapes[*logits].len() == 2 {
                    (shapes[*logits][0], shapes[*logits][1])
                } else {
                    (1, lv.len())
                };
                let g = ensure_grad(grads, *logits, lv.len());
                let scale = gout[0] / bsz as f64;
                for i in 0..bsz {
                    let row = &lv[i * k..(i + 1) * k];
                    let sm = softmax_slice(row);
                    for j in 0..k {
                        g[i * k + j] += scale * (sm[j] - targets[i * k + j]);
                    }
                }
            }
        }
        Op::AddRowBroadcast { m, row } => {
            let (r, c) = (shapes[out_id][0], shapes[out_id][1]);
            if requires[*m] {
                let g = ensure_grad(grads, *m, r * c);
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += go;
                }
            }
            if requires[*row] {
                let g = ensure_grad(grads, *row, c);
                for i in 0..r {
                    for j in 0..c {
                        g[j] += gout[i * c + j];
                    }
                }
            }
        }
        Op::MulColBroadcast { m, col } => {
            let (r, c) = (shapes[out_id][0], shapes[out_id][1]);
            if requires[*m] {
                let cv = &values[*col];
                let g = ensure_grad(grads, *m, r * c);
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] += gout[i * c + j] * cv[i];
                    }
                }
            }
            if requires[*col] {
                let mv = &values[*m];
                let g = ensure_grad(grads, *col, r);
                for i in 0..r {
                    let mut s = 0.0;
                    for j in 0..c {
                        s += gout[i * c + j] * mv[i * c + j];
                    }
                    g[i] += s;
                }
            }
        }
        Op::StackRows { xs } => {
            let c = shapes[out_id][1];
            for (i, x) in xs.iter().enumerate() {
                if requires[*x] {
                    let g = ensure_grad(grads, *x, c);
                    for j in 0..c {
                        g[j] += gout[i * c + j];
                    }
                }
            }
        }
        Op::GatherRows { x, idx } => {
            if requires[*x] {
                let c = shapes[out_id][1];
                let g = ensure_grad(grads, *x, values[*x].len());
                for (r_out, &r_in) in idx.iter().enumerate() {
                    for j in 0..c {
                        g[r_in * c + j] += gout[r_out * c + j];
                    }
                }
            }
        }
    }
}

// ── raw kernels ──────────────────────────────────────────────────────

/// c += a @ b, a: m×k, b: k×n.
fn acc_ab(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c += a @ bᵀ, a: m×n, b: k×n, c: m×k.
fn acc_abt(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += arow[j] * brow[j];
            }
            crow[p] += s;
        }
    }
}

/// c += aᵀ @ b, a: m×k, b: m×n, c: k×n.
fn acc_atb(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

// ── slice iteration ──────────────────────────────────────────────────

/// (number of slices, slice length) when slicing along `axis`.
fn slice_layout(shape: &[usize], axis: usize) -> (usize, usize) {
    match shape {
        [n] => {
            debug_assert_eq!(axis, 0);
            (1, *n)
        }
        [r, c] => {
            if axis == 1 {
                (*r, *c)
            } else {
                (*c, *r)
            }
        }
        _ => unreachable!("rank > 2 unsupported"),
    }
}

fn slice_indices(shape: &[usize], axis: usize, slice: usize) -> Box<dyn Iterator<Item = usize>> {
    match shape {
        [n] => Box::new(0..*n),
        [r, c] => {
            let (r, c) = (*r, *c);
            if axis == 1 {
                Box::new(slice * c..(slice + 1) * c)
            } else {
                Box::new((0..r).map(move |i| i * c + slice))
            }
        }
        _ => unreachable!("rank > 2 unsupported"),
    }
}

fn slice_iter<'a>(
    v: &'a [f64],
    shape: &[usize],
    axis: usize,
    slice: usize,
) -> Box<dyn Iterator<Item = f64> + 'a> {
    let idx = slice_indices(shape, axis, slice);
    Box::new(idx.map(move |i| v[i]))
}

fn for_each_slice_mut(v: &mut [f64], shape: &[usize], axis: usize, mut f: impl FnMut(&mut [f64])) {
    match shape {
        [_] => f(v),
        [r, c] => {
            let (r, c) = (*r, *c);
            if axis == 1 {
                for i in 0..r {
                    f(&mut v[i * c..(i + 1) * c]);
                }
            } else {
                let mut buf = vec![0.0; r];
                for j in 0..c {
                    for i in 0..r {
                        buf[i] = v[i * c + j];
                    }
                    f(&mut buf);
                    for i in 0..r {
                        v[i * c + j] = buf[i];
                    }
                }
            }
        }
        _ => unreachable!("rank > 2 unsupported"),
    }
}

fn dist_dims(shape: &[usize]) -> TResult<(usize, usize)> {
    match shape {
        [k] => Ok((1, *k)),
        [b, k] => Ok((*b, *k)),
        other => Err(TensorError::ShapeMismatch(format!(
            "expected distribution of rank 1 or 2, got {other:?}"
        ))),
    }
}

fn validate_rows(v: &[f64], b: usize, k: usize, tol: f64) -> TResult<()> {
    for i in 0..b {
        let s: f64 = v[i * k..(i + 1) * k].iter().sum();
        if (s - 1.0).abs() > tol {
            return Err(TensorError::InvalidDistribution(format!(
                "row {i} sums to {s}, expected 1 ± {tol}"
            )));
        }
    }
    Ok(())
}

fn fold_max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

// ── value-level helpers (no tape) ────────────────────────────────────

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(slice: &mut [f64]) {
    let m = fold_max(slice);
    let mut s = 0.0;
    for v in slice.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in slice.iter_mut() {
        *v /= s;
    }
}

/// Stable softmax of a slice.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Shannon entropy (nats) with 0·log 0 := 0.
pub fn entropy_slice(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Index of the largest element; ties break to the lowest index.
pub fn argmax_slice(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let m = fold_max(x);
    m + x.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}
