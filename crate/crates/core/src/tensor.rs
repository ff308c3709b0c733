//! Dense f64 tensor kernel with tape-based reverse-mode differentiation.
//!
//! Every operation the encoders need is a primitive recorded on a [`Tape`].
//! Calling [`Tape::backward`] replays the recorded ops in reverse and
//! accumulates adjoints into every tensor created with `requires_grad`.
//! Gradients accumulate additively, so a tensor used by several ops
//! receives the sum of all downstream contributions.
//!
//! Tensors are addressed by [`TensorId`] handles into the tape arena;
//! data is row-major `Vec<f64>`. One tape services one forward/backward
//! pass and is consumed by `backward`.

use thiserror::Error;

/// Handle into a [`Tape`]'s tensor arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    BadShape {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("softmax: row {row} is fully masked")]
    AllMasked { row: usize },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// What to do when a masked softmax row has no live entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyRowPolicy {
    /// Reject the whole call. Default contract for plain softmax.
    Error,
    /// Emit an all-zero row. Used for attention over fully padded slots.
    ZeroRow,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    AddBias { a: usize, bias: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    MulConst { a: usize, c: Vec<f64> },
    Scale { a: usize, c: f64 },
    Relu { a: usize },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Ln { a: usize },
    Softmax { a: usize, mask: Option<Vec<f64>> },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    SumAll { a: usize },
    ConcatLast { a: usize, b: usize },
    SliceCols { a: usize, start: usize, len: usize },
    Reshape { a: usize },
    GatherRows { table: usize, indices: Vec<usize> },
    TimeSlice { a: usize, t: usize },
    StackTime { parts: Vec<usize> },
    AttnScores { q: usize, k: usize, heads: usize },
    AttnCombine { w: usize, v: usize, heads: usize },
    WeightedSumTime { w: usize, x: usize },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Records a forward pass; replaying it in reverse computes gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `a [rows x k] @ b [k x n]`, row-major.
fn matmul_2d(a: &[f64], b: &[f64], rows: usize, k: usize, n: usize, out: &mut [f64]) {
    // ikj order keeps the inner loop contiguous over b and out.
    for i in 0..rows {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        TensorId(id)
    }

    fn guard(&self) -> Result<()> {
        if self.consumed {
            Err(TensorError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    /// New leaf tensor participating in gradient computation when `requires_grad`.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        self.guard()?;
        if data.len() != numel(&shape) {
            return Err(TensorError::BadShape {
                op: "leaf",
                len: data.len(),
                shape,
            });
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    /// Constant input: no gradient is ever accumulated for it.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// `a [..., k] @ b [k, n]` with leading axes of `a` folded into rows.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.guard()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let k = sb[0];
        let n = sb[1];
        let rows = numel(&sa) / k;
        let mut out = vec![0.0; rows * n];
        matmul_2d(&self.nodes[a.0].data, &self.nodes[b.0].data, rows, k, n, &mut out);
        let mut out_shape = sa;
        *out_shape.last_mut().unwrap() = n;
        Ok(self.push(out, out_shape, false, Op::MatMul { a: a.0, b: b.0 }))
    }

    /// `a [..., n] + bias [n]`, bias broadcast over leading axes.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        self.guard()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: sa,
                rhs: sb,
            });
        }
        let n = sb[0];
        let mut out = self.nodes[a.0].data.clone();
        let b = &self.nodes[bias.0].data;
        for (i, v) in out.iter_mut().enumerate() {
            *v += b[i % n];
        }
        Ok(self.push(out, sa, false, Op::AddBias { a: a.0, bias: bias.0 }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.guard()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let out = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(out, sa, false, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.guard()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let out = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(out, sa, false, Op::Mul { a: a.0, b: b.0 }))
    }

    /// Elementwise multiply by a constant buffer (masks, scalars per slot).
    pub fn mul_const(&mut self, a: TensorId, c: &[f64]) -> Result<TensorId> {
        self.guard()?;
        let sa = self.shape(a).to_vec();
        if c.len() != numel(&sa) {
            return Err(TensorError::BadShape {
                op: "mul_const",
                len: c.len(),
                shape: sa,
            });
        }
        let out = self.nodes[a.0].data.iter().zip(c).map(|(x, m)| x * m).collect();
        Ok(self.push(out, sa, false, Op::MulConst { a: a.0, c: c.to_vec() }))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        self.guard()?;
        let sa = self.shape(a).to_vec();
        let out = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        Ok(self.push(out, sa, false, Op::Scale { a: a.0, c }))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        self.guard()?;
        let sa = self.shape(a).to_vec();
        let out = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        Ok(self.push(out, sa, false, Op::Relu { a: a.0 }))
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        self.guard()?;
        let sa = self.shape(a).to_vec();
        let out = self.nodes[a.0].data.iter().map(|x| x.tanh()).collect();
        Ok(self.push(out, sa, false, Op::Tanh { a: a.0 }))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        self.guard()?;
        let sa = self.shape(a).to_vec();
        let out = self.nodes[a.0]
            .data
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        Ok(self.push(out, sa, false, Op::Sigmoid { a: a.0 }))
    }

    pub fn ln(&mut self, a: TensorId) -> Result<TensorId> {
        self.guard()?;
        let sa = self.shape(a).to_vec();
        let out = self.nodes[a.0].data.iter().map(|x| x.ln()).collect();
        Ok(self.push(out, sa, false, Op::Ln { a: a.0 }))
    }

    /// Max-stabilized softmax over the last axis. Masked entries (mask 0)
    /// get probability exactly 0; live row entries sum to 1.
    pub fn softmax(
        &mut self,
        a: TensorId,
        mask: Option<&[f64]>,
        policy: EmptyRowPolicy,
    ) -> Result<TensorId> {
        self.guard()?;
        let sa = self.shape(a).to_vec();
        let n = *sa.last().ok_or_else(|| TensorError::Invalid {
            op: "softmax",
            msg: "input must have at least one axis".into(),
        })?;
        if let Some(m) = mask {
            if m.len() != numel(&sa) {
                return Err(TensorError::BadShape {
                    op: "softmax",
                    len: m.len(),
                    shape: sa,
                });
            }
        }
        let rows = numel(&sa) / n;
        let x = &self.nodes[a.0].data;
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let base = r * n;
            let live = |j: usize| mask.map_or(true, |m| m[base + j] != 0.0);
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if live(j) {
                    max = max.max(x[base + j]);
                }
            }
            if max == f64::NEG_INFINITY {
                match policy {
                    EmptyRowPolicy::Error => return Err(TensorError::AllMasked { row: r }),
                    EmptyRowPolicy::ZeroRow => continue,
                }
            }
            let mut denom = 0.0;
            for j in 0..n {
                if live(j) {
                    let e = (x[base + j] - max).exp();
                    out[base + j] = e;
                    denom += e;
                }
            }
            for j in 0..n {
                out[base + j] /= denom;
            }
        }
        Ok(self.push(
            out,
            sa,
            false,
            Op::Softmax {
                a: a.0,
                mask: mask.map(<[f64]>::to_vec),
            },
        ))
    }

    /// Per-row normalization over the last axis (population variance),
    /// then elementwise `gain * xhat + bias`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        self.guard()?;
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| TensorError::Invalid {
            op: "layer_norm",
            msg: "input must have at least one axis".into(),
        })?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: sx,
                rhs: self.shape(gain).to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let rows = numel(&sx) / d;
        let xd = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        Ok(self.push(
            out,
            sx,
            false,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
        ))
    }

    /// Sum of all entries, as a `[1]`-shaped scalar.
    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        self.guard()?;
        let s: f64 = self.nodes[a.0].data.iter().sum();
        Ok(self.push(vec![s], vec![1], false, Op::SumAll { a: a.0 }))
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.guard()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len()
            || sa.is_empty()
            || sa[..sa.len() - 1] != sb[..sb.len() - 1]
        {
            return Err(TensorError::ShapeMismatch {
                op: "concat_last",
                lhs: sa,
                rhs: sb,
            });
        }
        let da = sa[sa.len() - 1];
        let db = sb[sb.len() - 1];
        let rows = numel(&sa) / da;
        let mut out = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            out.extend_from_slice(&self.nodes[a.0].data[r * da..(r + 1) * da]);
            out.extend_from_slice(&self.nodes[b.0].data[r * db..(r + 1) * db]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = da + db;
        Ok(self.push(out, shape, false, Op::ConcatLast { a: a.0, b: b.0 }))
    }

    /// Contiguous slice `[start, start+len)` of the last axis.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        self.guard()?;
        let sa = self.shape(a).to_vec();
        let d = *sa.last().ok_or_else(|| TensorError::Invalid {
            op: "slice_cols",
            msg: "input must have at least one axis".into(),
        })?;
        if start + len > d {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                size: d,
            });
        }
        let rows = numel(&sa) / d;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&self.nodes[a.0].data[r * d + start..r * d + start + len]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = len;
        Ok(self.push(out, shape, false, Op::SliceCols { a: a.0, start, len }))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        self.guard()?;
        if numel(&shape) != self.nodes[a.0].data.len() {
            return Err(TensorError::BadShape {
                op: "reshape",
                len: self.nodes[a.0].data.len(),
                shape,
            });
        }
        let data = self.nodes[a.0].data.clone();
        Ok(self.push(data, shape, false, Op::Reshape { a: a.0 }))
    }

    /// Row gather: `out[i, :] = table[indices[i], :]`, reshaped to
    /// `prefix_shape + [row_width]`. Backward scatter-adds into the table.
    pub fn gather_rows(
        &mut self,
        table: TensorId,
        indices: &[usize],
        prefix_shape: &[usize],
    ) -> Result<TensorId> {
        self.guard()?;
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("table must be 2-d, got {st:?}"),
            });
        }
        if numel(prefix_shape) != indices.len() {
            return Err(TensorError::BadShape {
                op: "gather_rows",
                len: indices.len(),
                shape: prefix_shape.to_vec(),
            });
        }
        let (n_rows, width) = (st[0], st[1]);
        let mut out = Vec::with_capacity(indices.len() * width);
        for &ix in indices {
            if ix >= n_rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: ix,
                    size: n_rows,
                });
            }
            out.extend_from_slice(&self.nodes[table.0].data[ix * width..(ix + 1) * width]);
        }
        let mut shape = prefix_shape.to_vec();
        shape.push(width);
        Ok(self.push(
            out,
            shape,
            false,
            Op::GatherRows {
                table: table.0,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Middle-axis slice: `x [N, T, E]` at time `t` gives `[N, E]`.
    pub fn time_slice(&mut self, a: TensorId, t: usize) -> Result<TensorId> {
        self.guard()?;
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 {
            return Err(TensorError::Invalid {
                op: "time_slice",
                msg: format!("expected [N, T, E], got {sa:?}"),
            });
        }
        let (n, steps, e) = (sa[0], sa[1], sa[2]);
        if t >= steps {
            return Err(TensorError::IndexOutOfRange {
                op: "time_slice",
                index: t,
                size: steps,
            });
        }
        let mut out = Vec::with_capacity(n * e);
        for i in 0..n {
            let base = (i * steps + t) * e;
            out.extend_from_slice(&self.nodes[a.0].data[base..base + e]);
        }
        Ok(self.push(out, vec![n, e], false, Op::TimeSlice { a: a.0, t }))
    }

    /// Stack `T` tensors of shape `[N, E]` into `[N, T, E]`.
    pub fn stack_time(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        self.guard()?;
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "stack_time",
                msg: "no tensors to stack".into(),
            });
        }
        let s0 = self.shape(parts[0]).to_vec();
        if s0.len() != 2 {
            return Err(TensorError::Invalid {
                op: "stack_time",
                msg: format!("expected [N, E] parts, got {s0:?}"),
            });
        }
        for &p in parts {
            if self.shape(p) != s0 {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_time",
                    lhs: s0,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (n, e) = (s0[0], s0[1]);
        let steps = parts.len();
        let mut out = vec![0.0; n * steps * e];
        for (t, &p) in parts.iter().enumerate() {
            let pd = &self.nodes[p.0].data;
            for i in 0..n {
                out[(i * steps + t) * e..(i * steps + t + 1) * e]
                    .copy_from_slice(&pd[i * e..(i + 1) * e]);
            }
        }
        Ok(self.push(
            out,
            vec![n, steps, e],
            false,
            Op::StackTime {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    /// Per-head unscaled dot-product logits:
    /// `q, k [B, S, D]` split into `heads` along D, giving `[B, H, S, S]`
    /// with `out[b,h,i,j] = q[b,i,h·dh..] · k[b,j,h·dh..]`.
    pub fn attn_scores(&mut self, q: TensorId, k: TensorId, heads: usize) -> Result<TensorId> {
        self.guard()?;
        let (sq, sk) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        if sq != sk || sq.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "attn_scores",
                lhs: sq,
                rhs: sk,
            });
        }
        let (b, s, d) = (sq[0], sq[1], sq[2]);
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid {
                op: "attn_scores",
                msg: format!("feature dim {d} not divisible into {heads} heads"),
            });
        }
        let dh = d / heads;
        let qd = &self.nodes[q.0].data;
        let kd = &self.nodes[k.0].data;
        let mut out = vec![0.0; b * heads * s * s];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..s {
                    let qb = (bi * s + i) * d + h * dh;
                    for j in 0..s {
                        let kb = (bi * s + j) * d + h * dh;
                        let mut dot = 0.0;
                        for c in 0..dh {
                            dot += qd[qb + c] * kd[kb + c];
                        }
                        out[((bi * heads + h) * s + i) * s + j] = dot;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            vec![b, heads, s, s],
            false,
            Op::AttnScores { q: q.0, k: k.0, heads },
        ))
    }

    /// Per-head weighted value mix: `w [B, H, S, S]`, `v [B, S, D]` with D
    /// split into H head slices; `out[b,i,h·dv..] = Σ_j w[b,h,i,j] v[b,j,h·dv..]`.
    pub fn attn_combine(&mut self, w: TensorId, v: TensorId, heads: usize) -> Result<TensorId> {
        self.guard()?;
        let (sw, sv) = (self.shape(w).to_vec(), self.shape(v).to_vec());
        if sw.len() != 4 || sv.len() != 3 || sw[0] != sv[0] || sw[2] != sv[1] || sw[3] != sv[1] {
            return Err(TensorError::ShapeMismatch {
                op: "attn_combine",
                lhs: sw,
                rhs: sv,
            });
        }
        let (b, s, d) = (sv[0], sv[1], sv[2]);
        if sw[1] != heads || heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid {
                op: "attn_combine",
                msg: format!("weights carry {} heads for value dim {d}", sw[1]),
            });
        }
        let dv = d / heads;
        let wd = &self.nodes[w.0].data;
        let vd = &self.nodes[v.0].data;
        let mut out = vec![0.0; b * s * d];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..s {
                    let ob = (bi * s + i) * d + h * dv;
                    for j in 0..s {
                        let wij = wd[((bi * heads + h) * s + i) * s + j];
                        if wij == 0.0 {
                            continue;
                        }
                        let vb = (bi * s + j) * d + h * dv;
                        for c in 0..dv {
                            out[ob + c] += wij * vd[vb + c];
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            vec![b, s, d],
            false,
            Op::AttnCombine { w: w.0, v: v.0, heads },
        ))
    }

    /// Convex mix over the middle axis: `w [N, T]`, `x [N, T, D]` gives
    /// `out[n, :] = Σ_t w[n,t] x[n,t,:]`.
    pub fn weighted_sum_time(&mut self, w: TensorId, x: TensorId) -> Result<TensorId> {
        self.guard()?;
        let (sw, sx) = (self.shape(w).to_vec(), self.shape(x).to_vec());
        if sw.len() != 2 || sx.len() != 3 || sw[0] != sx[0] || sw[1] != sx[1] {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum_time",
                lhs: sw,
                rhs: sx,
            });
        }
        let (n, steps, d) = (sx[0], sx[1], sx[2]);
        let wd = &self.nodes[w.0].data;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for t in 0..steps {
                let wv = wd[i * steps + t];
                if wv == 0.0 {
                    continue;
                }
                let xb = (i * steps + t) * d;
                for c in 0..d {
                    out[i * d + c] += wv * xd[xb + c];
                }
            }
        }
        Ok(self.push(out, vec![n, d], false, Op::WeightedSumTime { w: w.0, x: x.0 }))
    }

    /// Reverse sweep from a scalar loss. Populates `grad` for every
    /// reachable `requires_grad` leaf and consumes the tape.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        self.guard()?;
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        self.consumed = true;
        let n = self.nodes.len();
        for node in &mut self.nodes {
            node.grad = Some(vec![0.0; node.data.len()]);
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;

        for i in (0..n).rev() {
            let grad = self.nodes[i].grad.clone().unwrap();
            if grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let k = self.nodes[b].shape[0];
                    let nn = self.nodes[b].shape[1];
                    let rows = self.nodes[a].data.len() / k;
                    // dA = g @ Bᵀ
                    let mut da = vec![0.0; rows * k];
                    {
                        let bd = &self.nodes[b].data;
                        for r in 0..rows {
                            for j in 0..nn {
                                let gv = grad[r * nn + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    da[r * k + p] += gv * bd[p * nn + j];
                                }
                            }
                        }
                    }
                    // dB = Aᵀ @ g
                    let mut db = vec![0.0; k * nn];
                    {
                        let ad = &self.nodes[a].data;
                        for r in 0..rows {
                            for p in 0..k {
                                let av = ad[r * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..nn {
                                    db[p * nn + j] += av * grad[r * nn + j];
                                }
                            }
                        }
                    }
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::AddBias { a, bias } => {
                    let nn = self.nodes[bias].data.len();
                    let mut db = vec![0.0; nn];
                    for (i, g) in grad.iter().enumerate() {
                        db[i % nn] += g;
                    }
                    self.accumulate(a, &grad);
                    self.accumulate(bias, &db);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::Mul { a, b } => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[b].data)
                        .map(|(g, y)| g * y)
                        .collect();
                    let db: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a].data)
                        .map(|(g, x)| g * x)
                        .collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::MulConst { a, c } => {
                    let da: Vec<f64> = grad.iter().zip(&c).map(|(g, m)| g * m).collect();
                    self.accumulate(a, &da);
                }
                Op::Scale { a, c } => {
                    let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    self.accumulate(a, &da);
                }
                Op::Relu { a } => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a].data)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Tanh { a } => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(g, t)| g * (1.0 - t * t))
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Sigmoid { a } => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Ln { a } => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a].data)
                        .map(|(g, x)| g / x)
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Softmax { a, mask: _ } => {
                    // Masked entries have s = 0, so the row formula
                    // ds = s ⊙ (g − Σ g·s) already sends them 0.
                    let out = &self.nodes[i].data;
                    let nn = *self.nodes[i].shape.last().unwrap();
                    let rows = out.len() / nn;
                    let mut da = vec![0.0; out.len()];
                    for r in 0..rows {
                        let base = r * nn;
                        let mut dot = 0.0;
                        for j in 0..nn {
                            dot += grad[base + j] * out[base + j];
                        }
                        for j in 0..nn {
                            da[base + j] = out[base + j] * (grad[base + j] - dot);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let d = self.nodes[gain].data.len();
                    let rows = self.nodes[x].data.len() / d;
                    let mut dx = vec![0.0; self.nodes[x].data.len()];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    {
                        let xd = &self.nodes[x].data;
                        let g = &self.nodes[gain].data;
                        for r in 0..rows {
                            let row = &xd[r * d..(r + 1) * d];
                            let grow = &grad[r * d..(r + 1) * d];
                            let mean = row.iter().sum::<f64>() / d as f64;
                            let var =
                                row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                            let inv = 1.0 / (var + eps).sqrt();
                            let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                            let dxhat: Vec<f64> =
                                grow.iter().zip(g).map(|(gv, gn)| gv * gn).collect();
                            let sum_dxhat: f64 = dxhat.iter().sum();
                            let dot: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                            for j in 0..d {
                                dgain[j] += grow[j] * xhat[j];
                                dbias[j] += grow[j];
                                dx[r * d + j] = inv / d as f64
                                    * (d as f64 * dxhat[j] - sum_dxhat - xhat[j] * dot);
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gain, &dgain);
                    self.accumulate(bias, &dbias);
                }
                Op::SumAll { a } => {
                    let da = vec![grad[0]; self.nodes[a].data.len()];
                    self.accumulate(a, &da);
                }
                Op::ConcatLast { a, b } => {
                    let da_w = *self.nodes[a].shape.last().unwrap();
                    let db_w = *self.nodes[b].shape.last().unwrap();
                    let rows = self.nodes[a].data.len() / da_w;
                    let mut da = vec![0.0; rows * da_w];
                    let mut db = vec![0.0; rows * db_w];
                    let w = da_w + db_w;
                    for r in 0..rows {
                        da[r * da_w..(r + 1) * da_w]
                            .copy_from_slice(&grad[r * w..r * w + da_w]);
                        db[r * db_w..(r + 1) * db_w]
                            .copy_from_slice(&grad[r * w + da_w..(r + 1) * w]);
                    }
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::SliceCols { a, start, len } => {
                    let d = *self.nodes[a].shape.last().unwrap();
                    let rows = self.nodes[a].data.len() / d;
                    let mut da = vec![0.0; self.nodes[a].data.len()];
                    for r in 0..rows {
                        da[r * d + start..r * d + start + len]
                            .copy_from_slice(&grad[r * len..(r + 1) * len]);
                    }
                    self.accumulate(a, &da);
                }
                Op::Reshape { a } => {
                    self.accumulate(a, &grad);
                }
                Op::GatherRows { table, indices } => {
                    let width = self.nodes[table].shape[1];
                    let mut dt = vec![0.0; self.nodes[table].data.len()];
                    for (i, &ix) in indices.iter().enumerate() {
                        for c in 0..width {
                            dt[ix * width + c] += grad[i * width + c];
                        }
                    }
                    self.accumulate(table, &dt);
                }
                Op::TimeSlice { a, t } => {
                    let sa = &self.nodes[a].shape;
                    let (steps, e) = (sa[1], sa[2]);
                    let n = sa[0];
                    let mut da = vec![0.0; self.nodes[a].data.len()];
                    for i in 0..n {
                        da[(i * steps + t) * e..(i * steps + t + 1) * e]
                            .copy_from_slice(&grad[i * e..(i + 1) * e]);
                    }
                    self.accumulate(a, &da);
                }
                Op::StackTime { parts } => {
                    let steps = parts.len();
                    let e = *self.nodes[i].shape.last().unwrap();
                    let n = self.nodes[i].shape[0];
                    for (t, &p) in parts.iter().enumerate() {
                        let mut dp = vec![0.0; n * e];
                        for r in 0..n {
                            dp[r * e..(r + 1) * e].copy_from_slice(
                                &grad[(r * steps + t) * e..(r * steps + t + 1) * e],
                            );
                        }
                        self.accumulate(p, &dp);
                    }
                }
                Op::AttnScores { q, k, heads } => {
                    let sq = self.nodes[q].shape.clone();
                    let (b, s, d) = (sq[0], sq[1], sq[2]);
                    let dh = d / heads;
                    let mut dq = vec![0.0; b * s * d];
                    let mut dk = vec![0.0; b * s * d];
                    {
                        let qd = &self.nodes[q].data;
                        let kd = &self.nodes[k].data;
                        for bi in 0..b {
                            for h in 0..heads {
                                for i2 in 0..s {
                                    for j in 0..s {
                                        let g = grad[((bi * heads + h) * s + i2) * s + j];
                                        if g == 0.0 {
                                            continue;
                                        }
                                        let qb = (bi * s + i2) * d + h * dh;
                                        let kb = (bi * s + j) * d + h * dh;
                                        for c in 0..dh {
                                            dq[qb + c] += g * kd[kb + c];
                                            dk[kb + c] += g * qd[qb + c];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(q, &dq);
                    self.accumulate(k, &dk);
                }
                Op::AttnCombine { w, v, heads } => {
                    let sv = self.nodes[v].shape.clone();
                    let (b, s, d) = (sv[0], sv[1], sv[2]);
                    let dv_w = d / heads;
                    let mut dw = vec![0.0; b * heads * s * s];
                    let mut dv = vec![0.0; b * s * d];
                    {
                        let wd = &self.nodes[w].data;
                        let vd = &self.nodes[v].data;
                        for bi in 0..b {
                            for h in 0..heads {
                                for i2 in 0..s {
                                    let gb = (bi * s + i2) * d + h * dv_w;
                                    for j in 0..s {
                                        let wix = ((bi * heads + h) * s + i2) * s + j;
                                        let vb = (bi * s + j) * d + h * dv_w;
                                        let mut acc = 0.0;
                                        for c in 0..dv_w {
                                            acc += grad[gb + c] * vd[vb + c];
                                            dv[vb + c] += wd[wix] * grad[gb + c];
                                        }
                                        dw[wix] += acc;
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(w, &dw);
                    self.accumulate(v, &dv);
                }
                Op::WeightedSumTime { w, x } => {
                    let sx = self.nodes[x].shape.clone();
                    let (n2, steps, d) = (sx[0], sx[1], sx[2]);
                    let mut dw = vec![0.0; n2 * steps];
                    let mut dx = vec![0.0; n2 * steps * d];
                    {
                        let wd = &self.nodes[w].data;
                        let xd = &self.nodes[x].data;
                        for i2 in 0..n2 {
                            for t in 0..steps {
                                let xb = (i2 * steps + t) * d;
                                let mut acc = 0.0;
                                for c in 0..d {
                                    acc += grad[i2 * d + c] * xd[xb + c];
                                    dx[xb + c] += wd[i2 * steps + t] * grad[i2 * d + c];
                                }
                                dw[i2 * steps + t] = acc;
                            }
                        }
                    }
                    self.accumulate(w, &dw);
                    self.accumulate(x, &dx);
                }
            }
        }
        // Drop gradients of pure intermediates; leaves keep theirs.
        for node in &mut self.nodes {
            if !node.requires_grad {
                node.grad = None;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: usize, delta: &[f64]) {
        if let Some(g) = self.nodes[target].grad.as_mut() {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.leaf(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2], false).unwrap();
        let m = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], false).unwrap();
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.data(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0], vec![1, 2], false).unwrap();
        let b = tape.leaf(vec![3.0, 4.0], vec![2, 1], false).unwrap();
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(out), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![0.0; 6], vec![2, 3], false).unwrap();
        let b = tape.leaf(vec![0.0; 4], vec![2, 2], false).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_transpose_rule() {
        // d sum(a@b)/da at a=[[1,2]], b=[[3],[4]] is bᵀ = [[3,4]].
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0], vec![1, 2], true).unwrap();
        let b = tape.leaf(vec![3.0, 4.0], vec![2, 1], true).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c).unwrap();
        tape.backward(loss).unwrap();
        assert!(close(tape.grad(a).unwrap(), &[3.0, 4.0], 1e-12));
        assert!(close(tape.grad(b).unwrap(), &[1.0, 2.0], 1e-12));
    }

    #[test]
    fn softmax_uniform_and_analytic() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![0.0, 0.0, 0.0], vec![3], false).unwrap();
        let s = tape.softmax(a, None, EmptyRowPolicy::Error).unwrap();
        assert!(close(tape.data(s), &[1.0 / 3.0; 3], 1e-12));

        let b = tape.leaf(vec![0.0, 2.0_f64.ln()], vec![2], false).unwrap();
        let s2 = tape.softmax(b, None, EmptyRowPolicy::Error).unwrap();
        assert!(close(tape.data(s2), &[1.0 / 3.0, 2.0 / 3.0], 1e-12));
    }

    #[test]
    fn softmax_masked_entries_are_exactly_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![5.0, 5.0, 123.0], vec![3], false).unwrap();
        let s = tape
            .softmax(a, Some(&[1.0, 1.0, 0.0]), EmptyRowPolicy::Error)
            .unwrap();
        assert!(close(tape.data(s), &[0.5, 0.5, 0.0], 1e-12));
        assert_eq!(tape.data(s)[2], 0.0);
    }

    #[test]
    fn softmax_all_masked_row_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0], vec![1, 2], false).unwrap();
        let err = tape
            .softmax(a, Some(&[0.0, 0.0]), EmptyRowPolicy::Error)
            .unwrap_err();
        assert!(matches!(err, TensorError::AllMasked { row: 0 }));
        // ZeroRow policy instead yields an all-zero row.
        let s = tape
            .softmax(a, Some(&[0.0, 0.0]), EmptyRowPolicy::ZeroRow)
            .unwrap();
        assert_eq!(tape.data(s), &[0.0, 0.0]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3.3, 3.3, 3.3], vec![1, 3], false).unwrap();
        let g = tape.leaf(vec![1.0; 3], vec![3], false).unwrap();
        let b = tape.leaf(vec![0.0; 3], vec![3], false).unwrap();
        let out = tape.layer_norm(x, g, b, 1e-6).unwrap();
        assert!(close(tape.data(out), &[0.0; 3], 1e-9));
    }

    #[test]
    fn layer_norm_two_point_row() {
        // x = [1, 3]: mean 2, population std 1, so xhat = [-1, +1].
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 3.0], vec![1, 2], false).unwrap();
        let g = tape.leaf(vec![1.0; 2], vec![2], false).unwrap();
        let b = tape.leaf(vec![0.0; 2], vec![2], false).unwrap();
        let out = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert!(close(tape.data(out), &[-1.0, 1.0], 1e-9));

        let g2 = tape.leaf(vec![2.0; 2], vec![2], false).unwrap();
        let b2 = tape.leaf(vec![5.0; 2], vec![2], false).unwrap();
        let out2 = tape.layer_norm(x, g2, b2, 1e-12).unwrap();
        assert!(close(tape.data(out2), &[3.0, 7.0], 1e-9));
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![-1.0, 0.0, 2.0], vec![3], false).unwrap();
        let r = tape.relu(a).unwrap();
        assert_eq!(tape.data(r), &[0.0, 0.0, 2.0]);
        let t = tape.tanh(a).unwrap();
        assert_eq!(tape.data(t)[1], 0.0);
        let x = tape.leaf(vec![1.0, 2.0], vec![2], false).unwrap();
        let y = tape.leaf(vec![3.0], vec![1], false).unwrap();
        let c = tape.concat_last(x, y).unwrap();
        assert_eq!(tape.data(c), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_sum_gives_ones_and_square_rule() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, -2.0], vec![2], true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert!(close(tape.grad(x).unwrap(), &[2.0, -4.0], 1e-12));

        let mut tape2 = Tape::new();
        let x2 = tape2.leaf(vec![0.5; 6], vec![2, 3], true).unwrap();
        let loss2 = tape2.sum_all(x2).unwrap();
        tape2.backward(loss2).unwrap();
        assert!(close(tape2.grad(x2).unwrap(), &[1.0; 6], 1e-12));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn tape_is_consumed_by_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0], vec![1], true).unwrap();
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(
            tape.sum_all(x).unwrap_err(),
            TensorError::TapeConsumed
        ));
        assert!(matches!(
            tape.backward(loss).unwrap_err(),
            TensorError::TapeConsumed
        ));
    }

    #[test]
    fn gather_rows_out_of_range() {
        let mut tape = Tape::new();
        let t = tape.leaf(vec![0.0; 6], vec![3, 2], true).unwrap();
        let err = tape.gather_rows(t, &[3], &[1]).unwrap_err();
        assert!(matches!(err, TensorError::IndexOutOfRange { index: 3, size: 3, .. }));
    }

    #[test]
    fn fan_out_accumulates_additively() {
        // y = x + x: dy/dx = 2.
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.5], vec![1], true).unwrap();
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(close(tape.grad(x).unwrap(), &[2.0], 1e-12));
    }

    #[test]
    fn stack_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], true).unwrap();
        let b = tape.leaf(vec![5.0, 6.0, 7.0, 8.0], vec![2, 2], true).unwrap();
        let st = tape.stack_time(&[a, b]).unwrap();
        assert_eq!(tape.shape(st), &[2, 2, 2]);
        let t0 = tape.time_slice(st, 0).unwrap();
        let t1 = tape.time_slice(st, 1).unwrap();
        assert_eq!(tape.data(t0), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.data(t1), &[5.0, 6.0, 7.0, 8.0]);
    }
}
