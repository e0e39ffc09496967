//! Dense f64 tensors and a reverse-mode differentiation tape.
//!
//! The tape is eager: every operation computes its value immediately and
//! records enough to replay the chain rule backwards. One tape per forward
//! pass; tapes are single-threaded and independent of each other.

use crate::error::{Error, Result};
use rand::Rng;

// ─── Tensor ──────────────────────────────────────────────────────────────

/// Row-major dense tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Dim(format!(
                "shape {:?} expects {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows/cols view of a rank-1 or rank-2 tensor: rank-1 counts as one row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => {
                let last = *self.shape.last().unwrap_or(&1);
                (self.numel() / last.max(1), last)
            }
        }
    }

    /// Uniform init in [-limit, limit].
    pub fn uniform(shape: &[usize], limit: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
        Self { shape: shape.to_vec(), data }
    }

    /// Glorot-style init for a [fan_in, fan_out] weight matrix.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::uniform(&[fan_in, fan_out], limit, rng)
    }
}

// ─── Parameters ──────────────────────────────────────────────────────────

/// A named, optionally trainable tensor owned by a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Handle to a parameter inside a store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Flat registry of model parameters plus one gradient buffer per parameter.
///
/// Gradients accumulate across backward passes until [`ParamStore::zero_grads`]
/// is called, so mini-batches are a plain sum of per-scene harvests.
#[derive(Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    grads: Vec<Vec<f64>>,
    has_grad: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name '{name}'"
        );
        let n = value.numel();
        self.params.push(Parameter { name, value, trainable: true });
        self.grads.push(vec![0.0; n]);
        self.has_grad.push(false);
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        if self.has_grad[id.0] {
            Some(&self.grads[id.0])
        } else {
            None
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        self.has_grad.iter_mut().for_each(|v| *v = false);
    }

    /// Register "{name}.w" (Glorot) and "{name}.b" (zeros). Init is seeded by
    /// the parameter name, so the values do not depend on registration order
    /// or on which other components a model variant instantiates.
    pub fn register_linear(
        &mut self,
        seed: u64,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> (ParamId, ParamId) {
        let mut rng = name_seeded_rng(seed, name);
        let w = self.register(format!("{name}.w"), Tensor::glorot(fan_in, fan_out, &mut rng));
        let b = self.register(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        (w, b)
    }

    pub fn register_uniform(
        &mut self,
        seed: u64,
        name: &str,
        shape: &[usize],
        limit: f64,
    ) -> ParamId {
        let mut rng = name_seeded_rng(seed, name);
        self.register(name.to_string(), Tensor::uniform(shape, limit, &mut rng))
    }

    pub fn register_constant(&mut self, name: &str, value: Tensor) -> ParamId {
        self.register(name.to_string(), value)
    }

    /// Add the tape's parameter-leaf gradients (scaled by `scale`) into the store.
    pub fn harvest(&mut self, tape: &Tape, scale: f64) {
        for node in &tape.nodes {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if let Some(g) = &node.grad {
                    let acc = &mut self.grads[pid];
                    for (a, &gi) in acc.iter_mut().zip(g.iter()) {
                        *a += scale * gi;
                    }
                    self.has_grad[pid] = true;
                }
            }
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn name_seeded_rng(seed: u64, name: &str) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

/// Lazily injects parameters into a tape, one leaf per parameter per pass.
pub struct Binder<'a> {
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store, bound: vec![None; store.len()] }
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = tape.param(self.store, id);
        self.bound[id.0] = Some(v);
        v
    }
}

// ─── Tape ────────────────────────────────────────────────────────────────

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf { param: Option<usize> },
    Linear { x: Var, w: Var, b: Var },
    Matmul { a: Var, b: Var },
    /// a [m,k] times b[n,k] transposed -> [m,n]
    MatmulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Hadamard { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Relu { x: Var },
    Sigmoid { x: Var },
    Abs { x: Var },
    /// Concatenation along the last axis; rank-1 inputs chain into one vector.
    Concat { parts: Vec<Var>, widths: Vec<usize> },
    /// Stack rank-1 rows of equal width into a matrix.
    StackRows { rows: Vec<Var> },
    SliceCols { x: Var, start: usize },
    /// Top-left [rows, cols] block of a matrix.
    SliceBlock { x: Var },
    Reshape { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    SelectRow { table: Var, row: usize },
    AddRow { x: Var, v: Var },
    MulRow { x: Var, v: Var },
    Focal { p: Var, targets: Vec<f64>, gamma: f64, alpha: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Recorded forward pass. Values are computed eagerly; `backward` fills
/// gradients for every node reachable from the loss.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
/// Probability clamp keeping focal-loss logs finite.
pub const PROB_CLAMP: f64 = 1e-7;

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward target w.r.t. `v` (zeros if untouched).
    pub fn grad(&self, v: Var) -> Vec<f64> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].value.numel()],
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Inject a parameter's current value as a leaf tied to `id` for harvest.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Leaf { param: Some(id.0) })
    }

    // ── shape helpers ──

    fn want_rank2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.rank() == 2 {
            Ok((t.shape[0], t.shape[1]))
        } else {
            Err(Error::Dim(format!("{what}: expected rank-2, got {:?}", t.shape)))
        }
    }

    fn want_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::Dim(format!(
                "{what}: shapes {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        Ok(())
    }

    // ── operations ──

    /// y = x W + b with x of shape [in] or [n, in], W [in, out], b [out].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (w_in, w_out) = self.want_rank2(w, "linear weight")?;
        let xt = self.value(x);
        let (rows, cols) = xt.rows_cols();
        if cols != w_in {
            return Err(Error::Dim(format!(
                "linear: input width {} vs weight fan-in {}",
                cols, w_in
            )));
        }
        let bt = self.value(b);
        if bt.shape != [w_out] {
            return Err(Error::Dim(format!(
                "linear: bias shape {:?} vs fan-out {}",
                bt.shape, w_out
            )));
        }
        let mut out = vec![0.0; rows * w_out];
        let xd = &self.value(x).data;
        let wd = &self.value(w).data;
        let bd = &self.value(b).data;
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let o = &mut out[r * w_out..(r + 1) * w_out];
            o.copy_from_slice(bd);
            for (i, &xi) in row.iter().enumerate() {
                if xi != 0.0 {
                    let wrow = &wd[i * w_out..(i + 1) * w_out];
                    for (oj, &wij) in o.iter_mut().zip(wrow) {
                        *oj += xi * wij;
                    }
                }
            }
        }
        let shape = if xt.rank() == 1 { vec![w_out] } else { vec![rows, w_out] };
        Ok(self.push(Tensor { shape, data: out }, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.want_rank2(a, "matmul lhs")?;
        let (k2, n) = self.want_rank2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dim(format!("matmul: inner dims {k} vs {k2}")));
        }
        let ad = &self.value(a).data;
        let bd = &self.value(b).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip != 0.0 {
                    let brow = &bd[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
        }
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::Matmul { a, b }))
    }

    /// a [m,k] · b[n,k]ᵀ → [m,n]; the attention-score contraction.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.want_rank2(a, "matmul_nt lhs")?;
        let (n, k2) = self.want_rank2(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::Dim(format!("matmul_nt: inner dims {k} vs {k2}")));
        }
        let ad = &self.value(a).data;
        let bd = &self.value(b).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bd[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            }
        }
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatmulNT { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.want_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.want_same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Sub { a, b }))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.want_same_shape(a, b, "hadamard")?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Hadamard { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| c * v).collect(),
        };
        self.push(out, Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| v.max(0.0)).collect(),
        };
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| stable_sigmoid(v)).collect(),
        };
        self.push(out, Op::Sigmoid { x })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| v.abs()).collect(),
        };
        self.push(out, Op::Abs { x })
    }

    /// Concatenate along the last axis. All parts must share leading dims.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dim("concat: no operands".into()));
        }
        let rank = self.value(parts[0]).rank();
        let rows = self.value(parts[0]).rows_cols().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rank() != rank || t.rows_cols().0 != rows {
                return Err(Error::Dim(format!(
                    "concat: incompatible shapes {:?} vs {:?}",
                    self.value(parts[0]).shape,
                    t.shape
                )));
            }
            widths.push(t.rows_cols().1);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = &self.value(p).data;
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat { parts: parts.to_vec(), widths },
        ))
    }

    /// Stack rank-1 vectors of equal width into a [n, d] matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Dim("stack_rows: no rows".into()));
        }
        let d = self.value(rows[0]).numel();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let t = self.value(r);
            if t.rank() != 1 || t.numel() != d {
                return Err(Error::Dim(format!(
                    "stack_rows: row shape {:?}, expected [{d}]",
                    t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        Ok(self.push(
            Tensor { shape: vec![rows.len(), d], data },
            Op::StackRows { rows: rows.to_vec() },
        ))
    }

    /// Columns [start, start+len) of a vector or matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.rows_cols();
        if start + len > cols {
            return Err(Error::Dim(format!(
                "slice_cols: [{start}, {}) out of width {cols}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.data[r * cols + start..r * cols + start + len]);
        }
        let shape = if t.rank() == 1 { vec![len] } else { vec![rows, len] };
        Ok(self.push(Tensor { shape, data }, Op::SliceCols { x, start }))
    }

    /// Top-left [rows, cols] block of a matrix.
    pub fn slice_block(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r0, c0) = self.want_rank2(x, "slice_block")?;
        if rows > r0 || cols > c0 {
            return Err(Error::Dim(format!(
                "slice_block: [{rows},{cols}] out of [{r0},{c0}]"
            )));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            data.extend_from_slice(&t.data[r * c0..r * c0 + cols]);
        }
        Ok(self.push(Tensor { shape: vec![rows, cols], data }, Op::SliceBlock { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n: usize = shape.iter().product();
        if n != t.numel() {
            return Err(Error::Dim(format!(
                "reshape: {:?} ({}) to {:?} ({})",
                t.shape,
                t.numel(),
                shape,
                n
            )));
        }
        let out = Tensor { shape: shape.to_vec(), data: t.data.clone() };
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Softmax over the last axis, max-shifted for stability.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = t.rows_cols();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &t.data[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in &mut data[r * cols..(r + 1) * cols] {
                *o /= sum;
            }
        }
        let shape = t.shape.clone();
        self.push(Tensor { shape, data }, Op::Softmax { x })
    }

    /// Normalize each row to zero mean / unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = t.rows_cols();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &t.data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (o, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let shape = t.shape.clone();
        self.push(Tensor { shape, data }, Op::LayerNorm { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data.iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean { x })
    }

    /// Row `row` of a [r, c] matrix; gradients accumulate into that row.
    pub fn select_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let (r, c) = self.want_rank2(table, "select_row")?;
        if row >= r {
            return Err(Error::Dim(format!("select_row: row {row} out of {r}")));
        }
        let data = self.value(table).data[row * c..(row + 1) * c].to_vec();
        Ok(self.push(Tensor { shape: vec![c], data }, Op::SelectRow { table, row }))
    }

    /// Broadcast-add a [d] vector to every row of x.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if self.value(v).shape != [cols] {
            return Err(Error::Dim(format!(
                "add_row: vector {:?} vs row width {cols}",
                self.value(v).shape
            )));
        }
        let xd = &self.value(x).data;
        let vd = &self.value(v).data;
        let mut data = xd.clone();
        for r in 0..rows {
            for (o, &b) in data[r * cols..(r + 1) * cols].iter_mut().zip(vd) {
                *o += b;
            }
        }
        let shape = self.value(x).shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::AddRow { x, v }))
    }

    /// Broadcast-multiply every row of x by a [d] vector.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if self.value(v).shape != [cols] {
            return Err(Error::Dim(format!(
                "mul_row: vector {:?} vs row width {cols}",
                self.value(v).shape
            )));
        }
        let xd = &self.value(x).data;
        let vd = &self.value(v).data;
        let mut data = xd.clone();
        for r in 0..rows {
            for (o, &b) in data[r * cols..(r + 1) * cols].iter_mut().zip(vd) {
                *o *= b;
            }
        }
        let shape = self.value(x).shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::MulRow { x, v }))
    }

    /// Elementwise focal loss, unreduced. `targets` are 0/1 labels matching
    /// `p` elementwise; probabilities are clamped to [1e-7, 1-1e-7] first.
    pub fn focal_loss(&mut self, p: Var, targets: &[f64], gamma: f64, alpha: f64) -> Result<Var> {
        let t = self.value(p);
        if targets.len() != t.numel() {
            return Err(Error::Dim(format!(
                "focal_loss: {} targets vs {} probabilities",
                targets.len(),
                t.numel()
            )));
        }
        let data = t
            .data
            .iter()
            .zip(targets)
            .map(|(&p, &y)| focal_value(p, y, gamma, alpha))
            .collect();
        let shape = t.shape.clone();
        Ok(self.push(
            Tensor { shape, data },
            Op::Focal { p, targets: targets.to_vec(), gamma, alpha },
        ))
    }

    /// Alternating linear / ReLU chain; the final layer stays linear.
    pub fn mlp(&mut self, x: Var, layers: &[(Var, Var)]) -> Result<Var> {
        if layers.is_empty() {
            return Err(Error::Config("mlp: empty layer list".into()));
        }
        let mut h = x;
        for (i, &(w, b)) in layers.iter().enumerate() {
            h = self.linear(h, w, b)?;
            if i + 1 < layers.len() {
                h = self.relu(h);
            }
        }
        Ok(h)
    }

    // ── backward ──

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dim(format!(
                "backward: target has shape {:?}, expected scalar",
                self.value(loss).shape
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = self.nodes[i].grad.take() else { continue };
            self.propagate(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        let node = &mut self.nodes[v.0];
        let g = node
            .grad
            .get_or_insert_with(|| vec![0.0; node.value.numel()]);
        for (a, &d) in g.iter_mut().zip(delta) {
            *a += d;
        }
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // The op is cheap to describe; clone handles out of it to appease the
        // borrow checker, buffers stay in place.
        enum Plan {
            None,
            One(Var, Vec<f64>),
            Two(Var, Vec<f64>, Var, Vec<f64>),
            Three(Var, Vec<f64>, Var, Vec<f64>, Var, Vec<f64>),
            Many(Vec<(Var, Vec<f64>)>),
        }
        let plan = {
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { .. } => Plan::None,
                Op::Linear { x, w, b } => {
                    let xt = &self.nodes[x.0].value;
                    let (rows, k) = xt.rows_cols();
                    let wt = &self.nodes[w.0].value;
                    let n = wt.shape[1];
                    let mut dx = vec![0.0; rows * k];
                    let mut dw = vec![0.0; k * n];
                    let mut db = vec![0.0; n];
                    for r in 0..rows {
                        let grow = &g[r * n..(r + 1) * n];
                        let xrow = &xt.data[r * k..(r + 1) * k];
                        for j in 0..n {
                            db[j] += grow[j];
                        }
                        for i in 0..k {
                            let wrow = &wt.data[i * n..(i + 1) * n];
                            dx[r * k + i] +=
                                grow.iter().zip(wrow).map(|(&gv, &wv)| gv * wv).sum::<f64>();
                            let xi = xrow[i];
                            if xi != 0.0 {
                                for j in 0..n {
                                    dw[i * n + j] += xi * grow[j];
                                }
                            }
                        }
                    }
                    Plan::Three(*x, dx, *w, dw, *b, db)
                }
                Op::Matmul { a, b } => {
                    let at = &self.nodes[a.0].value;
                    let bt = &self.nodes[b.0].value;
                    let (m, k) = (at.shape[0], at.shape[1]);
                    let n = bt.shape[1];
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bt.data[p * n..(p + 1) * n];
                            da[i * k + p] +=
                                grow.iter().zip(brow).map(|(&gv, &bv)| gv * bv).sum::<f64>();
                            let aip = at.data[i * k + p];
                            if aip != 0.0 {
                                for j in 0..n {
                                    db[p * n + j] += aip * grow[j];
                                }
                            }
                        }
                    }
                    Plan::Two(*a, da, *b, db)
                }
                Op::MatmulNT { a, b } => {
                    let at = &self.nodes[a.0].value;
                    let bt = &self.nodes[b.0].value;
                    let (m, k) = (at.shape[0], at.shape[1]);
                    let n = bt.shape[0];
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij != 0.0 {
                                for p in 0..k {
                                    da[i * k + p] += gij * bt.data[j * k + p];
                                    db[j * k + p] += gij * at.data[i * k + p];
                                }
                            }
                        }
                    }
                    Plan::Two(*a, da, *b, db)
                }
                Op::Add { a, b } => Plan::Two(*a, g.to_vec(), *b, g.to_vec()),
                Op::Sub { a, b } => {
                    Plan::Two(*a, g.to_vec(), *b, g.iter().map(|&v| -v).collect())
                }
                Op::Hadamard { a, b } => {
                    let at = &self.nodes[a.0].value.data;
                    let bt = &self.nodes[b.0].value.data;
                    let da = g.iter().zip(bt).map(|(&gv, &bv)| gv * bv).collect();
                    let db = g.iter().zip(at).map(|(&gv, &av)| gv * av).collect();
                    Plan::Two(*a, da, *b, db)
                }
                Op::Scale { x, c } => {
                    Plan::One(*x, g.iter().map(|&v| c * v).collect())
                }
                Op::Relu { x } => {
                    let xt = &self.nodes[x.0].value.data;
                    Plan::One(
                        *x,
                        g.iter()
                            .zip(xt)
                            .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                            .collect(),
                    )
                }
                Op::Sigmoid { x } => {
                    let y = &node.value.data;
                    Plan::One(
                        *x,
                        g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (1.0 - yv)).collect(),
                    )
                }
                Op::Abs { x } => {
                    let xt = &self.nodes[x.0].value.data;
                    Plan::One(
                        *x,
                        g.iter()
                            .zip(xt)
                            .map(|(&gv, &xv)| gv * sign(xv))
                            .collect(),
                    )
                }
                Op::Concat { parts, widths } => {
                    let rows = node.value.rows_cols().0;
                    let total: usize = widths.iter().sum();
                    let mut out = Vec::with_capacity(parts.len());
                    let mut off = 0;
                    for (&p, &w) in parts.iter().zip(widths) {
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        out.push((p, dp));
                        off += w;
                    }
                    Plan::Many(out)
                }
                Op::StackRows { rows } => {
                    let d = node.value.shape[1];
                    Plan::Many(
                        rows.iter()
                            .enumerate()
                            .map(|(r, &v)| (v, g[r * d..(r + 1) * d].to_vec()))
                            .collect(),
                    )
                }
                Op::SliceCols { x, start } => {
                    let xt = &self.nodes[x.0].value;
                    let (rows, cols) = xt.rows_cols();
                    let len = node.value.rows_cols().1;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    Plan::One(*x, dx)
                }
                Op::SliceBlock { x } => {
                    let xt = &self.nodes[x.0].value;
                    let (r0, c0) = (xt.shape[0], xt.shape[1]);
                    let (rows, cols) = (node.value.shape[0], node.value.shape[1]);
                    let mut dx = vec![0.0; r0 * c0];
                    for r in 0..rows {
                        dx[r * c0..r * c0 + cols].copy_from_slice(&g[r * cols..(r + 1) * cols]);
                    }
                    Plan::One(*x, dx)
                }
                Op::Reshape { x } => Plan::One(*x, g.to_vec()),
                Op::Softmax { x } => {
                    let y = &node.value;
                    let (rows, cols) = y.rows_cols();
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let yrow = &y.data[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                        for c in 0..cols {
                            dx[r * cols + c] = yrow[c] * (grow[c] - dot);
                        }
                    }
                    Plan::One(*x, dx)
                }
                Op::LayerNorm { x } => {
                    let xt = &self.nodes[x.0].value;
                    let y = &node.value;
                    let (rows, cols) = xt.rows_cols();
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let xrow = &xt.data[r * cols..(r + 1) * cols];
                        let yrow = &y.data[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let mean = xrow.iter().sum::<f64>() / cols as f64;
                        let var =
                            xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let gmean = grow.iter().sum::<f64>() / cols as f64;
                        let gy: f64 = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum::<f64>()
                            / cols as f64;
                        for c in 0..cols {
                            dx[r * cols + c] = inv * (grow[c] - gmean - yrow[c] * gy);
                        }
                    }
                    Plan::One(*x, dx)
                }
                Op::Sum { x } => {
                    let n = self.nodes[x.0].value.numel();
                    Plan::One(*x, vec![g[0]; n])
                }
                Op::Mean { x } => {
                    let n = self.nodes[x.0].value.numel();
                    Plan::One(*x, vec![g[0] / n as f64; n])
                }
                Op::SelectRow { table, row } => {
                    let tt = &self.nodes[table.0].value;
                    let (r, c) = (tt.shape[0], tt.shape[1]);
                    let mut dt = vec![0.0; r * c];
                    dt[row * c..(row + 1) * c].copy_from_slice(g);
                    Plan::One(*table, dt)
                }
                Op::AddRow { x, v } => {
                    let (rows, cols) = self.nodes[x.0].value.rows_cols();
                    let mut dv = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dv[c] += g[r * cols + c];
                        }
                    }
                    Plan::Two(*x, g.to_vec(), *v, dv)
                }
                Op::MulRow { x, v } => {
                    let xt = &self.nodes[x.0].value;
                    let vt = &self.nodes[v.0].value;
                    let (rows, cols) = xt.rows_cols();
                    let mut dx = vec![0.0; rows * cols];
                    let mut dv = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] = g[r * cols + c] * vt.data[c];
                            dv[c] += g[r * cols + c] * xt.data[r * cols + c];
                        }
                    }
                    Plan::Two(*x, dx, *v, dv)
                }
                Op::Focal { p, targets, gamma, alpha } => {
                    let pt = &self.nodes[p.0].value.data;
                    let dp = g
                        .iter()
                        .zip(pt.iter().zip(targets))
                        .map(|(&gv, (&pv, &yv))| gv * focal_derivative(pv, yv, *gamma, *alpha))
                        .collect();
                    Plan::One(*p, dp)
                }
            }
        };
        match plan {
            Plan::None => {}
            Plan::One(a, da) => self.accumulate(a, &da),
            Plan::Two(a, da, b, db) => {
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Plan::Three(a, da, b, db, c, dc) => {
                self.accumulate(a, &da);
                self.accumulate(b, &db);
                self.accumulate(c, &dc);
            }
            Plan::Many(list) => {
                for (v, d) in list {
                    self.accumulate(v, &d);
                }
            }
        }
    }

    /// Iterate parameter leaves recorded on this tape.
    pub fn param_leaves(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Leaf { param: Some(p) } => Some((ParamId(p), Var(i))),
            _ => None,
        })
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn focal_value(p: f64, y: f64, gamma: f64, alpha: f64) -> f64 {
    let pc = clamp_prob(p);
    if y > 0.5 {
        -alpha * (1.0 - pc).powf(gamma) * pc.ln()
    } else {
        -(1.0 - alpha) * pc.powf(gamma) * (1.0 - pc).ln()
    }
}

fn focal_derivative(p: f64, y: f64, gamma: f64, alpha: f64) -> f64 {
    if p < PROB_CLAMP || p > 1.0 - PROB_CLAMP {
        return 0.0; // clamped region is flat
    }
    let pc = clamp_prob(p);
    if y > 0.5 {
        let focus = if gamma == 0.0 {
            0.0
        } else {
            gamma * (1.0 - pc).powf(gamma - 1.0) * pc.ln()
        };
        alpha * (focus - (1.0 - pc).powf(gamma) / pc)
    } else {
        let focus = if gamma == 0.0 {
            0.0
        } else {
            gamma * pc.powf(gamma - 1.0) * (1.0 - pc).ln()
        };
        -(1.0 - alpha) * (focus - pc.powf(gamma) / (1.0 - pc))
    }
}
