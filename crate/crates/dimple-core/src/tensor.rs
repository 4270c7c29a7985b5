//! Dense-tensor algebra with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a Wengert tape: every op records its inputs and output in
//! topological order, and [`Graph::backward`] replays the tape in reverse to
//! accumulate gradients via the chain rule. Tensors are row-major `f64`
//! buffers; shapes are rank 1 or rank 2 (scalars are shape `[1]`). There is
//! no broadcasting beyond scalar operands and the dedicated bias op.
//!
//! Numeric policy:
//! - `exp` clamps its input at 709 so outputs stay finite.
//! - `log` and `div` reject domain violations instead of producing NaN/Inf.
//! - every op output is scanned for non-finite values.
//! - `normalize_rows` snaps row norms within 1e-12 of 1 to exactly 1, which
//!   makes re-normalization of already-unit rows an exact identity.

use crate::error::{Error, Result};

const EXP_INPUT_CLAMP: f64 = 709.0;
const NORM_SNAP_TOL: f64 = 1e-12;
const NORM_ZERO_FLOOR: f64 = 1e-150;

/// GELU tanh-approximation constants, fixed so tests can assert exact values:
/// `0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))`.
pub const GELU_COEF: f64 = 0.044715;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// A dense tensor: row-major values plus optional gradient of the same shape.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    AddBias { x: TensorId, b: TensorId },
    Exp { a: TensorId },
    Log { a: TensorId },
    Relu { a: TensorId },
    Gelu { a: TensorId },
    Softmax { a: TensorId, axis: usize },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    Sum { a: TensorId },
    Mean { a: TensorId },
    SumAxis { a: TensorId, axis: usize },
    ConcatRows { parts: Vec<TensorId> },
    SliceRows { a: TensorId, start: usize, end: usize },
    GatherRows { a: TensorId, rows: Vec<usize> },
    SelectPerRow { a: TensorId, cols: Vec<usize> },
    NormalizeRows { a: TensorId },
}

struct Node {
    op: Op,
    tensor: Tensor,
    needs_grad: bool,
}

/// Reverse-mode autodiff tape. Single-threaded; build forward, call
/// [`Graph::backward`] once, read gradients, then drop or reset.
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_str(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}

fn ensure_finite(data: &[f64], op: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{op} produced a non-finite value")))
    }
}

/// c[m x n] = a[m x k] * b[k x n], accumulating along rows of b for locality.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// g[m x n] * b[k x n]^T -> [m x k]
fn mm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let o_row = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in g_row.iter().zip(b_row) {
                s += gv * bv;
            }
            o_row[p] = s;
        }
    }
    out
}

/// a[m x k]^T * g[m x n] -> [k x n]
fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o_row = &mut out[p * n..(p + 1) * n];
            for (ov, gv) in o_row.iter_mut().zip(g_row) {
                *ov += av * gv;
            }
        }
    }
    out
}

fn gelu_forward(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (x + GELU_COEF * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// Kahan-compensated sum of squares; keeps the row-norm computation accurate
/// enough that the unity snap in `normalize_rows` fires reliably.
fn sum_of_squares(row: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in row {
        let y = v * v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    /// Scalar value of a shape-`[1]` node.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].tensor.numel(), 1);
        self.nodes[id.0].tensor.data[0]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            op,
            tensor: Tensor { shape, data, requires_grad: false, grad: None },
            needs_grad,
        });
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("leaf shape {} has a zero extent", shape_str(&shape))));
        }
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "leaf data length {} does not match shape {}",
                data.len(),
                shape_str(&shape)
            )));
        }
        ensure_finite(&data, "leaf")?;
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            tensor: Tensor { shape, data, requires_grad, grad: None },
            needs_grad: requires_grad,
        });
        Ok(id)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Result<TensorId> {
        self.constant(vec![v], vec![1])
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!(
                "matmul requires [m x k] * [k x n]; got {} and {}",
                shape_str(&sa),
                shape_str(&sb)
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = mm(self.value(a), self.value(b), m, k, n);
        ensure_finite(&data, "matmul")?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul { a, b }, vec![m, n], data, needs))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::Shape(format!("transpose requires rank 2, got {}", shape_str(&sa))));
        }
        let (r, c) = (sa[0], sa[1]);
        let src = self.value(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::Transpose { a }, vec![c, r], data, needs))
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn binary_shapes(&self, a: TensorId, b: TensorId, op: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.tensor(a).numel(), self.tensor(b).numel());
        if sa == sb {
            Ok(sa.to_vec())
        } else if na == 1 {
            Ok(sb.to_vec())
        } else if nb == 1 {
            Ok(sa.to_vec())
        } else {
            Err(Error::Shape(format!(
                "{op} requires equal shapes or a scalar operand; got {} and {}",
                shape_str(sa),
                shape_str(sb)
            )))
        }
    }

    fn binary_apply(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(TensorId, TensorId) -> Op,
    ) -> Result<TensorId> {
        let shape = self.binary_shapes(a, b, name)?;
        let numel: usize = shape.iter().product();
        let (da, db) = (self.value(a), self.value(b));
        let (na, nb) = (da.len(), db.len());
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let x = da[if na == 1 { 0 } else { i }];
            let y = db[if nb == 1 { 0 } else { i }];
            data.push(f(x, y));
        }
        ensure_finite(&data, name)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(mk(a, b), shape, data, needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_apply(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_apply(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_apply(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.value(b).iter().any(|&v| v == 0.0) {
            return Err(Error::Domain("div by zero".to_string()));
        }
        self.binary_apply(a, b, "div", |x, y| x / y, |a, b| Op::Div { a, b })
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        if !c.is_finite() {
            return Err(Error::Domain("scale by non-finite constant".to_string()));
        }
        let data: Vec<f64> = self.value(a).iter().map(|v| v * c).collect();
        ensure_finite(&data, "scale")?;
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(Op::Scale { a, c }, shape, data, needs))
    }

    /// Broadcast-add a length-`d` bias vector to every row of `x [n x d]`.
    pub fn add_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if sx.len() != 2 || self.tensor(b).numel() != d {
            return Err(Error::Shape(format!(
                "add_bias requires x [n x d] and bias of length d; got {} and {}",
                shape_str(&sx),
                shape_str(&sb)
            )));
        }
        let n = sx[0];
        let (dx, db) = (self.value(x), self.value(b));
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                data.push(dx[i * d + j] + db[j]);
            }
        }
        ensure_finite(&data, "add_bias")?;
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(Op::AddBias { x, b }, sx, data, needs))
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.value(a).iter().map(|&v| v.min(EXP_INPUT_CLAMP).exp()).collect();
        ensure_finite(&data, "exp")?;
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(Op::Exp { a }, shape, data, needs))
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        if self.value(a).iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("log of non-positive value".to_string()));
        }
        let data: Vec<f64> = self.value(a).iter().map(|v| v.ln()).collect();
        ensure_finite(&data, "log")?;
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(Op::Log { a }, shape, data, needs))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.value(a).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(Op::Relu { a }, shape, data, needs))
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.value(a).iter().map(|&v| gelu_forward(v)).collect();
        ensure_finite(&data, "gelu")?;
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(Op::Gelu { a }, shape, data, needs))
    }

    // ── Structured ops ───────────────────────────────────────────────

    /// Numerically stable softmax (max-subtraction) along `axis` of a rank-1
    /// or rank-2 tensor.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for {}",
                shape_str(&shape)
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a);
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |t: usize| o * len * inner + t * inner + i;
                let mut maxv = f64::NEG_INFINITY;
                for t in 0..len {
                    maxv = maxv.max(src[idx(t)]);
                }
                let mut sum = 0.0;
                for t in 0..len {
                    let e = (src[idx(t)] - maxv).exp();
                    data[idx(t)] = e;
                    sum += e;
                }
                for t in 0..len {
                    data[idx(t)] /= sum;
                }
            }
        }
        ensure_finite(&data, "softmax")?;
        let needs = self.needs(a);
        Ok(self.push(Op::Softmax { a, axis }, shape, data, needs))
    }

    /// Layer normalization over the last dimension with affine parameters.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if d == 0 || eps <= 0.0 {
            return Err(Error::Config("layer_norm requires d >= 1 and eps > 0".to_string()));
        }
        if self.tensor(gamma).numel() != d || self.tensor(beta).numel() != d {
            return Err(Error::Shape(format!(
                "layer_norm affine params must have length {d}; got {} and {}",
                self.tensor(gamma).numel(),
                self.tensor(beta).numel()
            )));
        }
        let rows = self.tensor(x).numel() / d;
        let (dx, dg, db) = (self.value(x), self.value(gamma), self.value(beta));
        let mut data = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &dx[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv_std * dg[j] + db[j];
            }
        }
        ensure_finite(&data, "layer_norm")?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, sx, data, needs))
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.value(a).iter().sum();
        ensure_finite(std::slice::from_ref(&s), "sum")?;
        let needs = self.needs(a);
        Ok(self.push(Op::Sum { a }, vec![1], vec![s], needs))
    }

    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.tensor(a).numel() as f64;
        let s: f64 = self.value(a).iter().sum::<f64>() / n;
        ensure_finite(std::slice::from_ref(&s), "mean")?;
        let needs = self.needs(a);
        Ok(self.push(Op::Mean { a }, vec![1], vec![s], needs))
    }

    /// Row sums (`axis == 1`, output `[n x 1]`) or column sums (`axis == 0`,
    /// output `[1 x m]`) of a rank-2 tensor.
    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || axis > 1 {
            return Err(Error::Shape(format!(
                "sum_axis requires rank 2 and axis in {{0,1}}; got {} axis {axis}",
                shape_str(&sa)
            )));
        }
        let (n, m) = (sa[0], sa[1]);
        let src = self.value(a);
        let (shape, data) = if axis == 1 {
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                out.push(src[i * m..(i + 1) * m].iter().sum());
            }
            (vec![n, 1], out)
        } else {
            let mut out = vec![0.0; m];
            for i in 0..n {
                for j in 0..m {
                    out[j] += src[i * m + j];
                }
            }
            (vec![1, m], out)
        };
        ensure_finite(&data, "sum_axis")?;
        let needs = self.needs(a);
        Ok(self.push(Op::SumAxis { a, axis }, shape, data, needs))
    }

    /// Stack rank-2 tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows of zero tensors".to_string()));
        }
        let cols = {
            let s = self.shape(parts[0]);
            if s.len() != 2 {
                return Err(Error::Shape(format!("concat_rows requires rank 2, got {}", shape_str(s))));
            }
            s[1]
        };
        let mut rows = 0;
        let mut data = Vec::new();
        let mut needs = false;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::Shape(format!(
                    "concat_rows column mismatch: expected {cols}, got {}",
                    shape_str(s)
                )));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p));
            needs |= self.needs(p);
        }
        Ok(self.push(Op::ConcatRows { parts: parts.to_vec() }, vec![rows, cols], data, needs))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || start >= end || end > sa[0] {
            return Err(Error::Shape(format!(
                "slice_rows [{start}, {end}) invalid for {}",
                shape_str(&sa)
            )));
        }
        let cols = sa[1];
        let data = self.value(a)[start * cols..end * cols].to_vec();
        let needs = self.needs(a);
        Ok(self.push(Op::SliceRows { a, start, end }, vec![end - start, cols], data, needs))
    }

    /// Select rows by index (repeats allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, a: TensorId, rows: &[usize]) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::Shape(format!("gather_rows requires rank 2, got {}", shape_str(&sa))));
        }
        if rows.is_empty() {
            return Err(Error::Shape("gather_rows with empty index list".to_string()));
        }
        let cols = sa[1];
        let src = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= sa[0] {
                return Err(Error::Shape(format!("gather_rows index {r} out of range for {}", shape_str(&sa))));
            }
            data.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let needs = self.needs(a);
        Ok(self.push(Op::GatherRows { a, rows: rows.to_vec() }, vec![rows.len(), cols], data, needs))
    }

    /// Pick one element per row: `out[i] = a[i, cols[i]]`, shape `[n x 1]`.
    pub fn select_per_row(&mut self, a: TensorId, cols: &[usize]) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || cols.len() != sa[0] {
            return Err(Error::Shape(format!(
                "select_per_row needs one column index per row of {}; got {}",
                shape_str(&sa),
                cols.len()
            )));
        }
        let m = sa[1];
        let src = self.value(a);
        let mut data = Vec::with_capacity(sa[0]);
        for (i, &c) in cols.iter().enumerate() {
            if c >= m {
                return Err(Error::Shape(format!("select_per_row column {c} out of range for {}", shape_str(&sa))));
            }
            data.push(src[i * m + c]);
        }
        let needs = self.needs(a);
        Ok(self.push(Op::SelectPerRow { a, cols: cols.to_vec() }, vec![sa[0], 1], data, needs))
    }

    /// L2-normalize each row. Errors on an (effectively) zero row; norms
    /// within `1e-12` of 1 are treated as exactly 1 so that normalizing an
    /// already-normalized tensor is a bitwise identity.
    pub fn normalize_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::Shape(format!("normalize_rows requires rank 2, got {}", shape_str(&sa))));
        }
        let (n, d) = (sa[0], sa[1]);
        let src = self.value(a);
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let norm = sum_of_squares(row).sqrt();
            if norm <= NORM_ZERO_FLOOR {
                return Err(Error::ZeroRow { row: i });
            }
            let norm = if (norm - 1.0).abs() <= NORM_SNAP_TOL { 1.0 } else { norm };
            if norm == 1.0 {
                data.extend_from_slice(row);
            } else {
                data.extend(row.iter().map(|v| v / norm));
            }
        }
        ensure_finite(&data, "normalize_rows")?;
        let needs = self.needs(a);
        Ok(self.push(Op::NormalizeRows { a }, sa, data, needs))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Clear all gradients and re-arm backward.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
        self.backward_done = false;
    }

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// node on the differentiable path, including all `requires_grad`
    /// leaves. Calling twice without [`Graph::reset_grads`] is an error.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; call reset_grads first".to_string(),
            ));
        }
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {}",
                shape_str(&self.nodes[loss.0].tensor.shape)
            )));
        }
        self.backward_done = true;

        // Gradients live in a side table during the sweep to avoid borrow
        // juggling, then are moved into the tensors.
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        // Leaves that require grad always end up with a (possibly zero) grad.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.tensor.requires_grad && i != loss.0 {
                grads[i] = Some(vec![0.0; node.tensor.numel()]);
            }
        }

        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.tensor.requires_grad || node.needs_grad {
                node.tensor.grad = g;
            }
        }
        Ok(())
    }

    fn accumulate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let add_to = |grads: &mut [Option<Vec<f64>>], id: TensorId, delta: &[f64]| {
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; delta.len()]);
            for (s, d) in slot.iter_mut().zip(delta) {
                *s += d;
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n2) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let da = mm_nt(g, self.value(*b), m, n2, k);
                    add_to(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db = mm_tn(self.value(*a), g, m, k, n2);
                    add_to(grads, *b, &db);
                }
            }
            Op::Transpose { a } => {
                let sa = self.shape(*a);
                let (r, c) = (sa[0], sa[1]);
                let mut da = vec![0.0; r * c];
                for i2 in 0..r {
                    for j in 0..c {
                        da[i2 * c + j] = g[j * r + i2];
                    }
                }
                add_to(grads, *a, &da);
            }
            Op::Add { a, b } => {
                self.binary_backward(*a, *b, g, grads, add_to, |_, _, g| (g, g));
            }
            Op::Sub { a, b } => {
                self.binary_backward(*a, *b, g, grads, add_to, |_, _, g| (g, -g));
            }
            Op::Mul { a, b } => {
                self.binary_backward(*a, *b, g, grads, add_to, |x, y, g| (g * y, g * x));
            }
            Op::Div { a, b } => {
                self.binary_backward(*a, *b, g, grads, add_to, |x, y, g| (g / y, -g * x / (y * y)));
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                add_to(grads, *a, &da);
            }
            Op::AddBias { x, b } => {
                let d = self.tensor(*b).numel();
                if self.needs(*x) {
                    add_to(grads, *x, g);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; d];
                    for (idx, gv) in g.iter().enumerate() {
                        db[idx % d] += gv;
                    }
                    add_to(grads, *b, &db);
                }
            }
            Op::Exp { a } => {
                let src = self.value(*a);
                let out = &self.nodes[i].tensor.data;
                let da: Vec<f64> = g
                    .iter()
                    .zip(out.iter().zip(src))
                    .map(|(gv, (y, x))| if *x > EXP_INPUT_CLAMP { 0.0 } else { gv * y })
                    .collect();
                add_to(grads, *a, &da);
            }
            Op::Log { a } => {
                let src = self.value(*a);
                let da: Vec<f64> = g.iter().zip(src).map(|(gv, x)| gv / x).collect();
                add_to(grads, *a, &da);
            }
            Op::Relu { a } => {
                let src = self.value(*a);
                let da: Vec<f64> = g.iter().zip(src).map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 }).collect();
                add_to(grads, *a, &da);
            }
            Op::Gelu { a } => {
                let src = self.value(*a);
                let da: Vec<f64> = g.iter().zip(src).map(|(gv, x)| gv * gelu_derivative(*x)).collect();
                add_to(grads, *a, &da);
            }
            Op::Softmax { a, axis } => {
                let shape = &self.nodes[i].tensor.shape;
                let out = &self.nodes[i].tensor.data;
                let (outer, len, inner) = split_axis(shape, *axis);
                let mut da = vec![0.0; out.len()];
                for o in 0..outer {
                    for i2 in 0..inner {
                        let idx = |t: usize| o * len * inner + t * inner + i2;
                        let mut dot = 0.0;
                        for t in 0..len {
                            dot += g[idx(t)] * out[idx(t)];
                        }
                        for t in 0..len {
                            da[idx(t)] = out[idx(t)] * (g[idx(t)] - dot);
                        }
                    }
                }
                add_to(grads, *a, &da);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let sx = self.shape(*x);
                let d = *sx.last().unwrap();
                let rows = self.tensor(*x).numel() / d;
                let (dx_src, dg_src) = (self.value(*x), self.value(*gamma));
                let mut dx = vec![0.0; rows * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let row = &dx_src[r * d..(r + 1) * d];
                    let g_row = &g[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let mut dxhat = vec![0.0; d];
                    for j in 0..d {
                        dgamma[j] += g_row[j] * xhat[j];
                        dbeta[j] += g_row[j];
                        dxhat[j] = g_row[j] * dg_src[j];
                    }
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dx[r * d + j] = inv_std / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                if self.needs(*x) {
                    add_to(grads, *x, &dx);
                }
                if self.needs(*gamma) {
                    add_to(grads, *gamma, &dgamma);
                }
                if self.needs(*beta) {
                    add_to(grads, *beta, &dbeta);
                }
            }
            Op::Sum { a } => {
                let da = vec![g[0]; self.tensor(*a).numel()];
                add_to(grads, *a, &da);
            }
            Op::Mean { a } => {
                let n2 = self.tensor(*a).numel();
                let da = vec![g[0] / n2 as f64; n2];
                add_to(grads, *a, &da);
            }
            Op::SumAxis { a, axis } => {
                let sa = self.shape(*a);
                let (n2, m) = (sa[0], sa[1]);
                let mut da = vec![0.0; n2 * m];
                for i2 in 0..n2 {
                    for j in 0..m {
                        da[i2 * m + j] = if *axis == 1 { g[i2] } else { g[j] };
                    }
                }
                add_to(grads, *a, &da);
            }
            Op::ConcatRows { parts } => {
                let cols = self.nodes[i].tensor.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let pr = self.shape(p)[0];
                    if self.needs(p) {
                        add_to(grads, p, &g[offset * cols..(offset + pr) * cols]);
                    }
                    offset += pr;
                }
            }
            Op::SliceRows { a, start, end } => {
                let sa = self.shape(*a);
                let cols = sa[1];
                let mut da = vec![0.0; sa[0] * cols];
                da[start * cols..end * cols].copy_from_slice(g);
                add_to(grads, *a, &da);
            }
            Op::GatherRows { a, rows } => {
                let sa = self.shape(*a);
                let cols = sa[1];
                let mut da = vec![0.0; sa[0] * cols];
                for (k2, &r) in rows.iter().enumerate() {
                    for j in 0..cols {
                        da[r * cols + j] += g[k2 * cols + j];
                    }
                }
                add_to(grads, *a, &da);
            }
            Op::SelectPerRow { a, cols } => {
                let sa = self.shape(*a);
                let m = sa[1];
                let mut da = vec![0.0; sa[0] * m];
                for (i2, &c) in cols.iter().enumerate() {
                    da[i2 * m + c] += g[i2];
                }
                add_to(grads, *a, &da);
            }
            Op::NormalizeRows { a } => {
                let sa = self.shape(*a);
                let (n2, d) = (sa[0], sa[1]);
                let src = self.value(*a);
                let out = &self.nodes[i].tensor.data;
                let mut da = vec![0.0; n2 * d];
                for r in 0..n2 {
                    let x_row = &src[r * d..(r + 1) * d];
                    let y_row = &out[r * d..(r + 1) * d];
                    let g_row = &g[r * d..(r + 1) * d];
                    let norm = sum_of_squares(x_row).sqrt();
                    let norm = if (norm - 1.0).abs() <= NORM_SNAP_TOL { 1.0 } else { norm };
                    let dot: f64 = g_row.iter().zip(y_row).map(|(gv, yv)| gv * yv).sum();
                    for j in 0..d {
                        da[r * d + j] = (g_row[j] - y_row[j] * dot) / norm;
                    }
                }
                add_to(grads, *a, &da);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn binary_backward(
        &self,
        a: TensorId,
        b: TensorId,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        add_to: impl Fn(&mut [Option<Vec<f64>>], TensorId, &[f64]),
        d: impl Fn(f64, f64, f64) -> (f64, f64),
    ) {
        let (da_src, db_src) = (self.value(a), self.value(b));
        let (na, nb) = (da_src.len(), db_src.len());
        let mut da = vec![0.0; na];
        let mut db = vec![0.0; nb];
        for (i, gv) in g.iter().enumerate() {
            let x = da_src[if na == 1 { 0 } else { i }];
            let y = db_src[if nb == 1 { 0 } else { i }];
            let (gx, gy) = d(x, y, *gv);
            da[if na == 1 { 0 } else { i }] += gx;
            db[if nb == 1 { 0 } else { i }] += gy;
        }
        if self.needs(a) {
            add_to(grads, a, &da);
        }
        if self.needs(b) {
            add_to(grads, b, &db);
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, rel_err};
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity_and_zeros() {
        let mut g = Graph::new();
        let a = g.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], false).unwrap();
        let eye = g.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let zeros = g.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        let c = g.matmul(a, eye).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0]);
        let z = g.matmul(a, zeros).unwrap();
        assert_eq!(g.value(z), &[0.0; 4]);
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut rng = crate::rng::substream(11, "test/matmul");
        let (m, k, n) = (5, 7, 3);
        let a = rand_vec(&mut rng, m * k);
        let b = rand_vec(&mut rng, k * n);
        // Naive oracle, written independently of mm()'s loop order.
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a[i * k + t] * b[t * n + j];
                }
                expect[i * n + j] = s;
            }
        }
        let mut g = Graph::new();
        let ta = g.leaf(a, vec![m, k], false).unwrap();
        let tb = g.leaf(b, vec![k, n], false).unwrap();
        let c = g.matmul(ta, tb).unwrap();
        for (got, want) in g.value(c).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(vec![0.0; 6], vec![2, 3], false).unwrap();
        let b = g.leaf(vec![0.0; 8], vec![4, 2], false).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2x3]") && msg.contains("[4x2]"), "{msg}");
    }

    #[test]
    fn matmul_associativity() {
        let mut rng = crate::rng::substream(3, "test/assoc");
        for _ in 0..20 {
            let (m, k, n, p) = (4, 3, 5, 2);
            let a = rand_vec(&mut rng, m * k);
            let b = rand_vec(&mut rng, k * n);
            let c = rand_vec(&mut rng, n * p);
            let mut g = Graph::new();
            let ta = g.leaf(a, vec![m, k], false).unwrap();
            let tb = g.leaf(b, vec![k, n], false).unwrap();
            let tc = g.leaf(c, vec![n, p], false).unwrap();
            let ab = g.matmul(ta, tb).unwrap();
            let ab_c = g.matmul(ab, tc).unwrap();
            let bc = g.matmul(tb, tc).unwrap();
            let a_bc = g.matmul(ta, bc).unwrap();
            for (x, y) in g.value(ab_c).iter().zip(g.value(a_bc)) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn exp_log_inverse_pair() {
        let mut g = Graph::new();
        let z = g.leaf(vec![0.0; 3], vec![3], false).unwrap();
        let e = g.exp(z).unwrap();
        assert_eq!(g.value(e), &[1.0, 1.0, 1.0]);

        let xs: Vec<f64> = (0..21).map(|i| -5.0 + 0.5 * i as f64).collect();
        let x = g.leaf(xs.clone(), vec![21], false).unwrap();
        let back = {
            let e = g.exp(x).unwrap();
            g.log(e).unwrap()
        };
        for (got, want) in g.value(back).iter().zip(&xs) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn log_rejects_non_positive_and_div_rejects_zero() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 0.0], vec![2], false).unwrap();
        assert!(matches!(g.log(x), Err(Error::Domain(_))));
        let y = g.leaf(vec![1.0, 2.0], vec![2], false).unwrap();
        assert!(matches!(g.div(y, x), Err(Error::Domain(_))));
    }

    #[test]
    fn exp_clamps_instead_of_overflowing() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1000.0], vec![1], false).unwrap();
        let e = g.exp(x).unwrap();
        assert!(g.value(e)[0].is_finite());
    }

    #[test]
    fn gelu_gradient_matches_central_difference() {
        let x0 = 0.5;
        let analytic = gelu_derivative(x0);
        let numeric = central_diff(|x| gelu_forward(x), x0, 1e-6);
        assert!((analytic - numeric).abs() < 1e-6, "{analytic} vs {numeric}");
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g = Graph::new();
        let x = g.leaf(vec![0.0, 0.0, 0.0], vec![3], false).unwrap();
        let s = g.softmax(x, 0).unwrap();
        for v in g.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = g.leaf(vec![1000.0, 0.0, 0.0], vec![3], false).unwrap();
        let s2 = g.softmax(y, 0).unwrap();
        let v = g.value(s2);
        assert!((v[0] - 1.0).abs() < 1e-9 && v[1].abs() < 1e-9 && v[2].abs() < 1e-9);
    }

    #[test]
    fn layer_norm_constant_row_maps_to_beta() {
        let mut g = Graph::new();
        let x = g.leaf(vec![3.0, 3.0, 3.0, 3.0], vec![1, 4], false).unwrap();
        let gamma = g.leaf(vec![1.0; 4], vec![4], false).unwrap();
        let beta = g.leaf(vec![0.0; 4], vec![4], false).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for v in g.value(y) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_row_statistics() {
        let mut rng = crate::rng::substream(5, "test/ln");
        let mut g = Graph::new();
        let data = rand_vec(&mut rng, 4 * 8);
        let x = g.leaf(data, vec![4, 8], false).unwrap();
        let gamma = g.leaf(vec![1.0; 8], vec![8], false).unwrap();
        let beta = g.leaf(vec![0.0; 8], vec![8], false).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-10).unwrap();
        let out = g.value(y);
        for r in 0..4 {
            let row = &out[r * 8..(r + 1) * 8];
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6, "row mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "row var {var}");
        }
    }

    #[test]
    fn backward_sum_gives_ones_and_square_gives_2x() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![4], true).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0, 3.0], vec![3], true).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));

        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
        g.reset_grads();
        g.backward(s).unwrap();
    }

    /// Finite-difference sweep over a composite expression exercising every
    /// differentiable op in the module.
    #[test]
    fn finite_difference_sweep_over_all_ops() {
        let mut rng = crate::rng::substream(17, "test/fd");
        for trial in 0..8 {
            let x0 = rand_vec(&mut rng, 3 * 4);
            let w0 = rand_vec(&mut rng, 4 * 3);
            let b0 = rand_vec(&mut rng, 3);
            let gm0 = rand_vec(&mut rng, 4);
            let bt0 = rand_vec(&mut rng, 4);
            let labels = [2usize, 0, 1];

            let eval = |x: &[f64], w: &[f64], b: &[f64], gm: &[f64], bt: &[f64]| -> f64 {
                let mut g = Graph::new();
                let tx = g.leaf(x.to_vec(), vec![3, 4], true).unwrap();
                let tw = g.leaf(w.to_vec(), vec![4, 3], true).unwrap();
                let tb = g.leaf(b.to_vec(), vec![3], true).unwrap();
                let tg = g.leaf(gm.to_vec(), vec![4], true).unwrap();
                let tt = g.leaf(bt.to_vec(), vec![4], true).unwrap();
                let ln = g.layer_norm(tx, tg, tt, 1e-5).unwrap();
                let act = g.gelu(ln).unwrap();
                let h = g.matmul(act, tw).unwrap();
                let h = g.add_bias(h, tb).unwrap();
                let nrm = g.normalize_rows(h).unwrap();
                let p = g.softmax(nrm, 1).unwrap();
                let picked = g.select_per_row(p, &labels).unwrap();
                let lg = g.log(picked).unwrap();
                let top = g.slice_rows(lg, 0, 2).unwrap();
                let rest = g.gather_rows(lg, &[2, 2]).unwrap();
                let cat = g.concat_rows(&[top, rest]).unwrap();
                let rs = g.sum_axis(cat, 0).unwrap();
                let e = g.exp(rs).unwrap();
                let m = g.mean(e).unwrap();
                g.scalar_value(m)
            };

            let mut g = Graph::new();
            let tx = g.leaf(x0.clone(), vec![3, 4], true).unwrap();
            let tw = g.leaf(w0.clone(), vec![4, 3], true).unwrap();
            let tb = g.leaf(b0.clone(), vec![3], true).unwrap();
            let tg = g.leaf(gm0.clone(), vec![4], true).unwrap();
            let tt = g.leaf(bt0.clone(), vec![4], true).unwrap();
            let ln = g.layer_norm(tx, tg, tt, 1e-5).unwrap();
            let act = g.gelu(ln).unwrap();
            let h = g.matmul(act, tw).unwrap();
            let h = g.add_bias(h, tb).unwrap();
            let nrm = g.normalize_rows(h).unwrap();
            let p = g.softmax(nrm, 1).unwrap();
            let picked = g.select_per_row(p, &labels).unwrap();
            let lg = g.log(picked).unwrap();
            let top = g.slice_rows(lg, 0, 2).unwrap();
            let rest = g.gather_rows(lg, &[2, 2]).unwrap();
            let cat = g.concat_rows(&[top, rest]).unwrap();
            let rs = g.sum_axis(cat, 0).unwrap();
            let e = g.exp(rs).unwrap();
            let m = g.mean(e).unwrap();
            g.backward(m).unwrap();

            let h = 1e-5;
            let params: Vec<(TensorId, Vec<f64>, usize)> = vec![
                (tx, x0.clone(), 0),
                (tw, w0.clone(), 1),
                (tb, b0.clone(), 2),
                (tg, gm0.clone(), 3),
                (tt, bt0.clone(), 4),
            ];
            for (id, vals, which) in params {
                let analytic = g.grad(id).unwrap().to_vec();
                for j in 0..vals.len() {
                    let mut plus = vals.clone();
                    let mut minus = vals.clone();
                    plus[j] += h;
                    minus[j] -= h;
                    let call = |v: &[f64]| match which {
                        0 => eval(v, &w0, &b0, &gm0, &bt0),
                        1 => eval(&x0, v, &b0, &gm0, &bt0),
                        2 => eval(&x0, &w0, v, &gm0, &bt0),
                        3 => eval(&x0, &w0, &b0, v, &bt0),
                        _ => eval(&x0, &w0, &b0, &gm0, v),
                    };
                    let numeric = (call(&plus) - call(&minus)) / (2.0 * h);
                    let err = rel_err(analytic[j], numeric);
                    assert!(
                        err < 1e-4,
                        "trial {trial} param {which}[{j}]: analytic {} vs numeric {} (err {err})",
                        analytic[j],
                        numeric
                    );
                }
            }
        }
    }

    #[test]
    fn normalize_rows_is_bitwise_idempotent() {
        let mut rng = crate::rng::substream(23, "test/norm");
        let data = rand_vec(&mut rng, 6 * 32);
        let mut g = Graph::new();
        let x = g.leaf(data, vec![6, 32], false).unwrap();
        let n1 = g.normalize_rows(x).unwrap();
        let n2 = g.normalize_rows(n1).unwrap();
        assert_eq!(g.value(n1), g.value(n2));
    }

    #[test]
    fn normalize_rows_rejects_zero_row() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 0.0, 0.0, 0.0], vec![2, 2], false).unwrap();
        assert!(matches!(g.normalize_rows(x), Err(Error::ZeroRow { row: 1 })));
    }

    #[test]
    fn replay_is_deterministic() {
        let build = || {
            let mut rng = crate::rng::substream(99, "test/replay");
            let x = rand_vec(&mut rng, 4 * 4);
            let mut g = Graph::new();
            let t = g.leaf(x, vec![4, 4], true).unwrap();
            let s = g.softmax(t, 1).unwrap();
            let m = g.mean(s).unwrap();
            g.scalar_value(m).to_bits()
        };
        assert_eq!(build(), build());
    }

    proptest! {
        #[test]
        fn softmax_rows_are_probability_vectors(rows in 1usize..5, cols in 2usize..6, seed in 0u64..500) {
            let mut rng = crate::rng::substream(seed, "prop/softmax");
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-30.0..30.0)).collect();
            let mut g = Graph::new();
            let x = g.leaf(data, vec![rows, cols], false).unwrap();
            let s = g.softmax(x, 1).unwrap();
            let out = g.value(s);
            for r in 0..rows {
                let row = &out[r * cols..(r + 1) * cols];
                prop_assert!(row.iter().all(|v| *v >= 0.0));
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn normalize_rows_unit_norm(rows in 1usize..5, cols in 2usize..9, seed in 0u64..500) {
            let mut rng = crate::rng::substream(seed, "prop/norm");
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
            prop_assume!(data.chunks(cols).all(|row| row.iter().map(|v| v * v).sum::<f64>() > 1e-6));
            let mut g = Graph::new();
            let x = g.leaf(data, vec![rows, cols], false).unwrap();
            let nrm = g.normalize_rows(x).unwrap();
            for row in g.value(nrm).chunks(cols) {
                let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() < 1e-9);
            }
        }
    }
}
