use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::gemm::{gemm, MatRef};
use super::{accumulate, Graph, Node, SparseMap, Var};
use crate::error::{bail, Result};

pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, b_batched: bool, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MulConst(Var, Vec<f64>),
    Sigmoid(Var),
    Gelu(Var),
    Log(Var),
    Recip(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Sum(Var),
    ColMax { x: Var, argmax: Vec<usize> },
    Gather { x: Var, index: Vec<usize> },
    ConcatCols { parts: Vec<Var>, widths: Vec<usize> },
    Resample { x: Var, map: Arc<SparseMap>, channels: usize },
    RowNormalize { x: Var, norms: Vec<f64> },
    Reshape(Var),
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } => vec![*a, *b],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b) | MulScalar(a, b) => {
                vec![*a, *b]
            }
            Scale(x, _) | Offset(x) | MulConst(x, _) | Sigmoid(x) | Gelu(x) | Log(x) | Recip(x)
            | Powf(x, _) | Clamp(x, _, _) | Softmax(x) | Sum(x) | Reshape(x) => vec![*x],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            ColMax { x, .. } | Gather { x, .. } | Resample { x, .. } | RowNormalize { x, .. } => {
                vec![*x]
            }
            ConcatCols { parts, .. } => parts.clone(),
        }
    }
}

/// Splits a shape into (rows, last-dimension width).
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let total: usize = shape.iter().product();
    (if cols == 0 { 0 } else { total / cols }, cols)
}

const SQRT_2: f64 = core::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn gaussian_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

impl Graph {
    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let n = self.node(x);
        let value = n.value.iter().map(|&v| f(v)).collect();
        let shape = n.shape.clone();
        self.push(shape, value, op)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(Shape, "{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b));
        }
        Ok(())
    }

    /// `a [.., m, k] · b [.., k, n]`; `b` may also be a plain `[k, n]` shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [.., m, k] · b[.., n, k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            bail!(Shape, "matmul needs matrices, got {:?} and {:?}", sa, sb);
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            bail!(Shape, "matmul inner dimensions differ: {:?} · {:?}", sa, sb);
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let b_batched = !lead_b.is_empty();
        if b_batched && lead_a != lead_b {
            bail!(Shape, "matmul batch dimensions differ: {:?} · {:?}", sa, sb);
        }
        let batch: usize = lead_a.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let av = &self.node(a).value;
            let bv = &self.node(b).value;
            for t in 0..batch {
                let a_mat = MatRef::new(&av[t * m * k..(t + 1) * m * k], m, k);
                let b_off = if b_batched { t * k * n } else { 0 };
                let b_slice = &bv[b_off..b_off + k * n];
                let b_mat =
                    if trans_b { MatRef::transposed(b_slice, k, n) } else { MatRef::new(b_slice, k, n) };
                gemm(a_mat, b_mat, &mut out[t * m * n..(t + 1) * m * n], false);
            }
        }
        let mut shape = lead_a.to_vec();
        shape.extend_from_slice(&[m, n]);
        Ok(self.push(shape, out, Op::MatMul { a, b, batch, m, k, n, b_batched, trans_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b)))
    }

    fn row_operand(&self, x: Var, row: Var, what: &str) -> Result<usize> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.value(row).len() != cols {
            bail!(Shape, "{what}: row of shape {:?} does not match {:?}", self.shape(row), self.shape(x));
        }
        Ok(cols)
    }

    /// `x [.., n] + r [n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.row_operand(x, row, "add_row")?;
        let r = self.value(row);
        let value = self.value(x).iter().enumerate().map(|(i, v)| v + r[i % cols]).collect();
        Ok(self.push(self.shape(x).to_vec(), value, Op::AddRow(x, row)))
    }

    /// `x [.., n] ⊙ r [n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.row_operand(x, row, "mul_row")?;
        let r = self.value(row);
        let value = self.value(x).iter().enumerate().map(|(i, v)| v * r[i % cols]).collect();
        Ok(self.push(self.shape(x).to_vec(), value, Op::MulRow(x, row)))
    }

    /// `x · s` for a one-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            bail!(Shape, "mul_scalar needs a scalar, got {:?}", self.shape(s));
        }
        let c = self.value(s)[0];
        let value = self.value(x).iter().map(|v| v * c).collect();
        Ok(self.push(self.shape(x).to_vec(), value, Op::MulScalar(x, s)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::Offset(x))
    }

    /// Elementwise product with a constant array.
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        if factor.len() != self.value(x).len() {
            bail!(Shape, "mul_const: {} factors for {:?}", factor.len(), self.shape(x));
        }
        let value = self.value(x).iter().zip(&factor).map(|(v, f)| v * f).collect();
        Ok(self.push(self.shape(x).to_vec(), value, Op::MulConst(x, factor)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, Op::Sigmoid(x))
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * gaussian_cdf(v), Op::Gelu(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, libm::log, Op::Log(x))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / v, Op::Recip(x))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, |v| libm::pow(v, p), Op::Powf(x, p))
    }

    /// Clamps to `[lo, hi]`; clamped entries pass no gradient.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    /// Softmax over the last dimension, max-shifted.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if cols == 0 {
            bail!(Shape, "softmax over an empty last dimension");
        }
        let mut value = self.value(x).to_vec();
        for r in 0..rows {
            let row = &mut value[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - max);
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        Ok(self.push(self.shape(x).to_vec(), value, Op::Softmax(x)))
    }

    /// Per-row normalisation to zero mean / unit (biased) variance, then `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            bail!(Config, "layer_norm eps must be positive, got {eps}");
        }
        let (rows, cols) = rows_cols(self.shape(x));
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            bail!(Shape, "layer_norm affine parameters must have {cols} entries");
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            rstd[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                value[r * cols + c] = h * gv[c] + bv[c];
            }
        }
        Ok(self.push(self.shape(x).to_vec(), value, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        self.push(vec![1], vec![total], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Column-wise maximum of a `[rows, cols]` matrix, giving `[1, cols]`.
    /// Ties go to the first row.
    pub fn col_max(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if rows == 0 {
            bail!(Shape, "col_max over zero rows");
        }
        let xv = self.value(x);
        let mut argmax = vec![0usize; cols];
        let mut value = vec![f64::NEG_INFINITY; cols];
        for r in 0..rows {
            for c in 0..cols {
                let v = xv[r * cols + c];
                if v > value[c] {
                    value[c] = v;
                    argmax[c] = r * cols + c;
                }
            }
        }
        Ok(self.push(vec![1, cols], value, Op::ColMax { x, argmax }))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != index.len() {
            bail!(Shape, "gather: {} indices for shape {:?}", index.len(), shape);
        }
        let xv = self.value(x);
        if let Some(bad) = index.iter().find(|&&i| i >= xv.len()) {
            bail!(Shape, "gather index {bad} out of range for {} values", xv.len());
        }
        let value = index.iter().map(|&i| xv[i]).collect();
        Ok(self.push(shape.to_vec(), value, Op::Gather { x, index }))
    }

    /// Columns `start..start + width` of a 2-D `[rows, cols]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if start + width > cols {
            bail!(Shape, "slice_cols {start}..{} beyond {cols} columns", start + width);
        }
        let index = (0..rows).flat_map(|r| (start..start + width).map(move |c| r * cols + c)).collect();
        self.gather(x, index, &[rows, width])
    }

    /// Transpose of a 2-D matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        let index = (0..cols).flat_map(|c| (0..rows).map(move |r| r * cols + c)).collect();
        self.gather(x, index, &[cols, rows])
    }

    /// Side-by-side concatenation of 2-D matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Shape, "concat_cols of nothing");
        };
        let (rows, _) = rows_cols(self.shape(first));
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if r != rows {
                bail!(Shape, "concat_cols: {r} rows vs {rows}");
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut value = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for r in 0..rows {
                value[r * total + offset..r * total + offset + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(vec![rows, total], value, Op::ConcatCols { parts: parts.to_vec(), widths }))
    }

    /// Applies a fixed sparse map over the rows of a `[rows_in, C]` matrix.
    pub fn resample(&mut self, x: Var, map: Arc<SparseMap>) -> Result<Var> {
        let (rows, channels) = rows_cols(self.shape(x));
        if rows != map.rows_in() {
            bail!(Shape, "resample expects {} rows, got {rows}", map.rows_in());
        }
        let mut value = vec![0.0; map.rows_out() * channels];
        map.apply(self.value(x), channels, &mut value);
        let shape = vec![map.rows_out(), channels];
        Ok(self.push(shape, value, Op::Resample { x, map, channels }))
    }

    /// Corner-aligned bilinear upsampling of a `[C, h, w]` tensor.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if ![2, 4, 8, 16].contains(&factor) {
            bail!(Config, "unsupported upsample factor {factor}");
        }
        let shape = self.shape(x).to_vec();
        let [c, h, w] = shape[..] else {
            bail!(Shape, "upsample_bilinear expects [C, h, w], got {:?}", shape);
        };
        let map = Arc::new(SparseMap::bilinear_upsample(h, w, factor)?);
        let flat = self.reshape(x, &[c, h * w])?;
        let tokens = self.transpose(flat)?;
        let up = self.resample(tokens, map)?;
        let back = self.transpose(up)?;
        self.reshape(back, &[c, h * factor, w * factor])
    }

    /// Divides every row by its Euclidean norm (floored at 1e-12).
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let (rows, cols) = rows_cols(self.shape(x));
        let xv = self.value(x);
        let mut norms = vec![0.0; rows];
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let n = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(1e-12);
            norms[r] = n;
            for c in 0..cols {
                value[r * cols + c] = row[c] / n;
            }
        }
        self.push(self.shape(x).to_vec(), value, Op::RowNormalize { x, norms })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            bail!(Shape, "cannot reshape {:?} to {:?}", self.shape(x), shape);
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x)))
    }
}

pub(crate) fn backward_node(graph: &Graph, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    use Op::*;
    let val = |v: Var| graph.value(v);
    match &node.op {
        Leaf => {}
        MatMul { a, b, batch, m, k, n, b_batched, trans_b } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (val(*a), val(*b));
            accumulate(graph, grads, *a, |ga| {
                for t in 0..*batch {
                    let gm = MatRef::new(&g[t * m * n..(t + 1) * m * n], m, n);
                    let b_off = if *b_batched { t * k * n } else { 0 };
                    let b_slice = &bv[b_off..b_off + k * n];
                    // dA = dC · op(B)ᵀ
                    let bt =
                        if *trans_b { MatRef::new(b_slice, n, k) } else { MatRef::transposed(b_slice, n, k) };
                    gemm(gm, bt, &mut ga[t * m * k..(t + 1) * m * k], true);
                }
            });
            accumulate(graph, grads, *b, |gb| {
                for t in 0..*batch {
                    let a_slice = &av[t * m * k..(t + 1) * m * k];
                    let g_slice = &g[t * m * n..(t + 1) * m * n];
                    let b_off = if *b_batched { t * k * n } else { 0 };
                    let dst = &mut gb[b_off..b_off + k * n];
                    if *trans_b {
                        // B stored [n, k]: dB = dCᵀ · A
                        gemm(MatRef::transposed(g_slice, n, m), MatRef::new(a_slice, m, k), dst, true);
                    } else {
                        // dB = Aᵀ · dC
                        gemm(MatRef::transposed(a_slice, k, m), MatRef::new(g_slice, m, n), dst, true);
                    }
                }
            });
        }
        Add(a, b) => {
            accumulate(graph, grads, *a, |ga| add_into(ga, g));
            accumulate(graph, grads, *b, |gb| add_into(gb, g));
        }
        Sub(a, b) => {
            accumulate(graph, grads, *a, |ga| add_into(ga, g));
            accumulate(graph, grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
        }
        Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(graph, grads, *a, |ga| {
                ga.iter_mut().zip(g).zip(bv).for_each(|((d, s), y)| *d += s * y)
            });
            accumulate(graph, grads, *b, |gb| {
                gb.iter_mut().zip(g).zip(av).for_each(|((d, s), x)| *d += s * x)
            });
        }
        AddRow(x, r) => {
            let cols = val(*r).len();
            accumulate(graph, grads, *x, |gx| add_into(gx, g));
            accumulate(graph, grads, *r, |gr| {
                for (i, s) in g.iter().enumerate() {
                    gr[i % cols] += s;
                }
            });
        }
        MulRow(x, r) => {
            let (xv, rv) = (val(*x), val(*r));
            let cols = rv.len();
            accumulate(graph, grads, *x, |gx| {
                for (i, s) in g.iter().enumerate() {
                    gx[i] += s * rv[i % cols];
                }
            });
            accumulate(graph, grads, *r, |gr| {
                for (i, s) in g.iter().enumerate() {
                    gr[i % cols] += s * xv[i];
                }
            });
        }
        MulScalar(x, s) => {
            let (xv, c) = (val(*x), val(*s)[0]);
            accumulate(graph, grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(d, v)| *d += v * c));
            accumulate(graph, grads, *s, |gs| gs[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>());
        }
        Scale(x, c) => accumulate(graph, grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(d, v)| *d += v * c)),
        Offset(x) | Reshape(x) => accumulate(graph, grads, *x, |gx| add_into(gx, g)),
        MulConst(x, f) => {
            accumulate(graph, grads, *x, |gx| gx.iter_mut().zip(g).zip(f).for_each(|((d, v), c)| *d += v * c))
        }
        Sigmoid(x) => {
            let y = &node.value;
            accumulate(graph, grads, *x, |gx| {
                gx.iter_mut().zip(g).zip(y).for_each(|((d, v), y)| *d += v * y * (1.0 - y))
            });
        }
        Gelu(x) => {
            let xv = val(*x);
            accumulate(graph, grads, *x, |gx| {
                gx.iter_mut().zip(g).zip(xv).for_each(|((d, v), &x)| {
                    let pdf = INV_SQRT_2PI * libm::exp(-0.5 * x * x);
                    *d += v * (gaussian_cdf(x) + x * pdf);
                })
            });
        }
        Log(x) => {
            let xv = val(*x);
            accumulate(graph, grads, *x, |gx| gx.iter_mut().zip(g).zip(xv).for_each(|((d, v), x)| *d += v / x));
        }
        Recip(x) => {
            let xv = val(*x);
            accumulate(graph, grads, *x, |gx| {
                gx.iter_mut().zip(g).zip(xv).for_each(|((d, v), x)| *d -= v / (x * x))
            });
        }
        Powf(x, p) => {
            let xv = val(*x);
            accumulate(graph, grads, *x, |gx| {
                gx.iter_mut().zip(g).zip(xv).for_each(|((d, v), &x)| *d += v * p * libm::pow(x, p - 1.0))
            });
        }
        Clamp(x, lo, hi) => {
            let xv = val(*x);
            accumulate(graph, grads, *x, |gx| {
                gx.iter_mut().zip(g).zip(xv).for_each(|((d, v), &x)| {
                    if x >= *lo && x <= *hi {
                        *d += v;
                    }
                })
            });
        }
        Softmax(x) => {
            let y = &node.value;
            let (rows, cols) = rows_cols(&node.shape);
            accumulate(graph, grads, *x, |gx| {
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, d) in gx[span].iter_mut().enumerate() {
                        *d += yr[c] * (gr[c] - dot);
                    }
                }
            });
        }
        LayerNorm { x, gain, bias, xhat, rstd } => {
            let (rows, cols) = rows_cols(&node.shape);
            let gv = val(*gain);
            accumulate(graph, grads, *x, |gx| {
                let nf = cols as f64;
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let (h, gr) = (&xhat[span.clone()], &g[span.clone()]);
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for c in 0..cols {
                        let dh = gr[c] * gv[c];
                        sum_d += dh;
                        sum_dh += dh * h[c];
                    }
                    for (c, d) in gx[span].iter_mut().enumerate() {
                        let dh = gr[c] * gv[c];
                        *d += rstd[r] / nf * (nf * dh - sum_d - h[c] * sum_dh);
                    }
                }
            });
            accumulate(graph, grads, *gain, |gg| {
                for (i, v) in g.iter().enumerate() {
                    gg[i % cols] += v * xhat[i];
                }
            });
            accumulate(graph, grads, *bias, |gb| {
                for (i, v) in g.iter().enumerate() {
                    gb[i % cols] += v;
                }
            });
        }
        Sum(x) => accumulate(graph, grads, *x, |gx| gx.iter_mut().for_each(|d| *d += g[0])),
        ColMax { x, argmax } => {
            accumulate(graph, grads, *x, |gx| {
                for (c, &i) in argmax.iter().enumerate() {
                    gx[i] += g[c];
                }
            });
        }
        Gather { x, index } => {
            accumulate(graph, grads, *x, |gx| {
                for (o, &i) in index.iter().enumerate() {
                    gx[i] += g[o];
                }
            });
        }
        ConcatCols { parts, widths } => {
            let total: usize = widths.iter().sum();
            let rows = if total == 0 { 0 } else { g.len() / total };
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(widths) {
                accumulate(graph, grads, p, |gp| {
                    for r in 0..rows {
                        let src = &g[r * total + offset..r * total + offset + w];
                        add_into(&mut gp[r * w..(r + 1) * w], src);
                    }
                });
                offset += w;
            }
        }
        Resample { x, map, channels } => {
            accumulate(graph, grads, *x, |gx| map.apply_transpose_acc(g, *channels, gx));
        }
        RowNormalize { x, norms } => {
            let y = &node.value;
            let (rows, cols) = rows_cols(&node.shape);
            accumulate(graph, grads, *x, |gx| {
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, d) in gx[span].iter_mut().enumerate() {
                        *d += (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
