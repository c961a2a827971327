//! A small reverse-mode differentiation tape over dense matrices.
//!
//! Every node holds its forward value. `backward` walks the recorded nodes in
//! reverse and accumulates adjoints; leaves flagged trainable get their gradient
//! reported, everything else is discarded.

use crate::error::{Error, Result};
use crate::numcore::dft::apply_spectral_multiplier;
use crate::numcore::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One scored row of a sampled-softmax loss: the hidden row at `position` is
/// scored against `candidates`, whose first entry is the positive.
#[derive(Debug, Clone)]
pub struct SoftmaxRow {
    pub position: usize,
    pub candidates: Vec<usize>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf {
        trainable: bool,
    },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: DenseMatrix,
        inv_std: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SpectralFilter {
        x: Var,
        gains: Vec<f64>,
    },
    SumSquares(Var),
    InnerConst {
        x: Var,
        weight: DenseMatrix,
    },
    SampledSoftmax {
        hidden: Var,
        table: Var,
        rows: Vec<SoftmaxRow>,
        probs: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: DenseMatrix,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the trainable leaves.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
    /// Trainable leaves the loss does not depend on; their gradient is zero.
    pub unreachable: Vec<Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseMatrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<DenseMatrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const LN_EPS: f64 = 1e-5;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Row-wise softmax, masking entries above the diagonal when `causal`.
pub fn softmax_rows(x: &DenseMatrix, causal: bool) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let width = if causal { (r + 1).min(x.cols()) } else { x.cols() };
        let row = &x.row(r)[..width];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let dst = out.row_mut(r);
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in &mut dst[..width] {
            *d /= total;
        }
    }
    out
}

fn layer_norm_forward(
    x: &DenseMatrix,
    gain: &DenseMatrix,
    bias: &DenseMatrix,
) -> (DenseMatrix, DenseMatrix, Vec<f64>) {
    let (rows, cols) = x.shape();
    let mut normalized = DenseMatrix::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    let mut out = DenseMatrix::zeros(rows, cols);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for c in 0..cols {
            let xh = (row[c] - mean) * is;
            normalized[(r, c)] = xh;
            out[(r, c)] = xh * gain[(0, c)] + bias[(0, c)];
        }
    }
    (out, normalized, inv_std)
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

    fn push(&mut self, value: DenseMatrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf { trainable: true })
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf { trainable: false })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds the `1×c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a single row");
        assert_eq!(b.cols(), self.value(a).cols(), "bias width mismatch");
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(b.row(0)) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    /// Causal row softmax: row `r` only sees columns `0..=r`.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a), true);
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (out, normalized, inv_std) =
            layer_norm_forward(self.value(x), self.value(gain), self.value(bias));
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_cols(start, len);
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut v = DenseMatrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows(), rows, "concat row mismatch");
            for r in 0..rows {
                v.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols(), cols, "concat column mismatch");
            data.extend_from_slice(m.as_slice());
        }
        let v = DenseMatrix::from_vec(data.len() / cols, cols, data).unwrap();
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = self.value(x).select_rows(idx);
        self.push(
            v,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// DFT → per-bin real gain → inverse DFT along rows. The operator is its own
    /// adjoint when the gains are conjugate-symmetric.
    pub fn spectral_filter(&mut self, x: Var, gains: &[f64]) -> Result<Var> {
        let v = apply_spectral_multiplier(self.value(x), gains)?;
        Ok(self.push(
            v,
            Op::SpectralFilter {
                x,
                gains: gains.to_vec(),
            },
        ))
    }

    /// Scalar `‖a‖²_F`.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = DenseMatrix::from_vec(1, 1, vec![self.value(a).frobenius_sq()]).unwrap();
        self.push(v, Op::SumSquares(a))
    }

    /// Scalar `Σ a ⊙ weight` for a constant `weight`.
    pub fn inner_const(&mut self, a: Var, weight: DenseMatrix) -> Var {
        assert_eq!(self.value(a).shape(), weight.shape());
        let s: f64 = self
            .value(a)
            .as_slice()
            .iter()
            .zip(weight.as_slice())
            .map(|(x, w)| x * w)
            .sum();
        let v = DenseMatrix::from_vec(1, 1, vec![s]).unwrap();
        self.push(v, Op::InnerConst { x: a, weight })
    }

    /// Mean cross-entropy of the positive (first) candidate over all rows, with
    /// logits `hidden[position] · table[candidate]`.
    pub fn sampled_softmax(&mut self, hidden: Var, table: Var, rows: Vec<SoftmaxRow>) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::input("sampled softmax over zero rows"));
        }
        let h = self.value(hidden);
        let tb = self.value(table);
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(rows.len());
        for row in &rows {
            let hr = h.row(row.position);
            let logits: Vec<f64> = row
                .candidates
                .iter()
                .map(|&c| crate::numcore::dot(hr, tb.row(c)))
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            loss += total.ln() + max - logits[0];
            probs.push(exps.iter().map(|e| e / total).collect());
        }
        loss /= rows.len() as f64;
        let v = DenseMatrix::from_vec(1, 1, vec![loss]).unwrap();
        Ok(self.push(
            v,
            Op::SampledSoftmax {
                hidden,
                table,
                rows,
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::input("backward needs a scalar (1x1) loss"));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<DenseMatrix>> = vec![None; n];
        adj[loss.0] = Some(DenseMatrix::from_vec(1, 1, vec![1.0]).unwrap());

        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { .. } => {
                    adj[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    // out = a bᵀ: da = g b, db = gᵀ a
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::AddRow(a, b) => {
                    let mut gb = DenseMatrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (x, y) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    accumulate(&mut adj, *a, g);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Scale(a, s) => accumulate(&mut adj, *a, g.scale(*s)),
                Op::Gelu(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| gv * gelu_grad(x));
                    accumulate(&mut adj, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let p = &node.value;
                    let mut ga = DenseMatrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let pr = p.row(r);
                        let gr = g.row(r);
                        let s: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for (c, dst) in ga.row_mut(r).iter_mut().enumerate() {
                            *dst = pr[c] * (gr[c] - s);
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let (rows, cols) = normalized.shape();
                    let gv = self.value(*gain);
                    let mut gx = DenseMatrix::zeros(rows, cols);
                    let mut ggain = DenseMatrix::zeros(1, cols);
                    let mut gbias = DenseMatrix::zeros(1, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = normalized.row(r);
                        let dxh: Vec<f64> = (0..cols).map(|c| gr[c] * gv[(0, c)]).collect();
                        let mean_d = dxh.iter().sum::<f64>() / cols as f64;
                        let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            gx[(r, c)] = inv_std[r] * (dxh[c] - mean_d - xh[c] * mean_dx);
                            ggain[(0, c)] += gr[c] * xh[c];
                            gbias[(0, c)] += gr[c];
                        }
                    }
                    accumulate(&mut adj, *x, gx);
                    accumulate(&mut adj, *gain, ggain);
                    accumulate(&mut adj, *bias, gbias);
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut gx = DenseMatrix::zeros(rows, cols);
                    for r in 0..rows {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut adj, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        accumulate(&mut adj, *p, g.slice_cols(offset, w));
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let h = self.value(*p).rows();
                        let idx: Vec<usize> = (offset..offset + h).collect();
                        accumulate(&mut adj, *p, g.select_rows(&idx));
                        offset += h;
                    }
                }
                Op::GatherRows { x, idx } => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut gx = DenseMatrix::zeros(rows, cols);
                    for (src, &dst) in idx.iter().enumerate() {
                        for (a, b) in gx.row_mut(dst).iter_mut().zip(g.row(src)) {
                            *a += b;
                        }
                    }
                    accumulate(&mut adj, *x, gx);
                }
                Op::SpectralFilter { x, gains } => {
                    let gx = apply_spectral_multiplier(&g, gains)?;
                    accumulate(&mut adj, *x, gx);
                }
                Op::SumSquares(a) => {
                    let s = g[(0, 0)];
                    accumulate(&mut adj, *a, self.value(*a).scale(2.0 * s));
                }
                Op::InnerConst { x, weight } => {
                    accumulate(&mut adj, *x, weight.scale(g[(0, 0)]));
                }
                Op::SampledSoftmax {
                    hidden,
                    table,
                    rows,
                    probs,
                } => {
                    let s = g[(0, 0)] / rows.len() as f64;
                    let h = self.value(*hidden);
                    let tb = self.value(*table);
                    let mut gh = DenseMatrix::zeros(h.rows(), h.cols());
                    let mut gt = DenseMatrix::zeros(tb.rows(), tb.cols());
                    for (row, p) in rows.iter().zip(probs) {
                        let hr = h.row(row.position).to_vec();
                        for (j, &cand) in row.candidates.iter().enumerate() {
                            let coeff = s * (p[j] - if j == 0 { 1.0 } else { 0.0 });
                            if coeff == 0.0 {
                                continue;
                            }
                            for (dst, v) in gh.row_mut(row.position).iter_mut().zip(tb.row(cand)) {
                                *dst += coeff * v;
                            }
                            for (dst, v) in gt.row_mut(cand).iter_mut().zip(&hr) {
                                *dst += coeff * v;
                            }
                        }
                    }
                    accumulate(&mut adj, *hidden, gh);
                    accumulate(&mut adj, *table, gt);
                }
            }
        }

        let mut grads = vec![None; self.nodes.len()];
        let mut unreachable = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { trainable: true } = node.op {
                match adj.get_mut(i).and_then(Option::take) {
                    Some(g) => grads[i] = Some(g),
                    None => {
                        let (r, c) = node.value.shape();
                        grads[i] = Some(DenseMatrix::zeros(r, c));
                        unreachable.push(Var(i));
                    }
                }
            }
        }
        Ok(Gradients { grads, unreachable })
    }
}

fn accumulate(adj: &mut [Option<DenseMatrix>], v: Var, g: DenseMatrix) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
