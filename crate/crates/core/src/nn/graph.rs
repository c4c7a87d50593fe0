//! Eager tape for reverse-mode differentiation over 2-D matrices.
//!
//! Every op computes its value when it is recorded. `backward` walks the tape
//! in reverse and returns gradients for every node and every parameter that
//! took part.

use std::collections::HashMap;

use super::param::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(usize),
    MatMul { a: Var, b: Var, trans_b: bool, blocks: usize },
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Silu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    Gather { a: Var, idx: Vec<usize> },
    Repeat { a: Var, each: usize },
    RowMix { a: Var, b: Var, take_a: Vec<bool> },
    RowScale { a: Var, scale: Vec<f64> },
    RowNormalize { a: Var, norms: Vec<f64> },
    MseConst { a: Var, target: Vec<f64> },
    DotConst { a: Var, weights: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: HashMap<usize, Var>,
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a parameter by id; `None` if it did not influence the output.
    pub fn param_by_id(&self, id: usize) -> Option<&[f64]> {
        self.params.get(id).and_then(|g| g.as_deref())
    }

    pub fn node(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Drops the intermediate node gradients, keeping only parameter ones.
    pub fn into_params_only(mut self) -> Self {
        self.nodes = Vec::new();
        self
    }

    /// Multiplies every parameter gradient by `s`.
    pub fn scale(&mut self, s: f64) {
        for g in self.params.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

fn shape_err(what: &str, detail: String) -> Error {
    Error::InvalidShape(format!("{what}: {detail}"))
}

// c[n,m] += a[n,k] b[k,m]
fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// c[n,m] += a[n,k] b[m,k]^T
fn mm_tb_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * m + j] += s;
        }
    }
}

// c[k,m] += a[n,k]^T b[n,m]
fn mm_ta_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * m..(p + 1) * m];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self { params, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { rows, cols, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::from_vec(&[n.rows, n.cols], n.value.clone()).expect("node shape")
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Const, false)
    }

    pub fn constant_rows(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(shape_err("constant", format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len())));
        }
        Ok(self.push(rows, cols, data, Op::Const, false))
    }

    /// Leaf for a named parameter; repeated requests return the same node.
    /// Frozen parameters are leaves without gradient.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name).ok_or_else(|| Error::InvalidInput(format!("unknown parameter `{name}`")))?;
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let p = self.params.by_id(id);
        let (rows, cols) = (p.value.rows(), p.value.cols());
        let v = self.push(rows, cols, p.value.data().to_vec(), Op::Param(id), p.trainable);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.node(*v).needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_blocks(a, b, false, 1)
    }

    /// `a b^T`.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_blocks(a, b, true, 1)
    }

    /// Block-diagonal product: rows of `a` and `b` are split into `blocks`
    /// equal chunks and chunk `i` of `a` multiplies chunk `i` of `b`
    /// (transposed when `trans_b`).
    pub fn matmul_blocks(&mut self, a: Var, b: Var, trans_b: bool, blocks: usize) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if blocks == 0 || ar % blocks != 0 || br % blocks != 0 {
            return Err(shape_err("matmul", format!("{ar}x{ac} and {br}x{bc} not divisible into {blocks} blocks")));
        }
        let (n, k) = (ar / blocks, ac);
        let (bk, m) = if trans_b { (bc, br / blocks) } else { (br / blocks, bc) };
        if k != bk {
            return Err(shape_err("matmul", format!("inner dims {k} vs {bk} (lhs {ar}x{ac}, rhs {br}x{bc})")));
        }
        let mut out = vec![0.0; blocks * n * m];
        {
            let av = &self.node(a).value;
            let bv = &self.node(b).value;
            for blk in 0..blocks {
                let asl = &av[blk * n * k..(blk + 1) * n * k];
                let bsl = &bv[blk * k * m..(blk + 1) * k * m];
                let csl = &mut out[blk * n * m..(blk + 1) * n * m];
                if trans_b {
                    mm_tb_acc(asl, bsl, csl, n, k, m);
                } else {
                    mm_acc(asl, bsl, csl, n, k, m);
                }
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(blocks * n, m, out, Op::MatMul { a, b, trans_b, blocks }, ng))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(what, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.node(a).value.iter().zip(&self.node(b).value).map(|(x, y)| x + y).collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.node(a).value.iter().zip(&self.node(b).value).map(|(x, y)| x - y).collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, v, Op::Sub(a, b), ng))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(shape_err("add_row", format!("row {:?} for {r}x{c}", self.shape(row))));
        }
        let rv = &self.node(row).value;
        let v = self.node(a).value.chunks(c).flat_map(|x| x.iter().zip(rv).map(|(p, q)| p + q)).collect();
        let ng = self.ng(&[a, row]);
        Ok(self.push(r, c, v, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.node(a).value.iter().map(|x| x * s).collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(&[a]);
        self.push(r, c, v, Op::Scale(a, s), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.node(a).value.iter().zip(&self.node(b).value).map(|(x, y)| x * y).collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, v, Op::Mul(a, b), ng))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.node(a).value.iter().map(|&x| silu(x)).collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(&[a]);
        self.push(r, c, v, Op::Silu(a), ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x c`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(shape_err("layer_norm", format!("affine params must be 1x{c}")));
        }
        let xv = &self.node(x).value;
        let g = &self.node(gamma).value;
        let b = &self.node(beta).value;
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(r, c, out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.node(a).value.clone();
        for row in out.chunks_mut(c.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let ng = self.ng(&[a]);
        self.push(r, c, out, Op::Softmax(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|p| self.shape(*p).0).ok_or_else(|| shape_err("concat_cols", "no inputs".into()))?;
        if parts.iter().any(|p| self.shape(*p).0 != r) {
            return Err(shape_err("concat_cols", "row counts differ".into()));
        }
        let c: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                let n = self.node(*p);
                out.extend_from_slice(&n.value[i * n.cols..(i + 1) * n.cols]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(r, c, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(shape_err("slice_cols", format!("{start}..{} of {c}", start + len)));
        }
        let v = &self.node(a).value;
        let out = (0..r).flat_map(|i| v[i * c + start..i * c + start + len].iter().copied()).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(r, len, out, Op::SliceCols { a, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|p| self.shape(*p).1).ok_or_else(|| shape_err("concat_rows", "no inputs".into()))?;
        if parts.iter().any(|p| self.shape(*p).1 != c) {
            return Err(shape_err("concat_rows", "column counts differ".into()));
        }
        let r: usize = parts.iter().map(|p| self.shape(*p).0).sum();
        let mut out = Vec::with_capacity(r * c);
        for p in parts {
            out.extend_from_slice(&self.node(*p).value);
        }
        let ng = self.ng(parts);
        Ok(self.push(r, c, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Rows `idx[0], idx[1], ...` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidInput(format!("row index {bad} out of range for {r} rows")));
        }
        let v = &self.node(a).value;
        let out = idx.iter().flat_map(|&i| v[i * c..(i + 1) * c].iter().copied()).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(idx.len(), c, out, Op::Gather { a, idx: idx.to_vec() }, ng))
    }

    /// Repeats every row of `a` `each` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, each: usize) -> Var {
        let (r, c) = self.shape(a);
        let v = &self.node(a).value;
        let mut out = Vec::with_capacity(r * each * c);
        for i in 0..r {
            for _ in 0..each {
                out.extend_from_slice(&v[i * c..(i + 1) * c]);
            }
        }
        let ng = self.ng(&[a]);
        self.push(r * each, c, out, Op::Repeat { a, each }, ng)
    }

    /// Row `i` from `a` when `take_a[i]`, otherwise from `b`.
    pub fn row_mix(&mut self, a: Var, b: Var, take_a: &[bool]) -> Result<Var> {
        self.same_shape("row_mix", a, b)?;
        let (r, c) = self.shape(a);
        if take_a.len() != r {
            return Err(shape_err("row_mix", format!("mask of {} for {r} rows", take_a.len())));
        }
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        let out = (0..r)
            .flat_map(|i| {
                let src = if take_a[i] { av } else { bv };
                src[i * c..(i + 1) * c].iter().copied()
            })
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, out, Op::RowMix { a, b, take_a: take_a.to_vec() }, ng))
    }

    /// Multiplies row `i` of `a` by `scale[i]`.
    pub fn row_scale(&mut self, a: Var, scale: &[f64]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if scale.len() != r {
            return Err(shape_err("row_scale", format!("{} scales for {r} rows", scale.len())));
        }
        let v = &self.node(a).value;
        let out = (0..r).flat_map(|i| v[i * c..(i + 1) * c].iter().map(move |x| x * scale[i])).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(r, c, out, Op::RowScale { a, scale: scale.to_vec() }, ng))
    }

    /// Scales each row to unit Euclidean norm (norms floored at 1e-12).
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = &self.node(a).value;
        let norms: Vec<f64> =
            (0..r).map(|i| v[i * c..(i + 1) * c].iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR)).collect();
        let out = (0..r).flat_map(|i| v[i * c..(i + 1) * c].iter().map(|x| x / norms[i]).collect::<Vec<_>>()).collect();
        let ng = self.ng(&[a]);
        self.push(r, c, out, Op::RowNormalize { a, norms }, ng)
    }

    /// Mean of `(a - target)^2` over all entries, as a `1 x 1` node.
    pub fn mse_const(&mut self, a: Var, target: &[f64]) -> Result<Var> {
        let n = self.node(a).value.len();
        if target.len() != n {
            return Err(shape_err("mse", format!("{} targets for {n} values", target.len())));
        }
        let ss: f64 = self.node(a).value.iter().zip(target).map(|(x, y)| (x - y).powi(2)).sum();
        let m = if n == 0 { 0.0 } else { ss / n as f64 };
        let ng = self.ng(&[a]);
        Ok(self.push(1, 1, vec![m], Op::MseConst { a, target: target.to_vec() }, ng))
    }

    /// `sum(a * weights)` as a `1 x 1` node.
    pub fn dot_const(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let n = self.node(a).value.len();
        if weights.len() != n {
            return Err(shape_err("dot", format!("{} weights for {n} values", weights.len())));
        }
        let s = self.node(a).value.iter().zip(weights).map(|(x, w)| x * w).sum();
        let ng = self.ng(&[a]);
        Ok(self.push(1, 1, vec![s], Op::DotConst { a, weights: weights.to_vec() }, ng))
    }

    /// Gradients of the scalar `out` with respect to every node and parameter.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.shape(out) != (1, 1) {
            return Err(shape_err("backward", format!("output must be 1x1, got {:?}", self.shape(out))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        let mut pgrads: Vec<Option<Vec<f64>>> = vec![None; self.params.len()];

        fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
            if !nodes[v.0].needs_grad {
                return;
            }
            let n = nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(g);
        }

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            let nodes = &self.nodes;
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    let g = pgrads[*id].get_or_insert_with(|| vec![0.0; dy.len()]);
                    g.iter_mut().zip(&dy).for_each(|(a, b)| *a += b);
                }
                Op::MatMul { a, b, trans_b, blocks } => {
                    let (an, bn) = (&nodes[a.0], &nodes[b.0]);
                    let n = an.rows / blocks;
                    let k = an.cols;
                    let m = node.cols;
                    for blk in 0..*blocks {
                        let dc = &dy[blk * n * m..(blk + 1) * n * m];
                        let asl = &an.value[blk * n * k..(blk + 1) * n * k];
                        let bsl = &bn.value[blk * k * m..(blk + 1) * k * m];
                        acc(&mut grads, nodes, *a, |ga| {
                            let da = &mut ga[blk * n * k..(blk + 1) * n * k];
                            if *trans_b {
                                // dA = dC B, B is [m,k]
                                mm_acc(dc, bsl, da, n, m, k);
                            } else {
                                // dA = dC B^T, B is [k,m]
                                mm_tb_acc(dc, bsl, da, n, m, k);
                            }
                        });
                        acc(&mut grads, nodes, *b, |gb| {
                            let db = &mut gb[blk * k * m..(blk + 1) * k * m];
                            if *trans_b {
                                // dB = dC^T A, [m,k]
                                mm_ta_acc(dc, asl, db, n, m, k);
                            } else {
                                // dB = A^T dC, [k,m]
                                mm_ta_acc(asl, dc, db, n, k, m);
                            }
                        });
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, nodes, *a, |g| g.iter_mut().zip(&dy).for_each(|(x, d)| *x += d));
                    acc(&mut grads, nodes, *b, |g| g.iter_mut().zip(&dy).for_each(|(x, d)| *x += d));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, nodes, *a, |g| g.iter_mut().zip(&dy).for_each(|(x, d)| *x += d));
                    acc(&mut grads, nodes, *b, |g| g.iter_mut().zip(&dy).for_each(|(x, d)| *x -= d));
                }
                Op::AddRow(a, row) => {
                    let c = node.cols;
                    acc(&mut grads, nodes, *a, |g| g.iter_mut().zip(&dy).for_each(|(x, d)| *x += d));
                    acc(&mut grads, nodes, *row, |g| {
                        for r in dy.chunks(c) {
                            g.iter_mut().zip(r).for_each(|(x, d)| *x += d);
                        }
                    });
                }
                Op::Scale(a, s) => {
                    acc(&mut grads, nodes, *a, |g| g.iter_mut().zip(&dy).for_each(|(x, d)| *x += s * d));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(&mut grads, nodes, *a, |g| {
                        for i in 0..g.len() {
                            g[i] += dy[i] * bv[i];
                        }
                    });
                    acc(&mut grads, nodes, *b, |g| {
                        for i in 0..g.len() {
                            g[i] += dy[i] * av[i];
                        }
                    });
                }
                Op::Silu(a) => {
                    let av = &nodes[a.0].value;
                    acc(&mut grads, nodes, *a, |g| {
                        for i in 0..g.len() {
                            let s = 1.0 / (1.0 + (-av[i]).exp());
                            g[i] += dy[i] * s * (1.0 + av[i] * (1.0 - s));
                        }
                    });
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let c = node.cols;
                    let gv = &nodes[gamma.0].value;
                    acc(&mut grads, nodes, *x, |g| {
                        for (i, rs) in rstd.iter().enumerate() {
                            let dyr = &dy[i * c..(i + 1) * c];
                            let xh = &xhat[i * c..(i + 1) * c];
                            let dxh: Vec<f64> = dyr.iter().zip(gv).map(|(d, gm)| d * gm).collect();
                            let m1 = dxh.iter().sum::<f64>() / c as f64;
                            let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                            for j in 0..c {
                                g[i * c + j] += rs * (dxh[j] - m1 - xh[j] * m2);
                            }
                        }
                    });
                    acc(&mut grads, nodes, *gamma, |g| {
                        for (r, xr) in dy.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                g[j] += r[j] * xr[j];
                            }
                        }
                    });
                    acc(&mut grads, nodes, *beta, |g| {
                        for r in dy.chunks(c) {
                            g.iter_mut().zip(r).for_each(|(x, d)| *x += d);
                        }
                    });
                }
                Op::Softmax(a) => {
                    let c = node.cols.max(1);
                    let y = &node.value;
                    acc(&mut grads, nodes, *a, |g| {
                        for ((gr, yr), dr) in g.chunks_mut(c).zip(y.chunks(c)).zip(dy.chunks(c)) {
                            let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                            for j in 0..c {
                                gr[j] += yr[j] * (dr[j] - dot);
                            }
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let c = node.cols;
                    let mut off = 0;
                    for p in parts {
                        let pc = nodes[p.0].cols;
                        acc(&mut grads, nodes, *p, |g| {
                            for (i, gr) in g.chunks_mut(pc.max(1)).enumerate() {
                                gr.iter_mut().zip(&dy[i * c + off..i * c + off + pc]).for_each(|(x, d)| *x += d);
                            }
                        });
                        off += pc;
                    }
                }
                Op::SliceCols { a, start } => {
                    let (ac, len) = (nodes[a.0].cols, node.cols);
                    acc(&mut grads, nodes, *a, |g| {
                        for (i, dr) in dy.chunks(len.max(1)).enumerate() {
                            g[i * ac + start..i * ac + start + len].iter_mut().zip(dr).for_each(|(x, d)| *x += d);
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = nodes[p.0].value.len();
                        acc(&mut grads, nodes, *p, |g| {
                            g.iter_mut().zip(&dy[off..off + n]).for_each(|(x, d)| *x += d);
                        });
                        off += n;
                    }
                }
                Op::Gather { a, idx } => {
                    let c = node.cols;
                    acc(&mut grads, nodes, *a, |g| {
                        for (k, &i) in idx.iter().enumerate() {
                            g[i * c..(i + 1) * c].iter_mut().zip(&dy[k * c..(k + 1) * c]).for_each(|(x, d)| *x += d);
                        }
                    });
                }
                Op::Repeat { a, each } => {
                    let c = node.cols;
                    acc(&mut grads, nodes, *a, |g| {
                        for (k, dr) in dy.chunks(c.max(1)).enumerate() {
                            let i = k / each;
                            g[i * c..(i + 1) * c].iter_mut().zip(dr).for_each(|(x, d)| *x += d);
                        }
                    });
                }
                Op::RowMix { a, b, take_a } => {
                    let c = node.cols;
                    for (src, want) in [(*a, true), (*b, false)] {
                        acc(&mut grads, nodes, src, |g| {
                            for (i, &t) in take_a.iter().enumerate() {
                                if t == want {
                                    g[i * c..(i + 1) * c]
                                        .iter_mut()
                                        .zip(&dy[i * c..(i + 1) * c])
                                        .for_each(|(x, d)| *x += d);
                                }
                            }
                        });
                    }
                }
                Op::RowScale { a, scale } => {
                    let c = node.cols;
                    acc(&mut grads, nodes, *a, |g| {
                        for (i, s) in scale.iter().enumerate() {
                            g[i * c..(i + 1) * c].iter_mut().zip(&dy[i * c..(i + 1) * c]).for_each(|(x, d)| *x += s * d);
                        }
                    });
                }
                Op::RowNormalize { a, norms } => {
                    let c = node.cols;
                    let y = &node.value;
                    acc(&mut grads, nodes, *a, |g| {
                        for (i, nrm) in norms.iter().enumerate() {
                            let yr = &y[i * c..(i + 1) * c];
                            let dr = &dy[i * c..(i + 1) * c];
                            let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                            for j in 0..c {
                                g[i * c + j] += (dr[j] - yr[j] * dot) / nrm;
                            }
                        }
                    });
                }
                Op::MseConst { a, target } => {
                    let av = &nodes[a.0].value;
                    let n = av.len().max(1) as f64;
                    acc(&mut grads, nodes, *a, |g| {
                        for i in 0..g.len() {
                            g[i] += dy[0] * 2.0 * (av[i] - target[i]) / n;
                        }
                    });
                }
                Op::DotConst { a, weights } => {
                    acc(&mut grads, nodes, *a, |g| g.iter_mut().zip(weights).for_each(|(x, w)| *x += dy[0] * w));
                }
            }
            grads[idx] = Some(dy);
        }
        Ok(Gradients { nodes: grads, params: pgrads })
    }
}

impl ParamSet {
    /// Adds `grads` into each parameter's `grad` buffer.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        if grads.n_params() != self.len() {
            return Err(Error::InvalidInput("gradients were computed for a different parameter set".into()));
        }
        for id in 0..self.len() {
            if let Some(g) = grads.param_by_id(id) {
                let p = self.by_id_mut(id);
                p.grad.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Ok(())
    }
}
