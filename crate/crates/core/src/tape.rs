//! Minimal reverse-mode autodiff over [`Mat`] values.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::backward`] walks the
//! recording in reverse and accumulates gradients. The op set is exactly what
//! the latent-reasoning training graph needs: dense affine maps, causal
//! softmax attention, layer norm, pointwise nonlinearities, row/column
//! slicing for multi-head attention, embedding gather, summed cross-entropy,
//! and the scalar reductions used by the KL terms.
//!
//! Gradients flow to [`Tape::leaf`] nodes; [`Tape::detach`] is an identity
//! whose backward drops incoming gradient, which implements both the frozen
//! visual anchors and the optional stop-gradient on the latent chain.

use crate::math::{gelu, gelu_grad, log_sum_exp, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    /// `A @ Bᵀ`
    MatmulBT(Var, Var),
    Add(Var, Var),
    /// `[m×n] + [1×n]`, row broadcast
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    LayerNorm(Var, Var, Var),
    /// Row-wise softmax over columns `0..=row` of a square matrix.
    CausalSoftmax(Var),
    /// Row-wise softmax over every column (single-query attention rows).
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    /// Row gather by index (embedding lookup).
    Gather(Var, Vec<usize>),
    /// `Σ −log softmax(logits[row])[token]` over (row, token) pairs.
    CeSum(Var, Vec<(usize, usize)>),
    SumSquares(Var),
    Sum(Var),
    Detach,
}

struct Node {
    val: Mat,
    grad: Option<Mat>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, val: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            val,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input node.
    pub fn leaf(&mut self, val: Mat) -> Var {
        self.push(val, Op::Leaf)
    }

    /// Non-differentiable input (gradient is computed but never read).
    pub fn constant(&mut self, val: Mat) -> Var {
        self.push(val, Op::Leaf)
    }

    pub fn val(&self, v: Var) -> &Mat {
        &self.nodes[v.0].val
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.val(v);
        assert_eq!(m.len(), 1, "scalar() on non-scalar node");
        m.data[0]
    }

    /// Gradient accumulated at `v` by the last [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let val = self.val(a).matmul(self.val(b));
        self.push(val, Op::Matmul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let val = self.val(a).matmul_bt(self.val(b));
        self.push(val, Op::MatmulBT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.val(a), self.val(b));
        assert_eq!((ma.rows, ma.cols), (mb.rows, mb.cols), "add shape");
        let mut val = ma.clone();
        val.add_assign(mb);
        self.push(val, Op::Add(a, b))
    }

    /// `a [m×n] + row [1×n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ma, mr) = (self.val(a), self.val(row));
        assert_eq!(mr.rows, 1, "add_row rhs must be 1×n");
        assert_eq!(ma.cols, mr.cols, "add_row width");
        let mut val = ma.clone();
        for r in 0..val.rows {
            for (x, b) in val.row_mut(r).iter_mut().zip(mr.data.iter()) {
                *x += b;
            }
        }
        self.push(val, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.val(a), self.val(b));
        assert_eq!((ma.rows, ma.cols), (mb.rows, mb.cols), "sub shape");
        let data = ma
            .data
            .iter()
            .zip(mb.data.iter())
            .map(|(x, y)| x - y)
            .collect();
        let val = Mat::from_vec(ma.rows, ma.cols, data);
        self.push(val, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.val(a), self.val(b));
        assert_eq!((ma.rows, ma.cols), (mb.rows, mb.cols), "mul shape");
        let data = ma
            .data
            .iter()
            .zip(mb.data.iter())
            .map(|(x, y)| x * y)
            .collect();
        let val = Mat::from_vec(ma.rows, ma.cols, data);
        self.push(val, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut val = self.val(a).clone();
        val.scale_assign(s);
        self.push(val, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ma = self.val(a);
        let data = ma.data.iter().map(|&x| gelu(x)).collect();
        let val = Mat::from_vec(ma.rows, ma.cols, data);
        self.push(val, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ma = self.val(a);
        let data = ma.data.iter().map(|x| x.tanh()).collect();
        let val = Mat::from_vec(ma.rows, ma.cols, data);
        self.push(val, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let ma = self.val(a);
        let data = ma.data.iter().map(|x| x.exp()).collect();
        let val = Mat::from_vec(ma.rows, ma.cols, data);
        self.push(val, Op::Exp(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let ma = self.val(a);
        let data = ma.data.iter().map(|x| x.clamp(lo, hi)).collect();
        let val = Mat::from_vec(ma.rows, ma.cols, data);
        self.push(val, Op::Clamp(a, lo, hi))
    }

    /// Per-row layer normalization with trainable gain/bias (each 1×n).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (mx, mg, mb) = (self.val(x), self.val(gamma), self.val(beta));
        assert_eq!(mg.rows, 1);
        assert_eq!(mb.rows, 1);
        assert_eq!(mx.cols, mg.cols);
        assert_eq!(mx.cols, mb.cols);
        let n = mx.cols as f64;
        let mut val = Mat::zeros(mx.rows, mx.cols);
        for r in 0..mx.rows {
            let row = mx.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let s = (var + LN_EPS).sqrt();
            for (c, &x) in row.iter().enumerate() {
                let xhat = (x - mean) / s;
                val.set(r, c, mg.data[c] * xhat + mb.data[c]);
            }
        }
        self.push(val, Op::LayerNorm(x, gamma, beta))
    }

    /// Softmax of each row `i` restricted to columns `0..=i`; columns beyond
    /// the diagonal are exactly zero. Input must be square.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let ma = self.val(a);
        assert_eq!(ma.rows, ma.cols, "causal_softmax expects square scores");
        let mut val = Mat::zeros(ma.rows, ma.cols);
        for r in 0..ma.rows {
            let row = &ma.row(r)[..=r];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..=r {
                let e = (ma.get(r, c) - max).exp();
                val.set(r, c, e);
                sum += e;
            }
            for c in 0..=r {
                val.set(r, c, val.get(r, c) / sum);
            }
        }
        self.push(val, Op::CausalSoftmax(a))
    }

    /// Softmax over every full row (used for single-query attention where
    /// the whole key prefix is visible).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ma = self.val(a);
        let mut val = ma.clone();
        for r in 0..val.rows {
            crate::math::softmax_in_place(val.row_mut(r));
        }
        self.push(val, Op::SoftmaxRows(a))
    }

    /// Columns `[start, start+width)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let ma = self.val(a);
        assert!(start + width <= ma.cols, "slice_cols out of range");
        let mut val = Mat::zeros(ma.rows, width);
        for r in 0..ma.rows {
            val.row_mut(r)
                .copy_from_slice(&ma.row(r)[start..start + width]);
        }
        self.push(val, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.val(parts[0]).rows;
        let total: usize = parts.iter().map(|&p| self.val(p).cols).sum();
        let mut val = Mat::zeros(rows, total);
        let mut at = 0;
        for &p in parts {
            let mp = self.val(p);
            assert_eq!(mp.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                val.row_mut(r)[at..at + mp.cols].copy_from_slice(mp.row(r));
            }
            at += mp.cols;
        }
        self.push(val, Op::ConcatCols(parts.to_vec()))
    }

    /// Rows `[start, start+count)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let ma = self.val(a);
        assert!(start + count <= ma.rows, "slice_rows out of range");
        let mut val = Mat::zeros(count, ma.cols);
        for r in 0..count {
            val.row_mut(r).copy_from_slice(ma.row(start + r));
        }
        self.push(val, Op::SliceRows(a, start))
    }

    /// Single row `r` as a 1×n node.
    pub fn pick_row(&mut self, a: Var, r: usize) -> Var {
        self.slice_rows(a, r, 1)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.val(parts[0]).cols;
        let total: usize = parts.iter().map(|&p| self.val(p).rows).sum();
        let mut val = Mat::zeros(total, cols);
        let mut at = 0;
        for &p in parts {
            let mp = self.val(p);
            assert_eq!(mp.cols, cols, "concat_rows col mismatch");
            for r in 0..mp.rows {
                val.row_mut(at + r).copy_from_slice(mp.row(r));
            }
            at += mp.rows;
        }
        self.push(val, Op::ConcatRows(parts.to_vec()))
    }

    /// Gather rows of `table` by index; backward scatter-adds.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let mt = self.val(table);
        let mut val = Mat::zeros(ids.len(), mt.cols);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < mt.rows, "gather index out of range");
            val.row_mut(r).copy_from_slice(mt.row(id));
        }
        self.push(val, Op::Gather(table, ids.to_vec()))
    }

    /// Summed cross-entropy `Σ −log softmax(logits[row])[token]` over pairs.
    /// Rows may repeat (several targets decoded from one logit row).
    pub fn ce_sum(&mut self, logits: Var, targets: &[(usize, usize)]) -> Var {
        let ml = self.val(logits);
        let mut lse_cache: Vec<Option<f64>> = vec![None; ml.rows];
        let mut total = 0.0;
        for &(row, tok) in targets {
            assert!(row < ml.rows && tok < ml.cols, "ce_sum target range");
            let lse =
                *lse_cache[row].get_or_insert_with(|| log_sum_exp(ml.row(row)));
            total += lse - ml.get(row, tok);
        }
        let val = Mat::from_vec(1, 1, vec![total]);
        self.push(val, Op::CeSum(logits, targets.to_vec()))
    }

    /// `Σ x²` as a 1×1 node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s: f64 = self.val(a).data.iter().map(|x| x * x).sum();
        self.push(Mat::from_vec(1, 1, vec![s]), Op::SumSquares(a))
    }

    /// `Σ x` as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.val(a).data.iter().sum();
        self.push(Mat::from_vec(1, 1, vec![s]), Op::Sum(a))
    }

    /// Identity whose backward drops the incoming gradient.
    pub fn detach(&mut self, a: Var) -> Var {
        let val = self.val(a).clone();
        self.push(val, Op::Detach)
    }

    fn add_grad(&mut self, v: Var, g: Mat) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(existing) => existing.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    /// Reverse pass from a scalar root; seeds `d root/d root = 1`.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.val(root).len(), 1, "backward root must be scalar");
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(Mat::from_vec(1, 1, vec![1.0]));

        for i in (0..self.nodes.len()).rev() {
            let g = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let da = g.matmul_bt(self.val(b));
                    let db = self.val(a).matmul_at(&g);
                    self.add_grad(a, da);
                    self.add_grad(b, db);
                }
                Op::MatmulBT(a, b) => {
                    let da = g.matmul(self.val(b));
                    let db = g.matmul_at(self.val(a));
                    self.add_grad(a, da);
                    self.add_grad(b, db);
                }
                Op::Add(a, b) => {
                    self.add_grad(a, g.clone());
                    self.add_grad(b, g);
                }
                Op::AddRow(a, row) => {
                    let mut drow = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, x) in drow.data.iter_mut().zip(g.row(r).iter()) {
                            *d += x;
                        }
                    }
                    self.add_grad(a, g);
                    self.add_grad(row, drow);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    neg.scale_assign(-1.0);
                    self.add_grad(a, g);
                    self.add_grad(b, neg);
                }
                Op::Mul(a, b) => {
                    let da = {
                        let mb = self.val(b);
                        let data = g
                            .data
                            .iter()
                            .zip(mb.data.iter())
                            .map(|(x, y)| x * y)
                            .collect();
                        Mat::from_vec(g.rows, g.cols, data)
                    };
                    let db = {
                        let ma = self.val(a);
                        let data = g
                            .data
                            .iter()
                            .zip(ma.data.iter())
                            .map(|(x, y)| x * y)
                            .collect();
                        Mat::from_vec(g.rows, g.cols, data)
                    };
                    self.add_grad(a, da);
                    self.add_grad(b, db);
                }
                Op::Scale(a, s) => {
                    let mut da = g;
                    da.scale_assign(s);
                    self.add_grad(a, da);
                }
                Op::Gelu(a) => {
                    let ma = self.val(a);
                    let data = g
                        .data
                        .iter()
                        .zip(ma.data.iter())
                        .map(|(gg, &x)| gg * gelu_grad(x))
                        .collect();
                    self.add_grad(a, Mat::from_vec(g.rows, g.cols, data));
                }
                Op::Tanh(a) => {
                    let my = &self.nodes[i].val;
                    let data = g
                        .data
                        .iter()
                        .zip(my.data.iter())
                        .map(|(gg, y)| gg * (1.0 - y * y))
                        .collect();
                    self.add_grad(a, Mat::from_vec(g.rows, g.cols, data));
                }
                Op::Exp(a) => {
                    let my = &self.nodes[i].val;
                    let data = g
                        .data
                        .iter()
                        .zip(my.data.iter())
                        .map(|(gg, y)| gg * y)
                        .collect();
                    self.add_grad(a, Mat::from_vec(g.rows, g.cols, data));
                }
                Op::Clamp(a, lo, hi) => {
                    let ma = self.val(a);
                    let data = g
                        .data
                        .iter()
                        .zip(ma.data.iter())
                        .map(|(gg, &x)| if x > lo && x < hi { *gg } else { 0.0 })
                        .collect();
                    self.add_grad(a, Mat::from_vec(g.rows, g.cols, data));
                }
                Op::LayerNorm(x, gamma, beta) => {
                    let (dx, dg, db) = {
                        let mx = self.val(x);
                        let mg = self.val(gamma);
                        let n = mx.cols as f64;
                        let mut dx = Mat::zeros(mx.rows, mx.cols);
                        let mut dgm = Mat::zeros(1, mx.cols);
                        let mut dbt = Mat::zeros(1, mx.cols);
                        for r in 0..mx.rows {
                            let row = mx.row(r);
                            let mean = row.iter().sum::<f64>() / n;
                            let var = row
                                .iter()
                                .map(|x| (x - mean) * (x - mean))
                                .sum::<f64>()
                                / n;
                            let s = (var + LN_EPS).sqrt();
                            let grow = g.row(r);
                            let mut sum_gw = 0.0; // Σ γ·dy
                            let mut sum_gwx = 0.0; // Σ γ·dy·x̂
                            for c in 0..mx.cols {
                                let xhat = (row[c] - mean) / s;
                                let gw = mg.data[c] * grow[c];
                                sum_gw += gw;
                                sum_gwx += gw * xhat;
                                dgm.data[c] += grow[c] * xhat;
                                dbt.data[c] += grow[c];
                            }
                            for c in 0..mx.cols {
                                let xhat = (row[c] - mean) / s;
                                let gw = mg.data[c] * grow[c];
                                dx.set(
                                    r,
                                    c,
                                    (gw - sum_gw / n - xhat * sum_gwx / n) / s,
                                );
                            }
                        }
                        (dx, dgm, dbt)
                    };
                    self.add_grad(x, dx);
                    self.add_grad(gamma, dg);
                    self.add_grad(beta, db);
                }
                Op::CausalSoftmax(a) => {
                    let p = &self.nodes[i].val;
                    let mut da = Mat::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let prow = p.row(r);
                        let grow = g.row(r);
                        let dot: f64 = prow[..=r]
                            .iter()
                            .zip(grow[..=r].iter())
                            .map(|(x, y)| x * y)
                            .sum();
                        for c in 0..=r {
                            da.set(r, c, prow[c] * (grow[c] - dot));
                        }
                    }
                    self.add_grad(a, da);
                }
                Op::SoftmaxRows(a) => {
                    let p = &self.nodes[i].val;
                    let mut da = Mat::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let prow = p.row(r);
                        let grow = g.row(r);
                        let dot: f64 = prow.iter().zip(grow.iter()).map(|(x, y)| x * y).sum();
                        for c in 0..p.cols {
                            da.set(r, c, prow[c] * (grow[c] - dot));
                        }
                    }
                    self.add_grad(a, da);
                }
                Op::SliceCols(a, start) => {
                    let ma_cols = self.val(a).cols;
                    let mut da = Mat::zeros(g.rows, ma_cols);
                    for r in 0..g.rows {
                        da.row_mut(r)[start..start + g.cols].copy_from_slice(g.row(r));
                    }
                    self.add_grad(a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = self.val(p).cols;
                        let mut dp = Mat::zeros(g.rows, w);
                        for r in 0..g.rows {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[at..at + w]);
                        }
                        at += w;
                        self.add_grad(p, dp);
                    }
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = {
                        let ma = self.val(a);
                        (ma.rows, ma.cols)
                    };
                    let mut da = Mat::zeros(rows, cols);
                    for r in 0..g.rows {
                        da.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    self.add_grad(a, da);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let h = self.val(p).rows;
                        let mut dp = Mat::zeros(h, g.cols);
                        for r in 0..h {
                            dp.row_mut(r).copy_from_slice(g.row(at + r));
                        }
                        at += h;
                        self.add_grad(p, dp);
                    }
                }
                Op::Gather(table, ids) => {
                    let (rows, cols) = {
                        let mt = self.val(table);
                        (mt.rows, mt.cols)
                    };
                    let mut dt = Mat::zeros(rows, cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, x) in dt.row_mut(id).iter_mut().zip(g.row(r).iter()) {
                            *d += x;
                        }
                    }
                    self.add_grad(table, dt);
                }
                Op::CeSum(logits, targets) => {
                    let gscale = g.data[0];
                    let ml = self.val(logits);
                    let mut da = Mat::zeros(ml.rows, ml.cols);
                    let mut probs_cache: Vec<Option<Vec<f64>>> = vec![None; ml.rows];
                    for &(row, tok) in &targets {
                        let probs = probs_cache[row].get_or_insert_with(|| {
                            let mut p = ml.row(row).to_vec();
                            crate::math::softmax_in_place(&mut p);
                            p
                        });
                        for (c, &p) in probs.iter().enumerate() {
                            let delta = if c == tok { 1.0 } else { 0.0 };
                            da.data[row * ml.cols + c] += gscale * (p - delta);
                        }
                    }
                    self.add_grad(logits, da);
                }
                Op::SumSquares(a) => {
                    let gscale = g.data[0];
                    let ma = self.val(a);
                    let data = ma.data.iter().map(|x| 2.0 * x * gscale).collect();
                    self.add_grad(a, Mat::from_vec(ma.rows, ma.cols, data));
                }
                Op::Sum(a) => {
                    let gscale = g.data[0];
                    let ma = self.val(a);
                    let data = vec![gscale; ma.len()];
                    self.add_grad(a, Mat::from_vec(ma.rows, ma.cols, data));
                }
                Op::Detach => {}
            }
        }
    }
}

/// Affine map `x @ w + b` (`b` is 1×n, row-broadcast).
pub fn linear(t: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let xw = t.matmul(x, w);
    t.add_row(xw, b)
}
