//! Wengert tape: forward ops are recorded as they execute, then replayed in
//! reverse to accumulate gradients. One tape owns one forward pass; parameters
//! enter as leaves and their gradients are read back after `backward`.

use std::sync::Arc;

use super::kernels;
use super::{scalar, NumericsError, Result, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddRow { x: Var, bias: Var },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Gather { table: Var, ids: Vec<u32> },
    MaskedSoftmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<S>, inv_std: Vec<S> },
    Gelu(Var),
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols { parts: Vec<Var> },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<u32>, weights: Vec<S> },
    SoftCrossEntropy { logits: Var, target_probs: Vec<S>, weights: Vec<S> },
}

struct Node<S: Scalar> {
    op: Op<S>,
    value: Tensor<S>,
    needs_grad: bool,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Register a parameter (or constant input) by copying its data.
    pub fn leaf(&mut self, t: &Tensor<S>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, t.clone(), requires_grad)
    }

    /// Register an owned constant.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a rank-1 single-element node.
    pub fn scalar_of(&self, v: Var) -> S {
        debug_assert_eq!(self.nodes[v.0].value.numel(), 1);
        self.nodes[v.0].value.data()[0]
    }

    fn shape_err(op: &'static str, details: String) -> NumericsError {
        NumericsError::ShapeMismatch { op, details }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Self::shape_err(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(va.shape(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Self::shape_err(
                "mul",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(va.shape(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, ng))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| x * c).collect();
        let value = Tensor::from_vec(va.shape(), data);
        let ng = self.needs(a);
        Ok(self.push(Op::Scale(a, c), value, ng))
    }

    /// `x: [r,c] + bias: [c]`, broadcast over rows.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let (r, c) = vx.rows_cols();
        if vb.numel() != c {
            return Err(Self::shape_err(
                "add_row_broadcast",
                format!("x {:?} vs bias {:?}", vx.shape(), vb.shape()),
            ));
        }
        let mut data = vx.data().to_vec();
        for i in 0..r {
            for (d, &bv) in data[i * c..(i + 1) * c].iter_mut().zip(vb.data()) {
                *d = *d + bv;
            }
        }
        let value = Tensor::from_vec(vx.shape(), data);
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddRow { x, bias }, value, ng))
    }

    /// `a: [m,k] @ b: [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, ka) = va.rows_cols();
        let (kb, n) = vb.rows_cols();
        if ka != kb {
            return Err(Self::shape_err(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::gemm_nn(m, ka, n, va.data(), vb.data(), &mut out);
        let value = Tensor::from_vec(&[m, n], out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, ng))
    }

    /// `a: [m,k] @ b^T` with `b: [n,k] -> [m,n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, ka) = va.rows_cols();
        let (n, kb) = vb.rows_cols();
        if ka != kb {
            return Err(Self::shape_err(
                "matmul_nt",
                format!("{:?} x {:?}^T", va.shape(), vb.shape()),
            ));
        }
        let mut bt = vec![S::zero(); vb.numel()];
        kernels::transpose(n, ka, vb.data(), &mut bt);
        let mut out = vec![S::zero(); m * n];
        kernels::gemm_nn(m, ka, n, va.data(), &bt, &mut out);
        let value = Tensor::from_vec(&[m, n], out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMulNT(a, b), value, ng))
    }

    /// Row lookup: `table: [rows, c]`, `ids` select rows; embedding and
    /// positional lookups both go through here.
    pub fn gather_rows(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let vt = &self.nodes[table.0].value;
        let (rows, c) = vt.rows_cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            let id = id as usize;
            if id >= rows {
                return Err(NumericsError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    limit: rows,
                });
            }
            data.extend_from_slice(&vt.data()[id * c..(id + 1) * c]);
        }
        let value = Tensor::from_vec(&[ids.len(), c], data);
        let ng = self.needs(table);
        Ok(self.push(Op::Gather { table, ids: ids.to_vec() }, value, ng))
    }

    /// Row-wise softmax over `x: [r,c]` with a boolean visibility mask of the
    /// same shape (the additive 0/-inf mask in boolean form). Fully masked
    /// rows yield all zeros.
    pub fn masked_softmax(&mut self, x: Var, vis: Arc<Vec<bool>>) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let (r, c) = vx.rows_cols();
        if vis.len() != r * c {
            return Err(Self::shape_err(
                "masked_softmax",
                format!("x {:?} vs mask len {}", vx.shape(), vis.len()),
            ));
        }
        let mut data = vx.data().to_vec();
        for i in 0..r {
            kernels::masked_softmax_row(&mut data[i * c..(i + 1) * c], &vis[i * c..(i + 1) * c]);
        }
        let value = Tensor::from_vec(vx.shape(), data);
        let ng = self.needs(x);
        Ok(self.push(Op::MaskedSoftmax { x }, value, ng))
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (vx, vg, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        let (r, c) = vx.rows_cols();
        if vg.numel() != c || vb.numel() != c {
            return Err(Self::shape_err(
                "layer_norm",
                format!(
                    "x {:?} vs gamma {:?} / beta {:?}",
                    vx.shape(),
                    vg.shape(),
                    vb.shape()
                ),
            ));
        }
        let eps = scalar::<S>(kernels::LN_EPS);
        let mut data = vec![S::zero(); r * c];
        let mut mean = vec![S::zero(); r];
        let mut inv_std = vec![S::zero(); r];
        for i in 0..r {
            let (m, s) = kernels::layer_norm_row(
                &vx.data()[i * c..(i + 1) * c],
                vg.data(),
                vb.data(),
                eps,
                &mut data[i * c..(i + 1) * c],
            );
            mean[i] = m;
            inv_std[i] = s;
        }
        let value = Tensor::from_vec(vx.shape(), data);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, mean, inv_std }, value, ng))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|&v| kernels::gelu(v)).collect();
        let value = Tensor::from_vec(vx.shape(), data);
        let ng = self.needs(x);
        Ok(self.push(Op::Gelu(x), value, ng))
    }

    /// Columns `[start, start+len)` of `x: [r,c]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let (r, c) = vx.rows_cols();
        if start + len > c {
            return Err(Self::shape_err(
                "slice_cols",
                format!("[{start}, {}) of {c} cols", start + len),
            ));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&vx.data()[i * c + start..i * c + start + len]);
        }
        let value = Tensor::from_vec(&[r, len], data);
        let ng = self.needs(x);
        Ok(self.push(Op::SliceCols { x, start, len }, value, ng))
    }

    /// Concatenate along columns; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let r = self.nodes[parts[0].0].value.rows_cols().0;
        let mut total_c = 0;
        for &p in parts {
            let (pr, pc) = self.nodes[p.0].value.rows_cols();
            if pr != r {
                return Err(Self::shape_err(
                    "concat_cols",
                    format!("row counts differ: {r} vs {pr}"),
                ));
            }
            total_c += pc;
        }
        let mut data = Vec::with_capacity(r * total_c);
        for i in 0..r {
            for &p in parts {
                let vp = &self.nodes[p.0].value;
                let (_, pc) = vp.rows_cols();
                data.extend_from_slice(&vp.data()[i * pc..(i + 1) * pc]);
            }
        }
        let value = Tensor::from_vec(&[r, total_c], data);
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, value, ng))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let total = vx.data().iter().copied().sum::<S>();
        let ng = self.needs(x);
        Ok(self.push(Op::Sum(x), Tensor::scalar_value(total), ng))
    }

    /// Weighted cross-entropy against integer targets, summed over rows:
    /// `sum_i w_i * (logsumexp(z_i) - z_i[y_i])`. Rows with `w_i == 0` are
    /// skipped entirely.
    pub fn cross_entropy_rows(
        &mut self,
        logits: Var,
        targets: &[u32],
        weights: &[S],
    ) -> Result<Var> {
        let vz = &self.nodes[logits.0].value;
        let (r, c) = vz.rows_cols();
        if targets.len() != r || weights.len() != r {
            return Err(Self::shape_err(
                "cross_entropy_rows",
                format!("logits {:?} vs {} targets / {} weights", vz.shape(), targets.len(), weights.len()),
            ));
        }
        let mut total = S::zero();
        for i in 0..r {
            if weights[i] == S::zero() {
                continue;
            }
            let y = targets[i] as usize;
            if y >= c {
                return Err(NumericsError::IndexOutOfRange {
                    op: "cross_entropy_rows",
                    index: y,
                    limit: c,
                });
            }
            let row = &vz.data()[i * c..(i + 1) * c];
            total = total + weights[i] * (kernels::log_sum_exp(row) - row[y]);
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec() },
            Tensor::scalar_value(total),
            ng,
        ))
    }

    /// Weighted cross-entropy against per-row probability targets:
    /// `sum_i w_i * sum_k -q_ik * log softmax(z_i)_k`.
    pub fn soft_cross_entropy_rows(
        &mut self,
        logits: Var,
        target_probs: &[S],
        weights: &[S],
    ) -> Result<Var> {
        let vz = &self.nodes[logits.0].value;
        let (r, c) = vz.rows_cols();
        if target_probs.len() != r * c || weights.len() != r {
            return Err(Self::shape_err(
                "soft_cross_entropy_rows",
                format!("logits {:?} vs targets len {}", vz.shape(), target_probs.len()),
            ));
        }
        let mut total = S::zero();
        for i in 0..r {
            if weights[i] == S::zero() {
                continue;
            }
            let row = &vz.data()[i * c..(i + 1) * c];
            let q = &target_probs[i * c..(i + 1) * c];
            let lse = kernels::log_sum_exp(row);
            let mut row_loss = S::zero();
            for (&zk, &qk) in row.iter().zip(q.iter()) {
                row_loss = row_loss + qk * (lse - zk);
            }
            total = total + weights[i] * row_loss;
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Op::SoftCrossEntropy {
                logits,
                target_probs: target_probs.to_vec(),
                weights: weights.to_vec(),
            },
            Tensor::scalar_value(total),
            ng,
        ))
    }

    fn accumulate(grads: &mut [Option<Vec<S>>], v: Var, n: usize, f: impl FnOnce(&mut [S])) {
        let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); n]);
        f(slot);
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every node
    /// that requires them; parameters unreachable from the loss get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_val = &self.nodes[loss.0].value;
        if loss_val.numel() != 1 {
            return Err(NumericsError::NonScalarLoss { shape: loss_val.shape().to_vec() });
        }
        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n_nodes).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            // Re-insert so callers can still read this node's gradient.
            grads[idx] = Some(dy.clone());
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for &v in [a, b] {
                        if self.needs(v) {
                            Self::accumulate(&mut grads, v, dy.len(), |g| {
                                for (gi, &d) in g.iter_mut().zip(dy.iter()) {
                                    *gi = *gi + d;
                                }
                            });
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let bd = self.nodes[b.0].value.data();
                        Self::accumulate(&mut grads, a, dy.len(), |g| {
                            for ((gi, &d), &bv) in g.iter_mut().zip(dy.iter()).zip(bd.iter()) {
                                *gi = *gi + d * bv;
                            }
                        });
                    }
                    if self.needs(b) {
                        let ad = self.nodes[a.0].value.data();
                        Self::accumulate(&mut grads, b, dy.len(), |g| {
                            for ((gi, &d), &av) in g.iter_mut().zip(dy.iter()).zip(ad.iter()) {
                                *gi = *gi + d * av;
                            }
                        });
                    }
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    if self.needs(a) {
                        Self::accumulate(&mut grads, a, dy.len(), |g| {
                            for (gi, &d) in g.iter_mut().zip(dy.iter()) {
                                *gi = *gi + d * c;
                            }
                        });
                    }
                }
                Op::AddRow { x, bias } => {
                    let (x, bias) = (*x, *bias);
                    let (r, c) = self.nodes[x.0].value.rows_cols();
                    if self.needs(x) {
                        Self::accumulate(&mut grads, x, r * c, |g| {
                            for (gi, &d) in g.iter_mut().zip(dy.iter()) {
                                *gi = *gi + d;
                            }
                        });
                    }
                    if self.needs(bias) {
                        Self::accumulate(&mut grads, bias, c, |g| {
                            for i in 0..r {
                                for (gj, &d) in g.iter_mut().zip(dy[i * c..(i + 1) * c].iter()) {
                                    *gj = *gj + d;
                                }
                            }
                        });
                    }
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = self.nodes[a.0].value.rows_cols();
                    let (_, n) = self.nodes[b.0].value.rows_cols();
                    if self.needs(a) {
                        // dA = dC @ B^T
                        let bd = self.nodes[b.0].value.data();
                        let mut bt = vec![S::zero(); k * n];
                        kernels::transpose(k, n, bd, &mut bt);
                        Self::accumulate(&mut grads, a, m * k, |g| {
                            kernels::gemm_nn(m, n, k, &dy, &bt, g);
                        });
                    }
                    if self.needs(b) {
                        // dB = A^T @ dC
                        let ad = self.nodes[a.0].value.data();
                        let mut at = vec![S::zero(); m * k];
                        kernels::transpose(m, k, ad, &mut at);
                        Self::accumulate(&mut grads, b, k * n, |g| {
                            kernels::gemm_nn(k, m, n, &at, &dy, g);
                        });
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = self.nodes[a.0].value.rows_cols();
                    let (n, _) = self.nodes[b.0].value.rows_cols();
                    if self.needs(a) {
                        // dA = dC @ B
                        let bd = self.nodes[b.0].value.data().to_vec();
                        Self::accumulate(&mut grads, a, m * k, |g| {
                            kernels::gemm_nn(m, n, k, &dy, &bd, g);
                        });
                    }
                    if self.needs(b) {
                        // dB = dC^T @ A
                        let ad = self.nodes[a.0].value.data();
                        let mut dyt = vec![S::zero(); m * n];
                        kernels::transpose(m, n, &dy, &mut dyt);
                        let ad = ad.to_vec();
                        Self::accumulate(&mut grads, b, n * k, |g| {
                            kernels::gemm_nn(n, m, k, &dyt, &ad, g);
                        });
                    }
                }
                Op::Gather { table, ids } => {
                    let table = *table;
                    if self.needs(table) {
                        let (rows, c) = self.nodes[table.0].value.rows_cols();
                        let ids = ids.clone();
                        Self::accumulate(&mut grads, table, rows * c, |g| {
                            for (i, &id) in ids.iter().enumerate() {
                                let dst = &mut g[id as usize * c..(id as usize + 1) * c];
                                for (gj, &d) in dst.iter_mut().zip(dy[i * c..(i + 1) * c].iter()) {
                                    *gj = *gj + d;
                                }
                            }
                        });
                    }
                }
                Op::MaskedSoftmax { x } => {
                    let x = *x;
                    if self.needs(x) {
                        let y = self.nodes[idx].value.data();
                        let (r, c) = self.nodes[idx].value.rows_cols();
                        let mut dx = vec![S::zero(); r * c];
                        for i in 0..r {
                            let yr = &y[i * c..(i + 1) * c];
                            let dyr = &dy[i * c..(i + 1) * c];
                            let mut dot = S::zero();
                            for (&yv, &dv) in yr.iter().zip(dyr.iter()) {
                                dot = dot + yv * dv;
                            }
                            for ((dxv, &yv), &dv) in
                                dx[i * c..(i + 1) * c].iter_mut().zip(yr.iter()).zip(dyr.iter())
                            {
                                *dxv = yv * (dv - dot);
                            }
                        }
                        Self::accumulate(&mut grads, x, r * c, |g| {
                            for (gi, &d) in g.iter_mut().zip(dx.iter()) {
                                *gi = *gi + d;
                            }
                        });
                    }
                }
                Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let (r, c) = self.nodes[x.0].value.rows_cols();
                    let xd = self.nodes[x.0].value.data();
                    let gd = self.nodes[gamma.0].value.data();
                    let cn = scalar::<S>(c as f64);

                    let mut dx = vec![S::zero(); r * c];
                    let mut dg = vec![S::zero(); c];
                    let mut db = vec![S::zero(); c];
                    for i in 0..r {
                        let xr = &xd[i * c..(i + 1) * c];
                        let dyr = &dy[i * c..(i + 1) * c];
                        let (m, s) = (mean[i], inv_std[i]);
                        let mut sum_dxhat = S::zero();
                        let mut sum_dxhat_xhat = S::zero();
                        for j in 0..c {
                            let xhat = (xr[j] - m) * s;
                            let dxhat = dyr[j] * gd[j];
                            dg[j] = dg[j] + dyr[j] * xhat;
                            db[j] = db[j] + dyr[j];
                            sum_dxhat = sum_dxhat + dxhat;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        }
                        let mean_dxhat = sum_dxhat / cn;
                        let mean_dxhat_xhat = sum_dxhat_xhat / cn;
                        for j in 0..c {
                            let xhat = (xr[j] - m) * s;
                            let dxhat = dyr[j] * gd[j];
                            dx[i * c + j] = s * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    if self.needs(x) {
                        Self::accumulate(&mut grads, x, r * c, |g| {
                            for (gi, &d) in g.iter_mut().zip(dx.iter()) {
                                *gi = *gi + d;
                            }
                        });
                    }
                    if self.needs(gamma) {
                        Self::accumulate(&mut grads, gamma, c, |g| {
                            for (gi, &d) in g.iter_mut().zip(dg.iter()) {
                                *gi = *gi + d;
                            }
                        });
                    }
                    if self.needs(beta) {
                        Self::accumulate(&mut grads, beta, c, |g| {
                            for (gi, &d) in g.iter_mut().zip(db.iter()) {
                                *gi = *gi + d;
                            }
                        });
                    }
                }
                Op::Gelu(x) => {
                    let x = *x;
                    if self.needs(x) {
                        let xd = self.nodes[x.0].value.data().to_vec();
                        Self::accumulate(&mut grads, x, xd.len(), |g| {
                            for ((gi, &d), &xv) in g.iter_mut().zip(dy.iter()).zip(xd.iter()) {
                                *gi = *gi + d * kernels::gelu_grad(xv);
                            }
                        });
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let (x, start, len) = (*x, *start, *len);
                    if self.needs(x) {
                        let (r, c) = self.nodes[x.0].value.rows_cols();
                        Self::accumulate(&mut grads, x, r * c, |g| {
                            for i in 0..r {
                                let dst = &mut g[i * c + start..i * c + start + len];
                                for (gj, &d) in dst.iter_mut().zip(dy[i * len..(i + 1) * len].iter())
                                {
                                    *gj = *gj + d;
                                }
                            }
                        });
                    }
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let r = self.nodes[parts[0].0].value.rows_cols().0;
                    let total_c: usize =
                        parts.iter().map(|&p| self.nodes[p.0].value.rows_cols().1).sum();
                    let mut offset = 0;
                    for &p in &parts {
                        let (_, pc) = self.nodes[p.0].value.rows_cols();
                        if self.needs(p) {
                            let off = offset;
                            Self::accumulate(&mut grads, p, r * pc, |g| {
                                for i in 0..r {
                                    let src = &dy[i * total_c + off..i * total_c + off + pc];
                                    for (gj, &d) in
                                        g[i * pc..(i + 1) * pc].iter_mut().zip(src.iter())
                                    {
                                        *gj = *gj + d;
                                    }
                                }
                            });
                        }
                        offset += pc;
                    }
                }
                Op::Sum(x) => {
                    let x = *x;
                    if self.needs(x) {
                        let n = self.nodes[x.0].value.numel();
                        let d = dy[0];
                        Self::accumulate(&mut grads, x, n, |g| {
                            for gi in g.iter_mut() {
                                *gi = *gi + d;
                            }
                        });
                    }
                }
                Op::CrossEntropy { logits, targets, weights } => {
                    let logits = *logits;
                    if self.needs(logits) {
                        let (r, c) = self.nodes[logits.0].value.rows_cols();
                        let zd = self.nodes[logits.0].value.data();
                        let up = dy[0];
                        let mut dz = vec![S::zero(); r * c];
                        for i in 0..r {
                            if weights[i] == S::zero() {
                                continue;
                            }
                            let mut p = zd[i * c..(i + 1) * c].to_vec();
                            kernels::softmax_row(&mut p);
                            let w = weights[i] * up;
                            let y = targets[i] as usize;
                            for (j, pv) in p.into_iter().enumerate() {
                                let indicator = if j == y { S::one() } else { S::zero() };
                                dz[i * c + j] = w * (pv - indicator);
                            }
                        }
                        Self::accumulate(&mut grads, logits, r * c, |g| {
                            for (gi, &d) in g.iter_mut().zip(dz.iter()) {
                                *gi = *gi + d;
                            }
                        });
                    }
                }
                Op::SoftCrossEntropy { logits, target_probs, weights } => {
                    let logits = *logits;
                    if self.needs(logits) {
                        let (r, c) = self.nodes[logits.0].value.rows_cols();
                        let zd = self.nodes[logits.0].value.data();
                        let up = dy[0];
                        let mut dz = vec![S::zero(); r * c];
                        for i in 0..r {
                            if weights[i] == S::zero() {
                                continue;
                            }
                            let mut p = zd[i * c..(i + 1) * c].to_vec();
                            kernels::softmax_row(&mut p);
                            let w = weights[i] * up;
                            for j in 0..c {
                                dz[i * c + j] = w * (p[j] - target_probs[i * c + j]);
                            }
                        }
                        Self::accumulate(&mut grads, logits, r * c, |g| {
                            for (gi, &d) in g.iter_mut().zip(dz.iter()) {
                                *gi = *gi + d;
                            }
                        });
                    }
                }
            }
        }

        // Parameters that never feed the loss still report a gradient of zero.
        for idx in 0..n_nodes {
            if self.nodes[idx].needs_grad
                && matches!(self.nodes[idx].op, Op::Leaf)
                && grads[idx].is_none()
            {
                grads[idx] = Some(vec![S::zero(); self.nodes[idx].value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of a node after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
