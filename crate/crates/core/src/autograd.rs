//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! Small tape-based engine sized for desk-scale models: every op eagerly
//! computes its value and, when gradients are enabled, records a backward
//! closure. Node ids are tape indices, so reverse iteration is already a
//! topological order.
//!
//! All arithmetic is f64. Gradient checks in this crate assert 1e-4 relative
//! agreement with central differences, which f32 arithmetic cannot honor.

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape/data mismatch");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(1, 1, vec![v])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// c = a @ b
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dims");
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = b.row(k);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// c = a @ b^T
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dims");
    let mut out = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let brow = b.row(j);
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out.data[i * b.rows + j] = acc;
        }
    }
    out
}

/// c = a^T @ b
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dims");
    let mut out = Tensor::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub type NodeId = usize;

type BackFn = Box<dyn Fn(&Tensor) -> Vec<(NodeId, Tensor)> + Send>;

struct Node {
    value: Tensor,
    tracked: bool,
    backward: Option<BackFn>,
}

/// Gradients keyed by tape node id, as produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or a zero tensor of the given shape if the node
    /// never received one.
    pub fn get_or_zeros(&self, id: NodeId, rows: usize, cols: usize) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(rows, cols),
        }
    }
}

/// Computation tape. Create one per forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

const RMS_EPS: f64 = 1e-6;
const COSINE_NORM_EPS: f64 = 1e-8;

impl Tape {
    pub fn new(grad_enabled: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, tracked: bool, backward: Option<BackFn>) -> NodeId {
        let backward = if self.grad_enabled { backward } else { None };
        self.nodes.push(Node {
            value,
            tracked: tracked && self.grad_enabled,
            backward,
        });
        self.nodes.len() - 1
    }

    /// Differentiable input (parameter or perturbation site).
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, true, None)
    }

    /// Non-differentiable input; gradient flow stops here. Frozen base
    /// weights enter the graph through this.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, false, None)
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id].tracked
    }

    fn unary(&mut self, value: Tensor, parent: NodeId, back: BackFn) -> NodeId {
        let tracked = self.tracked(parent);
        self.push(value, tracked, if tracked { Some(back) } else { None })
    }

    fn binary(&mut self, value: Tensor, a: NodeId, b: NodeId, back: BackFn) -> NodeId {
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, tracked, if tracked { Some(back) } else { None })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let value = matmul(&av, &bv);
        let (ta, tb) = (self.tracked(a), self.tracked(b));
        self.binary(
            value,
            a,
            b,
            Box::new(move |go| {
                let mut out = Vec::new();
                if ta {
                    out.push((a, matmul_nt(go, &bv)));
                }
                if tb {
                    out.push((b, matmul_tn(&av, go)));
                }
                out
            }),
        )
    }

    /// a @ b^T
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let value = matmul_nt(&av, &bv);
        let (ta, tb) = (self.tracked(a), self.tracked(b));
        self.binary(
            value,
            a,
            b,
            Box::new(move |go| {
                let mut out = Vec::new();
                if ta {
                    out.push((a, matmul(go, &bv)));
                }
                if tb {
                    out.push((b, matmul_tn(go, &av)));
                }
                out
            }),
        )
    }

    /// wa·a + wb·b, elementwise over identical shapes.
    pub fn add_weighted(&mut self, a: NodeId, wa: f64, b: NodeId, wb: f64) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.same_shape(bv), "add_weighted shape mismatch");
        let mut value = av.clone();
        for (x, y) in value.data.iter_mut().zip(&bv.data) {
            *x = *x * wa + *y * wb;
        }
        let (ta, tb) = (self.tracked(a), self.tracked(b));
        self.binary(
            value,
            a,
            b,
            Box::new(move |go| {
                let mut out = Vec::new();
                if ta {
                    let mut g = go.clone();
                    g.data.iter_mut().for_each(|v| *v *= wa);
                    out.push((a, g));
                }
                if tb {
                    let mut g = go.clone();
                    g.data.iter_mut().for_each(|v| *v *= wb);
                    out.push((b, g));
                }
                out
            }),
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.add_weighted(a, 1.0, b, 1.0)
    }

    /// a (m×n) + row vector b (1×n), broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows, 1, "add_row rhs must be 1×n");
        assert_eq!(av.cols, bv.cols, "add_row width mismatch");
        let mut value = av.clone();
        for r in 0..value.rows {
            let row = &mut value.data[r * value.cols..(r + 1) * value.cols];
            for (x, y) in row.iter_mut().zip(&bv.data) {
                *x += y;
            }
        }
        let (ta, tb) = (self.tracked(a), self.tracked(b));
        let cols = av.cols;
        self.binary(
            value,
            a,
            b,
            Box::new(move |go| {
                let mut out = Vec::new();
                if ta {
                    out.push((a, go.clone()));
                }
                if tb {
                    let mut g = Tensor::zeros(1, cols);
                    for r in 0..go.rows {
                        for (gv, &ov) in g.data.iter_mut().zip(go.row(r)) {
                            *gv += ov;
                        }
                    }
                    out.push((b, g));
                }
                out
            }),
        )
    }

    /// Elementwise product over identical shapes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        assert!(av.same_shape(&bv), "mul shape mismatch");
        let mut value = av.clone();
        for (x, y) in value.data.iter_mut().zip(&bv.data) {
            *x *= y;
        }
        let (ta, tb) = (self.tracked(a), self.tracked(b));
        self.binary(
            value,
            a,
            b,
            Box::new(move |go| {
                let mut out = Vec::new();
                if ta {
                    let mut g = go.clone();
                    for (x, y) in g.data.iter_mut().zip(&bv.data) {
                        *x *= y;
                    }
                    out.push((a, g));
                }
                if tb {
                    let mut g = go.clone();
                    for (x, y) in g.data.iter_mut().zip(&av.data) {
                        *x *= y;
                    }
                    out.push((b, g));
                }
                out
            }),
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|v| *v *= c);
        self.unary(
            value,
            a,
            Box::new(move |go| {
                let mut g = go.clone();
                g.data.iter_mut().for_each(|v| *v *= c);
                vec![(a, g)]
            }),
        )
    }

    /// GELU, tanh approximation (smooth, so finite differences behave).
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let av = self.value(a).clone();
        let mut value = av.clone();
        for v in value.data.iter_mut() {
            let x = *v;
            let u = C * (x + A * x * x * x);
            *v = 0.5 * x * (1.0 + u.tanh());
        }
        self.unary(
            value,
            a,
            Box::new(move |go| {
                let mut g = go.clone();
                for (gv, &x) in g.data.iter_mut().zip(&av.data) {
                    let u = C * (x + A * x * x * x);
                    let t = u.tanh();
                    let sech2 = 1.0 - t * t;
                    let du = C * (1.0 + 3.0 * A * x * x);
                    *gv *= 0.5 * (1.0 + t) + 0.5 * x * sech2 * du;
                }
                vec![(a, g)]
            }),
        )
    }

    /// Row-wise RMS normalization with a learned gain vector (1×n).
    pub fn rms_norm(&mut self, a: NodeId, gain: NodeId) -> NodeId {
        let av = self.value(a).clone();
        let gv = self.value(gain).clone();
        assert_eq!(gv.rows, 1);
        assert_eq!(av.cols, gv.cols);
        let n = av.cols;
        let mut value = Tensor::zeros(av.rows, n);
        let mut inv_r = vec![0.0; av.rows];
        for r in 0..av.rows {
            let row = av.row(r);
            let ms = row.iter().map(|x| x * x).sum::<f64>() / n as f64;
            let ir = 1.0 / (ms + RMS_EPS).sqrt();
            inv_r[r] = ir;
            for (j, &x) in row.iter().enumerate() {
                value.data[r * n + j] = x * gv.data[j] * ir;
            }
        }
        let (ta, tg) = (self.tracked(a), self.tracked(gain));
        self.binary(
            value,
            a,
            gain,
            Box::new(move |go| {
                let mut out = Vec::new();
                if ta {
                    let mut g = Tensor::zeros(av.rows, n);
                    for r in 0..av.rows {
                        let row = av.row(r);
                        let orow = go.row(r);
                        let ir = inv_r[r];
                        let dot: f64 = (0..n).map(|k| orow[k] * gv.data[k] * row[k]).sum();
                        for j in 0..n {
                            g.data[r * n + j] = orow[j] * gv.data[j] * ir
                                - row[j] * dot * ir * ir * ir / n as f64;
                        }
                    }
                    out.push((a, g));
                }
                if tg {
                    let mut g = Tensor::zeros(1, n);
                    for r in 0..av.rows {
                        let row = av.row(r);
                        let orow = go.row(r);
                        for j in 0..n {
                            g.data[j] += orow[j] * row[j] * inv_r[r];
                        }
                    }
                    out.push((gain, g));
                }
                out
            }),
        )
    }

    /// Causal attention weights: per row i, softmax over columns j ≤ i of
    /// `scale`·scores; columns j > i are exactly zero.
    pub fn causal_softmax(&mut self, scores: NodeId, scale: f64) -> NodeId {
        let sv = self.value(scores).clone();
        assert_eq!(sv.rows, sv.cols, "causal_softmax expects square scores");
        let n = sv.rows;
        let mut value = Tensor::zeros(n, n);
        for i in 0..n {
            let row = sv.row(i);
            let mut mx = f64::NEG_INFINITY;
            for &x in &row[..=i] {
                mx = mx.max(scale * x);
            }
            let mut z = 0.0;
            for j in 0..=i {
                let e = (scale * row[j] - mx).exp();
                value.data[i * n + j] = e;
                z += e;
            }
            for j in 0..=i {
                value.data[i * n + j] /= z;
            }
        }
        let pv = value.clone();
        self.unary(
            value,
            scores,
            Box::new(move |go| {
                let mut g = Tensor::zeros(n, n);
                for i in 0..n {
                    let p = &pv.data[i * n..i * n + i + 1];
                    let o = &go.data[i * n..i * n + i + 1];
                    let dot: f64 = p.iter().zip(o).map(|(&x, &y)| x * y).sum();
                    for j in 0..=i {
                        g.data[i * n + j] = scale * p[j] * (o[j] - dot);
                    }
                }
                vec![(scores, g)]
            }),
        )
    }

    /// Row-wise softmax over the full width.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a).clone();
        let value = softmax_rows_value(&av);
        let pv = value.clone();
        self.unary(
            value,
            a,
            Box::new(move |go| {
                let mut g = Tensor::zeros(pv.rows, pv.cols);
                for r in 0..pv.rows {
                    let p = pv.row(r);
                    let o = go.row(r);
                    let dot: f64 = p.iter().zip(o).map(|(&x, &y)| x * y).sum();
                    for j in 0..pv.cols {
                        g.data[r * pv.cols + j] = p[j] * (o[j] - dot);
                    }
                }
                vec![(a, g)]
            }),
        )
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a).clone();
        let value = log_softmax_rows_value(&av);
        let lv = value.clone();
        self.unary(
            value,
            a,
            Box::new(move |go| {
                let mut g = Tensor::zeros(lv.rows, lv.cols);
                for r in 0..lv.rows {
                    let o = go.row(r);
                    let l = lv.row(r);
                    let osum: f64 = o.iter().sum();
                    for j in 0..lv.cols {
                        g.data[r * lv.cols + j] = o[j] - l[j].exp() * osum;
                    }
                }
                vec![(a, g)]
            }),
        )
    }

    /// Gather rows of `table` at `ids`.
    pub fn embed_rows(&mut self, table: NodeId, ids: &[u32]) -> NodeId {
        let tv = self.value(table).clone();
        let n = tv.cols;
        let mut value = Tensor::zeros(ids.len(), n);
        for (r, &id) in ids.iter().enumerate() {
            let src = tv.row(id as usize);
            value.data[r * n..(r + 1) * n].copy_from_slice(src);
        }
        let ids_owned: Vec<u32> = ids.to_vec();
        let (t_rows, t_cols) = (tv.rows, tv.cols);
        self.unary(
            value,
            table,
            Box::new(move |go| {
                let mut g = Tensor::zeros(t_rows, t_cols);
                for (r, &id) in ids_owned.iter().enumerate() {
                    let dst = &mut g.data[id as usize * t_cols..(id as usize + 1) * t_cols];
                    for (d, &s) in dst.iter_mut().zip(go.row(r)) {
                        *d += s;
                    }
                }
                vec![(table, g)]
            }),
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        assert!(start + len <= av.rows, "slice_rows out of range");
        let cols = av.cols;
        let value = Tensor::from_vec(
            len,
            cols,
            av.data[start * cols..(start + len) * cols].to_vec(),
        );
        let total_rows = av.rows;
        self.unary(
            value,
            a,
            Box::new(move |go| {
                let mut g = Tensor::zeros(total_rows, cols);
                g.data[start * cols..(start + len) * cols].copy_from_slice(&go.data);
                vec![(a, g)]
            }),
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        assert!(start + len <= av.cols, "slice_cols out of range");
        let (rows, cols) = (av.rows, av.cols);
        let mut value = Tensor::zeros(rows, len);
        for r in 0..rows {
            value.data[r * len..(r + 1) * len]
                .copy_from_slice(&av.data[r * cols + start..r * cols + start + len]);
        }
        self.unary(
            value,
            a,
            Box::new(move |go| {
                let mut g = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    g.data[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&go.data[r * len..(r + 1) * len]);
                }
                vec![(a, g)]
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols).collect();
        let total: usize = widths.iter().sum();
        let mut value = Tensor::zeros(rows, total);
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(pv.row(r));
            }
            offset += w;
        }
        let parts_owned: Vec<NodeId> = parts.to_vec();
        let tracked = parts.iter().any(|&p| self.tracked(p));
        let back: BackFn = Box::new(move |go| {
            let mut out = Vec::new();
            let mut offset = 0;
            for (&p, &w) in parts_owned.iter().zip(&widths) {
                let mut g = Tensor::zeros(rows, w);
                for r in 0..rows {
                    g.data[r * w..(r + 1) * w]
                        .copy_from_slice(&go.data[r * go.cols + offset..r * go.cols + offset + w]);
                }
                out.push((p, g));
                offset += w;
            }
            out
        });
        self.push(value, tracked, if tracked { Some(back) } else { None })
    }

    /// 1×n mean over all rows of a.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let (rows, cols) = (av.rows, av.cols);
        assert!(rows > 0, "mean_rows over empty tensor");
        let mut value = Tensor::zeros(1, cols);
        for r in 0..rows {
            for (v, &x) in value.data.iter_mut().zip(av.row(r)) {
                *v += x;
            }
        }
        value.data.iter_mut().for_each(|v| *v /= rows as f64);
        self.unary(
            value,
            a,
            Box::new(move |go| {
                let mut g = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    for (gv, &ov) in g.data[r * cols..(r + 1) * cols].iter_mut().zip(&go.data) {
                        *gv = ov / rows as f64;
                    }
                }
                vec![(a, g)]
            }),
        )
    }

    /// Mean negative log-likelihood over masked-in positions.
    ///
    /// `logprobs` rows must already be log-distributions. Masked-out rows
    /// contribute exactly nothing to the value or the gradient.
    pub fn masked_nll(
        &mut self,
        logprobs: NodeId,
        targets: &[u32],
        mask: &[bool],
    ) -> Result<NodeId> {
        let lv = self.value(logprobs);
        assert_eq!(lv.rows, targets.len(), "masked_nll target length");
        assert_eq!(lv.rows, mask.len(), "masked_nll mask length");
        let selected: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        if selected.is_empty() {
            return Err(Error::EmptyLossMask);
        }
        let m = selected.len() as f64;
        let mut total = 0.0;
        for &i in &selected {
            total -= lv.get(i, targets[i] as usize);
        }
        let value = Tensor::scalar(total / m);
        let (rows, cols) = (lv.rows, lv.cols);
        let targets_owned: Vec<u32> = targets.to_vec();
        Ok(self.unary(
            value,
            logprobs,
            Box::new(move |go| {
                let g0 = go.item();
                let mut g = Tensor::zeros(rows, cols);
                for &i in &selected {
                    g.data[i * cols + targets_owned[i] as usize] = -g0 / m;
                }
                vec![(logprobs, g)]
            }),
        ))
    }

    /// Cosine distance 1 − cos(a, b) between two 1×n vectors, with norms
    /// clamped below at 1e-8.
    pub fn cosine_distance(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        assert_eq!(av.rows, 1);
        assert_eq!(bv.rows, 1);
        assert_eq!(av.cols, bv.cols, "cosine_distance dim mismatch");
        let raw_na = norm(&av.data);
        let raw_nb = norm(&bv.data);
        let na = raw_na.max(COSINE_NORM_EPS);
        let nb = raw_nb.max(COSINE_NORM_EPS);
        let dot: f64 = av.data.iter().zip(&bv.data).map(|(&x, &y)| x * y).sum();
        let cos = dot / (na * nb);
        let value = Tensor::scalar(1.0 - cos);
        let (ta, tb) = (self.tracked(a), self.tracked(b));
        let clamped_a = raw_na < COSINE_NORM_EPS;
        let clamped_b = raw_nb < COSINE_NORM_EPS;
        self.binary(
            value,
            a,
            b,
            Box::new(move |go| {
                let g0 = go.item();
                let n = av.cols;
                let mut out = Vec::new();
                if ta {
                    let mut g = Tensor::zeros(1, n);
                    for j in 0..n {
                        let d_cos = if clamped_a {
                            bv.data[j] / (na * nb)
                        } else {
                            bv.data[j] / (na * nb) - cos * av.data[j] / (na * na)
                        };
                        g.data[j] = -g0 * d_cos;
                    }
                    out.push((a, g));
                }
                if tb {
                    let mut g = Tensor::zeros(1, n);
                    for j in 0..n {
                        let d_cos = if clamped_b {
                            av.data[j] / (na * nb)
                        } else {
                            av.data[j] / (na * nb) - cos * bv.data[j] / (nb * nb)
                        };
                        g.data[j] = -g0 * d_cos;
                    }
                    out.push((b, g));
                }
                out
            }),
        )
    }

    /// Reverse pass from a scalar root. Returns gradients for every node
    /// that received one; untracked nodes never do.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert!(
            self.grad_enabled,
            "backward on a tape built with gradients disabled"
        );
        assert_eq!(
            self.nodes[root].value.data.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::scalar(1.0));
        for id in (0..=root).rev() {
            let Some(back) = &self.nodes[id].backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            for (pid, pg) in back(&g) {
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

pub fn softmax_rows_value(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    for r in 0..out.rows {
        let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

pub fn log_softmax_rows_value(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    for r in 0..out.rows {
        let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (*v - mx).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
            .collect();
        Tensor::from_vec(rows, cols, data)
    }

    /// Central-difference check of a scalar-valued graph against analytic
    /// gradients for every leaf.
    fn grad_check<F>(leaves: Vec<Tensor>, f: F)
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let mut tape = Tape::new(true);
        let ids: Vec<NodeId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = f(&mut tape, &ids);
        let grads = tape.backward(root);

        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get_or_zeros(ids[li], leaf.rows(), leaf.cols());
            for k in 0..leaf.data().len() {
                let eval = |delta: f64| {
                    let mut tape = Tape::new(false);
                    let ids: Vec<NodeId> = leaves
                        .iter()
                        .enumerate()
                        .map(|(i, t)| {
                            let mut t = t.clone();
                            if i == li {
                                t.data_mut()[k] += delta;
                            }
                            tape.leaf(t)
                        })
                        .collect();
                    let root = f(&mut tape, &ids);
                    tape.value(root).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.data()[k];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom < 1e-4,
                    "leaf {li} elem {k}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn matmul_values() {
        let a = Tensor::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::from_vec(3, 2, vec![7., 8., 9., 10., 11., 12.]);
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        let d = matmul_nt(&a, &Tensor::from_vec(2, 3, vec![1., 0., 0., 0., 1., 0.]));
        assert_eq!(d.data(), &[1., 2., 4., 5.]);
    }

    #[test]
    fn grad_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, 3, 4);
        let b = randn(&mut rng, 4, 2);
        let c = randn(&mut rng, 3, 2);
        grad_check(vec![a, b, c], |t, ids| {
            let m = t.matmul(ids[0], ids[1]);
            let s = t.mul(m, ids[2]);
            let col = t.mean_rows(s);
            let col2 = t.mul(col, col);
            let all = t.mean_rows(col2);
            t.slice_cols(all, 0, 1)
        });
    }

    #[test]
    fn grad_norm_gelu_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, 4, 6);
        let g = randn(&mut rng, 1, 6);
        grad_check(vec![x, g], |t, ids| {
            let n = t.rms_norm(ids[0], ids[1]);
            let a = t.gelu(n);
            let p = t.softmax_rows(a);
            let lp = t.log_softmax_rows(p);
            let m = t.mean_rows(lp);
            let mm = t.mul(m, m);
            let one = t.mean_rows(mm);
            let parts: Vec<NodeId> = (0..6).map(|j| t.slice_cols(one, j, 1)).collect();
            let mut acc = parts[0];
            for &p in &parts[1..] {
                acc = t.add(acc, p);
            }
            acc
        });
    }

    #[test]
    fn grad_attention_shape_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = randn(&mut rng, 5, 4);
        let k = randn(&mut rng, 5, 4);
        let v = randn(&mut rng, 5, 4);
        grad_check(vec![q, k, v], |t, ids| {
            let scores = t.matmul_nt(ids[0], ids[1]);
            let attn = t.causal_softmax(scores, 0.5);
            let ctx = t.matmul(attn, ids[2]);
            let left = t.slice_cols(ctx, 0, 2);
            let right = t.slice_cols(ctx, 2, 2);
            let cat = t.concat_cols(&[right, left]);
            let rows = t.slice_rows(cat, 1, 3);
            let m = t.mean_rows(rows);
            let vm = t.mean_rows(ids[2]);
            t.cosine_distance(m, vm)
        });
    }

    #[test]
    fn grad_embed_and_nll() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let table = randn(&mut rng, 7, 5);
        let w = randn(&mut rng, 5, 7);
        let ids_seq = [0u32, 3, 3, 6];
        let targets = [3u32, 3, 6, 0];
        let mask = [true, false, true, true];
        grad_check(vec![table, w], |t, nids| {
            let x = t.embed_rows(nids[0], &ids_seq);
            let logits = t.matmul(x, nids[1]);
            let lp = t.log_softmax_rows(logits);
            t.masked_nll(lp, &targets, &mask).unwrap()
        });
    }

    #[test]
    fn grad_cosine_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = randn(&mut rng, 1, 6);
        let b = randn(&mut rng, 1, 6);
        grad_check(vec![a, b], |t, ids| t.cosine_distance(ids[0], ids[1]));
    }

    #[test]
    fn masked_nll_ignores_masked_out_rows_exactly() {
        let targets = [1u32, 0];
        let mask = [true, false];
        let frozen = Tensor::from_vec(2, 2, vec![0.1, -0.4, 0.7, 0.2]);
        let mut perturbed = frozen.clone();
        perturbed.set(1, 0, 123.456);
        perturbed.set(1, 1, -99.0);

        let run = |input: &Tensor| {
            let mut tape = Tape::new(true);
            let leaf = tape.leaf(input.clone());
            let lp = tape.log_softmax_rows(leaf);
            let loss = tape.masked_nll(lp, &targets, &mask).unwrap();
            let grads = tape.backward(loss);
            (
                tape.value(loss).item(),
                grads.get_or_zeros(leaf, 2, 2).data().to_vec(),
            )
        };
        let (v1, g1) = run(&frozen);
        let (v2, g2) = run(&perturbed);
        assert_eq!(v1, v2);
        assert_eq!(g1[0], g2[0]);
        assert_eq!(g1[1], g2[1]);
        assert_eq!(g1[2], 0.0);
        assert_eq!(g1[3], 0.0);
        assert_eq!(g2[2], 0.0);
        assert_eq!(g2[3], 0.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let mut tape = Tape::new(true);
        let leaf = tape.leaf(Tensor::from_vec(1, 2, vec![0.0, 0.0]));
        let lp = tape.log_softmax_rows(leaf);
        assert!(matches!(
            tape.masked_nll(lp, &[0], &[false]),
            Err(Error::EmptyLossMask)
        ));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new(true);
        let a = tape.leaf(Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        let b = tape.constant(Tensor::from_vec(1, 2, vec![3.0, 4.0]));
        let m = tape.mul(a, b);
        let s = tape.mul(m, m);
        let out = tape.cosine_distance(s, b);
        let grads = tape.backward(out);
        assert!(grads.get(b).is_none());
        assert!(grads.get(a).is_some());
    }
}
