//! Reverse-mode tape over dense f64 tensors.
//!
//! Every forward builder appends one node to the tape, validates shapes,
//! and rejects non-finite results on the spot — a NaN that appears mid-
//! forward is an error, not something to discover three modules later.
//! `backward` walks the tape in reverse and *accumulates* into node
//! gradients: calling it twice doubles them, and `zero_grads` resets.

use crate::autodiff::kernels;
use crate::autodiff::Tensor;
use crate::{shape_err, Error, Result};

/// Handle into a [`Graph`]'s node arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// Matrix plus a row vector broadcast over every row.
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    MulElem(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Gelu(NodeId),
    /// Row lookup into an embedding table; backward scatter-adds.
    Gather { table: NodeId, ids: Vec<usize> },
    /// Scalar loss whose input gradient was precomputed during forward
    /// (gradient for a unit upstream seed).
    Loss { x: NodeId, grad_unit: Vec<f64> },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
}

/// A single forward/backward tape. Build one per sample, read the gradients
/// off the parameter leaves, then drop it.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    /// Gradient accumulated so far, `None` until `backward` reaches the node.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[id.0].shape[..] {
            [m, n] => Ok((m, n)),
            ref s => Err(shape_err(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
        if data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn push(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        value: Vec<f64>,
        needs_grad: bool,
        name: &'static str,
    ) -> Result<NodeId> {
        Self::check_finite(name, &value)?;
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { op, shape, value, grad: None, needs_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ---- leaves ---------------------------------------------------------

    /// Copy a tensor onto the tape; it participates in backward iff the
    /// tensor asked for gradients.
    pub fn leaf(&mut self, t: &Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), t.requires_grad, "leaf")
    }

    /// A value that never receives gradients (inputs, masks, constants).
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(shape_err(
                "constant",
                format!("shape {shape:?} does not hold {} values", data.len()),
            ));
        }
        self.push(Op::Leaf, shape.to_vec(), data, false, "constant")
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            ));
        }
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Add(a, b), shape, value, needs, "add")
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "add_bias")?;
        if self.nodes[bias.0].value.len() != n {
            return Err(shape_err(
                "add_bias",
                format!("bias length {} vs {n} columns", self.nodes[bias.0].value.len()),
            ));
        }
        let mut value = self.nodes[x.0].value.clone();
        let b = &self.nodes[bias.0].value;
        for r in 0..m {
            for j in 0..n {
                value[r * n + j] += b[j];
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        self.push(Op::AddBias(x, bias), vec![m, n], value, needs, "add_bias")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale factor" });
        }
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v * c).collect();
        let needs = self.needs(x);
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Scale(x, c), shape, value, needs, "scale")
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(shape_err(
                "mul_elem",
                format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            ));
        }
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::MulElem(a, b), shape, value, needs, "mul_elem")
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| kernels::gelu(v)).collect();
        let needs = self.needs(x);
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Gelu(x), shape, value, needs, "gelu")
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(shape_err("matmul", format!("inner dims {ka} vs {kb}")));
        }
        let value = kernels::matmul_nn(&self.nodes[a.0].value, &self.nodes[b.0].value, m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Matmul(a, b), vec![m, n], value, needs, "matmul")
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "transpose")?;
        let value = kernels::transpose(&self.nodes[x.0].value, m, n);
        let needs = self.needs(x);
        self.push(Op::Transpose(x), vec![n, m], value, needs, "transpose")
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "slice_rows")?;
        if start + len > m {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {m}", start + len)));
        }
        let value = self.nodes[x.0].value[start * n..(start + len) * n].to_vec();
        let needs = self.needs(x);
        self.push(Op::SliceRows { x, start }, vec![len, n], value, needs, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start + len > n {
            return Err(shape_err("slice_cols", format!("cols {start}..{} of {n}", start + len)));
        }
        let src = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(m * len);
        for r in 0..m {
            value.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let needs = self.needs(x);
        self.push(Op::SliceCols { x, start }, vec![m, len], value, needs, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs"));
        }
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_cols")?;
            if pm != m {
                return Err(shape_err("concat_cols", format!("row counts {m} vs {pm}")));
            }
            total += pn;
        }
        let mut value = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                let n = self.nodes[p.0].shape[1];
                value.extend_from_slice(&self.nodes[p.0].value[r * n..(r + 1) * n]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatCols(parts.to_vec()), vec![m, total], value, needs, "concat_cols")
    }

    // ---- nonlinear blocks -------------------------------------------------

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} of shape {shape:?}")));
        }
        let value = kernels::softmax_axis(&self.nodes[x.0].value, &shape, axis);
        let needs = self.needs(x);
        self.push(Op::Softmax { x, axis }, shape, value, needs, "softmax")
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, d) = self.dims2(x, "layer_norm")?;
        if self.nodes[gain.0].value.len() != d || self.nodes[bias.0].value.len() != d {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gain/bias lengths {}/{} vs width {d}",
                    self.nodes[gain.0].value.len(),
                    self.nodes[bias.0].value.len()
                ),
            ));
        }
        let value = kernels::layer_norm(
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
            d,
        );
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(Op::LayerNorm { x, gain, bias }, vec![m, d], value, needs, "layer_norm")
    }

    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, d) = self.dims2(table, "gather")?;
        let mut value = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(shape_err("gather", format!("row {id} of {rows}")));
            }
            value.extend_from_slice(&self.nodes[table.0].value[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        let op = Op::Gather { table, ids: ids.to_vec() };
        self.push(op, vec![ids.len(), d], value, needs, "gather")
    }

    /// Reduce an m×n node to a single scalar through two fixed
    /// pseudo-random weight vectors derived from `seed`. Handy for
    /// finite-difference checks, where a plain sum would let sign errors
    /// in symmetric positions cancel.
    pub fn scalar_probe(&mut self, x: NodeId, seed: u64) -> Result<NodeId> {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let (m, n) = self.dims2(x, "scalar_probe")?;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let left: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let right: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u = self.constant(&[1, m], left)?;
        let w = self.constant(&[n, 1], right)?;
        let ux = self.matmul(u, x)?;
        self.matmul(ux, w)
    }

    // ---- losses -----------------------------------------------------------

    /// Token-level cross entropy averaged over rows whose target is not
    /// `pad_id`. A fully padded batch contributes zero loss and zero
    /// gradient rather than poisoning the mean with 0/0.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], pad_id: usize) -> Result<NodeId> {
        let (m, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {m} rows", targets.len()),
            ));
        }
        let cnt = targets.iter().filter(|&&t| t != pad_id).count();
        if cnt == 0 {
            let needs = self.needs(logits);
            let op = Op::Loss { x: logits, grad_unit: vec![0.0; m * v] };
            return self.push(op, vec![1], vec![0.0], needs, "cross_entropy");
        }
        let x = &self.nodes[logits.0].value;
        let lse = kernels::log_sum_exp_rows(x, v);
        let mut loss = 0.0;
        let mut grad_unit = vec![0.0; m * v];
        let inv = 1.0 / cnt as f64;
        for r in 0..m {
            let t = targets[r];
            if t == pad_id {
                continue;
            }
            if t >= v {
                return Err(shape_err("cross_entropy", format!("target {t} of vocab {v}")));
            }
            loss += lse[r] - x[r * v + t];
            for j in 0..v {
                let p = (x[r * v + j] - lse[r]).exp();
                grad_unit[r * v + j] = (p - if j == t { 1.0 } else { 0.0 }) * inv;
            }
        }
        loss *= inv;
        let needs = self.needs(logits);
        self.push(Op::Loss { x: logits, grad_unit }, vec![1], vec![loss], needs, "cross_entropy")
    }

    /// Blended hard/soft objective for training against a frozen teacher:
    /// `alpha`·CE(student, targets) + (1−alpha)·T²·KL(teacher‖student), with
    /// both soft distributions tempered by `temp` and the mean taken over
    /// non-padding rows. Teacher logits enter as plain values — no gradient
    /// flows back through them.
    pub fn distill_loss(
        &mut self,
        student: NodeId,
        teacher_logits: &[f64],
        targets: &[usize],
        pad_id: usize,
        alpha: f64,
        temp: f64,
    ) -> Result<NodeId> {
        let (m, v) = self.dims2(student, "distill_loss")?;
        if teacher_logits.len() != m * v {
            return Err(shape_err(
                "distill_loss",
                format!("teacher logits {} vs {}", teacher_logits.len(), m * v),
            ));
        }
        if targets.len() != m {
            return Err(shape_err("distill_loss", format!("{} targets for {m} rows", targets.len())));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Contract(format!("distill_loss: alpha {alpha} outside [0, 1]")));
        }
        if !(temp.is_finite() && temp > 0.0) {
            return Err(Error::Contract(format!("distill_loss: temperature {temp} must be positive")));
        }
        let cnt = targets.iter().filter(|&&t| t != pad_id).count();
        if cnt == 0 {
            let needs = self.needs(student);
            let op = Op::Loss { x: student, grad_unit: vec![0.0; m * v] };
            return self.push(op, vec![1], vec![0.0], needs, "distill_loss");
        }
        let s = &self.nodes[student.0].value;
        let inv_t = 1.0 / temp;
        let s_soft: Vec<f64> = s.iter().map(|x| x * inv_t).collect();
        let t_soft: Vec<f64> = teacher_logits.iter().map(|x| x * inv_t).collect();
        let lse_hard = kernels::log_sum_exp_rows(s, v);
        let lse_s = kernels::log_sum_exp_rows(&s_soft, v);
        let lse_t = kernels::log_sum_exp_rows(&t_soft, v);

        let inv = 1.0 / cnt as f64;
        let mut ce = 0.0;
        let mut kl = 0.0;
        let mut grad_unit = vec![0.0; m * v];
        for r in 0..m {
            let tgt = targets[r];
            if tgt == pad_id {
                continue;
            }
            if tgt >= v {
                return Err(shape_err("distill_loss", format!("target {tgt} of vocab {v}")));
            }
            ce += lse_hard[r] - s[r * v + tgt];
            for j in 0..v {
                let idx = r * v + j;
                let log_ps = s_soft[idx] - lse_s[r];
                let log_pt = t_soft[idx] - lse_t[r];
                let ps = log_ps.exp();
                let pt = log_pt.exp();
                kl += pt * (log_pt - log_ps);
                let p_hard = (s[idx] - lse_hard[r]).exp();
                let hard = alpha * (p_hard - if j == tgt { 1.0 } else { 0.0 });
                let soft = (1.0 - alpha) * temp * (ps - pt);
                grad_unit[idx] = (hard + soft) * inv;
            }
        }
        let loss = alpha * ce * inv + (1.0 - alpha) * temp * temp * kl * inv;
        let needs = self.needs(student);
        self.push(Op::Loss { x: student, grad_unit }, vec![1], vec![loss], needs, "distill_loss")
    }

    // ---- backward ----------------------------------------------------------

    fn accum_local(local: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, delta: &[f64]) {
        if !nodes[id.0].needs_grad {
            return;
        }
        let buf = local[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.len()]);
        for (b, d) in buf.iter_mut().zip(delta) {
            *b += d;
        }
    }

    /// Reverse sweep from a scalar root.
    ///
    /// Each sweep flows from a fresh unit seed through transient buffers and
    /// is folded into the persistent per-node gradients at the end, so two
    /// sweeps leave every gradient doubled rather than feeding back on
    /// themselves.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(shape_err(
                "backward",
                format!("root must be a scalar, got shape {:?}", self.nodes[root.0].shape),
            ));
        }
        if !self.nodes[root.0].needs_grad {
            return Err(Error::Contract(
                "backward: root does not depend on any gradient-tracked leaf".into(),
            ));
        }
        let mut local: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        local.resize_with(root.0 + 1, || None);
        local[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = local[i].take() else { continue };
            let nodes = &self.nodes;
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    Self::accum_local(&mut local, nodes, *a, &g);
                    Self::accum_local(&mut local, nodes, *b, &g);
                }
                Op::AddBias(x, bias) => {
                    Self::accum_local(&mut local, nodes, *x, &g);
                    if nodes[bias.0].needs_grad {
                        let n = nodes[bias.0].value.len();
                        let mut db = vec![0.0; n];
                        for (idx, gv) in g.iter().enumerate() {
                            db[idx % n] += gv;
                        }
                        Self::accum_local(&mut local, nodes, *bias, &db);
                    }
                }
                Op::Scale(x, c) => {
                    let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                    Self::accum_local(&mut local, nodes, *x, &dx);
                }
                Op::MulElem(a, b) => {
                    if nodes[a.0].needs_grad {
                        let da: Vec<f64> =
                            g.iter().zip(&nodes[b.0].value).map(|(gv, bv)| gv * bv).collect();
                        Self::accum_local(&mut local, nodes, *a, &da);
                    }
                    if nodes[b.0].needs_grad {
                        let db: Vec<f64> =
                            g.iter().zip(&nodes[a.0].value).map(|(gv, av)| gv * av).collect();
                        Self::accum_local(&mut local, nodes, *b, &db);
                    }
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let n = nodes[b.0].shape[1];
                    if nodes[a.0].needs_grad {
                        // dA = dC · Bᵀ
                        let da = kernels::matmul_nt(&g, &nodes[b.0].value, m, n, k);
                        Self::accum_local(&mut local, nodes, *a, &da);
                    }
                    if nodes[b.0].needs_grad {
                        // dB = Aᵀ · dC
                        let db = kernels::matmul_tn(&nodes[a.0].value, &g, k, m, n);
                        Self::accum_local(&mut local, nodes, *b, &db);
                    }
                }
                Op::Transpose(x) => {
                    let (n, m) = (nodes[i].shape[0], nodes[i].shape[1]);
                    let dx = kernels::transpose(&g, n, m);
                    Self::accum_local(&mut local, nodes, *x, &dx);
                }
                Op::SliceRows { x, start } => {
                    let n = nodes[x.0].shape[1];
                    let mut dx = vec![0.0; nodes[x.0].value.len()];
                    dx[start * n..start * n + g.len()].copy_from_slice(&g);
                    Self::accum_local(&mut local, nodes, *x, &dx);
                }
                Op::SliceCols { x, start } => {
                    let (m, n) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                    let w = nodes[i].shape[1];
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        dx[r * n + start..r * n + start + w]
                            .copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    Self::accum_local(&mut local, nodes, *x, &dx);
                }
                Op::ConcatCols(parts) => {
                    let m = nodes[i].shape[0];
                    let total = nodes[i].shape[1];
                    let mut offset = 0;
                    for &p in parts {
                        let n = nodes[p.0].shape[1];
                        if nodes[p.0].needs_grad {
                            let mut dp = Vec::with_capacity(m * n);
                            for r in 0..m {
                                dp.extend_from_slice(
                                    &g[r * total + offset..r * total + offset + n],
                                );
                            }
                            Self::accum_local(&mut local, nodes, p, &dp);
                        }
                        offset += n;
                    }
                }
                Op::Softmax { x, axis } => {
                    let dx = kernels::softmax_backward(&nodes[i].value, &g, &nodes[i].shape, *axis);
                    Self::accum_local(&mut local, nodes, *x, &dx);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let d = nodes[x.0].shape[1];
                    let (dx, dgain, dbias) = kernels::layer_norm_backward(
                        &nodes[x.0].value,
                        &nodes[gain.0].value,
                        &g,
                        d,
                    );
                    Self::accum_local(&mut local, nodes, *x, &dx);
                    Self::accum_local(&mut local, nodes, *gain, &dgain);
                    Self::accum_local(&mut local, nodes, *bias, &dbias);
                }
                Op::Gelu(x) => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&nodes[x.0].value)
                        .map(|(gv, &xv)| gv * kernels::gelu_dx(xv))
                        .collect();
                    Self::accum_local(&mut local, nodes, *x, &dx);
                }
                Op::Gather { table, ids } => {
                    let d = nodes[table.0].shape[1];
                    let mut dt = vec![0.0; nodes[table.0].value.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[r * d + j];
                        }
                    }
                    Self::accum_local(&mut local, nodes, *table, &dt);
                }
                Op::Loss { x, grad_unit } => {
                    let scale = g[0];
                    let dx: Vec<f64> = grad_unit.iter().map(|v| v * scale).collect();
                    Self::accum_local(&mut local, nodes, *x, &dx);
                }
            }
            let node = &mut self.nodes[i];
            let pg = node.grad.get_or_insert_with(|| vec![0.0; node.value.len()]);
            for (p, v) in pg.iter_mut().zip(&g) {
                *p += v;
            }
        }
        Ok(())
    }
}
