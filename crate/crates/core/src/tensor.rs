//! Dense f64 tensors with a linear tape for reverse-mode gradients.
//!
//! The tape owns every tensor produced during a forward pass. Operations
//! record enough to replay the chain rule in reverse order of recording.
//! There is no broadcasting: shape mismatches are errors, never truncation.

use crate::error::{Error, Result};
use crate::rng::ToolkitRng;

/// One value on the tape. `grad` is populated by [`Tape::backward`].
#[derive(Debug, Clone)]
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

/// Handle to a tensor owned by a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorRef, b: TensorRef },
    /// y = a · bᵀ with a: m×k, b: n×k.
    MatMulNt { a: TensorRef, b: TensorRef },
    Add { a: TensorRef, b: TensorRef },
    Mul { a: TensorRef, b: TensorRef },
    Scale { a: TensorRef, c: f64 },
    Silu { a: TensorRef },
    RmsNorm { x: TensorRef, gain: TensorRef, eps: f64 },
    SoftmaxRows { a: TensorRef },
    GatherRows { table: TensorRef, ids: Vec<usize> },
    SliceCols { a: TensorRef, start: usize, len: usize },
    ConcatCols { parts: Vec<TensorRef> },
    Sum { a: TensorRef },
    CrossEntropy {
        logits: TensorRef,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
}

/// Linear record of operations; single-owner, replayed once in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

fn matmul_raw(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn matmul_nt_raw(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn data(&self, r: TensorRef) -> &[f64] {
        &self.nodes[r.0].data
    }

    pub fn shape(&self, r: TensorRef) -> &[usize] {
        &self.nodes[r.0].shape
    }

    pub fn grad(&self, r: TensorRef) -> Option<&[f64]> {
        self.nodes[r.0].grad.as_deref()
    }

    pub fn scalar_value(&self, r: TensorRef) -> f64 {
        self.nodes[r.0].data[0]
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> TensorRef {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(
            Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            Op::Leaf,
        )
    }

    pub fn scalar_leaf(&mut self, v: f64) -> TensorRef {
        self.leaf(vec![v], vec![1], false)
    }

    fn push(&mut self, t: Tensor, op: Op) -> TensorRef {
        self.nodes.push(t);
        self.ops.push(op);
        TensorRef(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, t: Tensor, op: Op, name: &'static str) -> Result<TensorRef> {
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        Ok(self.push(t, op))
    }

    fn requires(&self, refs: &[TensorRef]) -> bool {
        refs.iter().any(|r| self.nodes[r.0].requires_grad)
    }

    fn out(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, name: &'static str, inputs: &[TensorRef]) -> Result<TensorRef> {
        let rg = self.requires(inputs);
        self.push_checked(
            Tensor {
                shape,
                data,
                requires_grad: rg,
                grad: None,
            },
            op,
            name,
        )
    }

    /// Standard matrix product a[m×k] · b[k×n].
    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (m, k) = rows_cols(self.shape(a));
        let (k2, n) = rows_cols(self.shape(b));
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data = matmul_raw(self.data(a), m, k, self.data(b), n);
        self.out(data, vec![m, n], Op::MatMul { a, b }, "matmul", &[a, b])
    }

    /// a[m×k] · b[n×k]ᵀ — the linear-layer and attention-score primitive.
    pub fn matmul_nt(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (m, k) = rows_cols(self.shape(a));
        let (n, k2) = rows_cols(self.shape(b));
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data = matmul_nt_raw(self.data(a), m, k, self.data(b), n);
        self.out(data, vec![m, n], Op::MatMulNt { a, b }, "matmul_nt", &[a, b])
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.out(data, shape, Op::Add { a, b }, "add", &[a, b])
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.out(data, shape, Op::Mul { a, b }, "mul", &[a, b])
    }

    pub fn scale(&mut self, a: TensorRef, c: f64) -> Result<TensorRef> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.out(data, shape, Op::Scale { a, c }, "scale", &[a])
    }

    /// Elementwise x · sigmoid(x).
    pub fn silu(&mut self, a: TensorRef) -> Result<TensorRef> {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x * sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.out(data, shape, Op::Silu { a }, "silu", &[a])
    }

    /// Row-wise RMS normalization with a learned gain: x / sqrt(mean(x²)+eps) ⊙ gain.
    pub fn rmsnorm(&mut self, x: TensorRef, gain: TensorRef, eps: f64) -> Result<TensorRef> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("rmsnorm eps must be > 0, got {eps}")));
        }
        let (t, d) = rows_cols(self.shape(x));
        let (gr, gd) = rows_cols(self.shape(gain));
        if gr != 1 || gd != d {
            return Err(Error::ShapeMismatch {
                op: "rmsnorm",
                left: self.shape(x).to_vec(),
                right: self.shape(gain).to_vec(),
            });
        }
        let mut data = vec![0.0; t * d];
        for r in 0..t {
            let row = &self.data(x)[r * d..(r + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            let g = self.data(gain);
            for j in 0..d {
                data[r * d + j] = row[j] * inv * g[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.out(data, shape, Op::RmsNorm { x, gain, eps }, "rmsnorm", &[x, gain])
    }

    /// Row-stable softmax; every output row sums to 1.
    pub fn softmax_rows(&mut self, a: TensorRef) -> Result<TensorRef> {
        let (r, c) = rows_cols(self.shape(a));
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.data(a)[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                data[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                data[i * c + j] /= z;
            }
        }
        let shape = self.shape(a).to_vec();
        self.out(data, shape, Op::SoftmaxRows { a }, "softmax_rows", &[a])
    }

    /// Row lookup with scatter-add gradient; used for token/position embeddings.
    pub fn gather_rows(&mut self, table: TensorRef, ids: &[usize]) -> Result<TensorRef> {
        let (v, d) = rows_cols(self.shape(table));
        for &id in ids {
            if id >= v {
                return Err(Error::IndexOutOfBounds(format!(
                    "gather_rows id {id} >= table rows {v}"
                )));
            }
        }
        let mut data = vec![0.0; ids.len() * d];
        for (p, &id) in ids.iter().enumerate() {
            data[p * d..(p + 1) * d].copy_from_slice(&self.data(table)[id * d..(id + 1) * d]);
        }
        let n = ids.len();
        self.out(
            data,
            vec![n, d],
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            "gather_rows",
            &[table],
        )
    }

    pub fn slice_cols(&mut self, a: TensorRef, start: usize, len: usize) -> Result<TensorRef> {
        let (r, c) = rows_cols(self.shape(a));
        if start + len > c {
            return Err(Error::IndexOutOfBounds(format!(
                "slice_cols {start}..{} of {c} columns",
                start + len
            )));
        }
        let mut data = vec![0.0; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&self.data(a)[i * c + start..i * c + start + len]);
        }
        self.out(
            data,
            vec![r, len],
            Op::SliceCols { a, start, len },
            "slice_cols",
            &[a],
        )
    }

    pub fn concat_cols(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let (r, _) = rows_cols(self.shape(parts[0]));
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = rows_cols(self.shape(p));
            if pr != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
            total += pc;
        }
        let mut data = vec![0.0; r * total];
        for i in 0..r {
            let mut off = 0;
            for (pi, &p) in parts.iter().enumerate() {
                let w = widths[pi];
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&self.data(p)[i * w..(i + 1) * w]);
                off += w;
            }
        }
        self.out(
            data,
            vec![r, total],
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            "concat_cols",
            parts,
        )
    }

    pub fn sum(&mut self, a: TensorRef) -> Result<TensorRef> {
        let s: f64 = self.data(a).iter().sum();
        self.out(vec![s], vec![1], Op::Sum { a }, "sum", &[a])
    }

    /// Mean negative log-softmax probability over unmasked positions.
    ///
    /// `targets[p]` is the token predicted from logits row `p`; rows where
    /// `mask[p]` is false do not contribute.
    pub fn cross_entropy(
        &mut self,
        logits: TensorRef,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<TensorRef> {
        let (t, v) = rows_cols(self.shape(logits));
        if targets.len() != t || mask.len() != t {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: vec![t, v],
                right: vec![targets.len(), mask.len()],
            });
        }
        let n_active = mask.iter().filter(|&&m| m).count();
        if n_active == 0 {
            return Err(Error::Contract(
                "cross_entropy: all positions masked".into(),
            ));
        }
        let mut loss = 0.0;
        for p in 0..t {
            if !mask[p] {
                continue;
            }
            if targets[p] >= v {
                return Err(Error::IndexOutOfBounds(format!(
                    "cross_entropy target {} >= vocab {v}",
                    targets[p]
                )));
            }
            let row = &self.data(logits)[p * v..(p + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            loss += lse - row[targets[p]];
        }
        loss /= n_active as f64;
        self.out(
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            "cross_entropy",
            &[logits],
        )
    }

    fn grad_buf(&mut self, r: TensorRef) -> &mut Vec<f64> {
        let n = self.nodes[r.0].data.len();
        self.nodes[r.0].grad.get_or_insert_with(|| vec![0.0; n])
    }

    /// Reverse pass from a scalar loss. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let n = self.nodes.len();
        // Upstream gradients for this pass, separate from the persistent
        // accumulators so repeated backward calls add up correctly.
        let mut up: Vec<Option<Vec<f64>>> = vec![None; n];
        up[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let g = match up[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if self.nodes[idx].requires_grad {
                let acc = self.grad_buf(TensorRef(idx));
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let op = self.ops[idx].clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = rows_cols(self.shape(a));
                    let (_, nn) = rows_cols(self.shape(b));
                    if self.needs(a) {
                        // dA = G · Bᵀ
                        let da = matmul_nt_raw(&g, m, nn, self.data(b), k);
                        add_into(&mut up, a, da);
                    }
                    if self.needs(b) {
                        // dB = Aᵀ · G : compute as (k×m)·(m×n) via loops
                        let mut db = vec![0.0; k * nn];
                        let ad = self.data(a);
                        for i in 0..m {
                            for p in 0..k {
                                let av = ad[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..nn {
                                    db[p * nn + j] += av * g[i * nn + j];
                                }
                            }
                        }
                        add_into(&mut up, b, db);
                    }
                }
                Op::MatMulNt { a, b } => {
                    let (m, k) = rows_cols(self.shape(a));
                    let (nn, _) = rows_cols(self.shape(b));
                    if self.needs(a) {
                        // dA = G · B
                        let da = matmul_raw(&g, m, nn, self.data(b), k);
                        add_into(&mut up, a, da);
                    }
                    if self.needs(b) {
                        // dB = Gᵀ · A
                        let mut db = vec![0.0; nn * k];
                        let ad = self.data(a);
                        for i in 0..m {
                            for j in 0..nn {
                                let gv = g[i * nn + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    db[j * k + p] += gv * ad[i * k + p];
                                }
                            }
                        }
                        add_into(&mut up, b, db);
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(a) {
                        add_into(&mut up, a, g.clone());
                    }
                    if self.needs(b) {
                        add_into(&mut up, b, g);
                    }
                }
                Op::Mul { a, b } => {
                    if self.needs(a) {
                        let da: Vec<f64> = g.iter().zip(self.data(b)).map(|(g, b)| g * b).collect();
                        add_into(&mut up, a, da);
                    }
                    if self.needs(b) {
                        let db: Vec<f64> = g.iter().zip(self.data(a)).map(|(g, a)| g * a).collect();
                        add_into(&mut up, b, db);
                    }
                }
                Op::Scale { a, c } => {
                    if self.needs(a) {
                        add_into(&mut up, a, g.iter().map(|x| x * c).collect());
                    }
                }
                Op::Silu { a } => {
                    if self.needs(a) {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(self.data(a))
                            .map(|(g, &x)| {
                                let s = sigmoid(x);
                                g * (s * (1.0 + x * (1.0 - s)))
                            })
                            .collect();
                        add_into(&mut up, a, da);
                    }
                }
                Op::RmsNorm { x, gain, eps } => {
                    let (t, d) = rows_cols(self.shape(x));
                    let need_x = self.needs(x);
                    let need_g = self.needs(gain);
                    let mut dx = vec![0.0; t * d];
                    let mut dg = vec![0.0; d];
                    {
                        let xd = self.data(x);
                        let gd = self.data(gain);
                        for r in 0..t {
                            let row = &xd[r * d..(r + 1) * d];
                            let gr = &g[r * d..(r + 1) * d];
                            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                            let inv = 1.0 / (ms + eps).sqrt();
                            let dot: f64 =
                                (0..d).map(|j| gr[j] * gd[j] * row[j]).sum();
                            for j in 0..d {
                                if need_x {
                                    dx[r * d + j] = gr[j] * gd[j] * inv
                                        - row[j] * dot * inv * inv * inv / d as f64;
                                }
                                if need_g {
                                    dg[j] += gr[j] * row[j] * inv;
                                }
                            }
                        }
                    }
                    if need_x {
                        add_into(&mut up, x, dx);
                    }
                    if need_g {
                        add_into(&mut up, gain, dg);
                    }
                }
                Op::SoftmaxRows { a } => {
                    if self.needs(a) {
                        let (r, c) = rows_cols(self.shape(a));
                        let y = &self.nodes[idx].data;
                        let mut da = vec![0.0; r * c];
                        for i in 0..r {
                            let yr = &y[i * c..(i + 1) * c];
                            let gr = &g[i * c..(i + 1) * c];
                            let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                            for j in 0..c {
                                da[i * c + j] = yr[j] * (gr[j] - dot);
                            }
                        }
                        add_into(&mut up, a, da);
                    }
                }
                Op::GatherRows { table, ids } => {
                    if self.needs(table) {
                        let (_, d) = rows_cols(self.shape(table));
                        let mut dt = vec![0.0; self.nodes[table.0].data.len()];
                        for (p, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                dt[id * d + j] += g[p * d + j];
                            }
                        }
                        add_into(&mut up, table, dt);
                    }
                }
                Op::SliceCols { a, start, len } => {
                    if self.needs(a) {
                        let (r, c) = rows_cols(self.shape(a));
                        let mut da = vec![0.0; r * c];
                        for i in 0..r {
                            for j in 0..len {
                                da[i * c + start + j] = g[i * len + j];
                            }
                        }
                        add_into(&mut up, a, da);
                    }
                }
                Op::ConcatCols { parts } => {
                    let (r, total) = rows_cols(&self.nodes[idx].shape);
                    let mut off = 0;
                    for &p in &parts {
                        let (_, w) = rows_cols(self.shape(p));
                        if self.needs(p) {
                            let mut dp = vec![0.0; r * w];
                            for i in 0..r {
                                dp[i * w..(i + 1) * w]
                                    .copy_from_slice(&g[i * total + off..i * total + off + w]);
                            }
                            add_into(&mut up, p, dp);
                        }
                        off += w;
                    }
                }
                Op::Sum { a } => {
                    if self.needs(a) {
                        add_into(&mut up, a, vec![g[0]; self.nodes[a.0].data.len()]);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                } => {
                    if self.needs(logits) {
                        let (t, v) = rows_cols(self.shape(logits));
                        let n_active = mask.iter().filter(|&&m| m).count() as f64;
                        let mut dl = vec![0.0; t * v];
                        let ld = self.data(logits);
                        for p in 0..t {
                            if !mask[p] {
                                continue;
                            }
                            let row = &ld[p * v..(p + 1) * v];
                            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
                            for j in 0..v {
                                let sm = (row[j] - mx).exp() / z;
                                let onehot = if j == targets[p] { 1.0 } else { 0.0 };
                                dl[p * v + j] = g[0] * (sm - onehot) / n_active;
                            }
                        }
                        add_into(&mut up, logits, dl);
                    }
                }
            }
        }
        Ok(())
    }

    /// Whether gradient needs to flow into this node (it or an ancestor is a
    /// trainable leaf).
    fn needs(&self, r: TensorRef) -> bool {
        self.nodes[r.0].requires_grad
    }
}

fn add_into(up: &mut [Option<Vec<f64>>], r: TensorRef, contrib: Vec<f64>) {
    match &mut up[r.0] {
        Some(buf) => {
            for (a, b) in buf.iter_mut().zip(&contrib) {
                *a += b;
            }
        }
        slot => *slot = Some(contrib),
    }
}

/// Compare analytic gradients against central differences.
///
/// `build` reconstructs the scalar loss from leaf tensors; the numeric side
/// re-evaluates the same closure with perturbed inputs, so it never touches
/// the analytic path. At most `max_per_tensor` coordinates per tensor are
/// sampled (seeded). Returns the max relative error over sampled coords.
pub fn grad_check<F>(
    build: F,
    init: &[(Vec<f64>, Vec<usize>)],
    h: f64,
    max_per_tensor: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorRef]) -> Result<TensorRef>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("grad_check h must be > 0, got {h}")));
    }
    // Analytic gradients.
    let mut tape = Tape::new();
    let refs: Vec<TensorRef> = init
        .iter()
        .map(|(d, s)| tape.leaf(d.clone(), s.clone(), true))
        .collect();
    let loss = build(&mut tape, &refs)?;
    if !tape.scalar_value(loss).is_finite() {
        return Err(Error::NonFinite("grad_check"));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = refs
        .iter()
        .map(|&r| tape.grad(r).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let eval = |params: &[(Vec<f64>, Vec<usize>)]| -> Result<f64> {
        let mut t = Tape::new();
        let rs: Vec<TensorRef> = params
            .iter()
            .map(|(d, s)| t.leaf(d.clone(), s.clone(), false))
            .collect();
        let l = build(&mut t, &rs)?;
        let v = t.scalar_value(l);
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check"));
        }
        Ok(v)
    };

    let mut rng = ToolkitRng::for_stage(seed, "grad_check");
    let mut work: Vec<(Vec<f64>, Vec<usize>)> = init.to_vec();
    let mut max_err: f64 = 0.0;
    for (ti, (data, _)) in init.iter().enumerate() {
        let n = data.len();
        let coords: Vec<usize> = if n <= max_per_tensor {
            (0..n).collect()
        } else {
            (0..max_per_tensor).map(|_| rng.uniform_usize(n)).collect()
        };
        for c in coords {
            let orig = work[ti].0[c];
            work[ti].0[c] = orig + h;
            let fp = eval(&work)?;
            work[ti].0[c] = orig - h;
            let fm = eval(&work)?;
            work[ti].0[c] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti].get(c).copied().unwrap_or(0.0);
            let denom = (a.abs() + numeric.abs()).max(1e-8);
            max_err = max_err.max((a - numeric).abs() / denom);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i2 = t.leaf(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2], false);
        let v = t.leaf(vec![5.0, 6.0], vec![2, 1], false);
        let y = t.matmul(i2, v).unwrap();
        assert_eq!(t.data(y), &[5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], false);
        let b = t.leaf(vec![5.0, 6.0], vec![2, 1], false);
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.data(y), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error() {
        let mut t = Tape::new();
        let a = t.leaf(vec![0.0; 6], vec![2, 3], false);
        let b = t.leaf(vec![0.0; 6], vec![2, 3], false);
        let err = t.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn silu_values() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0, 1.0, 50.0], vec![3], false);
        let y = t.silu(x).unwrap();
        close(t.data(y)[0], 0.0, 1e-15);
        close(t.data(y)[1], 0.731_058_578_630_004_9, 1e-12);
        close(t.data(y)[2], 50.0, 1e-9);
    }

    #[test]
    fn rmsnorm_unit_identity_and_zero() {
        let mut t = Tape::new();
        let ones = t.leaf(vec![1.0; 4], vec![4], false);
        let gain = t.leaf(vec![1.0; 4], vec![4], false);
        let y = t.rmsnorm(ones, gain, 1e-15).unwrap();
        for v in t.data(y) {
            close(*v, 1.0, 1e-7);
        }
        let zeros = t.leaf(vec![0.0; 4], vec![4], false);
        let y0 = t.rmsnorm(zeros, gain, 1e-6).unwrap();
        assert_eq!(t.data(y0), &[0.0; 4]);
    }

    #[test]
    fn rmsnorm_hand_case() {
        // (3,4): mean square 12.5
        let mut t = Tape::new();
        let x = t.leaf(vec![3.0, 4.0], vec![2], false);
        let gain = t.leaf(vec![1.0, 1.0], vec![2], false);
        let y = t.rmsnorm(x, gain, 1e-300).unwrap();
        close(t.data(y)[0], 3.0 / 12.5f64.sqrt(), 1e-12);
        close(t.data(y)[1], 4.0 / 12.5f64.sqrt(), 1e-12);
    }

    #[test]
    fn softmax_rows_cases() {
        let mut t = Tape::new();
        let m = t.leaf(vec![2.0, 2.0, 2.0, 0.0, 3f64.ln(), -1000.0], vec![2, 3], false);
        let y = t.softmax_rows(m).unwrap();
        let d = t.data(y);
        for j in 0..3 {
            close(d[j], 1.0 / 3.0, 1e-12);
        }
        close(d[3], 0.25, 1e-12);
        close(d[4], 0.75, 1e-12);
        close(d[5], 0.0, 1e-12);
        // Row sums.
        close(d[0] + d[1] + d[2], 1.0, 1e-12);
        close(d[3] + d[4] + d[5], 1.0, 1e-12);
        // Saturation.
        let m2 = t.leaf(vec![1000.0, 0.0], vec![1, 2], false);
        let y2 = t.softmax_rows(m2).unwrap();
        close(t.data(y2)[0], 1.0, 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_and_mask() {
        let mut t = Tape::new();
        let logits = t.leaf(vec![0.0; 4], vec![1, 4], false);
        let l = t.cross_entropy(logits, &[2], &[true]).unwrap();
        close(t.scalar_value(l), 4f64.ln(), 1e-12);

        // One masked position: loss equals the single-position loss.
        let two = t.leaf(vec![0.5, -0.25, 1.0, 2.0, 9.0, 9.0, 9.0, 9.0], vec![2, 4], false);
        let l2 = t.cross_entropy(two, &[3, 0], &[true, false]).unwrap();
        let one = t.leaf(vec![0.5, -0.25, 1.0, 2.0], vec![1, 4], false);
        let l1 = t.cross_entropy(one, &[3], &[true]).unwrap();
        close(t.scalar_value(l2), t.scalar_value(l1), 1e-12);

        // Saturated logits give near-zero loss.
        let sat = t.leaf(vec![0.0, 500.0, 0.0, 0.0], vec![1, 4], false);
        let ls = t.cross_entropy(sat, &[1], &[true]).unwrap();
        close(t.scalar_value(ls), 0.0, 1e-12);
    }

    #[test]
    fn cross_entropy_errors() {
        let mut t = Tape::new();
        let logits = t.leaf(vec![0.0; 4], vec![1, 4], false);
        assert!(t.cross_entropy(logits, &[4], &[true]).is_err());
        assert!(t.cross_entropy(logits, &[0], &[false]).is_err());
    }

    #[test]
    fn backward_sum_and_square() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0], vec![3], true);
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0], vec![3], true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn backward_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true);
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_linearity() {
        // grad of (2f + 3g) == 2·grad(f) + 3·grad(g)
        let x0 = vec![0.3, -1.2, 0.7, 2.1];
        let grads = |alpha: f64, beta: f64| -> Vec<f64> {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone(), vec![4], true);
            let f = t.mul(x, x).unwrap();
            let f = t.sum(f).unwrap();
            let f = t.scale(f, alpha).unwrap();
            let g = t.silu(x).unwrap();
            let g = t.sum(g).unwrap();
            let g = t.scale(g, beta).unwrap();
            let total = t.add(f, g).unwrap();
            t.backward(total).unwrap();
            t.grad(x).unwrap().to_vec()
        };
        let gf = grads(1.0, 0.0);
        let gg = grads(0.0, 1.0);
        let gc = grads(2.0, 3.0);
        for i in 0..4 {
            close(gc[i], 2.0 * gf[i] + 3.0 * gg[i], 1e-10);
        }
    }

    #[test]
    fn grad_check_square() {
        let err = grad_check(
            |t, refs| {
                let sq = t.mul(refs[0], refs[0])?;
                t.sum(sq)
            },
            &[(vec![3.0], vec![1])],
            1e-5,
            64,
            0,
        )
        .unwrap();
        assert!(err <= 1e-7, "err = {err}");
    }

    #[test]
    fn grad_check_constant() {
        let err = grad_check(
            |t, refs| {
                let zero = t.scale(refs[0], 0.0)?;
                t.sum(zero)
            },
            &[(vec![1.0, 2.0], vec![2])],
            1e-5,
            64,
            0,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_all_primitives() {
        // A composite touching every differentiable op on the tape.
        let mut rng = ToolkitRng::new(42);
        let a = rng.normal_vec(12, 1.0);
        let b = rng.normal_vec(12, 1.0);
        let gain = rng.normal_vec(3, 1.0);
        let err = grad_check(
            |t, refs| {
                let (a, b, gain) = (refs[0], refs[1], refs[2]);
                let m = t.matmul(a, b)?; // 3x4 · 4x3 -> 3x3
                let mt = t.matmul_nt(a, a)?; // 3x3
                let s = t.add(m, mt)?;
                let s = t.silu(s)?;
                let sm = t.softmax_rows(s)?;
                let s = t.mul(s, sm)?;
                let s = t.scale(s, 0.7)?;
                let left = t.slice_cols(s, 0, 2)?;
                let right = t.slice_cols(s, 2, 1)?;
                let cat = t.concat_cols(&[left, right])?;
                let g = t.gather_rows(cat, &[0, 2, 1])?;
                let normed = t.rmsnorm(b, gain, 1e-6)?;
                let part = t.sum(normed)?;
                let ce = t.cross_entropy(g, &[0, 2, 1], &[true, true, false])?;
                let s2 = t.sum(g)?;
                let tot = t.add(part, ce)?;
                t.add(tot, s2)
            },
            &[
                (a, vec![3, 4]),
                (b, vec![4, 3]),
                (gain, vec![3]),
            ],
            1e-5,
            64,
            1,
        )
        .unwrap();
        assert!(err <= 1e-6, "err = {err}");
    }
}
