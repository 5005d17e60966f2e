//! Reverse-mode autodiff over a per-step computation tape.
//!
//! A [`Graph`] records primitive operations during forward evaluation and
//! replays them in reverse to accumulate exact gradients. The tape is rebuilt
//! every training step; values are plain `f64` buffers indexed by [`Var`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Slot {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Vec<f64>,
    requires_grad: bool,
    is_leaf: bool,
}

enum Node {
    /// out = x @ w (+ b broadcast over rows)
    Linear { x: Var, w: Var, b: Option<Var>, out: Var, n: usize, din: usize, dout: usize },
    Tanh { x: Var, out: Var },
    /// Rows scaled to unit Euclidean norm; `norms[i]` saved from the forward pass.
    L2NormalizeRows { x: Var, out: Var, n: usize, d: usize, norms: Vec<f64> },
    SoftmaxRows { x: Var, out: Var, n: usize, c: usize },
    /// Mean over rows of w_i * (-log softmax(logits_i)[label_i]); probs saved.
    CrossEntropy { logits: Var, out: Var, labels: Vec<usize>, weights: Vec<f64>, n: usize, c: usize, probs: Vec<f64> },
    /// Identity forward; backward multiplies the upstream gradient by -coeff.
    GradReverse { x: Var, out: Var, coeff: f64 },
    Scale { x: Var, out: Var, k: f64 },
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    SumAll { x: Var, out: Var },
    /// out_i = dot(a_i, b_i) over rows of two n x d operands.
    RowwiseDot { a: Var, b: Var, out: Var, n: usize, d: usize },
    /// out = [col | mat], an n x (m+1) matrix.
    PrependCol { col: Var, mat: Var, out: Var, n: usize, m: usize },
    /// Per-row log-sum-exp over entries whose mask bit is set.
    MaskedRowLse { x: Var, out: Var, mask: Vec<bool>, n: usize, m: usize },
    /// -(1/n) * sum over all entries of p*ln(p), with 0*ln(0) := 0.
    EntropyRowsMean { p: Var, out: Var, n: usize },
}

/// Dynamic computation tape for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    slots: Vec<Slot>,
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push_slot(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Var {
        let n = data.len();
        self.slots.push(Slot { data, shape, grad: vec![0.0; n], requires_grad, is_leaf: false });
        Var(self.slots.len() - 1)
    }

    /// Registers an external tensor as a leaf; gradient flows back iff it requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let v = self.push_slot(t.data().to_vec(), t.shape().to_vec(), t.requires_grad());
        self.slots[v.0].is_leaf = true;
        v
    }

    /// Registers a no-gradient constant from raw parts.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "constant shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        let v = self.push_slot(data, shape, false);
        self.slots[v.0].is_leaf = true;
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.slots[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.slots[v.0].shape
    }

    /// Scalar value of a one-element var.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.slots[v.0].data.len(), 1);
        self.slots[v.0].data[0]
    }

    /// Accumulated gradient of `v` (zeros until `backward` has run).
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.slots[v.0].grad
    }

    pub fn clear_grads(&mut self) {
        for s in &mut self.slots {
            s.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("{what}: expected a 2-d operand, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.slots[v.0].requires_grad)
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// Row-wise affine map: `x[n x din] @ w[din x dout] + b[dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.dims2(x, "linear x")?;
        let (wr, dout) = self.dims2(w, "linear w")?;
        if wr != din {
            return Err(Error::Dimension(format!(
                "linear: x is {n}x{din} but w is {wr}x{dout}"
            )));
        }
        if let Some(bv) = b {
            let bs = self.shape(bv);
            if bs != [dout] {
                return Err(Error::Dimension(format!(
                    "linear: bias shape {bs:?} does not match output width {dout}"
                )));
            }
        }
        let mut out = vec![0.0; n * dout];
        {
            let xd = &self.slots[x.0].data;
            let wd = &self.slots[w.0].data;
            for i in 0..n {
                let xrow = &xd[i * din..(i + 1) * din];
                let orow = &mut out[i * dout..(i + 1) * dout];
                for (kk, &xv) in xrow.iter().enumerate() {
                    let wrow = &wd[kk * dout..(kk + 1) * dout];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
                if let Some(bv) = b {
                    for (o, &bvv) in orow.iter_mut().zip(&self.slots[bv.0].data) {
                        *o += bvv;
                    }
                }
            }
        }
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|bv| self.slots[bv.0].requires_grad);
        let out = self.push_slot(out, vec![n, dout], rg);
        self.nodes.push(Node::Linear { x, w, b, out, n, din, dout });
        Ok(out)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.slots[x.0].data.iter().map(|v| v.tanh()).collect();
        let shape = self.slots[x.0].shape.clone();
        let rg = self.slots[x.0].requires_grad;
        let out = self.push_slot(data, shape, rg);
        self.nodes.push(Node::Tanh { x, out });
        out
    }

    /// Scales every row of `x[n x d]` to unit Euclidean norm.
    ///
    /// A row with norm below 1e-12 is a hard error: silently fudging the norm
    /// would mask encoder collapse.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims2(x, "l2_normalize_rows")?;
        let mut out = vec![0.0; n * d];
        let mut norms = vec![0.0; n];
        for i in 0..n {
            let row = &self.slots[x.0].data[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::DegenerateInput(format!(
                    "l2_normalize_rows: row {i} has norm {norm:.3e} < 1e-12"
                )));
            }
            norms[i] = norm;
            for (o, &v) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let rg = self.slots[x.0].requires_grad;
        let out = self.push_slot(out, vec![n, d], rg);
        self.nodes.push(Node::L2NormalizeRows { x, out, n, d, norms });
        Ok(out)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.dims2(x, "softmax_rows")?;
        if self.slots[x.0].data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax_rows: non-finite input".into()));
        }
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &self.slots[x.0].data[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for (o, &z) in orow.iter_mut().zip(row) {
                *o = (z - max).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let rg = self.slots[x.0].requires_grad;
        let out = self.push_slot(out, vec![n, c], rg);
        self.nodes.push(Node::SoftmaxRows { x, out, n, c });
        Ok(out)
    }

    /// Weighted mean cross-entropy over rows of `logits[n x c]`.
    ///
    /// Returns `(1/n) * sum_i w_i * (-log softmax(logits_i)[label_i])`,
    /// computed through log-sum-exp. Weights default to 1.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: Option<&[f64]>) -> Result<Var> {
        let (n, c) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} labels for {} rows",
                labels.len(),
                n
            )));
        }
        if n == 0 {
            return Err(Error::Dimension("cross_entropy: empty batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("cross_entropy: label {bad} out of range for {c} classes")));
        }
        let weights: Vec<f64> = match weights {
            Some(w) => {
                if w.len() != n {
                    return Err(Error::Dimension(format!(
                        "cross_entropy: {} weights for {} rows",
                        w.len(),
                        n
                    )));
                }
                if let Some(bad) = w.iter().find(|v| **v < 0.0 || !v.is_finite()) {
                    return Err(Error::Contract(format!("cross_entropy: invalid weight {bad}")));
                }
                w.to_vec()
            }
            None => vec![1.0; n],
        };
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for i in 0..n {
            let row = &self.slots[logits.0].data[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let prow = &mut probs[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for (p, &z) in prow.iter_mut().zip(row) {
                *p = (z - max).exp();
                sum += *p;
            }
            for p in prow.iter_mut() {
                *p /= sum;
            }
            let lse = max + sum.ln();
            total += weights[i] * (lse - row[labels[i]]);
        }
        let value = total / n as f64;
        let rg = self.slots[logits.0].requires_grad;
        let out = self.push_slot(vec![value], vec![], rg);
        self.nodes.push(Node::CrossEntropy {
            logits,
            out,
            labels: labels.to_vec(),
            weights,
            n,
            c,
            probs,
        });
        Ok(out)
    }

    /// Identity forward; backward multiplies the upstream gradient by `-coeff`.
    pub fn grad_reverse(&mut self, x: Var, coeff: f64) -> Result<Var> {
        if !(coeff > 0.0) {
            return Err(Error::Contract(format!("grad_reverse: coeff must be positive, got {coeff}")));
        }
        let data = self.slots[x.0].data.clone();
        let shape = self.slots[x.0].shape.clone();
        let rg = self.slots[x.0].requires_grad;
        let out = self.push_slot(data, shape, rg);
        self.nodes.push(Node::GradReverse { x, out, coeff });
        Ok(out)
    }

    /// Multiplies every entry by the constant `k`.
    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let data: Vec<f64> = self.slots[x.0].data.iter().map(|v| v * k).collect();
        let shape = self.slots[x.0].shape.clone();
        let rg = self.slots[x.0].requires_grad;
        let out = self.push_slot(data, shape, rg);
        self.nodes.push(Node::Scale { x, out, k });
        out
    }

    fn elementwise(&mut self, a: Var, b: Var, name: &str) -> Result<(Vec<f64>, Vec<usize>, bool)> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{name}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok((
            Vec::with_capacity(self.slots[a.0].data.len()),
            self.slots[a.0].shape.clone(),
            self.any_grad(&[a, b]),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut data, shape, rg) = self.elementwise(a, b, "add")?;
        data.extend(
            self.slots[a.0]
                .data
                .iter()
                .zip(&self.slots[b.0].data)
                .map(|(x, y)| x + y),
        );
        let out = self.push_slot(data, shape, rg);
        self.nodes.push(Node::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut data, shape, rg) = self.elementwise(a, b, "sub")?;
        data.extend(
            self.slots[a.0]
                .data
                .iter()
                .zip(&self.slots[b.0].data)
                .map(|(x, y)| x - y),
        );
        let out = self.push_slot(data, shape, rg);
        self.nodes.push(Node::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut data, shape, rg) = self.elementwise(a, b, "mul")?;
        data.extend(
            self.slots[a.0]
                .data
                .iter()
                .zip(&self.slots[b.0].data)
                .map(|(x, y)| x * y),
        );
        let out = self.push_slot(data, shape, rg);
        self.nodes.push(Node::Mul { a, b, out });
        Ok(out)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let value: f64 = self.slots[x.0].data.iter().sum();
        let rg = self.slots[x.0].requires_grad;
        let out = self.push_slot(vec![value], vec![], rg);
        self.nodes.push(Node::SumAll { x, out });
        out
    }

    /// Per-row dot product of two `n x d` operands; returns an `[n]` vector.
    pub fn rowwise_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.dims2(a, "rowwise_dot a")?;
        let (nb, db) = self.dims2(b, "rowwise_dot b")?;
        if (n, d) != (nb, db) {
            return Err(Error::Dimension(format!(
                "rowwise_dot: shapes {n}x{d} and {nb}x{db} differ"
            )));
        }
        let mut data = vec![0.0; n];
        for i in 0..n {
            let ra = &self.slots[a.0].data[i * d..(i + 1) * d];
            let rb = &self.slots[b.0].data[i * d..(i + 1) * d];
            data[i] = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        }
        let rg = self.any_grad(&[a, b]);
        let out = self.push_slot(data, vec![n], rg);
        self.nodes.push(Node::RowwiseDot { a, b, out, n, d });
        Ok(out)
    }

    /// Builds `[col | mat]`: an `n x (m+1)` matrix with `col` as column 0.
    pub fn prepend_col(&mut self, col: Var, mat: Var) -> Result<Var> {
        let cs = self.shape(col).to_vec();
        let (n, m) = self.dims2(mat, "prepend_col mat")?;
        if cs != [n] {
            return Err(Error::Dimension(format!(
                "prepend_col: column shape {cs:?} does not match {n} rows"
            )));
        }
        let mut data = vec![0.0; n * (m + 1)];
        for i in 0..n {
            data[i * (m + 1)] = self.slots[col.0].data[i];
            data[i * (m + 1) + 1..(i + 1) * (m + 1)]
                .copy_from_slice(&self.slots[mat.0].data[i * m..(i + 1) * m]);
        }
        let rg = self.any_grad(&[col, mat]);
        let out = self.push_slot(data, vec![n, m + 1], rg);
        self.nodes.push(Node::PrependCol { col, mat, out, n, m });
        Ok(out)
    }

    /// Per-row log-sum-exp restricted to entries with a set mask bit.
    ///
    /// Every row must have at least one active entry.
    pub fn masked_row_lse(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (n, m) = self.dims2(x, "masked_row_lse")?;
        if mask.len() != n * m {
            return Err(Error::Dimension(format!(
                "masked_row_lse: mask length {} for {n}x{m} operand",
                mask.len()
            )));
        }
        let mut data = vec![0.0; n];
        for i in 0..n {
            let row = &self.slots[x.0].data[i * m..(i + 1) * m];
            let mrow = &mask[i * m..(i + 1) * m];
            let mut max = f64::NEG_INFINITY;
            for (v, &keep) in row.iter().zip(mrow) {
                if keep && *v > max {
                    max = *v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!(
                    "masked_row_lse: row {i} has no active entries"
                )));
            }
            let mut sum = 0.0;
            for (v, &keep) in row.iter().zip(mrow) {
                if keep {
                    sum += (v - max).exp();
                }
            }
            data[i] = max + sum.ln();
        }
        let rg = self.slots[x.0].requires_grad;
        let out = self.push_slot(data, vec![n], rg);
        self.nodes.push(Node::MaskedRowLse { x, out, mask: mask.to_vec(), n, m });
        Ok(out)
    }

    /// Mean Shannon entropy over rows of a probability matrix `p[n x c]`,
    /// with the convention `0 * ln(0) := 0`. Entries must be nonnegative.
    pub fn entropy_rows_mean(&mut self, p: Var) -> Result<Var> {
        let (n, _c) = self.dims2(p, "entropy_rows_mean")?;
        if n == 0 {
            return Err(Error::Dimension("entropy_rows_mean: empty batch".into()));
        }
        let mut total = 0.0;
        for &v in &self.slots[p.0].data {
            if v < 0.0 {
                return Err(Error::Contract(format!(
                    "entropy_rows_mean: negative probability {v}"
                )));
            }
            if v > 0.0 {
                total += v * v.ln();
            }
        }
        let value = -total / n as f64;
        let rg = self.slots[p.0].requires_grad;
        let out = self.push_slot(vec![value], vec![], rg);
        self.nodes.push(Node::EntropyRowsMean { p, out, n });
        Ok(out)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep seeding `d(out) = 1`. Leaf gradients accumulate across
    /// repeated calls until [`Graph::clear_grads`]; intermediate buffers are
    /// reset at the start of every sweep.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.slots[out.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: output must be scalar, got shape {:?}",
                self.slots[out.0].shape
            )));
        }
        for s in &mut self.slots {
            if !s.is_leaf {
                s.grad.iter_mut().for_each(|g| *g = 0.0);
            }
        }
        self.slots[out.0].grad[0] += 1.0;
        for idx in (0..self.nodes.len()).rev() {
            self.backward_node(idx);
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, g: &[f64]) {
        if !self.slots[v.0].requires_grad {
            return;
        }
        for (slot, val) in self.slots[v.0].grad.iter_mut().zip(g) {
            *slot += val;
        }
    }

    fn backward_node(&mut self, idx: usize) {
        // Upstream gradients are cloned per node; buffers are small and the
        // tape lives for a single step.
        match &self.nodes[idx] {
            Node::Linear { x, w, b, out, n, din, dout } => {
                let (x, w, b, out, n, din, dout) = (*x, *w, *b, *out, *n, *din, *dout);
                if !self.slots[out.0].requires_grad {
                    return;
                }
                let g = self.slots[out.0].grad.clone();
                if self.slots[x.0].requires_grad {
                    let wd = &self.slots[w.0].data;
                    let mut dx = vec![0.0; n * din];
                    for i in 0..n {
                        let grow = &g[i * dout..(i + 1) * dout];
                        let dxrow = &mut dx[i * din..(i + 1) * din];
                        for (kk, dxv) in dxrow.iter_mut().enumerate() {
                            let wrow = &wd[kk * dout..(kk + 1) * dout];
                            *dxv = grow.iter().zip(wrow).map(|(gv, wv)| gv * wv).sum();
                        }
                    }
                    self.add_grad(x, &dx);
                }
                if self.slots[w.0].requires_grad {
                    let xd = &self.slots[x.0].data;
                    let mut dw = vec![0.0; din * dout];
                    for i in 0..n {
                        let xrow = &xd[i * din..(i + 1) * din];
                        let grow = &g[i * dout..(i + 1) * dout];
                        for (kk, &xv) in xrow.iter().enumerate() {
                            let drow = &mut dw[kk * dout..(kk + 1) * dout];
                            for (dv, &gv) in drow.iter_mut().zip(grow) {
                                *dv += xv * gv;
                            }
                        }
                    }
                    self.add_grad(w, &dw);
                }
                if let Some(bv) = b {
                    if self.slots[bv.0].requires_grad {
                        let mut db = vec![0.0; dout];
                        for i in 0..n {
                            for (dv, &gv) in db.iter_mut().zip(&g[i * dout..(i + 1) * dout]) {
                                *dv += gv;
                            }
                        }
                        self.add_grad(bv, &db);
                    }
                }
            }
            Node::Tanh { x, out } => {
                let (x, out) = (*x, *out);
                if !self.slots[out.0].requires_grad {
                    return;
                }
                let dx: Vec<f64> = self.slots[out.0]
                    .grad
                    .iter()
                    .zip(&self.slots[out.0].data)
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.add_grad(x, &dx);
            }
            Node::L2NormalizeRows { x, out, n, d, norms } => {
                let (x, out, n, d) = (*x, *out, *n, *d);
                if !self.slots[out.0].requires_grad {
                    return;
                }
                let norms = norms.clone();
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    let g = &self.slots[out.0].grad[i * d..(i + 1) * d];
                    let y = &self.slots[out.0].data[i * d..(i + 1) * d];
                    let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    for ((dv, &gv), &yv) in dx[i * d..(i + 1) * d].iter_mut().zip(g).zip(y) {
                        *dv = (gv - yv * dot) / norms[i];
                    }
                }
                self.add_grad(x, &dx);
            }
            Node::SoftmaxRows { x, out, n, c } => {
                let (x, out, n, c) = (*x, *out, *n, *c);
                if !self.slots[out.0].requires_grad {
                    return;
                }
                let mut dx = vec![0.0; n * c];
                for i in 0..n {
                    let g = &self.slots[out.0].grad[i * c..(i + 1) * c];
                    let p = &self.slots[out.0].data[i * c..(i + 1) * c];
                    let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
                    for ((dv, &gv), &pv) in dx[i * c..(i + 1) * c].iter_mut().zip(g).zip(p) {
                        *dv = pv * (gv - dot);
                    }
                }
                self.add_grad(x, &dx);
            }
            Node::CrossEntropy { logits, out, labels, weights, n, c, probs } => {
                let (logits, out, n, c) = (*logits, *out, *n, *c);
                if !self.slots[out.0].requires_grad {
                    return;
                }
                let g = self.slots[out.0].grad[0];
                let mut dz = vec![0.0; n * c];
                for i in 0..n {
                    let scale = g * weights[i] / n as f64;
                    let prow = &probs[i * c..(i + 1) * c];
                    let drow = &mut dz[i * c..(i + 1) * c];
                    for (dv, &pv) in drow.iter_mut().zip(prow) {
                        *dv = scale * pv;
                    }
                    drow[labels[i]] -= scale;
                }
                self.add_grad(logits, &dz);
            }
            Node::GradReverse { x, out, coeff } => {
                let (x, out, coeff) = (*x, *out, *coeff);
                if !self.slots[out.0].requires_grad {
                    return;
                }
                let dx: Vec<f64> = self.slots[out.0].grad.iter().map(|g| -coeff * g).collect();
                self.add_grad(x, &dx);
            }
            Node::Scale { x, out, k } => {
                let (x, out, k) = (*x, *out, *k);
                if !self.slots[out.0].requires_grad {
                    return;
                }
                let dx: Vec<f64> = self.slots[out.0].grad.iter().map(|g| k * g).collect();
                self.add_grad(x, &dx);
            }
            Node::Add { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                if !self.slots[out.0].requires_grad {
                    return;
                }
                let g = self.slots[out.0].grad.clone();
                self.add_grad(a, &g);
                self.add_grad(b, &g);
            }
            Node::Sub { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                if !self.slots[out.0].requires_grad {
                    return;
                }
                let g = self.slots[out.0].grad.clone();
                self.add_grad(a, &g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.add_grad(b, &neg);
            }
            Node::Mul { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                if !self.slots[out.0].requires_grad {
                    return;
                }
                let g = self.slots[out.0].grad.clone();
                if self.slots[a.0].requires_grad {
                    let da: Vec<f64> = g.iter().zip(&self.slots[b.0].data).map(|(gv, bv)| gv * bv).collect();
                    self.add_grad(a, &da);
                }
                if self.slots[b.0].requires_grad {
                    let db: Vec<f64> = g.iter().zip(&self.slots[a.0].data).map(|(gv, av)| gv * av).collect();
                    self.add_grad(b, &db);
                }
            }
            Node::SumAll { x, out } => {
                let (x, out) = (*x, *out);
                if !self.slots[out.0].requires_grad {
                    return;
                }
                let g = self.slots[out.0].grad[0];
                let dx = vec![g; self.slots[x.0].data.len()];
                self.add_grad(x, &dx);
            }
            Node::RowwiseDot { a, b, out, n, d } => {
                let (a, b, out, n, d) = (*a, *b, *out, *n, *d);
                if !self.slots[out.0].requires_grad {
                    return;
                }
                let g = self.slots[out.0].grad.clone();
                if self.slots[a.0].requires_grad {
                    let mut da = vec![0.0; n * d];
                    for i in 0..n {
                        for (dv, &bv) in da[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&self.slots[b.0].data[i * d..(i + 1) * d])
                        {
                            *dv = g[i] * bv;
                        }
                    }
                    self.add_grad(a, &da);
                }
                if self.slots[b.0].requires_grad {
                    let mut db = vec![0.0; n * d];
                    for i in 0..n {
                        for (dv, &av) in db[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&self.slots[a.0].data[i * d..(i + 1) * d])
                        {
                            *dv = g[i] * av;
                        }
                    }
                    self.add_grad(b, &db);
                }
            }
            Node::PrependCol { col, mat, out, n, m } => {
                let (col, mat, out, n, m) = (*col, *mat, *out, *n, *m);
                if !self.slots[out.0].requires_grad {
                    return;
                }
                let g = self.slots[out.0].grad.clone();
                if self.slots[col.0].requires_grad {
                    let dc: Vec<f64> = (0..n).map(|i| g[i * (m + 1)]).collect();
                    self.add_grad(col, &dc);
                }
                if self.slots[mat.0].requires_grad {
                    let mut dm = vec![0.0; n * m];
                    for i in 0..n {
                        dm[i * m..(i + 1) * m]
                            .copy_from_slice(&g[i * (m + 1) + 1..(i + 1) * (m + 1)]);
                    }
                    self.add_grad(mat, &dm);
                }
            }
            Node::MaskedRowLse { x, out, mask, n, m } => {
                let (x, out, n, m) = (*x, *out, *n, *m);
                if !self.slots[out.0].requires_grad {
                    return;
                }
                let mask = mask.clone();
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    let g = self.slots[out.0].grad[i];
                    let lse = self.slots[out.0].data[i];
                    let row = &self.slots[x.0].data[i * m..(i + 1) * m];
                    for (j, (dv, &v)) in dx[i * m..(i + 1) * m].iter_mut().zip(row).enumerate() {
                        if mask[i * m + j] {
                            *dv = g * (v - lse).exp();
                        }
                    }
                }
                self.add_grad(x, &dx);
            }
            Node::EntropyRowsMean { p, out, n } => {
                let (p, out, n) = (*p, *out, *n);
                if !self.slots[out.0].requires_grad {
                    return;
                }
                let g = self.slots[out.0].grad[0];
                let dx: Vec<f64> = self.slots[p.0]
                    .data
                    .iter()
                    .map(|&v| if v > 0.0 { -g * (v.ln() + 1.0) / n as f64 } else { 0.0 })
                    .collect();
                self.add_grad(p, &dx);
            }
        }
    }
}

/// Maximum relative error between reverse-mode and central-difference
/// gradients of a scalar-valued tensor function at `point`.
///
/// Relative error per coordinate is `|a - n| / max(1, |a|, |n|)`.
pub fn check_gradients<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("check_gradients: eps {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |data: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let t = Tensor::new(data.to_vec(), point.shape().to_vec())?;
        let v = g.leaf(&t);
        let out = f(&mut g, v)?;
        if g.value(out).len() != 1 {
            return Err(Error::Contract("check_gradients: function output is not scalar".into()));
        }
        Ok(g.scalar_value(out))
    };

    // Reverse-mode gradient at the point.
    let analytic = {
        let mut g = Graph::new();
        let t = Tensor::new(point.data().to_vec(), point.shape().to_vec())?.with_requires_grad();
        let v = g.leaf(&t);
        let out = f(&mut g, v)?;
        g.backward(out)?;
        g.grad(v).to_vec()
    };

    let mut max_err: f64 = 0.0;
    let mut data = point.data().to_vec();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + eps;
        let fp = eval(&data)?;
        data[i] = orig - eps;
        let fm = eval(&data)?;
        data[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / 1.0_f64.max(analytic[i].abs()).max(numeric.abs());
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
