use super::ops::{self, AttnDims, LayerNormSaved};
use super::{Real, Result, Tensor, TensorError};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, batch: usize, rows: usize, cols: usize },
    Reshape { a: Var },
    Gelu { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<(Var, usize)>, outer: usize },
    Softmax { a: Var, dim: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, saved: LayerNormSaved<T> },
    Attention { q: Var, k: Var, v: Var, probs: Vec<T>, dims: AttnDims },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T> },
    Bce { logits: Var, targets: Vec<T>, weights: Vec<T>, total: T },
    MeanValid { x: Var, counts: Vec<usize>, valid: Vec<bool>, len: usize, dim: usize },
    Sum { a: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a valid topological order;
/// [`Graph::backward`] walks them in exact reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn suffix_broadcast(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Learnable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by the last backward pass; zeros when the node
    /// was unreachable or does not require a gradient.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let shape = self.shape(v).to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(&shape),
        }
    }

    /// Elementwise sum. `b` may match a trailing suffix of `a`'s shape
    /// (bias broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !suffix_broadcast(sa, sb) {
            return Err(TensorError::Shape {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bd = self.value(b).data();
        let n = bd.len();
        let mut out = self.value(a).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bd[i % n];
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !suffix_broadcast(sa, sb) {
            return Err(TensorError::Shape {
                op: "mul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bd = self.value(b).data();
        let n = bd.len();
        let mut out = self.value(a).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o *= bd[i % n];
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o *= c;
        }
        let rg = self.rg(a);
        self.push(out, Op::Scale { a, c }, rg)
    }

    /// `a[..., k] x b[k, n] -> [..., n]`; leading axes of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let data = ops::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(TensorError::Contract(format!(
                "transpose needs at least 2 axes, got {s:?}"
            )));
        }
        let rows = s[s.len() - 2];
        let cols = s[s.len() - 1];
        let batch = self.value(a).numel() / (rows * cols);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(src.len());
        for b in 0..batch {
            data.extend(ops::transpose2(&src[b * rows * cols..(b + 1) * rows * cols], rows, cols));
        }
        let mut shape = s;
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::Transpose { a, batch, rows, cols }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape { a }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = ops::gelu(*o);
        }
        let rg = self.rg(a);
        self.push(out, Op::Gelu { a }, rg)
    }

    /// Gathers rows of `table[V, D]`; output shape is `out_shape ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(TensorError::Contract(format!(
                "embedding table must be 2-D, got {ts:?}"
            )));
        }
        let (vocab, dim) = (ts[0], ts[1]);
        if out_shape.iter().product::<usize>() != ids.len() {
            return Err(TensorError::Shape {
                op: "embedding",
                lhs: out_shape.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Vocab {
                    op: "embedding",
                    index: id,
                    size: vocab,
                });
            }
            data.extend_from_slice(&td[id * dim..(id + 1) * dim]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(dim);
        let rg = self.rg(table);
        Ok(self.push(
            Tensor { shape, data },
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push((p, *s.last().unwrap()));
        }
        let outer: usize = lead.iter().product();
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut data = Vec::with_capacity(outer * total);
        for r in 0..outer {
            for &(p, w) in &widths {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor { shape, data }, Op::Concat { parts: widths, outer }, rg))
    }

    /// Softmax over the last axis. `keep`, when given, has one flag per
    /// element; dropped entries come out exactly zero.
    pub fn softmax(&mut self, a: Var, keep: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a);
        let dim = x.last_dim();
        if let Some(k) = keep {
            if k.len() != x.numel() {
                return Err(TensorError::Shape {
                    op: "softmax",
                    lhs: x.shape().to_vec(),
                    rhs: vec![k.len()],
                });
            }
        }
        let mut out = Tensor::zeros(x.shape());
        for r in 0..x.numel() / dim {
            let row_keep = keep.map(|k| &k[r * dim..(r + 1) * dim]);
            if !ops::softmax_row(
                &x.data()[r * dim..(r + 1) * dim],
                row_keep,
                &mut out.data_mut()[r * dim..(r + 1) * dim],
            ) {
                return Err(TensorError::DegenerateRow { op: "softmax", row: r });
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax { a, dim }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let dim = self.value(x).last_dim();
        for p in [gamma, beta] {
            if self.shape(p) != [dim] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (data, saved) = ops::layer_norm(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            dim,
            T::from_f64(eps),
        );
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor { shape, data },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved,
            },
            rg,
        ))
    }

    /// Scaled dot-product attention over already-projected `q[B,Lq,D]`,
    /// `k[B,Lk,D]`, `v[B,Lk,D]`, split into `heads` heads of width `D/heads`
    /// and concatenated back. `key_pad[b*Lk + j]` true means key `j` of
    /// sequence `b` is padding and gets zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_pad: Option<&[bool]>,
        heads: usize,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(TensorError::Shape {
                op: "attention",
                lhs: sq.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        if sk != sv {
            return Err(TensorError::Shape {
                op: "attention",
                lhs: sk.to_vec(),
                rhs: sv.to_vec(),
            });
        }
        let dims = AttnDims {
            batch: sq[0],
            lq: sq[1],
            lk: sk[1],
            dim: sq[2],
            heads,
        };
        if heads == 0 || dims.dim % heads != 0 {
            return Err(TensorError::Config(format!(
                "hidden size {} is not divisible by {} heads",
                dims.dim, heads
            )));
        }
        if let Some(p) = key_pad {
            if p.len() != dims.batch * dims.lk {
                return Err(TensorError::Shape {
                    op: "attention",
                    lhs: vec![dims.batch, dims.lk],
                    rhs: vec![p.len()],
                });
            }
        }
        let (data, probs) = ops::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            key_pad,
            dims,
        )
        .map_err(|row| TensorError::DegenerateRow {
            op: "attention",
            row,
        })?;
        let shape = vec![dims.batch, dims.lq, dims.dim];
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor { shape, data },
            Op::Attention {
                q,
                k,
                v,
                probs,
                dims,
            },
            rg,
        ))
    }

    /// Multi-head attention whose concatenated heads are mapped through
    /// `w_out[D, D]`.
    pub fn multi_head_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_pad: Option<&[bool]>,
        heads: usize,
        w_out: Var,
    ) -> Result<Var> {
        let heads_out = self.attention(q, k, v, key_pad, heads)?;
        self.matmul(heads_out, w_out)
    }

    /// Mean softmax cross-entropy of `logits[N, C]` against class targets;
    /// `None` targets are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let x = self.value(logits);
        let classes = x.last_dim();
        let rows = x.numel() / classes;
        if targets.len() != rows {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: x.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(TensorError::Contract(
                "cross_entropy: no target positions in batch".into(),
            ));
        }
        let mut probs = vec![T::zero(); x.numel()];
        let mut total = T::zero();
        for (r, t) in targets.iter().enumerate() {
            let Some(c) = *t else { continue };
            if c >= classes {
                return Err(TensorError::Vocab {
                    op: "cross_entropy",
                    index: c,
                    size: classes,
                });
            }
            let row = &x.data()[r * classes..(r + 1) * classes];
            ops::softmax_row(row, None, &mut probs[r * classes..(r + 1) * classes]);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - row[c];
        }
        let loss = total / T::from_f64(count as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            self.rg(logits),
        ))
    }

    /// Weighted mean of sigmoid binary cross-entropy over all elements of
    /// `logits`. `weights` defaults to all ones.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        targets: &[f64],
        weights: Option<&[f64]>,
    ) -> Result<Var> {
        let x = self.value(logits);
        if targets.len() != x.numel() || weights.is_some_and(|w| w.len() != x.numel()) {
            return Err(TensorError::Shape {
                op: "bce_with_logits",
                lhs: x.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let w: Vec<T> = match weights {
            Some(w) => w.iter().map(|&v| T::from_f64(v)).collect(),
            None => vec![T::one(); targets.len()],
        };
        let total: T = w.iter().copied().sum();
        if total <= T::zero() {
            return Err(TensorError::Contract(
                "bce_with_logits: total weight is zero".into(),
            ));
        }
        let y: Vec<T> = targets.iter().map(|&v| T::from_f64(v)).collect();
        let mut acc = T::zero();
        for ((&z, &yt), &wt) in x.data().iter().zip(&y).zip(&w) {
            acc += wt * (ops::softplus(z) - yt * z);
        }
        Ok(self.push(
            Tensor::scalar(acc / total),
            Op::Bce {
                logits,
                targets: y,
                weights: w,
                total,
            },
            self.rg(logits),
        ))
    }

    /// Averages `x[B, L, D]` over positions with `valid[b*L + l]` true.
    pub fn mean_valid(&mut self, x: Var, valid: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || valid.len() != s[0] * s[1] {
            return Err(TensorError::Shape {
                op: "mean_valid",
                lhs: s,
                rhs: vec![valid.len()],
            });
        }
        let (b, len, dim) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let mut data = vec![T::zero(); b * dim];
        let mut counts = vec![0usize; b];
        for bi in 0..b {
            let out = &mut data[bi * dim..(bi + 1) * dim];
            for l in 0..len {
                if valid[bi * len + l] {
                    counts[bi] += 1;
                    ops::axpy(T::one(), &xd[(bi * len + l) * dim..][..dim], out);
                }
            }
            if counts[bi] == 0 {
                return Err(TensorError::DegenerateRow {
                    op: "mean_valid",
                    row: bi,
                });
            }
            let inv = T::one() / T::from_f64(counts[bi] as f64);
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![b, dim],
                data,
            },
            Op::MeanValid {
                x,
                counts,
                valid: valid.to_vec(),
                len,
                dim,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    fn accumulate(&mut self, v: Var, delta: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gv, d) in g.iter_mut().zip(delta) {
                    *gv += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse-mode sweep from a scalar `loss`, replacing any gradients from
    /// a previous call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            self.backprop_node(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, g: &[T]) {
        // Temporarily move the op out so inputs can be read while grads are
        // written.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(*a, g.to_vec());
                if self.rg(*b) {
                    let n = self.value(*b).numel();
                    let mut gb = vec![T::zero(); n];
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % n] += gv;
                    }
                    self.accumulate(*b, gb);
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let n = bv.len();
                let ga = if self.rg(*a) {
                    Some(g.iter().enumerate().map(|(i, &gv)| gv * bv[i % n]).collect())
                } else {
                    None
                };
                let gb = if self.rg(*b) {
                    let mut gb = vec![T::zero(); n];
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % n] += gv * av[i];
                    }
                    Some(gb)
                } else {
                    None
                };
                if let Some(ga) = ga {
                    self.accumulate(*a, ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(*b, gb);
                }
            }
            Op::Scale { a, c } => {
                self.accumulate(*a, g.iter().map(|&v| v * *c).collect());
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.rg(*a) {
                    let ga = ops::matmul_grad_a(g, self.value(*b).data(), *m, *k, *n);
                    self.accumulate(*a, ga);
                }
                if self.rg(*b) {
                    let gb = ops::matmul_grad_b(self.value(*a).data(), g, *m, *k, *n);
                    self.accumulate(*b, gb);
                }
            }
            Op::Transpose {
                a,
                batch,
                rows,
                cols,
            } => {
                let mut ga = Vec::with_capacity(g.len());
                let sz = rows * cols;
                for bi in 0..*batch {
                    ga.extend(ops::transpose2(&g[bi * sz..(bi + 1) * sz], *cols, *rows));
                }
                self.accumulate(*a, ga);
            }
            Op::Reshape { a } => self.accumulate(*a, g.to_vec()),
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                let ga = g.iter().zip(x).map(|(&gv, &xv)| gv * ops::gelu_grad(xv)).collect();
                self.accumulate(*a, ga);
            }
            Op::Embedding { table, ids } => {
                let ts = self.shape(*table);
                let dim = ts[1];
                let mut gt = vec![T::zero(); ts[0] * dim];
                for (r, &id) in ids.iter().enumerate() {
                    ops::axpy(T::one(), &g[r * dim..(r + 1) * dim], &mut gt[id * dim..(id + 1) * dim]);
                }
                self.accumulate(*table, gt);
            }
            Op::Concat { parts, outer } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, w) in parts {
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(outer * w);
                        for r in 0..*outer {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(p, gp);
                    }
                    offset += w;
                }
            }
            Op::Softmax { a, dim } => {
                let y = self.value(Var(idx)).data();
                let mut ga = vec![T::zero(); g.len()];
                for r in 0..g.len() / dim {
                    let yr = &y[r * dim..(r + 1) * dim];
                    let gr = &g[r * dim..(r + 1) * dim];
                    let s = ops::dot(yr, gr);
                    for j in 0..*dim {
                        ga[r * dim + j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let dim = self.value(*x).last_dim();
                let (dx, dg, db) =
                    ops::layer_norm_backward(g, self.value(*gamma).data(), saved, dim);
                self.accumulate(*x, dx);
                self.accumulate(*gamma, dg);
                self.accumulate(*beta, db);
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                dims,
            } => {
                let (dq, dk, dv) = ops::attention_backward(
                    g,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    *dims,
                );
                self.accumulate(*q, dq);
                self.accumulate(*k, dk);
                self.accumulate(*v, dv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let classes = self.value(*logits).last_dim();
                let count = targets.iter().filter(|t| t.is_some()).count();
                let scale = g[0] / T::from_f64(count as f64);
                let mut gl = vec![T::zero(); probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    let Some(c) = *t else { continue };
                    for j in 0..classes {
                        gl[r * classes + j] = probs[r * classes + j] * scale;
                    }
                    gl[r * classes + c] -= scale;
                }
                self.accumulate(*logits, gl);
            }
            Op::Bce {
                logits,
                targets,
                weights,
                total,
            } => {
                let z = self.value(*logits).data();
                let scale = g[0] / *total;
                let gl = z
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&zv, &y), &w)| scale * w * (ops::sigmoid(zv) - y))
                    .collect();
                self.accumulate(*logits, gl);
            }
            Op::MeanValid {
                x,
                counts,
                valid,
                len,
                dim,
            } => {
                let mut gx = vec![T::zero(); counts.len() * len * dim];
                for (bi, &c) in counts.iter().enumerate() {
                    let inv = T::one() / T::from_f64(c as f64);
                    let grow = &g[bi * dim..(bi + 1) * dim];
                    for l in 0..*len {
                        if valid[bi * len + l] {
                            ops::axpy(inv, grow, &mut gx[(bi * len + l) * dim..][..*dim]);
                        }
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::Sum { a } => {
                let n = self.value(*a).numel();
                self.accumulate(*a, vec![g[0]; n]);
            }
        }
        self.nodes[idx].op = op;
    }
}
