use super::{as_matrix, dropout_keep_mask, kernels, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    MeanRows(usize),
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    Gather {
        src: usize,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    L2Normalize {
        x: usize,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run reverse-mode autodiff tape.
///
/// Ops append nodes in topological order, so the reverse pass is a single
/// backwards sweep over the node list.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a copy of `t` as a leaf. Gradients flow to it iff
    /// `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shapes are validated on push")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `v` into `t.grad` (zeros if nothing flowed).
    pub fn write_grad(&self, v: Var, t: &mut Tensor) {
        let g = self
            .grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.len()]);
        t.grad = Some(g);
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        let c = *n.shape.last().unwrap();
        (n.data.len() / c, c)
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        parents: &[usize],
    ) -> Result<Var> {
        if self.backward_done {
            return Err(Error::State(
                "graph already consumed by backward; start a new forward pass".into(),
            ));
        }
        if cfg!(debug_assertions) && !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix("matmul", self.shape(a))?;
        let (k2, n) = as_matrix("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul(self.value(a), self.value(b), m, k, n);
        self.push("matmul", vec![m, n], data, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = as_matrix("transpose", self.shape(a))?;
        let data = kernels::transpose(self.value(a), m, n);
        self.push("transpose", vec![n, m], data, Op::Transpose(a.0), &[a.0])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.push("add", shape, data, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let shape = self.shape(a).to_vec();
        self.push("sub", shape, data, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.push("mul", shape, data, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    /// Adds a length-`d` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        if self.value(bias).len() != c {
            return Err(Error::dim("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let mut data = self.value(x).to_vec();
        for row in 0..r {
            for (o, bv) in data[row * c..(row + 1) * c].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push("add_row", shape, data, Op::AddRow(x.0, bias.0), &[x.0, bias.0])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let data = self.value(x).iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, data, Op::Scale(x.0, s), &[x.0])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x.0), &[x.0])
    }

    /// Mean over rows: `[n×d] -> [1×d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        let v = self.value(x);
        let mut data = vec![0.0; c];
        for row in 0..r {
            for (o, xv) in data.iter_mut().zip(&v[row * c..(row + 1) * c]) {
                *o += xv;
            }
        }
        data.iter_mut().for_each(|o| *o /= r as f64);
        self.push("mean_rows", vec![1, c], data, Op::MeanRows(x.0), &[x.0])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push("gelu", shape, data, Op::Gelu(x.0), &[x.0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push("sigmoid", shape, data, Op::Sigmoid(x.0), &[x.0])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.push("tanh", shape, data, Op::Tanh(x.0), &[x.0])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (_, d) = self.rows_cols(x);
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::Parameter("layer_norm eps must be positive".into()));
        }
        let out = kernels::layer_norm(self.value(x), self.value(gain), self.value(bias), d, eps);
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            shape,
            out.y,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat: out.xhat,
                inv_std: out.inv_std,
            },
            &[x.0, gain.0, bias.0],
        )
    }

    /// Inverted dropout with a mask drawn from `seed`. `rate == 0` is the
    /// identity and records no node.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Result<Var> {
        let mask = dropout_keep_mask(self.value(x).len(), rate, seed)?;
        if rate == 0.0 {
            return Ok(x);
        }
        let data = zip_map(self.value(x), &mask, |a, m| a * m);
        let shape = self.shape(x).to_vec();
        self.push("dropout", shape, data, Op::Dropout { x: x.0, mask }, &[x.0])
    }

    /// Row gather: `out[r] = src[ids[r]]`. Serves as embedding lookup and
    /// row selection.
    pub fn gather_rows(&mut self, src: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.rows_cols(src);
        if ids.is_empty() {
            return Err(Error::Index("gather_rows needs at least one index".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("row {bad} out of range for {r} rows")));
        }
        let v = self.value(src);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        self.push(
            "gather_rows",
            vec![ids.len(), c],
            data,
            Op::Gather {
                src: src.0,
                ids: ids.to_vec(),
            },
            &[src.0],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Index("concat_rows needs at least one part".into()))?;
        let (_, c) = self.rows_cols(first);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.rows_cols(p);
            if pc != c {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            data.extend_from_slice(self.value(p));
            rows += r;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat_rows", vec![rows, c], data, Op::ConcatRows(ids.clone()), &ids)
    }

    /// Multi-head scaled dot-product attention over `[L×d]` projections.
    /// `allowed[q*L + k]` says whether query `q` may attend to key `k`; a
    /// query with no allowed key yields a zero row.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        allowed: &[bool],
        heads: usize,
    ) -> Result<Var> {
        let (l, d) = as_matrix("attention", self.shape(q))?;
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        if allowed.len() != l * l {
            return Err(Error::dim("attention mask", &[l, l], &[allowed.len()]));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Parameter(format!(
                "{d} features cannot be split into {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; heads * l * l];
        let mut out = vec![0.0; l * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..l {
                let p = &mut probs[(h * l + i) * l..(h * l + i + 1) * l];
                let qi = &qv[i * d + off..i * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..l {
                    if allowed[i * l + j] {
                        let s = kernels::dot(qi, &kv[j * d + off..j * d + off + dh]) * scale;
                        p[j] = s;
                        max = max.max(s);
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for j in 0..l {
                    if allowed[i * l + j] {
                        p[j] = (p[j] - max).exp();
                        total += p[j];
                    }
                }
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..l {
                    if allowed[i * l + j] {
                        p[j] /= total;
                        let vj = &vv[j * d + off..j * d + off + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p[j] * x;
                        }
                    }
                }
            }
        }
        self.push(
            "attention",
            vec![l, d],
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                probs,
            },
            &[q.0, k.0, v.0],
        )
    }

    /// Scales each row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        let v = self.value(x);
        let mut norms = Vec::with_capacity(r);
        let mut data = vec![0.0; r * c];
        for row in 0..r {
            let xr = &v[row * c..(row + 1) * c];
            let n = kernels::dot(xr, xr).sqrt().max(1e-12);
            norms.push(n);
            for (o, xv) in data[row * c..(row + 1) * c].iter_mut().zip(xr) {
                *o = xv / n;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "l2_normalize_rows",
            shape,
            data,
            Op::L2Normalize { x: x.0, norms },
            &[x.0],
        )
    }

    /// Mean over unmasked rows of `-log softmax(logits[r])[targets[r]]`.
    /// `mask[r] == false` rows neither contribute nor count; their targets
    /// are never read.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let (b, vocab) = as_matrix("softmax_cross_entropy", self.shape(logits))?;
        if targets.len() != b || mask.len() != b {
            return Err(Error::dim(
                "softmax_cross_entropy",
                &[b, vocab],
                &[targets.len(), mask.len()],
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; b * vocab];
        let mut total = 0.0;
        for r in 0..b {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(Error::Index(format!(
                    "target {t} out of range for {vocab} classes"
                )));
            }
            let row = &lv[r * vocab..(r + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            for (p, x) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        self.push(
            "softmax_cross_entropy",
            vec![1],
            vec![total / count as f64],
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            &[logits.0],
        )
    }

    /// Reverse sweep from a scalar `loss`. A graph supports one backward.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward called twice on the same graph; run a new forward pass".into(),
            ));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (parent, contrib) in self.contributions(i, &g) {
                match &mut grads[parent] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn wants(&self, p: usize) -> bool {
        self.nodes[p].requires_grad
    }

    fn contributions(&self, i: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        let val = |p: usize| self.nodes[p].data.as_slice();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::add_matmul_bt(&mut da, g, val(b), m, n, k);
                    out.push((a, da));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::add_matmul_at(&mut db, val(a), g, m, k, n);
                    out.push((b, db));
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                out.push((a, kernels::transpose(g, n, m)));
            }
            &Op::Add(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::Sub(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.iter().map(|v| -v).collect()));
            }
            &Op::Mul(a, b) => {
                out.push((a, zip_map(g, val(b), |x, y| x * y)));
                out.push((b, zip_map(g, val(a), |x, y| x * y)));
            }
            &Op::AddRow(x, b) => {
                out.push((x, g.to_vec()));
                let c = val(b).len();
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                out.push((b, db));
            }
            &Op::Scale(x, s) => out.push((x, g.iter().map(|v| v * s).collect())),
            &Op::Sum(x) => out.push((x, vec![g[0]; val(x).len()])),
            &Op::MeanRows(x) => {
                let c = g.len();
                let r = val(x).len() / c;
                let mut dx = Vec::with_capacity(r * c);
                for _ in 0..r {
                    dx.extend(g.iter().map(|v| v / r as f64));
                }
                out.push((x, dx));
            }
            &Op::Gelu(x) => out.push((x, zip_map(g, val(x), |gv, xv| gv * kernels::gelu_grad(xv)))),
            &Op::Sigmoid(x) => out.push((x, zip_map(g, &node.data, |gv, y| gv * y * (1.0 - y)))),
            &Op::Tanh(x) => out.push((x, zip_map(g, &node.data, |gv, y| gv * (1.0 - y * y)))),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain);
                let d = gv.len();
                let mut dx = vec![0.0; g.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..d {
                        dxhat[c] = gr[c] * gv[c];
                        dgain[c] += gr[c] * hr[c];
                        dbias[c] += gr[c];
                        mean_dh += dxhat[c];
                        mean_dh_h += dxhat[c] * hr[c];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for c in 0..d {
                        dx[r * d + c] = is * (dxhat[c] - mean_dh - hr[c] * mean_dh_h);
                    }
                }
                out.push((*x, dx));
                out.push((*gain, dgain));
                out.push((*bias, dbias));
            }
            Op::Dropout { x, mask } => out.push((*x, zip_map(g, mask, |a, m| a * m))),
            Op::Gather { src, ids } => {
                let c = node.shape[1];
                let mut ds = vec![0.0; val(*src).len()];
                for (r, &id) in ids.iter().enumerate() {
                    ds[id * c..(id + 1) * c]
                        .iter_mut()
                        .zip(&g[r * c..(r + 1) * c])
                        .for_each(|(d, v)| *d += v);
                }
                out.push((*src, ds));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    out.push((p, g[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (l, d) = (node.shape[0], node.shape[1]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0; l * d];
                let mut dk = vec![0.0; l * d];
                let mut dv = vec![0.0; l * d];
                let mut dp = vec![0.0; l];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..l {
                        let p = &probs[(h * l + i) * l..(h * l + i + 1) * l];
                        let gi = &g[i * d + off..i * d + off + dh];
                        let mut weighted = 0.0;
                        for j in 0..l {
                            if p[j] == 0.0 {
                                dp[j] = 0.0;
                                continue;
                            }
                            let vj = &vv[j * d + off..j * d + off + dh];
                            dp[j] = kernels::dot(gi, vj);
                            weighted += p[j] * dp[j];
                            for (dvx, gx) in dv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                                *dvx += p[j] * gx;
                            }
                        }
                        for j in 0..l {
                            if p[j] == 0.0 {
                                continue;
                            }
                            let ds = p[j] * (dp[j] - weighted) * scale;
                            for c in 0..dh {
                                dq[i * d + off + c] += ds * kv[j * d + off + c];
                                dk[j * d + off + c] += ds * qv[i * d + off + c];
                            }
                        }
                    }
                }
                out.push((*q, dq));
                out.push((*k, dk));
                out.push((*v, dv));
            }
            Op::L2Normalize { x, norms } => {
                let c = node.shape[node.shape.len() - 1];
                let mut dx = vec![0.0; g.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let y = &node.data[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let proj = kernels::dot(y, gr);
                    for j in 0..c {
                        dx[r * c + j] = (gr[j] - y[j] * proj) / n;
                    }
                }
                out.push((*x, dx));
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let vocab = self.nodes[*logits].shape[1];
                let s = g[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (r, (&m, &t)) in mask.iter().zip(targets).enumerate() {
                    if !m {
                        continue;
                    }
                    let row = &mut dl[r * vocab..(r + 1) * vocab];
                    for (d, p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                        *d = p * s;
                    }
                    row[t] -= s;
                }
                out.push((*logits, dl));
            }
        }
        out.retain(|(p, _)| self.wants(*p));
        out
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
