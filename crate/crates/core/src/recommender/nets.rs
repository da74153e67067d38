use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{RecKind, RecModel};
use crate::error::{Error, Result};
use crate::model::{allowed_pairs, AttentionMode, LN_EPS};
use crate::tensor::{Graph, Tensor, Var};

const PER_BLOCK: usize = 16;

/// Rowwise `table · w + b`.
pub fn adapt_embeddings(table: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.shape().len() != 2 || table.cols() != w.rows() || b.len() != w.cols() {
        return Err(Error::dim("adapt_embeddings", table.shape(), w.shape()));
    }
    let mut out = table.matmul(w)?;
    let d = w.cols();
    for row in out.data_mut().chunks_mut(d) {
        for (o, bb) in row.iter_mut().zip(b.data()) {
            *o += bb;
        }
    }
    Ok(out)
}

/// One GRU step: gates `z`, `r` and candidate `h~` from input row `x` and
/// previous state `h`, all `[1 × ·]`. Weight order is `[z, r, h]`.
pub fn gru_cell(g: &mut Graph, x: Var, h: Var, w: [Var; 3], u: [Var; 3], b: [Var; 3]) -> Result<Var> {
    let gate = |g: &mut Graph, i: usize, hh: Var| -> Result<Var> {
        let a = g.matmul(x, w[i])?;
        let c = g.matmul(hh, u[i])?;
        let s = g.add(a, c)?;
        g.add_row(s, b[i])
    };
    let z = gate(g, 0, h)?;
    let z = g.sigmoid(z)?;
    let r = gate(g, 1, h)?;
    let r = g.sigmoid(r)?;
    let rh = g.mul(r, h)?;
    let cand = gate(g, 2, rh)?;
    let cand = g.tanh(cand)?;
    // h' = h + z * (h~ - h)
    let diff = g.sub(cand, h)?;
    let step = g.mul(z, diff)?;
    g.add(h, step)
}

/// Parameters of a [`RecModel`] bound into a graph, with the adapted item
/// matrix and its transpose computed once.
pub(crate) struct Net {
    params: Vec<Var>,
    pub items: Var,
    items_t: Var,
}

impl Net {
    pub fn bind(g: &mut Graph, model: &RecModel) -> Result<Net> {
        let params: Vec<Var> = model.params.iter().map(|p| g.leaf(p)).collect();
        let items = match &model.frozen {
            Some(t) => {
                let c = g.constant(t.shape(), t.data().to_vec())?;
                let m = g.matmul(c, params[0])?;
                g.add_row(m, params[1])?
            }
            None => params[0],
        };
        let items_t = g.transpose(items)?;
        Ok(Net { params, items, items_t })
    }

    pub fn vars(&self) -> &[Var] {
        &self.params
    }

    fn first_body_param(model: &RecModel) -> usize {
        if model.config.kind.uses_table() {
            2
        } else {
            1
        }
    }

    fn check(model: &RecModel, seq: &[usize]) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::Parameter("empty item sequence".into()));
        }
        if seq.len() > model.config.max_len {
            return Err(Error::dim("recommender sequence", &[seq.len()], &[model.config.max_len]));
        }
        if let Some(&bad) = seq.iter().find(|&&i| i >= model.num_items()) {
            return Err(Error::UnknownItem(bad.to_string()));
        }
        Ok(())
    }

    /// Per-position output states `[n × d_rec]` for a window of at most
    /// `max_len` items.
    pub fn encode(&self, g: &mut Graph, model: &RecModel, seq: &[usize], dropout: Option<u64>) -> Result<Var> {
        Self::check(model, seq)?;
        let cfg = &model.config;
        let rate = if dropout.is_some() { cfg.dropout } else { 0.0 };
        let mut seeds = ChaCha8Rng::seed_from_u64(dropout.unwrap_or(0));
        let mut drop = |g: &mut Graph, x: Var| -> Result<Var> {
            let s = seeds.next_u64();
            g.dropout(x, rate, s)
        };
        let base = Self::first_body_param(model);
        let p = |i: usize| self.params[base + i];
        let n = seq.len();
        let x = g.gather_rows(self.items, seq)?;
        match cfg.kind {
            RecKind::Sasrec | RecKind::IdBaseline => {
                let positions: Vec<usize> = (0..n).collect();
                let pos = g.gather_rows(p(0), &positions)?;
                let mut x = g.add(x, pos)?;
                x = drop(g, x)?;
                let allowed = allowed_pairs(n, &[], AttentionMode::Causal);
                for l in 0..cfg.n_layers {
                    let q = |k: usize| p(1 + l * PER_BLOCK + k);
                    let h = g.layer_norm(x, q(0), q(1), LN_EPS)?;
                    let qq = g.matmul(h, q(2))?;
                    let qq = g.add_row(qq, q(3))?;
                    let kk = g.matmul(h, q(4))?;
                    let kk = g.add_row(kk, q(5))?;
                    let vv = g.matmul(h, q(6))?;
                    let vv = g.add_row(vv, q(7))?;
                    let a = g.attention(qq, kk, vv, &allowed, cfg.n_heads)?;
                    let o = g.matmul(a, q(8))?;
                    let o = g.add_row(o, q(9))?;
                    let o = drop(g, o)?;
                    x = g.add(x, o)?;
                    let h = g.layer_norm(x, q(10), q(11), LN_EPS)?;
                    let f = g.matmul(h, q(12))?;
                    let f = g.add_row(f, q(13))?;
                    let f = g.gelu(f)?;
                    let f = g.matmul(f, q(14))?;
                    let f = g.add_row(f, q(15))?;
                    let f = drop(g, f)?;
                    x = g.add(x, f)?;
                }
                let end = 1 + cfg.n_layers * PER_BLOCK;
                g.layer_norm(x, p(end), p(end + 1), LN_EPS)
            }
            RecKind::Gru4rec => {
                let x = drop(g, x)?;
                let w = [p(0), p(3), p(6)];
                let u = [p(1), p(4), p(7)];
                let b = [p(2), p(5), p(8)];
                let mut h = g.constant(&[1, cfg.hidden], vec![0.0; cfg.hidden])?;
                let mut states = Vec::with_capacity(n);
                for t in 0..n {
                    let xt = g.gather_rows(x, &[t])?;
                    h = gru_cell(g, xt, h, w, u, b)?;
                    states.push(h);
                }
                let hs = if n == 1 { states[0] } else { g.concat_rows(&states)? };
                let hs = drop(g, hs)?;
                let o = g.matmul(hs, p(9))?;
                g.add_row(o, p(10))
            }
        }
    }

    /// Scores of every catalog item at every position, `[n × items]`.
    pub fn sequence_logits(&self, g: &mut Graph, model: &RecModel, seq: &[usize], dropout: Option<u64>) -> Result<Var> {
        let h = self.encode(g, model, seq, dropout)?;
        g.matmul(h, self.items_t)
    }

    /// Scores after the whole history (its last `max_len` items), `[1 × items]`.
    pub fn final_scores(&self, g: &mut Graph, model: &RecModel, history: &[usize], dropout: Option<u64>) -> Result<Var> {
        let start = history.len().saturating_sub(model.config.max_len);
        let window = &history[start..];
        let h = self.encode(g, model, window, dropout)?;
        let last = g.gather_rows(h, &[window.len() - 1])?;
        g.matmul(last, self.items_t)
    }
}

fn forward(model: &RecModel, kind_ok: bool, what: &str, history: &[usize]) -> Result<Vec<f64>> {
    if !kind_ok {
        return Err(Error::Parameter(format!("{what} called on a {} model", model.config.kind)));
    }
    let mut g = Graph::new();
    let net = Net::bind(&mut g, model)?;
    let s = net.final_scores(&mut g, model, history, None)?;
    Ok(g.value(s).to_vec())
}

/// SASRec (or id_baseline) full-catalog scores after `history`.
pub fn sasrec_forward(model: &RecModel, history: &[usize]) -> Result<Vec<f64>> {
    forward(model, model.config.kind != RecKind::Gru4rec, "sasrec_forward", history)
}

pub fn gru4rec_forward(model: &RecModel, history: &[usize]) -> Result<Vec<f64>> {
    forward(model, model.config.kind == RecKind::Gru4rec, "gru4rec_forward", history)
}
