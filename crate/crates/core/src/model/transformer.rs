use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AttentionMode, ModelCheckpoint, ModelConfig, LN_EPS};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::PAD;

const PER_LAYER: usize = 16;

/// How one forward pass runs: attention mode, dropout rate (0 disables it)
/// and the seed every dropout site derives its mask from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardSpec {
    pub mode: AttentionMode,
    pub dropout: f64,
    pub seed: u64,
}

impl ForwardSpec {
    pub fn inference(mode: AttentionMode) -> Self {
        ForwardSpec {
            mode,
            dropout: 0.0,
            seed: 0,
        }
    }
}

/// A checkpoint's parameters recorded as leaves of one graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn bind(g: &mut Graph, params: &[Tensor]) -> Self {
        Bound {
            vars: params.iter().map(|p| g.leaf(p)).collect(),
        }
    }

    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Stores the gradients of the last backward into the parameters'
    /// grad slots.
    pub fn write_grads(&self, g: &Graph, params: &mut [Tensor]) {
        for (v, p) in self.vars.iter().zip(params) {
            g.write_grad(*v, p);
        }
    }
}

/// `allowed[q * len + k]`: causal allows `k <= q`, bidirectional allows all;
/// keys at pad positions are never allowed.
pub(crate) fn allowed_pairs(len: usize, pad_positions: &[usize], mode: AttentionMode) -> Vec<bool> {
    let mut out = vec![false; len * len];
    for q in 0..len {
        for k in 0..len {
            out[q * len + k] = match mode {
                AttentionMode::Causal => k <= q,
                AttentionMode::Bidirectional => true,
            } && !pad_positions.contains(&k);
        }
    }
    out
}

/// 0/1 attention mask; entry `(q, k)` is 1 iff `q` may attend to `k`.
pub fn attention_mask(len: usize, pad_positions: &[usize], mode: AttentionMode) -> Result<Tensor> {
    let data = allowed_pairs(len, pad_positions, mode)
        .into_iter()
        .map(|a| if a { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![len, len], data)
}

fn check_ids(cfg: &ModelConfig, ids: &[usize]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Index("empty token sequence".into()));
    }
    if ids.len() > cfg.max_context {
        return Err(Error::Index(format!(
            "sequence of {} tokens exceeds max_context {}",
            ids.len(),
            cfg.max_context
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Index(format!(
            "token id {bad} out of range for vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Pre-norm transformer stack; returns `[len × d_model]` final-norm states.
pub fn forward_hidden_graph(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    ids: &[usize],
    spec: ForwardSpec,
) -> Result<Var> {
    check_ids(cfg, ids)?;
    let len = ids.len();
    let pads: Vec<usize> = (0..len).filter(|&p| ids[p] == PAD).collect();
    let allowed = allowed_pairs(len, &pads, spec.mode);
    let mut seeds = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut drop = |g: &mut Graph, x: Var| -> Result<Var> {
        let s = seeds.next_u64();
        g.dropout(x, spec.dropout, s)
    };

    let tok = g.gather_rows(bound.var(0), ids)?;
    let positions: Vec<usize> = (0..len).collect();
    let pos = g.gather_rows(bound.var(1), &positions)?;
    let mut x = g.add(tok, pos)?;
    x = drop(g, x)?;

    for l in 0..cfg.n_layers {
        let p = |k: usize| bound.var(2 + l * PER_LAYER + k);
        let h = g.layer_norm(x, p(0), p(1), LN_EPS)?;
        let q = g.matmul(h, p(2))?;
        let q = g.add_row(q, p(3))?;
        let k = g.matmul(h, p(4))?;
        let k = g.add_row(k, p(5))?;
        let v = g.matmul(h, p(6))?;
        let v = g.add_row(v, p(7))?;
        let a = g.attention(q, k, v, &allowed, cfg.n_heads)?;
        let o = g.matmul(a, p(8))?;
        let o = g.add_row(o, p(9))?;
        let o = drop(g, o)?;
        x = g.add(x, o)?;

        let h = g.layer_norm(x, p(10), p(11), LN_EPS)?;
        let f = g.matmul(h, p(12))?;
        let f = g.add_row(f, p(13))?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, p(14))?;
        let f = g.add_row(f, p(15))?;
        let f = drop(g, f)?;
        x = g.add(x, f)?;
    }
    let base = 2 + cfg.n_layers * PER_LAYER;
    g.layer_norm(x, bound.var(base), bound.var(base + 1), LN_EPS)
}

/// Hidden states projected onto the token embeddings (tied LM head).
pub fn forward_logits_graph(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    ids: &[usize],
    spec: ForwardSpec,
) -> Result<Var> {
    let h = forward_hidden_graph(g, bound, cfg, ids, spec)?;
    let et = g.transpose(bound.var(0))?;
    g.matmul(h, et)
}

fn spec_for(ckpt: &ModelCheckpoint, mode: AttentionMode, training: bool, seed: u64) -> ForwardSpec {
    ForwardSpec {
        mode,
        dropout: if training { ckpt.config.dropout_rate } else { 0.0 },
        seed,
    }
}

pub fn forward_hidden(
    ckpt: &ModelCheckpoint,
    ids: &[usize],
    mode: AttentionMode,
    training: bool,
    seed: u64,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = Bound::bind(&mut g, &ckpt.params);
    let h = forward_hidden_graph(&mut g, &bound, &ckpt.config, ids, spec_for(ckpt, mode, training, seed))?;
    Ok(g.tensor(h))
}

pub fn forward_logits(
    ckpt: &ModelCheckpoint,
    ids: &[usize],
    mode: AttentionMode,
    training: bool,
    seed: u64,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = Bound::bind(&mut g, &ckpt.params);
    let l = forward_logits_graph(&mut g, &bound, &ckpt.config, ids, spec_for(ckpt, mode, training, seed))?;
    Ok(g.tensor(l))
}
