//! The three training losses: next-item token prediction over interaction
//! sequences (CSFT), masked next-token prediction over single titles (MNTP)
//! and in-batch contrastive learning over two views of each title (IC).
//!
//! All losses are mean negative log-likelihoods so learning rates carry
//! over between batch sizes.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::model::{forward_hidden_graph, forward_logits_graph, AttentionMode, Bound, ForwardSpec, ModelConfig};
use crate::rng;
use crate::tensor::{Graph, Var};
use crate::tokenizer::{mask_tokens, MaskedSequence, TokenSequence, Vocabulary, EOS, SEP};

/// One next-item example: history titles joined by `[SEP]`, another
/// `[SEP]`, the target title and `[EOS]`. Only the target tokens and the
/// `[EOS]` carry loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsftExample {
    pub seq: TokenSequence,
}

impl CsftExample {
    pub fn new<S: AsRef<str>>(
        vocab: &Vocabulary,
        history: &[S],
        target: &str,
        max_items: usize,
    ) -> Result<Self> {
        let mut seq = vocab.encode_sequence(history, max_items)?;
        seq.push(SEP, false);
        seq.extend_items(&vocab.encode_item(target)?, true);
        seq.push(EOS, true);
        Self::from_sequence(seq)
    }

    /// Validates that the scored region is a non-empty contiguous suffix
    /// that does not start at position 0.
    pub fn from_sequence(seq: TokenSequence) -> Result<Self> {
        let first = seq
            .loss_mask
            .iter()
            .position(|&m| m)
            .ok_or_else(|| Error::Parameter("CSFT example has no scored position".into()))?;
        if first == 0 || !seq.loss_mask[first..].iter().all(|&m| m) {
            return Err(Error::Parameter(
                "CSFT loss mask must be a contiguous suffix after at least one context token".into(),
            ));
        }
        Ok(CsftExample { seq })
    }

    /// Per-position next-token targets: row `t` predicts `ids[t + 1]` and is
    /// scored iff that token is.
    pub fn next_token_targets(&self) -> (Vec<usize>, Vec<bool>) {
        shifted(&self.seq.ids, &self.seq.loss_mask)
    }
}

fn shifted(ids: &[usize], scored: &[bool]) -> (Vec<usize>, Vec<bool>) {
    let n = ids.len();
    let mut targets = vec![0; n];
    let mut mask = vec![false; n];
    for t in 0..n.saturating_sub(1) {
        targets[t] = ids[t + 1];
        mask[t] = scored[t + 1];
    }
    (targets, mask)
}

/// Token rows for [`token_nll`]: an input sequence plus, for every position,
/// the target predicted from that position's logits.
pub struct TokenRows<'a> {
    pub ids: &'a [usize],
    pub targets: Vec<usize>,
    pub scored: Vec<bool>,
}

/// Dropout applied during a loss evaluation: `None` runs in inference mode;
/// `Some(seed)` uses the config's dropout rate with per-sequence seeds
/// derived from `seed`.
pub type DropoutSeed = Option<u64>;

fn spec(cfg: &ModelConfig, mode: AttentionMode, dropout: DropoutSeed, index: usize) -> ForwardSpec {
    match dropout {
        Some(seed) => ForwardSpec {
            mode,
            dropout: cfg.dropout_rate,
            seed: rng::derive(seed, index as u64),
        },
        None => ForwardSpec::inference(mode),
    }
}

/// Mean NLL over all scored rows of all sequences in the batch.
pub fn token_nll(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    rows: &[TokenRows<'_>],
    mode: AttentionMode,
    dropout: DropoutSeed,
) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let mut logits = Vec::with_capacity(rows.len());
    let mut targets = Vec::new();
    let mut scored = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        if r.targets.len() != r.ids.len() || r.scored.len() != r.ids.len() {
            return Err(Error::dim("token_nll", &[r.ids.len()], &[r.targets.len(), r.scored.len()]));
        }
        logits.push(forward_logits_graph(g, bound, cfg, r.ids, spec(cfg, mode, dropout, i))?);
        targets.extend_from_slice(&r.targets);
        scored.extend_from_slice(&r.scored);
    }
    let all = if logits.len() == 1 { logits[0] } else { g.concat_rows(&logits)? };
    g.softmax_cross_entropy(all, &targets, &scored)
}

fn require_mode(cfg: &ModelConfig, want: AttentionMode, what: &str) -> Result<()> {
    if cfg.attention_mode != want {
        return Err(Error::Attention(format!("{what} requires {want} attention")));
    }
    Ok(())
}

/// CSFT loss: teacher-forced next-token NLL over each example's target
/// title and `[EOS]`, conditioned on the history.
pub fn csft_loss(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    batch: &[CsftExample],
    dropout: DropoutSeed,
) -> Result<Var> {
    require_mode(cfg, AttentionMode::Causal, "CSFT")?;
    let rows: Vec<TokenRows<'_>> = batch
        .iter()
        .map(|ex| {
            let (targets, scored) = ex.next_token_targets();
            TokenRows {
                ids: &ex.seq.ids,
                targets,
                scored,
            }
        })
        .collect();
    token_nll(g, bound, cfg, &rows, AttentionMode::Causal, dropout)
}

/// MNTP rows: a token masked at `p` is predicted from the logits at `p - 1`.
/// Masks at position 0 have no predecessor and are not scored.
pub fn mntp_rows(m: &MaskedSequence) -> TokenRows<'_> {
    let n = m.seq.ids.len();
    let mut targets = vec![0; n];
    let mut scored = vec![false; n];
    for &p in &m.positions {
        if p >= 1 {
            targets[p - 1] = m.original[p];
            scored[p - 1] = true;
        }
    }
    TokenRows {
        ids: &m.seq.ids,
        targets,
        scored,
    }
}

pub fn mntp_loss(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    batch: &[MaskedSequence],
    dropout: DropoutSeed,
) -> Result<Var> {
    require_mode(cfg, AttentionMode::Bidirectional, "MNTP")?;
    let rows: Vec<TokenRows<'_>> = batch.iter().map(mntp_rows).collect();
    if rows.iter().all(|r| !r.scored.iter().any(|&s| s)) {
        return Err(Error::Parameter("MNTP batch has no scorable masked position".into()));
    }
    token_nll(g, bound, cfg, &rows, AttentionMode::Bidirectional, dropout)
}

/// Masks `seq` for MNTP. If the only masked position is 0, a different
/// maskable position is masked as well so at least one target is scorable.
pub fn mask_for_mntp(seq: &TokenSequence, rate: f64, seed: u64) -> Result<MaskedSequence> {
    let mut m = mask_tokens(seq, rate, seed)?;
    if m.positions.iter().all(|&p| p == 0) {
        let rest: Vec<usize> = (1..seq.ids.len())
            .filter(|&p| !crate::tokenizer::is_structural(seq.ids[p]))
            .collect();
        if rest.is_empty() {
            return Err(Error::Tokenizer(
                "MNTP needs a maskable token after the first position".into(),
            ));
        }
        let mut r = rng::stream(rng::derive(seed, 1));
        let p = rest[(r.next_u64() % rest.len() as u64) as usize];
        m.seq.ids[p] = crate::tokenizer::MASK;
        m.positions.push(p);
        m.positions.sort_unstable();
    }
    Ok(m)
}

/// How the two contrastive views of an item differ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum IcAugmentation {
    /// Independent dropout masks inside the model.
    Dropout,
    /// Independent token masking at the given rate, dropout off.
    TokenMask(f64),
}

impl fmt::Display for IcAugmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IcAugmentation::Dropout => f.write_str("dropout"),
            IcAugmentation::TokenMask(_) => f.write_str("token_mask"),
        }
    }
}

impl FromStr for IcAugmentation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dropout" => Ok(IcAugmentation::Dropout),
            "token_mask" => Ok(IcAugmentation::TokenMask(0.2)),
            _ => Err(Error::Parameter(format!("unknown IC augmentation `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentedPair {
    pub item: usize,
    pub view_seeds: [u64; 2],
}

/// Two distinct view seeds for `item`, derived from `seed`.
pub fn make_views(item: usize, seed: u64) -> AugmentedPair {
    let mut r = rng::stream(seed);
    let a = r.next_u64();
    let mut b = r.next_u64();
    while b == a {
        b = r.next_u64();
    }
    AugmentedPair {
        item,
        view_seeds: [a, b],
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IcExample {
    pub pair: AugmentedPair,
    pub ids: Vec<usize>,
}

/// Mean-pooled embedding of one view, `[1 × d_model]`.
pub fn pooled_view(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    ids: &[usize],
    seed: u64,
    aug: IcAugmentation,
) -> Result<Var> {
    let h = match aug {
        IcAugmentation::Dropout => {
            let spec = ForwardSpec {
                mode: AttentionMode::Bidirectional,
                dropout: cfg.dropout_rate,
                seed,
            };
            forward_hidden_graph(g, bound, cfg, ids, spec)?
        }
        IcAugmentation::TokenMask(rate) => {
            let seq = TokenSequence {
                ids: ids.to_vec(),
                loss_mask: vec![false; ids.len()],
                item_spans: vec![(0, ids.len())],
            };
            let masked = mask_tokens(&seq, rate, seed)?;
            forward_hidden_graph(
                g,
                bound,
                cfg,
                &masked.seq.ids,
                ForwardSpec::inference(AttentionMode::Bidirectional),
            )?
        }
    };
    g.mean_rows(h)
}

/// In-batch InfoNCE over cosine similarities: row `i` of `z1` must pick row
/// `i` of `z2` among all rows of `z2`.
pub fn info_nce(g: &mut Graph, z1: Var, z2: Var, temperature: f64) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::Parameter(format!("temperature must be positive, got {temperature}")));
    }
    let n1 = g.l2_normalize_rows(z1)?;
    let n2 = g.l2_normalize_rows(z2)?;
    let t2 = g.transpose(n2)?;
    let sim = g.matmul(n1, t2)?;
    let logits = g.scale(sim, 1.0 / temperature)?;
    let b = g.shape(logits)[0];
    let targets: Vec<usize> = (0..b).collect();
    g.softmax_cross_entropy(logits, &targets, &vec![true; b])
}

pub fn ic_loss(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    batch: &[IcExample],
    temperature: f64,
    aug: IcAugmentation,
) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::Parameter(format!("temperature must be positive, got {temperature}")));
    }
    require_mode(cfg, AttentionMode::Bidirectional, "item-level contrastive learning")?;
    if batch.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let mut first = Vec::with_capacity(batch.len());
    let mut second = Vec::with_capacity(batch.len());
    for ex in batch {
        first.push(pooled_view(g, bound, cfg, &ex.ids, ex.pair.view_seeds[0], aug)?);
        second.push(pooled_view(g, bound, cfg, &ex.ids, ex.pair.view_seeds[1], aug)?);
    }
    let z1 = g.concat_rows(&first)?;
    let z2 = g.concat_rows(&second)?;
    info_nce(g, z1, z2, temperature)
}
