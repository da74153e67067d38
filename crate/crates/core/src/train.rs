//! Stage training loops. Each stage takes the previous stage's checkpoint,
//! switches the attention mode, runs AdamW with a constant learning rate and
//! returns a checkpoint tagged with the new stage.

use rand::seq::SliceRandom;
use rand::RngCore;

use crate::data::{sample_ic_batch, sample_mntp_batch};
use crate::error::{Error, Result};
use crate::model::{AttentionMode, Bound, ModelCheckpoint, StageTag};
use crate::objectives::{csft_loss, ic_loss, mntp_loss, CsftExample, IcAugmentation};
use crate::rng;
use crate::tensor::{AdamW, AdamWConfig, Graph, Var};
use crate::tokenizer::TokenSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct CsftConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub max_items: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MntpConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub mask_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub temperature: f64,
    pub augmentation: IcAugmentation,
}

/// Per-step training losses of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageLog {
    pub stage: StageTag,
    pub losses: Vec<f64>,
}

impl StageLog {
    /// Mean loss over the first and last `n` steps.
    pub fn head_tail(&self, n: usize) -> (f64, f64) {
        let n = n.min(self.losses.len()).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.losses[..n.min(self.losses.len())]), mean(&self.losses[self.losses.len().saturating_sub(n)..]))
    }
}

fn prepare(ckpt: &ModelCheckpoint, stage: StageTag, mode: AttentionMode, dropout: f64) -> Result<ModelCheckpoint> {
    ckpt.require_stage_for(stage)?;
    let mut model = ckpt.with_mode(mode);
    model.config.dropout_rate = dropout;
    model.config.validate()?;
    Ok(model)
}

/// Runs `steps` optimizer steps; `loss_at(step, graph, bound, model)`
/// builds the loss for one step.
fn run<F>(model: &mut ModelCheckpoint, steps: usize, lr: f64, wd: f64, mut loss_at: F) -> Result<Vec<f64>>
where
    F: FnMut(usize, &mut Graph, &Bound, &ModelCheckpoint) -> Result<Var>,
{
    let mut opt = AdamW::new(AdamWConfig::new(lr, wd), &model.params.iter().collect::<Vec<_>>())?;
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut g = Graph::new();
        let bound = Bound::bind(&mut g, &model.params);
        let loss = loss_at(step, &mut g, &bound, model)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        g.backward(loss)?;
        bound.write_grads(&g, &mut model.params);
        opt.step(model.params.iter_mut())?;
        losses.push(value);
        if step % 100 == 0 {
            log::debug!("step {step}: loss {value:.5}");
        }
    }
    Ok(losses)
}

pub fn train_csft(
    ckpt: &ModelCheckpoint,
    examples: &[CsftExample],
    cfg: &CsftConfig,
    seed: u64,
) -> Result<(ModelCheckpoint, StageLog)> {
    if examples.is_empty() {
        return Err(Error::Parameter("no CSFT examples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    let mut model = prepare(ckpt, StageTag::Csft, AttentionMode::Causal, cfg.dropout)?;
    let mut r = rng::stream(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let losses = run(&mut model, cfg.steps, cfg.lr, cfg.weight_decay, |_, g, b, m| {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut r);
                cursor = 0;
            }
            batch.push(examples[order[cursor]].clone());
            cursor += 1;
        }
        let drop_seed = r.next_u64();
        csft_loss(g, b, &m.config, &batch, Some(drop_seed))
    })?;
    model.stage = StageTag::Csft;
    Ok((model, StageLog { stage: StageTag::Csft, losses }))
}

pub fn train_mntp(
    ckpt: &ModelCheckpoint,
    catalog: &[TokenSequence],
    cfg: &MntpConfig,
    seed: u64,
) -> Result<(ModelCheckpoint, StageLog)> {
    let mut model = prepare(ckpt, StageTag::Mntp, AttentionMode::Bidirectional, cfg.dropout)?;
    let losses = run(&mut model, cfg.steps, cfg.lr, cfg.weight_decay, |step, g, b, m| {
        let s = rng::derive(seed, step as u64);
        let batch = sample_mntp_batch(catalog, cfg.batch_size, cfg.mask_rate, s)?;
        mntp_loss(g, b, &m.config, &batch.seqs, Some(rng::mix(s)))
    })?;
    model.stage = StageTag::Mntp;
    Ok((model, StageLog { stage: StageTag::Mntp, losses }))
}

pub fn train_ic(
    ckpt: &ModelCheckpoint,
    catalog: &[TokenSequence],
    cfg: &IcConfig,
    seed: u64,
) -> Result<(ModelCheckpoint, StageLog)> {
    let mut model = prepare(ckpt, StageTag::Ic, AttentionMode::Bidirectional, cfg.dropout)?;
    let batch_size = cfg.batch_size.min(catalog.len());
    if batch_size < cfg.batch_size {
        log::info!("IC batch size capped at catalog size {}", catalog.len());
    }
    let losses = run(&mut model, cfg.steps, cfg.lr, cfg.weight_decay, |step, g, b, m| {
        let batch = sample_ic_batch(catalog, batch_size, rng::derive(seed, step as u64))?;
        ic_loss(g, b, &m.config, &batch, cfg.temperature, cfg.augmentation)
    })?;
    model.stage = StageTag::Ic;
    Ok((model, StageLog { stage: StageTag::Ic, losses }))
}
