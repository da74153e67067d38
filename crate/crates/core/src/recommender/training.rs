use rand::seq::SliceRandom;
use rand::RngCore;

use super::nets::Net;
use super::{RecConfig, RecModel};
use crate::data::{InteractionDataset, Split};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metric};
use crate::rng;
use crate::tensor::{AdamW, AdamWConfig, Graph, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean next-item cross-entropy over all training positions, inference mode.
    pub train_loss: f64,
    pub val_ndcg10: f64,
    pub val_recall10: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub initial_loss: f64,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose snapshot was returned (first maximum of validation NDCG@10).
    pub best_epoch: usize,
}

/// Input/target windows covering every next-item pair of a training
/// sequence, cut backwards from the end into pieces of at most `max_len`.
fn windows(seq: &[usize], max_len: usize) -> Vec<(&[usize], &[usize])> {
    let mut out = Vec::new();
    let mut end = seq.len().saturating_sub(1);
    while end > 0 {
        let start = end.saturating_sub(max_len);
        out.push((&seq[start..end], &seq[start + 1..=end]));
        end = start;
    }
    out.reverse();
    out
}

fn batch_loss(
    g: &mut Graph,
    net: &Net,
    model: &RecModel,
    seqs: &[&[usize]],
    dropout: Option<u64>,
) -> Result<Option<Var>> {
    let mut logits = Vec::new();
    let mut targets = Vec::new();
    let mut w = 0u64;
    for s in seqs {
        for (input, target) in windows(s, model.config.max_len) {
            let seed = dropout.map(|d| rng::derive(d, w));
            w += 1;
            logits.push(net.sequence_logits(g, model, input, seed)?);
            targets.extend_from_slice(target);
        }
    }
    if logits.is_empty() {
        return Ok(None);
    }
    let all = if logits.len() == 1 { logits[0] } else { g.concat_rows(&logits)? };
    let mask = vec![true; targets.len()];
    Ok(Some(g.softmax_cross_entropy(all, &targets, &mask)?))
}

/// Mean training cross-entropy with dropout off, weighted by positions.
fn full_train_loss(model: &RecModel, seqs: &[&[usize]]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(64) {
        let mut g = Graph::new();
        let net = Net::bind(&mut g, model)?;
        let n: usize = chunk.iter().map(|s| s.len().saturating_sub(1)).sum();
        if let Some(l) = batch_loss(&mut g, &net, model, chunk, None)? {
            total += g.scalar(l) * n as f64;
            count += n;
        }
    }
    if count == 0 {
        return Err(Error::Parameter("no training pairs: every user has a single training item".into()));
    }
    Ok(total / count as f64)
}

/// Trains on every next-item pair of the training split with full-catalog
/// softmax, validating NDCG@10 after each epoch. Stops once `patience`
/// epochs pass without a strict improvement and returns the best snapshot.
pub fn train_recommender(
    config: &RecConfig,
    table: Option<&EmbeddingTable>,
    ds: &InteractionDataset,
    seed: u64,
) -> Result<(RecModel, TrainLog)> {
    if !ds.is_split() {
        return Err(Error::State("recommender training needs a split dataset".into()));
    }
    if let Some(t) = table {
        t.check_covers(ds.catalog())?;
    }
    let mut model = RecModel::init(config.clone(), table, ds.catalog().ids(), rng::derive_label(seed, "rec.init"))?;
    let seqs: Vec<&[usize]> = ds.users().iter().map(|u| ds.train_items(u)).collect();
    let initial_loss = full_train_loss(&model, &seqs)?;
    let mut opt = AdamW::new(
        AdamWConfig::new(config.lr, config.weight_decay),
        &model.params.iter().collect::<Vec<_>>(),
    )?;
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut r = rng::stream(rng::derive_label(seed, "rec.order"));
    let mut epochs = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, model.params.clone());
    let mut since_best = 0usize;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&[usize]> = chunk.iter().map(|&i| seqs[i]).collect();
            let mut g = Graph::new();
            let net = Net::bind(&mut g, &model)?;
            let Some(loss) = batch_loss(&mut g, &net, &model, &batch, Some(r.next_u64()))? else {
                continue;
            };
            if !g.scalar(loss).is_finite() {
                return Err(Error::NonFinite("recommender loss"));
            }
            g.backward(loss)?;
            for (v, p) in net.vars().iter().zip(model.params.iter_mut()) {
                g.write_grad(*v, p);
            }
            opt.step(model.params.iter_mut())?;
        }
        let train_loss = full_train_loss(&model, &seqs)?;
        let val = evaluate(&model, ds, Split::Val, &[10], config.val_exclusion)?;
        let ndcg = val.get(Metric::Ndcg, 10).unwrap_or(0.0);
        let recall = val.get(Metric::Recall, 10).unwrap_or(0.0);
        log::debug!("epoch {epoch}: train {train_loss:.4} val ndcg@10 {ndcg:.4}");
        epochs.push(EpochLog {
            epoch,
            train_loss,
            val_ndcg10: ndcg,
            val_recall10: recall,
        });
        if ndcg > best.0 {
            best = (ndcg, epoch, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= config.patience {
            break;
        }
    }
    model.params = best.2;
    Ok((
        model,
        TrainLog {
            initial_loss,
            epochs,
            best_epoch: best.1,
        },
    ))
}
