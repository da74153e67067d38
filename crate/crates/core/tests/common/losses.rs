//! Library losses against the loop-level oracle in `naive`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{tiny_model, titles};
use super::naive;
use llm2rec::model::{AttentionMode, Bound};
use llm2rec::objectives::{
    csft_loss, ic_loss, make_views, mask_for_mntp, mntp_loss, CsftExample, IcAugmentation, IcExample,
};
use llm2rec::tensor::Graph;
use llm2rec::tokenizer::{mask_tokens, TokenSequence, Vocabulary};

pub const TOLERANCE: f64 = 1e-10;
pub const BATCHES: usize = 25;
const TAU: f64 = 0.2;

fn setup(r: &mut ChaCha8Rng) -> (Vec<String>, Vocabulary) {
    let words = titles(r, 10, 1, 3);
    let vocab = Vocabulary::build(&words, 1).unwrap();
    assert!(vocab.size() <= 50);
    (words, vocab)
}

pub fn csft_deviation(r: &mut ChaCha8Rng) -> f64 {
    let (words, vocab) = setup(r);
    let ck = tiny_model(r, &vocab, AttentionMode::Causal, 0.0);
    let batch: Vec<CsftExample> = (0..r.random_range(1..=8))
        .map(|_| {
            let hist: Vec<&String> = (0..r.random_range(1..5)).map(|_| &words[r.random_range(0..10)]).collect();
            CsftExample::new(&vocab, &hist, &words[r.random_range(0..10)], 3).unwrap()
        })
        .collect();
    let mut g = Graph::new();
    let b = Bound::bind(&mut g, &ck.params);
    let l = csft_loss(&mut g, &b, &ck.config, &batch, None).unwrap();
    let got = g.scalar(l);
    let plain: Vec<(Vec<usize>, Vec<bool>)> = batch.iter().map(|e| (e.seq.ids.clone(), e.seq.loss_mask.clone())).collect();
    (got - naive::csft(&ck, &plain)).abs()
}

pub fn mntp_deviation(r: &mut ChaCha8Rng) -> f64 {
    let (words, vocab) = setup(r);
    let ck = tiny_model(r, &vocab, AttentionMode::Bidirectional, 0.0);
    let multi: Vec<&String> = words.iter().filter(|w| w.contains(' ')).collect();
    let batch: Vec<_> = (0..r.random_range(1..=8))
        .map(|_| {
            let seq = if r.random_bool(0.5) || multi.is_empty() {
                vocab.encode_sequence(&[&words[r.random_range(0..10)], &words[r.random_range(0..10)]], 10).unwrap()
            } else {
                vocab.encode_item(multi[r.random_range(0..multi.len())]).unwrap()
            };
            mask_for_mntp(&seq, r.random_range(0.1..0.6), r.random()).unwrap()
        })
        .collect();
    let mut g = Graph::new();
    let b = Bound::bind(&mut g, &ck.params);
    let l = mntp_loss(&mut g, &b, &ck.config, &batch, None).unwrap();
    let got = g.scalar(l);
    let plain: Vec<_> = batch
        .iter()
        .map(|m| (m.seq.ids.clone(), m.original.clone(), m.positions.clone()))
        .collect();
    (got - naive::mntp(&ck, &plain)).abs()
}

pub fn ic_deviation(r: &mut ChaCha8Rng) -> f64 {
    let (words, vocab) = setup(r);
    let token_mask = r.random_bool(0.5);
    let rate = if token_mask { 0.0 } else { 0.2 };
    let ck = tiny_model(r, &vocab, AttentionMode::Bidirectional, rate);
    let batch: Vec<IcExample> = (0..r.random_range(2..=8))
        .map(|i| IcExample {
            pair: make_views(i, r.random()),
            ids: vocab.encode_item(&words[i]).unwrap().ids,
        })
        .collect();
    let aug = if token_mask {
        IcAugmentation::TokenMask(0.3)
    } else {
        IcAugmentation::Dropout
    };
    let mut g = Graph::new();
    let b = Bound::bind(&mut g, &ck.params);
    let l = ic_loss(&mut g, &b, &ck.config, &batch, TAU, aug).unwrap();
    let got = g.scalar(l);

    // views come from the library's samplers; everything after is recomputed
    let view = |ids: &[usize], seed: u64| {
        let h = if token_mask {
            let seq = TokenSequence {
                ids: ids.to_vec(),
                loss_mask: vec![false; ids.len()],
                item_spans: vec![(0, ids.len())],
            };
            naive::hidden(&ck, &mask_tokens(&seq, 0.3, seed).unwrap().seq.ids, true, None)
        } else {
            naive::hidden(&ck, ids, true, Some((rate, seed)))
        };
        naive::mean_pool(&h)
    };
    let z1: Vec<Vec<f64>> = batch.iter().map(|e| view(&e.ids, e.pair.view_seeds[0])).collect();
    let z2: Vec<Vec<f64>> = batch.iter().map(|e| view(&e.ids, e.pair.view_seeds[1])).collect();
    (got - naive::info_nce(&z1, &z2, TAU)).abs()
}

/// Largest absolute deviation per loss over `BATCHES` random batches.
pub fn worst_deviations(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let fs: [(&str, fn(&mut ChaCha8Rng) -> f64); 3] =
        [("csft", csft_deviation), ("mntp", mntp_deviation), ("ic", ic_deviation)];
    fs.iter()
        .map(|(name, f)| (*name, (0..BATCHES).map(|_| f(&mut r)).fold(0.0, f64::max)))
        .collect()
}
