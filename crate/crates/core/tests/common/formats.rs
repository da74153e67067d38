//! write → read → write on fuzzed instances of every persisted format.

use std::collections::BTreeMap;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use llm2rec::data::InteractionDataset;
use llm2rec::embedding::{EmbeddingMode, EmbeddingTable};
use llm2rec::eval::{Cells, Metric, MetricsReport};
use llm2rec::model::{AttentionMode, ModelCheckpoint, ModelConfig, StageTag};
use llm2rec::recommender::{RecConfig, RecKind, RecModel};
use llm2rec::tokenizer::Vocabulary;

pub const CASES: u32 = 64;

fn runner() -> TestRunner {
    TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    })
}

/// Any bit pattern now and then, ordinary values otherwise.
fn fill(values: &mut [f64], r: &mut ChaCha8Rng) {
    for v in values {
        *v = match r.random_range(0..10) {
            0 => f64::from_bits(r.random()),
            1 => -0.0,
            _ => r.random_range(-3.0..3.0),
        };
    }
}

fn stage(b: u8) -> StageTag {
    StageTag::from_u8(b % 4).unwrap()
}

fn check(same: bool, what: &str) -> Result<(), TestCaseError> {
    if same {
        Ok(())
    } else {
        Err(TestCaseError::fail(format!("{what} changed on rewrite")))
    }
}

pub fn checkpoint() -> Result<(), String> {
    let strat = (1usize..30, 1usize..4, 1usize..4, 1usize..3, 1usize..8, 1usize..12, any::<bool>(), 0.0..0.9f64, any::<u8>(), any::<u64>());
    runner()
        .run(&strat, |(vocab, heads, dh, layers, ffn, ctx, bidir, drop, st, seed)| {
            let cfg = ModelConfig {
                vocab_size: vocab,
                d_model: heads * dh,
                n_layers: layers,
                n_heads: heads,
                d_ffn: ffn,
                max_context: ctx,
                attention_mode: if bidir { AttentionMode::Bidirectional } else { AttentionMode::Causal },
                dropout_rate: drop,
            };
            let mut ck = ModelCheckpoint::init(cfg, seed).unwrap();
            ck.stage = stage(st);
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            for p in ck.params.iter_mut() {
                fill(p.data_mut(), &mut r);
            }
            let first = ck.to_bytes();
            let back = ModelCheckpoint::from_bytes(&first).map_err(|e| TestCaseError::fail(e.to_string()))?;
            check(back.to_bytes() == first, "checkpoint")
        })
        .map_err(|e| e.to_string())
}

pub fn embedding_table() -> Result<(), String> {
    let strat = (prop::collection::vec(".{0,8}", 0..8), 1usize..6, any::<bool>(), any::<u8>(), any::<u64>());
    runner()
        .run(&strat, |(ids, dim, causal, st, seed)| {
            let mut data = vec![0.0; ids.len() * dim];
            fill(&mut data, &mut ChaCha8Rng::seed_from_u64(seed));
            let t = EmbeddingTable {
                item_ids: ids,
                dim,
                data,
                mode: if causal { EmbeddingMode::CausalEos } else { EmbeddingMode::BidirMean },
                stage: stage(st),
            };
            let first = t.to_bytes();
            let back = EmbeddingTable::from_bytes(&first).map_err(|e| TestCaseError::fail(e.to_string()))?;
            check(back.to_bytes() == first, "embedding table")
        })
        .map_err(|e| e.to_string())
}

pub fn vocabulary() -> Result<(), String> {
    let strat = (prop::collection::vec("[A-Za-z0-9 ,.!?'-]{1,30}", 1..12), 1usize..3);
    runner()
        .run(&strat, |(titles, min_count)| {
            let Ok(v) = Vocabulary::build(&titles, min_count) else {
                return Ok(());
            };
            let first = v.to_text();
            let back = Vocabulary::from_text(&first).map_err(|e| TestCaseError::fail(e.to_string()))?;
            check(back.to_text() == first && back == v, "vocabulary")
        })
        .map_err(|e| e.to_string())
}

fn interactions() -> impl Strategy<Value = (Vec<(String, String)>, Vec<(String, Vec<String>)>)> {
    let items = prop::collection::btree_map("[A-Za-z0-9_.-]{1,8}", "[A-Za-z][A-Za-z0-9 '&-]{0,20}", 1..15);
    let users = prop::collection::btree_map("[A-Za-z0-9_.-]{1,8}", prop::collection::vec(any::<prop::sample::Index>(), 0..10), 0..12);
    (items, users).prop_map(|(items, users)| {
        let items: Vec<(String, String)> = items.into_iter().collect();
        let users = users
            .into_iter()
            .map(|(u, picks)| (u, picks.iter().map(|p| items[p.index(items.len())].0.clone()).collect()))
            .collect();
        (items, users)
    })
}

pub fn interaction_file() -> Result<(), String> {
    runner()
        .run(&(interactions(), any::<bool>()), |((items, users), stamped)| {
            let ds = InteractionDataset::from_parts(items, users).map_err(|e| TestCaseError::fail(e.to_string()))?;
            // a timestamped source parses to the same dataset
            let source = if stamped {
                let cat = ds.catalog();
                let mut s = String::new();
                for i in 0..cat.len() {
                    s.push_str(&format!("ITEM\t{}\t{}\n", cat.id(i), cat.title(i)));
                }
                for u in ds.users().iter().rev() {
                    let list: Vec<String> = u.items.iter().enumerate().map(|(t, &i)| format!("{}@{}", cat.id(i), 100 + t)).collect();
                    s.push_str(&format!("USER\t{}\t{}\n", u.id, list.join(",")));
                }
                InteractionDataset::parse(&s).map_err(|e| TestCaseError::fail(e.to_string()))?
            } else {
                ds.clone()
            };
            check(source == ds, "timestamped source")?;
            let first = ds.to_text();
            let back = InteractionDataset::parse(&first).map_err(|e| TestCaseError::fail(e.to_string()))?;
            check(back.to_text() == first && back == ds, "interaction file")
        })
        .map_err(|e| e.to_string())
}

fn cells() -> impl Strategy<Value = Cells> {
    prop::collection::btree_map((any::<bool>(), 1usize..200), any::<f64>(), 0..6).prop_map(|m| {
        m.into_iter()
            .map(|((recall, k), v)| ((if recall { Metric::Recall } else { Metric::Ndcg }, k), v))
            .collect()
    })
}

pub fn machine_report() -> Result<(), String> {
    let strat = (
        cells(),
        prop::collection::btree_map(any::<u64>(), cells(), 0..4),
        any::<usize>(),
        prop::collection::btree_map("[a-z_][a-z0-9_.]{0,10}", "[^\t\n\r]{0,20}", 0..5),
    );
    runner()
        .run(&strat, |(cells, seeds, users, meta)| {
            let meta: BTreeMap<String, String> = meta.into_iter().filter(|(k, _)| k != "users").collect();
            let r = MetricsReport {
                cells,
                users,
                per_seed: seeds.into_iter().rev().collect(),
                meta,
            };
            let first = r.to_machine();
            let back = MetricsReport::from_machine(&first).map_err(|e| TestCaseError::fail(e.to_string()))?;
            check(back.to_machine() == first, "machine report")
        })
        .map_err(|e| e.to_string())
}

pub fn recommender() -> Result<(), String> {
    let strat = (0u8..3, 1usize..6, 1usize..3, 1usize..4, 1usize..5, any::<u64>());
    runner()
        .run(&strat, |(kind, n_items, heads, dh, d_in, seed)| {
            let kind = RecKind::from_tag(16 + kind).unwrap();
            let mut cfg = RecConfig::new(kind);
            cfg.n_heads = heads;
            cfg.d_rec = heads * dh;
            cfg.hidden = dh + 1;
            cfg.max_len = 3;
            cfg.n_layers = 1;
            let ids: Vec<String> = (0..n_items).map(|i| format!("x{i}")).collect();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut data = vec![0.0; n_items * d_in];
            fill(&mut data, &mut r);
            let table = EmbeddingTable {
                item_ids: ids.clone(),
                dim: d_in,
                data,
                mode: EmbeddingMode::BidirMean,
                stage: StageTag::Ic,
            };
            let mut m = RecModel::init(cfg, Some(&table), &ids, seed).map_err(|e| TestCaseError::fail(e.to_string()))?;
            for p in m.params.iter_mut() {
                fill(p.data_mut(), &mut r);
            }
            let first = m.to_bytes();
            let back = RecModel::from_bytes(&first).map_err(|e| TestCaseError::fail(e.to_string()))?;
            check(back.to_bytes() == first, "recommender")
        })
        .map_err(|e| e.to_string())
}

pub const ALL: [(&str, fn() -> Result<(), String>); 6] = [
    ("checkpoint", checkpoint),
    ("embedding table", embedding_table),
    ("vocabulary", vocabulary),
    ("interaction file", interaction_file),
    ("machine report", machine_report),
    ("recommender", recommender),
];
