//! Desk-scale runs on the bundled corpus: cluster structure of the item
//! embeddings and downstream SASRec quality per embedding source.

use std::time::Instant;

use llm2rec::config::PipelineConfig;
use llm2rec::embedding::{embed_corpus, EmbeddingMode, EmbeddingTable};
use llm2rec::eval::Metric;
use llm2rec::model::{ModelCheckpoint, StageTag};
use llm2rec::pipeline::{evaluate_test, init_base, load_raw, prepare, run_stage, train_downstream, Prepared};
use llm2rec::recommender::RecKind;

pub const SEEDS: [u64; 3] = [1, 2, 3];
pub const ITEMS_PER_CLUSTER: usize = 10;

/// Embedding sources compared downstream, in report order.
pub const SOURCES: [&str; 6] = ["base_bidir", "base_causal", "csft", "mntp", "ic", "id_baseline"];

pub struct SeedRun {
    pub seed: u64,
    /// Within minus cross-cluster mean cosine, bidir-mean embeddings.
    pub gap_base: f64,
    pub gap_csft: f64,
    pub csft_secs: f64,
    pub downstream_secs: f64,
    /// `(source, test Recall@10, test NDCG@10)` in `SOURCES` order.
    pub scores: Vec<(&'static str, f64, f64)>,
}

impl SeedRun {
    pub fn get(&self, source: &str) -> (f64, f64) {
        let (_, r, n) = self.scores.iter().find(|s| s.0 == source).unwrap();
        (*r, *n)
    }
}

/// Cluster of a bundled-corpus item: ids are `i<index>` and clusters are
/// consecutive blocks of ten.
pub fn cluster(id: &str) -> usize {
    id[1..].parse::<usize>().unwrap() / ITEMS_PER_CLUSTER
}

/// Mean within-cluster minus mean cross-cluster cosine over all item pairs.
pub fn cluster_gap(t: &EmbeddingTable) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for i in 0..a.len() {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        dot / (na.sqrt() * nb.sqrt())
    };
    let (mut w, mut nw, mut c, mut nc) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..t.len() {
        for j in 0..i {
            let s = cos(t.row(i), t.row(j));
            if cluster(&t.item_ids[i]) == cluster(&t.item_ids[j]) {
                w += s;
                nw += 1.0;
            } else {
                c += s;
                nc += 1.0;
            }
        }
    }
    w / nw - c / nc
}

fn table(ck: &ModelCheckpoint, prep: &Prepared, mode: EmbeddingMode) -> EmbeddingTable {
    embed_corpus(ck, prep.dataset.catalog(), &prep.vocab, mode, true).unwrap()
}

pub fn run_seed(seed: u64) -> SeedRun {
    let mut cfg = PipelineConfig::desk();
    cfg.seed = seed;
    let prep = prepare(&cfg, &load_raw(None).unwrap()).unwrap();
    let base = init_base(&cfg, &prep.vocab).unwrap();
    let t0 = Instant::now();
    let (csft, _) = run_stage(&cfg, &prep, &base, StageTag::Csft).unwrap();
    let csft_secs = t0.elapsed().as_secs_f64();
    let (mntp, _) = run_stage(&cfg, &prep, &csft, StageTag::Mntp).unwrap();
    let (ic, _) = run_stage(&cfg, &prep, &mntp, StageTag::Ic).unwrap();

    let tables = [
        Some(table(&base, &prep, EmbeddingMode::BidirMean)),
        Some(table(&base, &prep, EmbeddingMode::CausalEos)),
        Some(table(&csft, &prep, EmbeddingMode::BidirMean)),
        Some(table(&mntp, &prep, EmbeddingMode::BidirMean)),
        Some(table(&ic, &prep, EmbeddingMode::BidirMean)),
        None,
    ];
    let gap_base = cluster_gap(tables[0].as_ref().unwrap());
    let gap_csft = cluster_gap(tables[2].as_ref().unwrap());

    let t0 = Instant::now();
    let scores = SOURCES
        .iter()
        .zip(&tables)
        .map(|(name, t)| {
            let mut c = cfg.clone();
            if t.is_none() {
                c.rec.kind = RecKind::IdBaseline;
            }
            let (model, _) = train_downstream(&c, &prep, t.as_ref()).unwrap();
            let r = evaluate_test(&c, &prep, &model).unwrap();
            (*name, r.get(Metric::Recall, 10).unwrap(), r.get(Metric::Ndcg, 10).unwrap())
        })
        .collect();
    SeedRun {
        seed,
        gap_base,
        gap_csft,
        csft_secs,
        downstream_secs: t0.elapsed().as_secs_f64(),
        scores,
    }
}

/// Mean `(Recall@10, NDCG@10)` of a source over seeds.
pub fn mean(runs: &[SeedRun], source: &str) -> (f64, f64) {
    let n = runs.len() as f64;
    let (r, d) = runs.iter().map(|s| s.get(source)).fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    (r / n, d / n)
}
