//! Ranking and metrics against sort-and-scan oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use llm2rec::eval::{full_rank, ndcg_at_k, rank_of, recall_at_k};

pub const MATRICES: usize = 1000;
pub const USERS: usize = 100;
pub const ITEMS: usize = 50;
const KS: [usize; 5] = [1, 5, 10, 20, 50];

/// Candidates by repeatedly scanning for the best remaining one: highest
/// score, then lowest id.
pub fn scan_rank(scores: &[f64], exclude: &[usize]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..scores.len()).filter(|i| !exclude.contains(i)).collect();
    let mut out = Vec::with_capacity(left.len());
    while !left.is_empty() {
        let mut best = 0;
        for j in 1..left.len() {
            let (a, b) = (left[j], left[best]);
            if scores[a] > scores[b] || (scores[a] == scores[b] && a < b) {
                best = j;
            }
        }
        out.push(left.remove(best));
    }
    out
}

fn hit_rank(list: &[usize], target: usize) -> Option<usize> {
    for (p, &i) in list.iter().enumerate() {
        if i == target {
            return Some(p + 1);
        }
    }
    None
}

pub fn oracle_recall(lists: &[Vec<usize>], targets: &[usize], k: usize) -> f64 {
    let mut hits = 0usize;
    for (l, &t) in lists.iter().zip(targets) {
        if let Some(r) = hit_rank(l, t) {
            if r <= k {
                hits += 1;
            }
        }
    }
    hits as f64 / targets.len() as f64
}

pub fn oracle_ndcg(lists: &[Vec<usize>], targets: &[usize], k: usize) -> f64 {
    let mut sum = 0.0;
    for (l, &t) in lists.iter().zip(targets) {
        if let Some(r) = hit_rank(l, t) {
            if r <= k {
                sum += 1.0 / ((r + 1) as f64).log2();
            }
        }
    }
    sum / targets.len() as f64
}

/// A random 100 × 50 problem. Half the matrices draw scores from six levels
/// so ties are common.
fn problem(r: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<Vec<usize>>, Vec<usize>) {
    let tied = r.random_bool(0.5);
    let scores = (0..USERS)
        .map(|_| {
            (0..ITEMS)
                .map(|_| if tied { r.random_range(0..6) as f64 } else { r.random_range(-1.0..1.0) })
                .collect()
        })
        .collect();
    let excludes = (0..USERS)
        .map(|_| (0..r.random_range(0..12)).map(|_| r.random_range(0..ITEMS)).collect())
        .collect();
    let targets = (0..USERS).map(|_| r.random_range(0..ITEMS)).collect();
    (scores, excludes, targets)
}

/// Count of disagreements between the library and the oracles over
/// `MATRICES` random problems.
pub fn mismatches(seed: u64) -> usize {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..MATRICES {
        let (scores, excludes, targets) = problem(&mut r);
        let mut lib = Vec::with_capacity(USERS);
        let mut ora = Vec::with_capacity(USERS);
        for u in 0..USERS {
            let l = full_rank(&scores[u], &excludes[u]).unwrap();
            let o = scan_rank(&scores[u], &excludes[u]);
            if rank_of(&scores[u], &excludes[u], targets[u]).unwrap() != hit_rank(&o, targets[u]) {
                bad += 1;
            }
            if l != o {
                bad += 1;
            }
            lib.push(l);
            ora.push(o);
        }
        for k in KS {
            if recall_at_k(&lib, &targets, k).unwrap() != oracle_recall(&ora, &targets, k) {
                bad += 1;
            }
            if ndcg_at_k(&lib, &targets, k).unwrap() != oracle_ndcg(&ora, &targets, k) {
                bad += 1;
            }
        }
    }
    bad
}

/// Mean Recall@10 of uniform random scores without exclusion, its
/// expectation `10 / ITEMS` and the standard error of the mean.
pub fn random_recall(seed: u64) -> (f64, f64, f64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..MATRICES {
        let lists: Vec<Vec<usize>> = (0..USERS)
            .map(|_| {
                let s: Vec<f64> = (0..ITEMS).map(|_| r.random()).collect();
                full_rank(&s, &[]).unwrap()
            })
            .collect();
        let targets: Vec<usize> = (0..USERS).map(|_| r.random_range(0..ITEMS)).collect();
        total += recall_at_k(&lists, &targets, 10).unwrap();
    }
    let p = 10.0 / ITEMS as f64;
    let n = (MATRICES * USERS) as f64;
    (total / MATRICES as f64, p, (p * (1.0 - p) / n).sqrt())
}
