//! Full-ranking evaluation with a single held-out target per user, and the
//! metrics report (text table and line-oriented machine format).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{InteractionDataset, Split};
use crate::error::{Error, Result};

/// Anything that scores every catalog item given a user history.
pub trait Scorer: Sync {
    fn num_items(&self) -> usize;
    fn scores(&self, history: &[usize]) -> Result<Vec<f64>>;

    fn score_batch(&self, histories: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        histories.iter().map(|h| self.scores(h)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RankExclusion {
    /// Items in the user's history are removed from the candidates.
    #[default]
    Seen,
    /// Every catalog item is a candidate.
    None,
}

impl std::fmt::Display for RankExclusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RankExclusion::Seen => "seen",
            RankExclusion::None => "none",
        })
    }
}

impl FromStr for RankExclusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seen" => Ok(RankExclusion::Seen),
            "none" => Ok(RankExclusion::None),
            _ => Err(Error::Parameter(format!("unknown rank exclusion `{s}` (expected seen or none)"))),
        }
    }
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Parameter(format!("NaN score for item {i}")));
    }
    Ok(())
}

/// Item ids by descending score, ties by ascending id, excluded ids removed.
pub fn full_rank(scores: &[f64], exclude: &[usize]) -> Result<Vec<usize>> {
    check_scores(scores)?;
    let mut skip = vec![false; scores.len()];
    for &e in exclude {
        if e < skip.len() {
            skip[e] = true;
        }
    }
    let mut ids: Vec<usize> = (0..scores.len()).filter(|&i| !skip[i]).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(ids)
}

/// 1-based rank `full_rank` would give `target`, without sorting; `None`
/// if the target is excluded.
pub fn rank_of(scores: &[f64], exclude: &[usize], target: usize) -> Result<Option<usize>> {
    check_scores(scores)?;
    if target >= scores.len() {
        return Err(Error::Index(format!("target {target} outside {} items", scores.len())));
    }
    let mut skip = vec![false; scores.len()];
    for &e in exclude {
        if e < skip.len() {
            skip[e] = true;
        }
    }
    if skip[target] {
        return Ok(None);
    }
    let t = scores[target];
    let ahead = (0..scores.len())
        .filter(|&i| !skip[i] && (scores[i] > t || (scores[i] == t && i < target)))
        .count();
    Ok(Some(ahead + 1))
}

fn check_k(k: usize, ranked: usize, targets: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Parameter("k must be positive".into()));
    }
    if ranked != targets {
        return Err(Error::Parameter(format!("{ranked} ranked lists for {targets} targets")));
    }
    if targets == 0 {
        return Err(Error::Parameter("no users to evaluate".into()));
    }
    Ok(())
}

fn position(list: &[usize], target: usize) -> Option<usize> {
    list.iter().position(|&i| i == target).map(|p| p + 1)
}

pub fn recall_at_k(ranked: &[Vec<usize>], targets: &[usize], k: usize) -> Result<f64> {
    check_k(k, ranked.len(), targets.len())?;
    let hits = ranked
        .iter()
        .zip(targets)
        .filter(|(l, &t)| position(l, t).is_some_and(|r| r <= k))
        .count();
    Ok(hits as f64 / targets.len() as f64)
}

pub fn ndcg_at_k(ranked: &[Vec<usize>], targets: &[usize], k: usize) -> Result<f64> {
    check_k(k, ranked.len(), targets.len())?;
    let sum: f64 = ranked
        .iter()
        .zip(targets)
        .map(|(l, &t)| gain(position(l, t), k))
        .sum();
    Ok(sum / targets.len() as f64)
}

fn gain(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Recall,
    Ndcg,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Recall => "recall",
            Metric::Ndcg => "ndcg",
        }
    }

    fn short(self) -> &'static str {
        match self {
            Metric::Recall => "R",
            Metric::Ndcg => "N",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recall" => Ok(Metric::Recall),
            "ndcg" => Ok(Metric::Ndcg),
            _ => Err(Error::Parameter(format!("unknown metric `{s}`"))),
        }
    }
}

pub type Cells = BTreeMap<(Metric, usize), f64>;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricsReport {
    /// Mean over seeds when several are present.
    pub cells: Cells,
    pub users: usize,
    pub per_seed: Vec<(u64, Cells)>,
    pub meta: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn get(&self, metric: Metric, k: usize) -> Option<f64> {
        self.cells.get(&(metric, k)).copied()
    }

    /// Averages single-seed reports cell by cell and keeps each seed's cells.
    pub fn mean_of(runs: &[(u64, MetricsReport)]) -> Result<MetricsReport> {
        let Some((_, first)) = runs.first() else {
            return Err(Error::Parameter("no runs to average".into()));
        };
        let mut cells = Cells::new();
        for key in first.cells.keys() {
            let mut sum = 0.0;
            for (_, r) in runs {
                sum += r
                    .cells
                    .get(key)
                    .ok_or_else(|| Error::Parameter("runs report different metric cells".into()))?;
            }
            cells.insert(*key, sum / runs.len() as f64);
        }
        let mut meta = first.meta.clone();
        let seeds: Vec<String> = runs.iter().map(|(s, _)| s.to_string()).collect();
        meta.insert("seeds".into(), seeds.join(","));
        Ok(MetricsReport {
            cells,
            users: first.users,
            per_seed: runs.iter().map(|(s, r)| (*s, r.cells.clone())).collect(),
            meta,
        })
    }

    /// `metric<TAB>k<TAB>value` per cell (per-seed cells as
    /// `metric.seed<S>`), then `meta.<key><TAB><value>` lines.
    pub fn to_machine(&self) -> String {
        let mut out = String::new();
        for ((m, k), v) in &self.cells {
            let _ = writeln!(out, "{}\t{k}\t{v:?}", m.name());
        }
        for (seed, cells) in &self.per_seed {
            for ((m, k), v) in cells {
                let _ = writeln!(out, "{}.seed{seed}\t{k}\t{v:?}", m.name());
            }
        }
        let _ = writeln!(out, "meta.users\t{}", self.users);
        for (key, v) in &self.meta {
            let _ = writeln!(out, "meta.{key}\t{v}");
        }
        out
    }

    pub fn from_machine(text: &str) -> Result<Self> {
        let mut r = MetricsReport::default();
        let mut seeds: BTreeMap<u64, Cells> = BTreeMap::new();
        let mut seed_order: Vec<u64> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let bad = |msg: &str| Error::Parse {
                line: n + 1,
                msg: msg.to_string(),
            };
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("meta.") {
                let (key, value) = rest.split_once('\t').ok_or_else(|| bad("meta line without a value"))?;
                if key == "users" {
                    r.users = value.parse().map_err(|_| bad("bad user count"))?;
                } else {
                    r.meta.insert(key.to_string(), value.to_string());
                }
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad("expected metric, k and value"));
            }
            let k: usize = f[1].parse().map_err(|_| bad("bad k"))?;
            let v: f64 = f[2].parse().map_err(|_| bad("bad value"))?;
            match f[0].split_once(".seed") {
                Some((m, s)) => {
                    let seed: u64 = s.parse().map_err(|_| bad("bad seed"))?;
                    let m: Metric = m.parse().map_err(|_| bad("unknown metric"))?;
                    if !seeds.contains_key(&seed) {
                        seed_order.push(seed);
                    }
                    seeds.entry(seed).or_default().insert((m, k), v);
                }
                None => {
                    let m: Metric = f[0].parse().map_err(|_| bad("unknown metric"))?;
                    r.cells.insert((m, k), v);
                }
            }
        }
        r.per_seed = seed_order.into_iter().map(|s| (s, seeds.remove(&s).unwrap())).collect();
        Ok(r)
    }

    /// Table row with R@10, N@10, R@20, N@20 to four decimals.
    pub fn to_text(&self, label: &str) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(out, "# {k}: {v}");
        }
        let _ = writeln!(out, "# users: {}", self.users);
        out.push_str(&table_header());
        out.push_str(&self.row(label));
        for (seed, cells) in &self.per_seed {
            let single = MetricsReport {
                cells: cells.clone(),
                ..Default::default()
            };
            out.push_str(&single.row(&format!("  seed {seed}")));
        }
        out
    }

    fn row(&self, label: &str) -> String {
        let mut s = format!("{label:<24}");
        for (m, k) in TABLE_COLUMNS {
            match self.get(m, k) {
                Some(v) => {
                    let _ = write!(s, "\t{v:.4}");
                }
                None => s.push_str("\t-"),
            }
        }
        s.push('\n');
        s
    }
}

const TABLE_COLUMNS: [(Metric, usize); 4] = [
    (Metric::Recall, 10),
    (Metric::Ndcg, 10),
    (Metric::Recall, 20),
    (Metric::Ndcg, 20),
];

fn table_header() -> String {
    let mut s = format!("{:<24}", "model");
    for (m, k) in TABLE_COLUMNS {
        let _ = write!(s, "\t{}@{k}", m.short());
    }
    s.push('\n');
    s
}

/// Relative improvement `(a - b) / b`.
pub fn improvement(a: f64, b: f64) -> f64 {
    (a - b) / b
}

/// Several labelled reports in one table plus a `%Improv.` row comparing
/// the first report against the best of the others, per column.
pub fn comparison_table(rows: &[(&str, &MetricsReport)]) -> String {
    let mut out = table_header();
    for (label, r) in rows {
        out.push_str(&r.row(label));
    }
    if rows.len() >= 2 {
        let mut s = format!("{:<24}", "%Improv.");
        for (m, k) in TABLE_COLUMNS {
            let a = rows[0].1.get(m, k);
            let best = rows[1..].iter().filter_map(|(_, r)| r.get(m, k)).fold(None, |acc: Option<f64>, v| {
                Some(acc.map_or(v, |a| a.max(v)))
            });
            match (a, best) {
                (Some(a), Some(b)) if b > 0.0 => {
                    let _ = write!(s, "\t{:+.2}%", 100.0 * improvement(a, b));
                }
                _ => s.push_str("\t-"),
            }
        }
        s.push('\n');
        out.push_str(&s);
    }
    out
}

const EVAL_CHUNK: usize = 64;

/// Evaluates every user on `split`: the history is everything before the
/// held-out item, and with [`RankExclusion::Seen`] history items are not
/// candidates (a held-out item that repeats a history item is a miss).
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    ds: &InteractionDataset,
    split: Split,
    ks: &[usize],
    exclusion: RankExclusion,
) -> Result<MetricsReport> {
    if ds.users().is_empty() {
        return Err(Error::Parameter(format!("empty {split} split")));
    }
    if ks.contains(&0) {
        return Err(Error::Parameter("k must be positive".into()));
    }
    if scorer.num_items() != ds.catalog().len() {
        return Err(Error::Parameter(format!(
            "scorer covers {} items, catalog has {}",
            scorer.num_items(),
            ds.catalog().len()
        )));
    }
    let chunks: Vec<Vec<Option<usize>>> = ds
        .users()
        .par_chunks(EVAL_CHUNK)
        .map(|users| {
            let pairs = users.iter().map(|u| ds.target(u, split)).collect::<Result<Vec<_>>>()?;
            let histories: Vec<&[usize]> = pairs.iter().map(|p| p.0).collect();
            let scores = scorer.score_batch(&histories)?;
            pairs
                .iter()
                .zip(&scores)
                .map(|(&(history, target), s)| {
                    let exclude: &[usize] = match exclusion {
                        RankExclusion::Seen => history,
                        RankExclusion::None => &[],
                    };
                    rank_of(s, exclude, target)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let ranks: Vec<Option<usize>> = chunks.concat();
    let n = ranks.len() as f64;
    let mut cells = Cells::new();
    for &k in ks {
        let hits = ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count() as f64;
        let dcg: f64 = ranks.iter().map(|&r| gain(r, k)).sum();
        cells.insert((Metric::Recall, k), hits / n);
        cells.insert((Metric::Ndcg, k), dcg / n);
    }
    let mut meta = BTreeMap::new();
    meta.insert("split".into(), split.to_string());
    meta.insert("rank_exclusion".into(), exclusion.to_string());
    Ok(MetricsReport {
        cells,
        users: ranks.len(),
        per_seed: Vec::new(),
        meta,
    })
}

/// Caps the global rayon pool from `L2R_THREADS` if it is set. Later calls
/// are no-ops.
pub fn init_threads_from_env() {
    if let Some(n) = std::env::var("L2R_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}
