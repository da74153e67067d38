//! Clustered toy corpus. Items fall into latent clusters and users mostly
//! interact within one cluster, so co-occurrence carries a clear
//! collaborative signal. Titles are pairs of invented words that are unique
//! across the catalog: nothing in the text itself reveals the clusters.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub clusters: usize,
    pub items_per_cluster: usize,
    pub users: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that each interaction stays in the user's home cluster.
    pub within: f64,
    pub words_per_title: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            clusters: 4,
            items_per_cluster: 10,
            users: 300,
            min_len: 6,
            max_len: 9,
            within: 0.95,
            words_per_title: 2,
            seed: 20240501,
        }
    }
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 6] = ["", "n", "r", "l", "s", "x"];

fn word(r: &mut impl Rng) -> String {
    let syllables = r.random_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[r.random_range(0..ONSETS.len())]);
        w.push_str(VOWELS[r.random_range(0..VOWELS.len())]);
        w.push_str(CODAS[r.random_range(0..CODAS.len())]);
    }
    w
}

/// Cluster of item index `i` in a generated corpus.
pub fn cluster_of(spec: &SyntheticSpec, item: usize) -> usize {
    item / spec.items_per_cluster
}

pub fn generate(spec: &SyntheticSpec) -> Result<InteractionDataset> {
    if spec.clusters == 0 || spec.items_per_cluster == 0 || spec.users == 0 {
        return Err(Error::Parameter("synthetic corpus needs clusters, items and users".into()));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len || !(0.0..=1.0).contains(&spec.within) {
        return Err(Error::Parameter("invalid synthetic sequence parameters".into()));
    }
    let n_items = spec.clusters * spec.items_per_cluster;
    if spec.max_len > n_items {
        return Err(Error::Parameter("max_len exceeds the catalog".into()));
    }
    let mut r = rng::stream(spec.seed);

    let mut used = HashSet::new();
    let mut items = Vec::with_capacity(n_items);
    for i in 0..n_items {
        let mut words = Vec::with_capacity(spec.words_per_title);
        while words.len() < spec.words_per_title {
            let w = word(&mut r);
            if used.insert(w.clone()) {
                let mut c = w.chars();
                let cap: String = c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default();
                words.push(cap);
            }
        }
        items.push((format!("i{i:03}"), words.join(" ")));
    }

    let mut users = Vec::with_capacity(spec.users);
    for u in 0..spec.users {
        let home = r.random_range(0..spec.clusters);
        let len = r.random_range(spec.min_len..=spec.max_len);
        let mut inside: Vec<usize> = (0..spec.items_per_cluster).map(|k| home * spec.items_per_cluster + k).collect();
        inside.shuffle(&mut r);
        let mut outside: Vec<usize> = (0..n_items).filter(|&i| i / spec.items_per_cluster != home).collect();
        outside.shuffle(&mut r);
        let mut seq = Vec::with_capacity(len);
        while seq.len() < len {
            let stay = r.random::<f64>() < spec.within;
            let next = if (stay && !inside.is_empty()) || outside.is_empty() {
                inside.pop()
            } else {
                outside.pop()
            };
            match next {
                Some(i) => seq.push(items[i].0.clone()),
                None => break,
            }
        }
        users.push((format!("u{u:04}"), seq));
    }
    InteractionDataset::from_parts(items, users)
}
