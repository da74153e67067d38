//! k-core filtering and the leave-one-out split against direct oracles.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use llm2rec::data::{InteractionDataset, Split};
use llm2rec::Error;

pub const GRAPHS: usize = 100;

/// Random interaction lists; repeats allowed, some users empty.
pub fn random_graph(r: &mut ChaCha8Rng) -> (Vec<String>, Vec<(String, Vec<String>)>) {
    let n_items = r.random_range(3..30);
    let n_users = r.random_range(5..40);
    let items: Vec<String> = (0..n_items).map(|i| format!("it{i}")).collect();
    let users = (0..n_users)
        .map(|u| {
            let len = r.random_range(0..15);
            (format!("us{u}"), (0..len).map(|_| items[r.random_range(0..n_items)].clone()).collect())
        })
        .collect();
    (items, users)
}

pub fn dataset(items: &[String], users: &[(String, Vec<String>)]) -> InteractionDataset {
    let pairs = items.iter().map(|i| (i.clone(), format!("title of {i}"))).collect();
    InteractionDataset::from_parts(pairs, users.to_vec()).unwrap()
}

/// Deletes one offending user or item at a time, recounting from scratch,
/// until every survivor has at least `k` interactions.
pub fn k_core_oracle(items: &[String], users: &[(String, Vec<String>)], k: usize) -> (BTreeSet<String>, Vec<(String, Vec<String>)>) {
    let mut items: BTreeSet<String> = items.iter().cloned().collect();
    let mut users: Vec<(String, Vec<String>)> = users.to_vec();
    loop {
        for (_, list) in users.iter_mut() {
            list.retain(|i| items.contains(i));
        }
        if let Some(p) = users.iter().position(|(_, l)| l.len() < k) {
            users.remove(p);
            continue;
        }
        let weak = items
            .iter()
            .find(|i| users.iter().map(|(_, l)| l.iter().filter(|x| x == i).count()).sum::<usize>() < k)
            .cloned();
        match weak {
            Some(i) => {
                items.remove(&i);
            }
            None => break,
        }
    }
    users.sort();
    (items, users)
}

fn listing(ds: &InteractionDataset) -> (BTreeSet<String>, Vec<(String, Vec<String>)>) {
    let cat = ds.catalog();
    let items = cat.ids().iter().cloned().collect();
    let users = ds
        .users()
        .iter()
        .map(|u| (u.id.clone(), u.items.iter().map(|&i| cat.id(i).to_string()).collect()))
        .collect();
    (items, users)
}

/// `(oracle mismatches, idempotence failures, non-empty cores)` over
/// `GRAPHS` random graphs.
pub fn k_core_failures(seed: u64) -> (usize, usize, usize) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (mut wrong, mut unstable, mut nonempty) = (0, 0, 0);
    for _ in 0..GRAPHS {
        let (items, users) = random_graph(&mut r);
        let k = r.random_range(1..6);
        let ds = dataset(&items, &users);
        let (oi, ou) = k_core_oracle(&items, &users, k);
        match ds.k_core_filter(k) {
            Ok(f) => {
                nonempty += 1;
                if listing(&f) != (oi, ou) {
                    wrong += 1;
                }
                match f.k_core_filter(k) {
                    Ok(again) if again == f => {}
                    _ => unstable += 1,
                }
            }
            Err(Error::EmptyCore(_)) if ou.is_empty() || oi.is_empty() => {}
            Err(_) => wrong += 1,
        }
    }
    (wrong, unstable, nonempty)
}

/// Users whose split disagrees with "last → test, second-to-last → val,
/// rest → train" (or who survive with fewer than three interactions).
pub fn split_failures(seed: u64, corpora: usize) -> usize {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..corpora {
        let (items, users) = random_graph(&mut r);
        let ds = dataset(&items, &users);
        let split = ds.leave_one_out_split();
        let kept: Vec<&(String, Vec<String>)> = users.iter().filter(|(_, l)| l.len() >= 3).collect();
        if split.users().len() != kept.len() {
            bad += 1;
            continue;
        }
        let cat = split.catalog();
        let ids = |xs: &[usize]| xs.iter().map(|&i| cat.id(i).to_string()).collect::<Vec<_>>();
        for u in split.users() {
            let Some((_, list)) = kept.iter().find(|(id, _)| *id == u.id) else {
                bad += 1;
                continue;
            };
            let n = list.len();
            let (vh, vt) = split.target(u, Split::Val).unwrap();
            let (th, tt) = split.target(u, Split::Test).unwrap();
            let ok = cat.id(tt) == list[n - 1]
                && cat.id(vt) == list[n - 2]
                && ids(split.train_items(u)) == list[..n - 2]
                && ids(vh) == list[..n - 2]
                && ids(th) == list[..n - 1];
            if !ok {
                bad += 1;
            }
        }
    }
    bad
}
