//! Interaction corpora: parsing, k-core filtering, leave-one-out splitting
//! and batch construction for the three training stages.
//!
//! File format (UTF-8, one record per line, blank lines and `#` comments
//! ignored):
//!
//! ```text
//! ITEM<TAB>item_id<TAB>title
//! USER<TAB>user_id<TAB>item_id[,item_id...]
//! ```
//!
//! Interaction lists are chronological. An entry may carry a timestamp as
//! `item_id@<integer>`; a user whose entries all carry one is stably sorted
//! by it.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::objectives::{make_views, mask_for_mntp, CsftExample, IcExample};
use crate::rng;
use crate::tokenizer::{MaskedSequence, TokenSequence, Vocabulary};

/// Item ids and titles, ordered by id. Item indices are dense positions in
/// this order.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Catalog {
    ids: Vec<String>,
    titles: Vec<String>,
    index: HashMap<String, usize>,
}

impl Catalog {
    fn from_sorted(pairs: Vec<(String, String)>) -> Self {
        let index = pairs
            .iter()
            .enumerate()
            .map(|(i, (id, _))| (id.clone(), i))
            .collect();
        let (ids, titles) = pairs.into_iter().unzip();
        Catalog { ids, titles, index }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, item: usize) -> &str {
        &self.ids[item]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn title(&self, item: usize) -> &str {
        &self.titles[item]
    }

    pub fn titles(&self) -> &[String] {
        &self.titles
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn encode_all(&self, vocab: &Vocabulary) -> Result<Vec<TokenSequence>> {
        self.titles
            .iter()
            .zip(&self.ids)
            .map(|(t, id)| {
                vocab.encode_item(t).map_err(|e| Error::Item {
                    item: id.clone(),
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct User {
    pub id: String,
    pub items: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Parameter(format!("unknown split `{s}` (expected val or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct InteractionDataset {
    catalog: Catalog,
    users: Vec<User>,
    split: bool,
}

fn check_id(kind: &str, id: &str) -> std::result::Result<(), String> {
    if id.is_empty() {
        return Err(format!("empty {kind} id"));
    }
    if id.chars().any(|c| c == ',' || c == '@' || c.is_whitespace() || c.is_control()) {
        return Err(format!("{kind} id `{id}` contains a reserved character"));
    }
    Ok(())
}

impl InteractionDataset {
    /// Builds a dataset from a catalog and per-user item-id lists given in
    /// chronological order.
    pub fn from_parts(items: Vec<(String, String)>, users: Vec<(String, Vec<String>)>) -> Result<Self> {
        let mut items = items;
        items.sort_by(|a, b| a.0.cmp(&b.0));
        for w in items.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Parameter(format!("duplicate item id `{}`", w[0].0)));
            }
        }
        for (id, title) in &items {
            check_id("item", id).map_err(Error::Parameter)?;
            if title.trim().is_empty() || title.contains(['\t', '\n', '\r']) {
                return Err(Error::Parameter(format!("item `{id}` has an invalid title")));
            }
        }
        let catalog = Catalog::from_sorted(items);
        let mut out = Vec::with_capacity(users.len());
        for (uid, list) in users {
            check_id("user", &uid).map_err(Error::Parameter)?;
            let items = list
                .iter()
                .map(|id| catalog.index_of(id).ok_or_else(|| Error::UnknownItem(id.clone())))
                .collect::<Result<Vec<_>>>()?;
            out.push(User { id: uid, items });
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        for w in out.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::Parameter(format!("duplicate user id `{}`", w[0].id)));
            }
        }
        Ok(InteractionDataset {
            catalog,
            users: out,
            split: false,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut items: Vec<(String, String)> = Vec::new();
        let mut seen_items: HashMap<String, (usize, String)> = HashMap::new();
        let mut users: Vec<(String, Vec<String>)> = Vec::new();
        let mut user_lines: Vec<usize> = Vec::new();
        let mut seen_users: HashMap<String, usize> = HashMap::new();

        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::Parse { line: line_no, msg };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(bad(format!("expected 3 tab-separated fields, found {}", fields.len())));
            }
            match fields[0] {
                "ITEM" => {
                    let (id, title) = (fields[1], fields[2]);
                    check_id("item", id).map_err(bad)?;
                    if title.trim().is_empty() {
                        return Err(bad(format!("item `{id}` has an empty title")));
                    }
                    match seen_items.get(id) {
                        Some((first, t)) if t != title => {
                            return Err(bad(format!(
                                "item `{id}` redefined with a different title (first defined on line {first})"
                            )))
                        }
                        Some(_) => {}
                        None => {
                            seen_items.insert(id.to_string(), (line_no, title.to_string()));
                            items.push((id.to_string(), title.to_string()));
                        }
                    }
                }
                "USER" => {
                    let uid = fields[1];
                    check_id("user", uid).map_err(bad)?;
                    if let Some(first) = seen_users.insert(uid.to_string(), line_no) {
                        return Err(bad(format!("user `{uid}` already defined on line {first}")));
                    }
                    let list = parse_interactions(fields[2]).map_err(bad)?;
                    users.push((uid.to_string(), list));
                    user_lines.push(line_no);
                }
                other => return Err(bad(format!("unknown record type `{other}`"))),
            }
        }
        // resolve references with line numbers before building
        for ((_, list), &line) in users.iter().zip(&user_lines) {
            for id in list {
                if !seen_items.contains_key(id) {
                    return Err(Error::Parse {
                        line,
                        msg: Error::UnknownItem(id.clone()).to_string(),
                    });
                }
            }
        }
        Self::from_parts(items, users)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical form: items by id, then users by id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for i in 0..self.catalog.len() {
            out.push_str("ITEM\t");
            out.push_str(self.catalog.id(i));
            out.push('\t');
            out.push_str(self.catalog.title(i));
            out.push('\n');
        }
        for u in &self.users {
            out.push_str("USER\t");
            out.push_str(&u.id);
            out.push('\t');
            let ids: Vec<&str> = u.items.iter().map(|&i| self.catalog.id(i)).collect();
            out.push_str(&ids.join(","));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn users(&self) -> &[User] {
        &self.users
    }

    pub fn is_split(&self) -> bool {
        self.split
    }

    pub fn interaction_count(&self) -> usize {
        self.users.iter().map(|u| u.items.len()).sum()
    }

    /// Training interactions of a user: everything before the validation
    /// item once split, everything otherwise.
    pub fn train_items<'a>(&self, u: &'a User) -> &'a [usize] {
        if self.split {
            &u.items[..u.items.len() - 2]
        } else {
            &u.items
        }
    }

    /// Held-out item for `split` and the history preceding it.
    pub fn target<'a>(&self, u: &'a User, split: Split) -> Result<(&'a [usize], usize)> {
        if !self.split {
            return Err(Error::State("dataset has not been split".into()));
        }
        let n = u.items.len();
        let at = match split {
            Split::Val => n - 2,
            Split::Test => n - 1,
        };
        Ok((&u.items[..at], u.items[at]))
    }

    /// Iteratively drops users and items with fewer than `k` interactions.
    /// Surviving items keep their relative order and are re-indexed.
    pub fn k_core_filter(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Parameter("k must be at least 1".into()));
        }
        if self.split {
            return Err(Error::State("k-core filtering must run before splitting".into()));
        }
        let n = self.catalog.len();
        let mut item_alive = vec![true; n];
        let mut users: Vec<Vec<usize>> = self.users.iter().map(|u| u.items.clone()).collect();
        let mut user_alive = vec![true; users.len()];
        loop {
            let mut changed = false;
            for (u, list) in users.iter_mut().enumerate() {
                if !user_alive[u] {
                    continue;
                }
                let before = list.len();
                list.retain(|&i| item_alive[i]);
                changed |= list.len() != before;
                if list.len() < k {
                    user_alive[u] = false;
                    changed = true;
                }
            }
            let mut counts = vec![0usize; n];
            for (u, list) in users.iter().enumerate() {
                if user_alive[u] {
                    for &i in list {
                        counts[i] += 1;
                    }
                }
            }
            for i in 0..n {
                if item_alive[i] && counts[i] < k {
                    item_alive[i] = false;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let mut remap = vec![usize::MAX; n];
        let mut pairs = Vec::new();
        for i in 0..n {
            if item_alive[i] {
                remap[i] = pairs.len();
                pairs.push((self.catalog.id(i).to_string(), self.catalog.title(i).to_string()));
            }
        }
        let kept: Vec<User> = self
            .users
            .iter()
            .zip(users)
            .zip(&user_alive)
            .filter(|(_, &alive)| alive)
            .map(|((u, list), _)| User {
                id: u.id.clone(),
                items: list.into_iter().map(|i| remap[i]).collect(),
            })
            .collect();
        if kept.is_empty() || pairs.is_empty() {
            return Err(Error::EmptyCore(k));
        }
        Ok(InteractionDataset {
            catalog: Catalog::from_sorted(pairs),
            users: kept,
            split: false,
        })
    }

    /// Marks each user's last interaction as test and the one before as
    /// validation. Users with fewer than three interactions are dropped.
    pub fn leave_one_out_split(&self) -> Self {
        let users: Vec<User> = self.users.iter().filter(|u| u.items.len() >= 3).cloned().collect();
        let dropped = self.users.len() - users.len();
        if dropped > 0 {
            log::info!("leave-one-out: dropped {dropped} users with fewer than 3 interactions");
        }
        InteractionDataset {
            catalog: self.catalog.clone(),
            users,
            split: true,
        }
    }

    pub fn stats(&self) -> DatasetStats {
        let interactions = self.interaction_count();
        let (val, test) = if self.split {
            (self.users.len(), self.users.len())
        } else {
            (0, 0)
        };
        DatasetStats {
            users: self.users.len(),
            items: self.catalog.len(),
            interactions,
            train: interactions - val - test,
            val,
            test,
        }
    }
}

/// Comma-separated item ids, optionally all `id@timestamp`. An empty field
/// is a user without interactions.
fn parse_interactions(field: &str) -> std::result::Result<Vec<String>, String> {
    if field.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut entries: Vec<(String, Option<i64>)> = Vec::new();
    for raw in field.split(',') {
        let raw = raw.trim();
        let (id, ts) = match raw.split_once('@') {
            Some((id, ts)) => {
                let t = ts
                    .parse::<i64>()
                    .map_err(|_| format!("bad timestamp `{ts}` for item `{id}`"))?;
                (id, Some(t))
            }
            None => (raw, None),
        };
        check_id("item", id)?;
        entries.push((id.to_string(), ts));
    }
    let stamped = entries.iter().filter(|e| e.1.is_some()).count();
    if stamped != 0 && stamped != entries.len() {
        return Err("either all or none of a user's interactions carry timestamps".into());
    }
    if stamped > 0 {
        entries.sort_by_key(|e| e.1);
    }
    Ok(entries.into_iter().map(|e| e.0).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// `9517` -> `9,517`.
pub fn group_thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "#Users\t#Items\t#Interactions\t#Train\t#Val\t#Test")?;
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}",
            group_thousands(self.users),
            group_thousands(self.items),
            group_thousands(self.interactions),
            group_thousands(self.train),
            group_thousands(self.val),
            group_thousands(self.test)
        )
    }
}

/// One next-item example per user and per training position `p >= 1`,
/// conditioned on at most `max_items` preceding training items.
pub fn build_csft_examples(
    ds: &InteractionDataset,
    vocab: &Vocabulary,
    max_items: usize,
) -> Result<Vec<CsftExample>> {
    if !ds.is_split() {
        return Err(Error::State("CSFT examples need a split dataset".into()));
    }
    let cat = ds.catalog();
    let mut out = Vec::new();
    for u in ds.users() {
        let train = ds.train_items(u);
        for p in 1..train.len() {
            let lo = p.saturating_sub(max_items);
            let history: Vec<&str> = train[lo..p].iter().map(|&i| cat.title(i)).collect();
            out.push(CsftExample::new(vocab, &history, cat.title(train[p]), max_items)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MntpBatch {
    pub items: Vec<usize>,
    pub seqs: Vec<MaskedSequence>,
}

/// Samples `batch_size` titles uniformly with replacement among items whose
/// title has at least two tokens (a one-token title has no scorable mask).
pub fn sample_mntp_batch(
    encoded: &[TokenSequence],
    batch_size: usize,
    mask_rate: f64,
    seed: u64,
) -> Result<MntpBatch> {
    let eligible: Vec<usize> = (0..encoded.len()).filter(|&i| encoded[i].len() >= 2).collect();
    if eligible.is_empty() {
        return Err(Error::Parameter("no catalog title has two or more tokens".into()));
    }
    let mut r = rng::stream(seed);
    let mut items = Vec::with_capacity(batch_size);
    let mut seqs = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let item = eligible[r.random_range(0..eligible.len())];
        seqs.push(mask_for_mntp(&encoded[item], mask_rate, r.next_u64())?);
        items.push(item);
    }
    Ok(MntpBatch { items, seqs })
}

/// Samples `batch_size` distinct items, each with its pair of view seeds.
pub fn sample_ic_batch(encoded: &[TokenSequence], batch_size: usize, seed: u64) -> Result<Vec<IcExample>> {
    if batch_size > encoded.len() {
        return Err(Error::Parameter(format!(
            "IC batch of {batch_size} needs at least as many catalog items, found {}",
            encoded.len()
        )));
    }
    let mut r = rng::stream(seed);
    let picks = index::sample(&mut r, encoded.len(), batch_size);
    Ok(picks
        .into_iter()
        .map(|item| IcExample {
            pair: make_views(item, r.next_u64()),
            ids: encoded[item].ids.clone(),
        })
        .collect())
}
