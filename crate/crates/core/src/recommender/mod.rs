//! Sequential recommenders over a frozen item-embedding table: a trainable
//! linear adapter maps each table row into the recommender space, and the
//! same adapted matrix both feeds the sequence encoder and scores every
//! catalog item.
//!
//! `id_baseline` replaces the table and adapter with a trainable random
//! item embedding and otherwise matches SASRec.

mod nets;
mod training;

pub use nets::{adapt_embeddings, gru4rec_forward, gru_cell, sasrec_forward};
pub use training::{train_recommender, EpochLog, TrainLog};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::{put_u32, Container, Reader};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::eval::{RankExclusion, Scorer};
use crate::model::INIT_STD;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RecKind {
    Sasrec,
    Gru4rec,
    IdBaseline,
}

impl RecKind {
    /// Container tag; distinct from the stage tags of model checkpoints.
    pub fn tag(self) -> u8 {
        match self {
            RecKind::Sasrec => 16,
            RecKind::Gru4rec => 17,
            RecKind::IdBaseline => 18,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            16 => Some(RecKind::Sasrec),
            17 => Some(RecKind::Gru4rec),
            18 => Some(RecKind::IdBaseline),
            _ => None,
        }
    }

    pub fn uses_table(self) -> bool {
        self != RecKind::IdBaseline
    }

    fn attention_blocks(self) -> bool {
        self != RecKind::Gru4rec
    }
}

impl fmt::Display for RecKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecKind::Sasrec => "sasrec",
            RecKind::Gru4rec => "gru4rec",
            RecKind::IdBaseline => "id_baseline",
        })
    }
}

impl FromStr for RecKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sasrec" => Ok(RecKind::Sasrec),
            "gru4rec" => Ok(RecKind::Gru4rec),
            "id_baseline" => Ok(RecKind::IdBaseline),
            _ => Err(Error::Parameter(format!(
                "unknown recommender `{s}` (expected sasrec, gru4rec or id_baseline)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecConfig {
    pub kind: RecKind,
    pub d_rec: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// GRU hidden size.
    pub hidden: usize,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub max_len: usize,
    /// Users per optimizer step.
    pub batch_size: usize,
    /// Candidate rule used for validation-based early stopping.
    pub val_exclusion: RankExclusion,
}

impl RecConfig {
    pub fn new(kind: RecKind) -> Self {
        RecConfig {
            kind,
            d_rec: 128,
            n_layers: 2,
            n_heads: 2,
            hidden: 128,
            dropout: 0.3,
            lr: if kind == RecKind::Gru4rec { 1e-4 } else { 1e-3 },
            weight_decay: 1e-4,
            max_epochs: 500,
            patience: 20,
            max_len: 10,
            batch_size: 64,
            val_exclusion: RankExclusion::Seen,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        for (name, x) in [
            ("d_rec", self.d_rec),
            ("max_epochs", self.max_epochs),
            ("max_len", self.max_len),
            ("batch_size", self.batch_size),
        ] {
            if x == 0 {
                v.push(format!("{name} must be positive"));
            }
        }
        if self.kind.attention_blocks() {
            if self.n_heads == 0 || self.d_rec % self.n_heads != 0 {
                v.push(format!("d_rec {} is not divisible by n_heads {}", self.d_rec, self.n_heads));
            }
        } else if self.hidden == 0 {
            v.push("hidden must be positive".into());
        }
        if self.patience > self.max_epochs {
            v.push(format!("patience {} exceeds max_epochs {}", self.patience, self.max_epochs));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            v.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            v.push("learning rate must be positive and weight decay non-negative".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Named parameter shapes; `d_in` is the table width, `n_items` the
    /// catalog size.
    pub fn param_layout(&self, d_in: usize, n_items: usize) -> Vec<(String, Vec<usize>)> {
        let d = self.d_rec;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        if self.kind.uses_table() {
            out.push(("adapter.w".into(), vec![d_in, d]));
            out.push(("adapter.b".into(), vec![d]));
        } else {
            out.push(("item_emb".into(), vec![n_items, d]));
        }
        if self.kind.attention_blocks() {
            out.push(("pos_emb".into(), vec![self.max_len, d]));
            for l in 0..self.n_layers {
                let p = |s: &str| format!("block{l}.{s}");
                out.push((p("ln1.gain"), vec![d]));
                out.push((p("ln1.bias"), vec![d]));
                for m in ["q", "k", "v", "o"] {
                    out.push((p(&format!("attn.w{m}")), vec![d, d]));
                    out.push((p(&format!("attn.b{m}")), vec![d]));
                }
                out.push((p("ln2.gain"), vec![d]));
                out.push((p("ln2.bias"), vec![d]));
                out.push((p("ffn.w1"), vec![d, d]));
                out.push((p("ffn.b1"), vec![d]));
                out.push((p("ffn.w2"), vec![d, d]));
                out.push((p("ffn.b2"), vec![d]));
            }
            out.push(("ln_f.gain".into(), vec![d]));
            out.push(("ln_f.bias".into(), vec![d]));
        } else {
            let h = self.hidden;
            for g in ["z", "r", "h"] {
                out.push((format!("gru.w_{g}"), vec![d, h]));
                out.push((format!("gru.u_{g}"), vec![h, h]));
                out.push((format!("gru.b_{g}"), vec![h]));
            }
            out.push(("out.w".into(), vec![h, d]));
            out.push(("out.b".into(), vec![d]));
        }
        out
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [
            self.d_rec,
            self.n_layers,
            self.n_heads,
            self.hidden,
            self.max_epochs,
            self.patience,
            self.max_len,
            self.batch_size,
        ] {
            put_u32(&mut out, v);
        }
        for v in [self.dropout, self.lr, self.weight_decay] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(match self.val_exclusion {
            RankExclusion::Seen => 0,
            RankExclusion::None => 1,
        });
        out
    }

    fn from_reader(kind: RecKind, r: &mut Reader<'_>) -> Result<Self> {
        let mut u = [0usize; 8];
        for x in &mut u {
            *x = r.u32()? as usize;
        }
        let dropout = r.f64()?;
        let lr = r.f64()?;
        let weight_decay = r.f64()?;
        let val_exclusion = match r.u8()? {
            0 => RankExclusion::Seen,
            1 => RankExclusion::None,
            b => return Err(Error::Format(format!("unknown exclusion byte {b}"))),
        };
        Ok(RecConfig {
            kind,
            d_rec: u[0],
            n_layers: u[1],
            n_heads: u[2],
            hidden: u[3],
            max_epochs: u[4],
            patience: u[5],
            max_len: u[6],
            batch_size: u[7],
            dropout,
            lr,
            weight_decay,
            val_exclusion,
        })
    }
}

/// A recommender with its parameters and, for table-based kinds, the frozen
/// item table it was trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct RecModel {
    pub config: RecConfig,
    pub item_ids: Vec<String>,
    /// `[items × d_in]`, never updated.
    pub frozen: Option<Tensor>,
    names: Vec<String>,
    pub params: Vec<Tensor>,
}

impl RecModel {
    /// Fresh parameters: truncated normal (std 0.02) matrices, zero biases,
    /// unit layer-norm gains.
    pub fn init(config: RecConfig, table: Option<&EmbeddingTable>, item_ids: &[String], seed: u64) -> Result<Self> {
        config.validate()?;
        let frozen = match (config.kind.uses_table(), table) {
            (true, Some(t)) => {
                if t.item_ids.as_slice() != item_ids {
                    return Err(Error::Parameter(format!(
                        "embedding table ({} items) does not match the catalog ({} items)",
                        t.len(),
                        item_ids.len()
                    )));
                }
                Some(Tensor::new(vec![t.len(), t.dim], t.data.clone())?)
            }
            (true, None) => return Err(Error::Parameter(format!("{} needs an embedding table", config.kind))),
            (false, _) => None,
        };
        if item_ids.is_empty() {
            return Err(Error::Parameter("empty catalog".into()));
        }
        let d_in = frozen.as_ref().map_or(0, |f| f.cols());
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.param_layout(d_in, item_ids.len()) {
            let t = if shape.len() == 2 {
                Tensor::trunc_normal(&shape, INIT_STD, &mut r)?
            } else if name.ends_with("gain") {
                Tensor::full(&shape, 1.0)?
            } else {
                Tensor::zeros(&shape)?
            };
            names.push(name);
            params.push(t.requiring_grad());
        }
        Ok(RecModel {
            config,
            item_ids: item_ids.to_vec(),
            frozen,
            names,
            params,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    /// Adapted item matrix `[items × d_rec]` as a plain tensor.
    pub fn item_matrix(&self) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = nets::Net::bind(&mut g, self)?.items;
        Ok(g.tensor(v))
    }

    pub fn to_container(&self) -> Container {
        let mut config = self.config.to_bytes();
        put_u32(&mut config, self.item_ids.len());
        for id in &self.item_ids {
            put_u32(&mut config, id.len());
            config.extend_from_slice(id.as_bytes());
        }
        let mut records: Vec<(String, Tensor)> = self
            .names
            .iter()
            .cloned()
            .zip(self.params.iter().map(|p| Tensor::new(p.shape().to_vec(), p.data().to_vec()).unwrap()))
            .collect();
        if let Some(f) = &self.frozen {
            records.push(("frozen.table".into(), f.clone()));
        }
        Container {
            tag: self.config.kind.tag(),
            config,
            records,
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let kind = RecKind::from_tag(c.tag).ok_or_else(|| Error::Format(format!("tag {} is not a recommender", c.tag)))?;
        let mut r = Reader::new(&c.config, "recommender config");
        let config = RecConfig::from_reader(kind, &mut r)?;
        let n = r.u32()? as usize;
        let mut item_ids = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32()? as usize;
            item_ids.push(
                String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("item id is not UTF-8".into()))?,
            );
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes in recommender config".into()));
        }
        config.validate()?;
        let mut records = c.records;
        let frozen = if kind.uses_table() {
            match records.pop() {
                Some((name, t)) if name == "frozen.table" => Some(t),
                _ => return Err(Error::Format("missing frozen.table record".into())),
            }
        } else {
            None
        };
        let d_in = frozen.as_ref().map_or(0, |f| f.cols());
        if let Some(f) = &frozen {
            if f.rows() != n {
                return Err(Error::Shape {
                    name: "frozen.table".into(),
                    expected: vec![n, d_in],
                    found: f.shape().to_vec(),
                });
            }
        }
        let layout = config.param_layout(d_in, n);
        if layout.len() != records.len() {
            return Err(Error::Format(format!(
                "expected {} parameter records, found {}",
                layout.len(),
                records.len()
            )));
        }
        let mut names = Vec::with_capacity(layout.len());
        let mut params = Vec::with_capacity(layout.len());
        for ((name, shape), (rname, t)) in layout.into_iter().zip(records) {
            if name != rname || shape != t.shape() {
                return Err(Error::Shape {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
            names.push(name);
            params.push(t.requiring_grad());
        }
        Ok(RecModel {
            config,
            item_ids,
            frozen,
            names,
            params,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    /// Full-catalog scores for several histories at once, inference mode.
    pub fn score_histories(&self, histories: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let net = nets::Net::bind(&mut g, self)?;
        histories
            .iter()
            .map(|h| {
                if h.is_empty() {
                    return Err(Error::Parameter("empty history".into()));
                }
                let s = net.final_scores(&mut g, self, h, None)?;
                Ok(g.value(s).to_vec())
            })
            .collect()
    }
}

impl Scorer for RecModel {
    fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    fn scores(&self, history: &[usize]) -> Result<Vec<f64>> {
        Ok(self.score_histories(&[history])?.remove(0))
    }

    fn score_batch(&self, histories: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        self.score_histories(histories)
    }
}

/// Full-catalog scores for one user history; dispatches on the model kind.
pub fn predict_scores(model: &RecModel, history: &[usize]) -> Result<Vec<f64>> {
    model.scores(history)
}
