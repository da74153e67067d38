//! Item embeddings from a checkpoint, and the on-disk embedding table.
//!
//! Table layout (little-endian):
//!
//! ```text
//! "L2RE" | u32 version | u8 mode | u8 stage | u32 count | u32 dim
//!        | (u32 id_len | id bytes | f64 * dim) * count
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::container::{put_u32, Reader};
use crate::data::Catalog;
use crate::error::{Error, Result};
use crate::model::{forward_hidden, AttentionMode, ModelCheckpoint, StageTag};
use crate::tokenizer::{Vocabulary, EOS};

pub const TABLE_MAGIC: &[u8; 4] = b"L2RE";
pub const TABLE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EmbeddingMode {
    /// Hidden state at an appended `[EOS]` under causal attention.
    CausalEos,
    /// Mean of all token states under bidirectional attention.
    BidirMean,
}

impl EmbeddingMode {
    fn to_u8(self) -> u8 {
        match self {
            EmbeddingMode::CausalEos => 0,
            EmbeddingMode::BidirMean => 1,
        }
    }

    fn from_u8(b: u8) -> Option<Self> {
        match b {
            0 => Some(EmbeddingMode::CausalEos),
            1 => Some(EmbeddingMode::BidirMean),
            _ => None,
        }
    }
}

impl fmt::Display for EmbeddingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingMode::CausalEos => "causal_eos",
            EmbeddingMode::BidirMean => "bidir_mean",
        })
    }
}

impl FromStr for EmbeddingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal_eos" => Ok(EmbeddingMode::CausalEos),
            "bidir_mean" => Ok(EmbeddingMode::BidirMean),
            _ => Err(Error::Parameter(format!(
                "unknown embedding mode `{s}` (expected causal_eos or bidir_mean)"
            ))),
        }
    }
}

pub fn embed_item_mean_pool(ckpt: &ModelCheckpoint, title: &str, vocab: &Vocabulary) -> Result<Vec<f64>> {
    let ids = vocab.encode_item(title)?.ids;
    let h = forward_hidden(ckpt, &ids, AttentionMode::Bidirectional, false, 0)?;
    let (n, d) = (h.rows(), h.cols());
    let mut out = vec![0.0; d];
    for i in 0..n {
        for (o, v) in out.iter_mut().zip(h.row(i)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    Ok(out)
}

pub fn embed_item_causal_eos(ckpt: &ModelCheckpoint, title: &str, vocab: &Vocabulary) -> Result<Vec<f64>> {
    let mut ids = vocab.encode_item(title)?.ids;
    ids.push(EOS);
    let h = forward_hidden(ckpt, &ids, AttentionMode::Causal, false, 0)?;
    Ok(h.row(ids.len() - 1).to_vec())
}

pub fn embed_item(ckpt: &ModelCheckpoint, title: &str, vocab: &Vocabulary, mode: EmbeddingMode) -> Result<Vec<f64>> {
    match mode {
        EmbeddingMode::CausalEos => embed_item_causal_eos(ckpt, title, vocab),
        EmbeddingMode::BidirMean => embed_item_mean_pool(ckpt, title, vocab),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub item_ids: Vec<String>,
    pub dim: usize,
    /// Row-major `[items × dim]`.
    pub data: Vec<f64>,
    pub mode: EmbeddingMode,
    pub stage: StageTag,
}

impl EmbeddingTable {
    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(18 + self.data.len() * 8);
        out.extend_from_slice(TABLE_MAGIC);
        out.extend_from_slice(&TABLE_VERSION.to_le_bytes());
        out.push(self.mode.to_u8());
        out.push(self.stage as u8);
        put_u32(&mut out, self.item_ids.len());
        put_u32(&mut out, self.dim);
        for (i, id) in self.item_ids.iter().enumerate() {
            put_u32(&mut out, id.len());
            out.extend_from_slice(id.as_bytes());
            for v in self.row(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != TABLE_MAGIC {
            return Err(Error::NotATable);
        }
        let mut r = Reader::new(&bytes[4..], "table");
        let version = r.u32()?;
        if version != TABLE_VERSION {
            return Err(Error::Version {
                found: version,
                expected: TABLE_VERSION,
            });
        }
        let mb = r.u8()?;
        let mode = EmbeddingMode::from_u8(mb).ok_or_else(|| Error::Format(format!("unknown embedding mode byte {mb}")))?;
        let sb = r.u8()?;
        let stage = StageTag::from_u8(sb).ok_or_else(|| Error::Format(format!("unknown stage byte {sb}")))?;
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(Error::Format("embedding dimension is zero".into()));
        }
        let mut item_ids = Vec::with_capacity(count.min(1 << 16));
        let mut data = Vec::with_capacity(count.min(1 << 16) * dim);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let id = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("item id is not UTF-8".into()))?;
            for _ in 0..dim {
                data.push(r.f64()?);
            }
            item_ids.push(id);
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after last table row".into()));
        }
        Ok(EmbeddingTable {
            item_ids,
            dim,
            data,
            mode,
            stage,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Checks that rows line up with the catalog's item order.
    pub fn check_covers(&self, catalog: &Catalog) -> Result<()> {
        if self.item_ids.as_slice() != catalog.ids() {
            return Err(Error::Parameter(format!(
                "embedding table ({} items) does not match the catalog ({} items)",
                self.len(),
                catalog.len()
            )));
        }
        Ok(())
    }
}

/// Embeds every catalog item, in catalog order. `parallel` spreads items
/// over the rayon pool; the result is identical either way.
pub fn embed_corpus(
    ckpt: &ModelCheckpoint,
    catalog: &Catalog,
    vocab: &Vocabulary,
    mode: EmbeddingMode,
    parallel: bool,
) -> Result<EmbeddingTable> {
    if catalog.is_empty() {
        return Err(Error::Parameter("empty catalog".into()));
    }
    let one = |i: usize| {
        embed_item(ckpt, catalog.title(i), vocab, mode).map_err(|e| Error::Item {
            item: catalog.id(i).to_string(),
            source: Box::new(e),
        })
    };
    let rows: Vec<Vec<f64>> = if parallel {
        (0..catalog.len()).into_par_iter().map(one).collect::<Result<_>>()?
    } else {
        (0..catalog.len()).map(one).collect::<Result<_>>()?
    };
    let data: Vec<f64> = rows.concat();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding extraction"));
    }
    Ok(EmbeddingTable {
        item_ids: catalog.ids().to_vec(),
        dim: ckpt.config.d_model,
        data,
        mode,
        stage: ckpt.stage,
    })
}

/// Cosine similarity of two vectors; zero if either is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine similarity over within-group and cross-group item pairs.
pub fn cluster_cosine_gap(table: &EmbeddingTable, group: impl Fn(usize) -> usize) -> (f64, f64) {
    let (mut win, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..table.len() {
        for j in i + 1..table.len() {
            let c = cosine(table.row(i), table.row(j));
            if group(i) == group(j) {
                win += c;
                nw += 1;
            } else {
                cross += c;
                nc += 1;
            }
        }
    }
    (win / nw.max(1) as f64, cross / nc.max(1) as f64)
}
