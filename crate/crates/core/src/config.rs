//! Pipeline configuration. The file format is line-oriented UTF-8:
//! `section.key = value`, with `#` comments and blank lines ignored. Any key
//! not given keeps its default. [`PipelineConfig::to_text`] lists every key
//! and is what the config hash is computed from.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::embedding::EmbeddingMode;
use crate::error::{Error, Result};
use crate::eval::RankExclusion;
use crate::model::{AttentionMode, ModelConfig};
use crate::objectives::IcAugmentation;
use crate::recommender::{RecConfig, RecKind};
use crate::train::{CsftConfig, IcConfig, MntpConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelHyper {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_context: usize,
}

impl ModelHyper {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ffn: self.d_ffn,
            max_context: self.max_context,
            attention_mode: AttentionMode::Causal,
            dropout_rate: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub k_core: usize,
    pub max_items: usize,
    pub min_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub rank_exclusion: RankExclusion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model: ModelHyper,
    pub data: DataConfig,
    pub csft: CsftConfig,
    pub mntp: MntpConfig,
    pub ic: IcConfig,
    pub embed_mode: EmbeddingMode,
    pub rec: RecConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    /// Values from the reference training recipe.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.csft.steps = 10_000;
        c.csft.batch_size = 128;
        c.mntp.steps = 1000;
        c.ic.steps = 1000;
        c.rec.max_epochs = 500;
        c
    }

    /// Desk-scale defaults: shorter stage schedules and smaller CSFT
    /// batches, all other values as in [`PipelineConfig::paper`].
    pub fn desk() -> Self {
        PipelineConfig {
            seed: 42,
            model: ModelHyper {
                d_model: 64,
                n_layers: 2,
                n_heads: 4,
                d_ffn: 256,
                max_context: 256,
            },
            data: DataConfig {
                k_core: 5,
                max_items: 10,
                min_count: 1,
            },
            csft: CsftConfig {
                steps: 2000,
                batch_size: 16,
                lr: 3e-4,
                weight_decay: 0.0,
                dropout: 0.0,
                max_items: 10,
            },
            mntp: MntpConfig {
                steps: 500,
                batch_size: 32,
                lr: 5e-5,
                weight_decay: 0.0,
                dropout: 0.0,
                mask_rate: 0.2,
            },
            ic: IcConfig {
                steps: 500,
                batch_size: 256,
                lr: 2e-4,
                weight_decay: 0.0,
                dropout: 0.2,
                temperature: 0.2,
                augmentation: IcAugmentation::Dropout,
            },
            embed_mode: EmbeddingMode::BidirMean,
            rec: {
                let mut r = RecConfig::new(RecKind::Sasrec);
                r.max_epochs = 200;
                r
            },
            eval: EvalConfig {
                ks: vec![10, 20],
                rank_exclusion: RankExclusion::Seen,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        let m = self.model.model_config(crate::tokenizer::RESERVED + 1);
        if let Err(Error::Config(e)) = m.validate() {
            v.extend(e);
        }
        for (name, x) in [
            ("csft.steps", self.csft.steps),
            ("csft.batch_size", self.csft.batch_size),
            ("mntp.steps", self.mntp.steps),
            ("mntp.batch_size", self.mntp.batch_size),
            ("ic.steps", self.ic.steps),
            ("ic.batch_size", self.ic.batch_size),
            ("data.k_core", self.data.k_core),
            ("data.max_items", self.data.max_items),
            ("data.min_count", self.data.min_count),
        ] {
            if x == 0 {
                v.push(format!("{name} must be positive"));
            }
        }
        for (name, x) in [("csft.lr", self.csft.lr), ("mntp.lr", self.mntp.lr), ("ic.lr", self.ic.lr)] {
            if !(x > 0.0) {
                v.push(format!("{name} must be positive"));
            }
        }
        if !(self.ic.temperature > 0.0) {
            v.push(format!("ic.temperature must be positive, got {}", self.ic.temperature));
        }
        if !(0.0..=1.0).contains(&self.mntp.mask_rate) {
            v.push("mntp.mask_rate outside [0, 1]".into());
        }
        for (name, x) in [
            ("csft.dropout", self.csft.dropout),
            ("mntp.dropout", self.mntp.dropout),
            ("ic.dropout", self.ic.dropout),
        ] {
            if !(0.0..1.0).contains(&x) {
                v.push(format!("{name} outside [0, 1)"));
            }
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            v.push("eval.ks must list positive cutoffs".into());
        }
        if let Err(Error::Config(e)) = self.rec.validate() {
            v.extend(e);
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let ks: Vec<String> = self.eval.ks.iter().map(|k| k.to_string()).collect();
        let aug = match self.ic.augmentation {
            IcAugmentation::Dropout => "dropout".to_string(),
            IcAugmentation::TokenMask(_) => "token_mask".to_string(),
        };
        let mask_rate = match self.ic.augmentation {
            IcAugmentation::TokenMask(r) => r,
            IcAugmentation::Dropout => 0.2,
        };
        vec![
            ("run.seed", self.seed.to_string()),
            ("model.d_model", self.model.d_model.to_string()),
            ("model.n_layers", self.model.n_layers.to_string()),
            ("model.n_heads", self.model.n_heads.to_string()),
            ("model.d_ffn", self.model.d_ffn.to_string()),
            ("model.max_context", self.model.max_context.to_string()),
            ("data.k_core", self.data.k_core.to_string()),
            ("data.max_items", self.data.max_items.to_string()),
            ("data.min_count", self.data.min_count.to_string()),
            ("csft.steps", self.csft.steps.to_string()),
            ("csft.batch_size", self.csft.batch_size.to_string()),
            ("csft.lr", format!("{:?}", self.csft.lr)),
            ("csft.weight_decay", format!("{:?}", self.csft.weight_decay)),
            ("csft.dropout", format!("{:?}", self.csft.dropout)),
            ("mntp.steps", self.mntp.steps.to_string()),
            ("mntp.batch_size", self.mntp.batch_size.to_string()),
            ("mntp.lr", format!("{:?}", self.mntp.lr)),
            ("mntp.weight_decay", format!("{:?}", self.mntp.weight_decay)),
            ("mntp.dropout", format!("{:?}", self.mntp.dropout)),
            ("mntp.mask_rate", format!("{:?}", self.mntp.mask_rate)),
            ("ic.steps", self.ic.steps.to_string()),
            ("ic.batch_size", self.ic.batch_size.to_string()),
            ("ic.lr", format!("{:?}", self.ic.lr)),
            ("ic.weight_decay", format!("{:?}", self.ic.weight_decay)),
            ("ic.dropout", format!("{:?}", self.ic.dropout)),
            ("ic.temperature", format!("{:?}", self.ic.temperature)),
            ("ic.augmentation", aug),
            ("ic.token_mask_rate", format!("{mask_rate:?}")),
            ("embed.mode", self.embed_mode.to_string()),
            ("rec.kind", self.rec.kind.to_string()),
            ("rec.d_rec", self.rec.d_rec.to_string()),
            ("rec.n_layers", self.rec.n_layers.to_string()),
            ("rec.n_heads", self.rec.n_heads.to_string()),
            ("rec.hidden", self.rec.hidden.to_string()),
            ("rec.dropout", format!("{:?}", self.rec.dropout)),
            ("rec.lr", format!("{:?}", self.rec.lr)),
            ("rec.weight_decay", format!("{:?}", self.rec.weight_decay)),
            ("rec.max_epochs", self.rec.max_epochs.to_string()),
            ("rec.patience", self.rec.patience.to_string()),
            ("rec.max_len", self.rec.max_len.to_string()),
            ("rec.batch_size", self.rec.batch_size.to_string()),
            ("eval.ks", ks.join(",")),
            ("eval.rank_exclusion", self.eval.rank_exclusion.to_string()),
        ]
    }

    /// Every key, one `section.key = value` line each.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// First 16 hex digits of the SHA-256 of [`PipelineConfig::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Parameter(format!("invalid value `{v}` for `{key}`")))
        }
        match key {
            "run.seed" => self.seed = p(key, value)?,
            "model.d_model" => self.model.d_model = p(key, value)?,
            "model.n_layers" => self.model.n_layers = p(key, value)?,
            "model.n_heads" => self.model.n_heads = p(key, value)?,
            "model.d_ffn" => self.model.d_ffn = p(key, value)?,
            "model.max_context" => self.model.max_context = p(key, value)?,
            "data.k_core" => self.data.k_core = p(key, value)?,
            "data.max_items" => {
                self.data.max_items = p(key, value)?;
                self.csft.max_items = self.data.max_items;
            }
            "data.min_count" => self.data.min_count = p(key, value)?,
            "csft.steps" => self.csft.steps = p(key, value)?,
            "csft.batch_size" => self.csft.batch_size = p(key, value)?,
            "csft.lr" => self.csft.lr = p(key, value)?,
            "csft.weight_decay" => self.csft.weight_decay = p(key, value)?,
            "csft.dropout" => self.csft.dropout = p(key, value)?,
            "mntp.steps" => self.mntp.steps = p(key, value)?,
            "mntp.batch_size" => self.mntp.batch_size = p(key, value)?,
            "mntp.lr" => self.mntp.lr = p(key, value)?,
            "mntp.weight_decay" => self.mntp.weight_decay = p(key, value)?,
            "mntp.dropout" => self.mntp.dropout = p(key, value)?,
            "mntp.mask_rate" => self.mntp.mask_rate = p(key, value)?,
            "ic.steps" => self.ic.steps = p(key, value)?,
            "ic.batch_size" => self.ic.batch_size = p(key, value)?,
            "ic.lr" => self.ic.lr = p(key, value)?,
            "ic.weight_decay" => self.ic.weight_decay = p(key, value)?,
            "ic.dropout" => self.ic.dropout = p(key, value)?,
            "ic.temperature" => self.ic.temperature = p(key, value)?,
            "ic.augmentation" => {
                let rate = match self.ic.augmentation {
                    IcAugmentation::TokenMask(r) => r,
                    IcAugmentation::Dropout => 0.2,
                };
                self.ic.augmentation = match value {
                    "dropout" => IcAugmentation::Dropout,
                    "token_mask" => IcAugmentation::TokenMask(rate),
                    _ => return Err(Error::Parameter(format!("invalid value `{value}` for `{key}`"))),
                };
            }
            "ic.token_mask_rate" => {
                let r: f64 = p(key, value)?;
                if let IcAugmentation::TokenMask(_) = self.ic.augmentation {
                    self.ic.augmentation = IcAugmentation::TokenMask(r);
                }
            }
            "embed.mode" => self.embed_mode = value.parse()?,
            "rec.kind" => {
                let kind: RecKind = value.parse()?;
                self.rec.kind = kind;
                self.rec.lr = RecConfig::new(kind).lr;
            }
            "rec.d_rec" => self.rec.d_rec = p(key, value)?,
            "rec.n_layers" => self.rec.n_layers = p(key, value)?,
            "rec.n_heads" => self.rec.n_heads = p(key, value)?,
            "rec.hidden" => self.rec.hidden = p(key, value)?,
            "rec.dropout" => self.rec.dropout = p(key, value)?,
            "rec.lr" => self.rec.lr = p(key, value)?,
            "rec.weight_decay" => self.rec.weight_decay = p(key, value)?,
            "rec.max_epochs" => self.rec.max_epochs = p(key, value)?,
            "rec.patience" => self.rec.patience = p(key, value)?,
            "rec.max_len" => self.rec.max_len = p(key, value)?,
            "rec.batch_size" => self.rec.batch_size = p(key, value)?,
            "eval.ks" => {
                self.eval.ks = value
                    .split(',')
                    .map(|s| p(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "eval.rank_exclusion" => {
                self.eval.rank_exclusion = value.parse()?;
                self.rec.val_exclusion = self.eval.rank_exclusion;
            }
            _ => return Err(Error::Parameter(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (k, v) = t.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: "expected `section.key = value`".into(),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Defaults (desk or paper) overridden by the file at `path`, if any.
    pub fn load(path: Option<&Path>, paper_defaults: bool) -> Result<Self> {
        let mut c = if paper_defaults { Self::paper() } else { Self::desk() };
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            c.apply_text(&text)?;
        }
        c.validate()?;
        Ok(c)
    }
}
