//! The shared token-level transformer: configuration, checkpoint container
//! and forward passes.

mod transformer;

pub use transformer::{
    attention_mask, forward_hidden, forward_hidden_graph, forward_logits, forward_logits_graph,
    Bound, ForwardSpec,
};
pub(crate) use transformer::allowed_pairs;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::{put_u32, Container, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMode::Causal => "causal",
            AttentionMode::Bidirectional => "bidirectional",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(AttentionMode::Causal),
            "bidirectional" | "bidir" => Ok(AttentionMode::Bidirectional),
            _ => Err(Error::Parameter(format!("unknown attention mode `{s}`"))),
        }
    }
}

/// Training stage a checkpoint has completed. Stages are strictly ordered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StageTag {
    Base = 0,
    Csft = 1,
    Mntp = 2,
    Ic = 3,
}

impl StageTag {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0 => StageTag::Base,
            1 => StageTag::Csft,
            2 => StageTag::Mntp,
            3 => StageTag::Ic,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            StageTag::Base => "base",
            StageTag::Csft => "csft",
            StageTag::Mntp => "mntp",
            StageTag::Ic => "ic",
        }
    }

    /// The stage whose checkpoint a stage trains from.
    pub fn predecessor(self) -> Option<StageTag> {
        match self {
            StageTag::Base => None,
            StageTag::Csft => Some(StageTag::Base),
            StageTag::Mntp => Some(StageTag::Csft),
            StageTag::Ic => Some(StageTag::Mntp),
        }
    }

    pub const ALL: [StageTag; 4] = [StageTag::Base, StageTag::Csft, StageTag::Mntp, StageTag::Ic];
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        StageTag::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_context: usize,
    pub attention_mode: AttentionMode,
    pub dropout_rate: f64,
}

impl ModelConfig {
    /// The desk-scale default architecture for a given vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ffn: 256,
            max_context: 256,
            attention_mode: AttentionMode::Causal,
            dropout_rate: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("max_context", self.max_context),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be positive"));
            }
        }
        if self.n_heads > 0 && self.d_model % self.n_heads != 0 {
            bad.push(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            bad.push(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ffn);
        let mut out = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.max_context, d]),
        ];
        for l in 0..self.n_layers {
            for (suffix, shape) in [
                ("ln1.gain", vec![d]),
                ("ln1.bias", vec![d]),
                ("attn.wq", vec![d, d]),
                ("attn.bq", vec![d]),
                ("attn.wk", vec![d, d]),
                ("attn.bk", vec![d]),
                ("attn.wv", vec![d, d]),
                ("attn.bv", vec![d]),
                ("attn.wo", vec![d, d]),
                ("attn.bo", vec![d]),
                ("ln2.gain", vec![d]),
                ("ln2.bias", vec![d]),
                ("ffn.w1", vec![d, f]),
                ("ffn.b1", vec![f]),
                ("ffn.w2", vec![f, d]),
                ("ffn.b2", vec![d]),
            ] {
                out.push((format!("layers.{l}.{suffix}"), shape));
            }
        }
        out.push(("ln_f.gain".to_string(), vec![d]));
        out.push(("ln_f.bias".to_string(), vec![d]));
        out
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ffn,
            self.max_context,
        ] {
            put_u32(&mut out, v);
        }
        out.push(match self.attention_mode {
            AttentionMode::Causal => 0,
            AttentionMode::Bidirectional => 1,
        });
        out.extend_from_slice(&self.dropout_rate.to_le_bytes());
        out
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        let mut next = || r.u32().map(|v| v as usize);
        let (vocab_size, d_model, n_layers, n_heads, d_ffn, max_context) =
            (next()?, next()?, next()?, next()?, next()?, next()?);
        let attention_mode = match r.u8()? {
            0 => AttentionMode::Causal,
            1 => AttentionMode::Bidirectional,
            b => return Err(Error::Format(format!("bad attention mode byte {b}"))),
        };
        let dropout_rate = r.f64()?;
        if !r.is_done() {
            return Err(Error::Format("oversized model config block".into()));
        }
        Ok(ModelConfig {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            d_ffn,
            max_context,
            attention_mode,
            dropout_rate,
        })
    }
}

/// Named parameters plus the architecture that gives them meaning.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub stage: StageTag,
    names: Vec<String>,
    pub params: Vec<Tensor>,
}

pub const FORMAT_VERSION: u32 = crate::container::VERSION;

impl ModelCheckpoint {
    /// Truncated-normal(0, 0.02) weights, zero biases, unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.param_layout() {
            let t = if name.ends_with(".gain") {
                Tensor::full(&shape, 1.0)?
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)?
            } else {
                Tensor::trunc_normal(&shape, INIT_STD, &mut rng)?
            };
            names.push(name);
            params.push(t.requiring_grad());
        }
        Ok(ModelCheckpoint {
            config,
            stage: StageTag::Base,
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
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Same parameters, different attention mode.
    pub fn with_mode(&self, mode: AttentionMode) -> Self {
        let mut c = self.clone();
        c.config.attention_mode = mode;
        c
    }

    pub fn to_container(&self) -> Container {
        Container {
            tag: self.stage as u8,
            config: self.config.to_bytes(),
            records: self
                .names
                .iter()
                .cloned()
                .zip(self.params.iter().map(|t| {
                    let mut t = t.clone();
                    t.grad = None;
                    t.requires_grad = false;
                    t
                }))
                .collect(),
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let stage = StageTag::from_u8(c.tag)
            .ok_or_else(|| Error::Format(format!("tag {} is not a model stage", c.tag)))?;
        let config = ModelConfig::from_bytes(&c.config)?;
        config.validate()?;
        let layout = config.param_layout();
        if layout.len() != c.records.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                layout.len(),
                c.records.len()
            )));
        }
        let mut names = Vec::with_capacity(layout.len());
        let mut params = Vec::with_capacity(layout.len());
        for ((want_name, want_shape), (name, t)) in layout.into_iter().zip(c.records) {
            if name != want_name {
                return Err(Error::Format(format!("expected tensor `{want_name}`, found `{name}`")));
            }
            if t.shape() != want_shape.as_slice() {
                return Err(Error::Shape {
                    name,
                    expected: want_shape,
                    found: t.shape().to_vec(),
                });
            }
            names.push(name);
            params.push(t.requiring_grad());
        }
        Ok(ModelCheckpoint {
            config,
            stage,
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

    /// Checks that this checkpoint may seed training for `next`.
    pub fn require_stage_for(&self, next: StageTag) -> Result<()> {
        let expected = next.predecessor().ok_or_else(|| Error::StageOrder {
            requested: next.name(),
            expected: "none".into(),
            found: self.stage.name().into(),
        })?;
        if self.stage != expected {
            return Err(Error::StageOrder {
                requested: next.name(),
                expected: expected.name().into(),
                found: self.stage.name().into(),
            });
        }
        Ok(())
    }
}
