//! Regression models: the sentence-embedding regressor (mean or CLS pooled
//! Transformer encoder, or imported embeddings) and the BiLSTM baseline.
//! Every model ends in the same head, `tanh(rep · W + b)`.

mod batch;
mod bilstm;
mod embeddings;
mod encoder;
mod fineas;
mod init;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use batch::{encode_events, headline_key, Batch, Example, HEADLINE_HASH_RULE};
pub use bilstm::{BiLstmModel, BiLstmSpec, BILSTM_PREFIX};
pub use embeddings::{manifest_path, EmbeddingTable, EMBEDDING_FORMAT};
pub use encoder::{EncoderSpec, TransformerEncoder, ENCODER_PREFIX, LAYER_NORM_EPS};
pub use fineas::{FineasModel, Pooling};
pub use init::{Init, INIT_RANGE};

use crate::error::{Error, Result};
use crate::numeric::checkpoint::{self, Header};
use crate::numeric::{Graph, ParamId, ParamStore, Var};
use crate::tokenize::VocabKind;

/// The four experiment arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    FineasFrozen,
    FineasFinetune,
    BertFrozen,
    Bilstm,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::FineasFrozen, Arm::FineasFinetune, Arm::BertFrozen, Arm::Bilstm];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::FineasFrozen => "fineas-frozen",
            Arm::FineasFinetune => "fineas-finetune",
            Arm::BertFrozen => "bert-frozen",
            Arm::Bilstm => "bilstm",
        }
    }

    pub fn pooling(self) -> Option<Pooling> {
        match self {
            Arm::FineasFrozen | Arm::FineasFinetune => Some(Pooling::Mean),
            Arm::BertFrozen => Some(Pooling::Cls),
            Arm::Bilstm => None,
        }
    }

    pub fn frozen(self) -> bool {
        matches!(self, Arm::FineasFrozen | Arm::BertFrozen)
    }

    pub fn vocab_kind(self) -> VocabKind {
        match self {
            Arm::Bilstm => VocabKind::Word,
            _ => VocabKind::Subword,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown arm `{s}` (expected one of fineas-frozen, fineas-finetune, bert-frozen, bilstm)")))
    }
}

/// `tanh(rep · W + b)` with `W: [d, 1]`, `b: [1]`.
#[derive(Debug, Clone)]
pub struct Head {
    pub w: ParamId,
    pub b: ParamId,
}

pub const HEAD_PREFIX: &str = "head.";

impl Head {
    pub fn new(init: &mut Init, store: &mut ParamStore, d: usize) -> Self {
        Head {
            w: init.uniform(store, "head.w", &[d, 1]),
            b: init.zeros(store, "head.b", &[1]),
        }
    }

    /// `rep: [B, d]` to predictions `[B, 1]`.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, rep: Var) -> Result<Var> {
        let w = g.param(p, self.w);
        let b = g.param(p, self.b);
        let z = g.matmul(rep, w)?;
        let z = g.add_row(z, b)?;
        g.tanh(z)
    }
}

/// A model of any arm.
#[derive(Debug, Clone)]
pub enum Model {
    Fineas(FineasModel),
    Bilstm(BiLstmModel),
}

impl Model {
    /// Fresh model for `arm`; the vocabulary size fixes the embedding table.
    pub fn for_arm(arm: Arm, encoder: &EncoderSpec, bilstm: &BiLstmSpec, vocab_size: usize, seed: u64) -> Result<Self> {
        match arm.pooling() {
            Some(pooling) => {
                let spec = EncoderSpec { vocab_size, ..encoder.clone() };
                Ok(Model::Fineas(FineasModel::new(spec, pooling, arm.frozen(), seed)?))
            }
            None => {
                let spec = BiLstmSpec { vocab_size, ..bilstm.clone() };
                Ok(Model::Bilstm(BiLstmModel::new(spec, seed)?))
            }
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Fineas(m) => m.params(),
            Model::Bilstm(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Fineas(m) => m.params_mut(),
            Model::Bilstm(m) => m.params_mut(),
        }
    }

    pub fn head(&self) -> &Head {
        match self {
            Model::Fineas(m) => m.head(),
            Model::Bilstm(m) => m.head(),
        }
    }

    /// True when only the head trains.
    pub fn backbone_frozen(&self) -> bool {
        match self {
            Model::Fineas(m) => m.is_frozen(),
            Model::Bilstm(_) => false,
        }
    }

    /// Sentence representation `[B, d]`.
    pub fn represent(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        match self {
            Model::Fineas(m) => m.represent(g, batch),
            Model::Bilstm(m) => m.represent(g, batch),
        }
    }

    /// Predictions `[B, 1]`.
    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let rep = self.represent(g, batch)?;
        self.head().forward(g, self.params(), rep)
    }

    /// Inference with dropout disabled.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let y = self.forward(&mut g, batch)?;
        Ok(g.value(y).to_vec())
    }

    pub fn header(&self) -> Header {
        match self {
            Model::Fineas(m) => m.header(),
            Model::Bilstm(m) => m.header(),
        }
    }

    pub fn save(&self, path: &std::path::Path, extra: &[(String, String)]) -> Result<()> {
        let mut header = self.header();
        header.extend(extra.iter().cloned());
        checkpoint::save(path, &header, self.params())
    }

    /// Rebuilds a model from a checkpoint. Imported-embedding models need
    /// their table supplied again.
    pub fn from_checkpoint(header: &Header, params: &ParamStore, embeddings: Option<EmbeddingTable>) -> Result<Self> {
        let mut model = match checkpoint::header_get(header, "model.kind") {
            Some("fineas") => Model::Fineas(FineasModel::from_header(header, embeddings)?),
            Some("bilstm") => Model::Bilstm(BiLstmModel::new(BiLstmSpec::from_header(header)?, 0)?),
            other => return Err(Error::BadCheckpoint(format!("unknown model.kind {other:?}"))),
        };
        load_values(model.params_mut(), params)?;
        Ok(model)
    }

    pub fn load(path: &std::path::Path, embeddings: Option<EmbeddingTable>) -> Result<(Self, Header)> {
        let (header, params) = checkpoint::load(path)?;
        Ok((Model::from_checkpoint(&header, &params, embeddings)?, header))
    }
}

/// Copies values by name; names and shapes must match exactly.
fn load_values(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::BadCheckpoint(format!("expected {} tensors, found {}", dst.len(), src.len())));
    }
    for (name, t) in dst.iter_mut() {
        let s = src
            .by_name(name)
            .ok_or_else(|| Error::BadCheckpoint(format!("missing tensor `{name}`")))?;
        if s.shape() != t.shape() {
            return Err(Error::BadCheckpoint(format!(
                "tensor `{name}`: shape {:?} vs {:?}",
                s.shape(),
                t.shape()
            )));
        }
        t.values_mut().copy_from_slice(s.values());
    }
    Ok(())
}

pub(crate) fn header_num<T: FromStr>(h: &[(String, String)], key: &str) -> Result<T> {
    h.iter()
        .find(|(k, _)| k == key)
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| Error::BadCheckpoint(format!("missing or bad `{key}`")))
}
