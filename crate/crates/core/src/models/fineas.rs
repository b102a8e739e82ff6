use serde::{Deserialize, Serialize};

use super::batch::Batch;
use super::embeddings::EmbeddingTable;
use super::encoder::{EncoderSpec, TransformerEncoder, ENCODER_PREFIX};
use super::init::Init;
use super::{header_num, Arm, Head};
use crate::error::{Error, Result};
use crate::numeric::checkpoint::{header_get, Header};
use crate::numeric::{Graph, ParamStore, Tensor, Var};

/// How token states become one sentence vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Average over non-PAD positions.
    Mean,
    /// State at position 0 (the `[CLS]` token).
    Cls,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::Cls => "cls",
        }
    }
}

#[derive(Debug, Clone)]
enum Backbone {
    Encoder(TransformerEncoder),
    Imported(EmbeddingTable),
}

/// Sentence-embedding regressor: backbone, pooling, then the tanh head.
#[derive(Debug, Clone)]
pub struct FineasModel {
    backbone: Backbone,
    pooling: Pooling,
    head: Head,
    params: ParamStore,
    frozen: bool,
}

impl FineasModel {
    /// Randomly initialized encoder backbone. Parameters are drawn from the
    /// init stream of `seed`: encoder first, head last.
    pub fn new(spec: EncoderSpec, pooling: Pooling, frozen: bool, seed: u64) -> Result<Self> {
        let mut init = Init::new(seed);
        let mut params = ParamStore::new();
        let d = spec.d_model;
        let encoder = TransformerEncoder::new(spec, &mut init, &mut params)?;
        let head = Head::new(&mut init, &mut params, d);
        let mut model = FineasModel {
            backbone: Backbone::Encoder(encoder),
            pooling,
            head,
            params,
            frozen: false,
        };
        model.set_frozen(frozen);
        Ok(model)
    }

    /// Head over precomputed sentence embeddings. Always frozen.
    pub fn with_embeddings(table: EmbeddingTable, seed: u64) -> Self {
        let mut init = Init::new(seed);
        let mut params = ParamStore::new();
        let head = Head::new(&mut init, &mut params, table.dim());
        FineasModel {
            backbone: Backbone::Imported(table),
            pooling: Pooling::Mean,
            head,
            params,
            frozen: true,
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn encoder_spec(&self) -> Option<&EncoderSpec> {
        match &self.backbone {
            Backbone::Encoder(e) => Some(e.spec()),
            Backbone::Imported(_) => None,
        }
    }

    pub fn arm(&self) -> Arm {
        match (self.pooling, self.frozen) {
            (Pooling::Cls, _) => Arm::BertFrozen,
            (Pooling::Mean, true) => Arm::FineasFrozen,
            (Pooling::Mean, false) => Arm::FineasFinetune,
        }
    }

    /// Sets encoder trainability; the head always trains. Imported
    /// backbones have no encoder and stay frozen.
    pub fn set_frozen(&mut self, frozen: bool) {
        if let Backbone::Encoder(_) = self.backbone {
            self.params.set_trainable(ENCODER_PREFIX, !frozen);
            self.frozen = frozen;
        }
    }

    /// Pooled sentence embeddings `[B, d]`, dropout disabled.
    pub fn embed_sentence(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::new();
        let rep = self.represent(&mut g, batch)?;
        Ok(g.tensor(rep))
    }

    /// Pooled representation on `g`. A frozen backbone acts as a fixed
    /// feature extractor: it runs without dropout and enters `g` as a constant.
    pub fn represent(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        match &self.backbone {
            Backbone::Imported(table) => Ok(g.constant(table.lookup(batch.keys())?)),
            Backbone::Encoder(_) if self.frozen && g.is_training() => {
                let features = self.embed_sentence(batch)?;
                Ok(g.constant(features))
            }
            Backbone::Encoder(enc) => {
                let x = enc.forward(g, &self.params, batch)?;
                pool(g, x, batch, self.pooling, enc.spec().d_model)
            }
        }
    }

    pub fn header(&self) -> Header {
        let mut h: Header = vec![
            ("model.kind".into(), "fineas".into()),
            ("model.arm".into(), self.arm().as_str().into()),
            ("model.pooling".into(), self.pooling.as_str().into()),
            ("model.frozen".into(), self.frozen.to_string()),
        ];
        match &self.backbone {
            Backbone::Encoder(e) => {
                h.push(("model.backbone".into(), "encoder".into()));
                h.extend(e.spec().header());
            }
            Backbone::Imported(t) => {
                h.push(("model.backbone".into(), "imported".into()));
                h.push(("embedding.dim".into(), t.dim().to_string()));
            }
        }
        h
    }

    pub(crate) fn from_header(h: &Header, embeddings: Option<EmbeddingTable>) -> Result<Self> {
        match header_get(h, "model.backbone") {
            Some("imported") => {
                let table = embeddings.ok_or_else(|| {
                    Error::InvalidConfig("checkpoint uses imported embeddings; supply the embedding file".into())
                })?;
                let dim: usize = header_num(h, "embedding.dim")?;
                if dim != table.dim() {
                    return Err(Error::shape("embedding dim", &[dim], &[table.dim()]));
                }
                Ok(FineasModel::with_embeddings(table, 0))
            }
            Some("encoder") => {
                let pooling = match header_get(h, "model.pooling") {
                    Some("mean") => Pooling::Mean,
                    Some("cls") => Pooling::Cls,
                    other => return Err(Error::BadCheckpoint(format!("bad model.pooling {other:?}"))),
                };
                let frozen: bool = header_num(h, "model.frozen")?;
                FineasModel::new(EncoderSpec::from_header(h)?, pooling, frozen, 0)
            }
            other => Err(Error::BadCheckpoint(format!("bad model.backbone {other:?}"))),
        }
    }
}

/// `x: [B*T, d]` to `[B, d]`.
fn pool(g: &mut Graph, x: Var, batch: &Batch, pooling: Pooling, d: usize) -> Result<Var> {
    let (rows, t) = (batch.rows(), batch.seq_len());
    match pooling {
        Pooling::Cls => {
            let idx: Vec<usize> = (0..rows).map(|r| r * t).collect();
            g.gather(x, &idx)
        }
        Pooling::Mean => {
            let mut w = Vec::with_capacity(rows * t);
            for &len in batch.lengths() {
                let inv = 1.0 / len as f64;
                w.extend((0..t).map(|i| if i < len { inv } else { 0.0 }));
            }
            let w = g.constant(Tensor::new(&[rows, 1, t], w)?);
            let x = g.reshape(x, &[rows, t, d])?;
            let m = g.matmul(w, x)?;
            g.reshape(m, &[rows, d])
        }
    }
}
