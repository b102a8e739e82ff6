//! Stacked bidirectional LSTM over word embeddings.
//!
//! ```text
//! i, f, g, o = split(x_t W_ih + h_{t-1} W_hh + b)
//! c_t = sigmoid(f) * c_{t-1} + sigmoid(i) * tanh(g)
//! h_t = sigmoid(o) * tanh(c_t)
//! ```
//!
//! Rows shorter than the batch keep their state unchanged at padded steps,
//! so the forward direction ends on the last real token and the backward
//! direction starts there. The representation is the concatenation of the
//! top layer's final forward and backward hidden states.

use serde::{Deserialize, Serialize};

use super::batch::Batch;
use super::init::Init;
use super::{header_num, Head};
use crate::error::{Error, Result};
use crate::numeric::checkpoint::Header;
use crate::numeric::{Graph, ParamId, ParamStore, Tensor, Var};

pub const BILSTM_PREFIX: &str = "bilstm.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiLstmSpec {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout_p: f64,
}

impl Default for BiLstmSpec {
    fn default() -> Self {
        BiLstmSpec {
            vocab_size: 10_000,
            embed_dim: 128,
            hidden: 256,
            layers: 2,
            dropout_p: 0.2,
        }
    }
}

impl BiLstmSpec {
    pub fn validate(&self) -> Result<()> {
        if [self.vocab_size, self.embed_dim, self.hidden, self.layers].contains(&0) {
            return Err(Error::InvalidConfig(format!("bilstm dimensions must be >= 1: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidConfig(format!("dropout {}", self.dropout_p)));
        }
        Ok(())
    }

    pub fn header(&self) -> Header {
        vec![
            ("bilstm.vocab_size".into(), self.vocab_size.to_string()),
            ("bilstm.embed_dim".into(), self.embed_dim.to_string()),
            ("bilstm.hidden".into(), self.hidden.to_string()),
            ("bilstm.layers".into(), self.layers.to_string()),
            ("bilstm.dropout_p".into(), self.dropout_p.to_string()),
        ]
    }

    pub fn from_header(h: &Header) -> Result<Self> {
        Ok(BiLstmSpec {
            vocab_size: header_num(h, "bilstm.vocab_size")?,
            embed_dim: header_num(h, "bilstm.embed_dim")?,
            hidden: header_num(h, "bilstm.hidden")?,
            layers: header_num(h, "bilstm.layers")?,
            dropout_p: header_num(h, "bilstm.dropout_p")?,
        })
    }
}

#[derive(Debug, Clone)]
struct Cell {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
}

impl Cell {
    fn new(init: &mut Init, store: &mut ParamStore, name: &str, d_in: usize, h: usize) -> Self {
        Cell {
            w_ih: init.uniform(store, &format!("{name}.w_ih"), &[d_in, 4 * h]),
            w_hh: init.uniform(store, &format!("{name}.w_hh"), &[h, 4 * h]),
            b: init.zeros(store, &format!("{name}.b"), &[4 * h]),
        }
    }

    /// Runs one direction over `x: [B*T, d_in]`; returns per-step outputs
    /// in time order and the final hidden state.
    fn run(&self, g: &mut Graph, p: &ParamStore, x: Var, batch: &Batch, h: usize, reverse: bool) -> Result<(Vec<Var>, Var)> {
        let (rows, t) = (batch.rows(), batch.seq_len());
        let w_ih = g.param(p, self.w_ih);
        let w_hh = g.param(p, self.w_hh);
        let b = g.param(p, self.b);
        let proj = g.matmul(x, w_ih)?;
        let proj = g.add_row(proj, b)?;
        let proj = g.reshape(proj, &[rows, t, 4 * h])?;

        let mut hs = g.constant(Tensor::zeros(&[rows, h]));
        let mut cs = hs;
        let mut outputs = vec![hs; t];
        let steps: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in steps {
            let pre = g.narrow(proj, 1, step, 1)?;
            let pre = g.reshape(pre, &[rows, 4 * h])?;
            let rec = g.matmul(hs, w_hh)?;
            let gates = g.add(pre, rec)?;
            let i = g.narrow(gates, 1, 0, h)?;
            let f = g.narrow(gates, 1, h, h)?;
            let c_in = g.narrow(gates, 1, 2 * h, h)?;
            let o = g.narrow(gates, 1, 3 * h, h)?;
            let i = g.sigmoid(i)?;
            let f = g.sigmoid(f)?;
            let c_in = g.tanh(c_in)?;
            let o = g.sigmoid(o)?;
            let keep = g.mul(f, cs)?;
            let write = g.mul(i, c_in)?;
            let c_new = g.add(keep, write)?;
            let c_act = g.tanh(c_new)?;
            let h_new = g.mul(o, c_act)?;
            let live: Vec<bool> = batch.lengths().iter().map(|&len| step < len).collect();
            cs = g.select_rows(&live, c_new, cs)?;
            hs = g.select_rows(&live, h_new, hs)?;
            outputs[step] = hs;
        }
        Ok((outputs, hs))
    }
}

#[derive(Debug, Clone)]
pub struct BiLstmModel {
    spec: BiLstmSpec,
    embed: ParamId,
    layers: Vec<(Cell, Cell)>,
    head: Head,
    params: ParamStore,
}

impl BiLstmModel {
    pub fn new(spec: BiLstmSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut init = Init::new(seed);
        let mut params = ParamStore::new();
        let h = spec.hidden;
        let embed = init.uniform(&mut params, "bilstm.embed", &[spec.vocab_size, spec.embed_dim]);
        let layers = (0..spec.layers)
            .map(|l| {
                let d_in = if l == 0 { spec.embed_dim } else { 2 * h };
                (
                    Cell::new(&mut init, &mut params, &format!("bilstm.l{l}.fwd"), d_in, h),
                    Cell::new(&mut init, &mut params, &format!("bilstm.l{l}.bwd"), d_in, h),
                )
            })
            .collect();
        let head = Head::new(&mut init, &mut params, 2 * h);
        Ok(BiLstmModel {
            spec,
            embed,
            layers,
            head,
            params,
        })
    }

    pub fn spec(&self) -> &BiLstmSpec {
        &self.spec
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

    /// `[B, 2 * hidden]`.
    pub fn represent(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        batch.check(self.spec.vocab_size)?;
        let (rows, t, h) = (batch.rows(), batch.seq_len(), self.spec.hidden);
        let ids: Vec<usize> = batch.ids().iter().map(|&i| i as usize).collect();
        let table = g.param(&self.params, self.embed);
        let mut x = g.gather(table, &ids)?;
        let mut last = None;
        for (l, (fwd, bwd)) in self.layers.iter().enumerate() {
            if l > 0 {
                x = g.dropout(x, self.spec.dropout_p)?;
            }
            let (out_f, h_f) = fwd.run(g, &self.params, x, batch, h, false)?;
            let (out_b, h_b) = bwd.run(g, &self.params, x, batch, h, true)?;
            last = Some((h_f, h_b));
            if l + 1 < self.layers.len() {
                let mut steps = Vec::with_capacity(t);
                for (f, b) in out_f.into_iter().zip(out_b) {
                    let both = g.concat(&[f, b], 1)?;
                    steps.push(g.reshape(both, &[rows, 1, 2 * h])?);
                }
                let seq = g.concat(&steps, 1)?;
                x = g.reshape(seq, &[rows * t, 2 * h])?;
            }
        }
        let (h_f, h_b) = last.expect("at least one layer");
        g.concat(&[h_f, h_b], 1)
    }

    pub fn header(&self) -> Header {
        let mut h: Header = vec![
            ("model.kind".into(), "bilstm".into()),
            ("model.arm".into(), "bilstm".into()),
        ];
        h.extend(self.spec.header());
        h
    }
}
