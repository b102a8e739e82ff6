//! Post-norm Transformer encoder.
//!
//! ```text
//! x   = LayerNorm(tok_emb[ids] + pos_emb[position])
//! per layer:
//!   a = MultiHeadSelfAttention(x, key padding mask)
//!   x = LayerNorm(x + Dropout(a))
//!   f = W2 gelu(W1 x + b1) + b2
//!   x = LayerNorm(x + Dropout(f))
//! ```
//!
//! Padded key positions receive an additive score of `-1e9`, whose softmax
//! weight underflows to exactly zero, so outputs at real positions do not
//! depend on how much trailing padding a row carries.

use serde::{Deserialize, Serialize};

use super::batch::Batch;
use super::init::Init;
use crate::error::{Error, Result};
use crate::numeric::{Graph, ParamId, ParamStore, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-12;
const MASKED_SCORE: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSpec {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_p: f64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            vocab_size: 512,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_len: 64,
            dropout_p: 0.1,
        }
    }
}

impl EncoderSpec {
    /// Desk-scale defaults with `d_ff = 4 * d_model`.
    pub fn new(vocab_size: usize, d_model: usize, n_layers: usize, n_heads: usize) -> Self {
        EncoderSpec {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            d_ff: 4 * d_model,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.d_ff, self.max_len];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("encoder dimensions must be >= 1: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidConfig(format!("dropout {}", self.dropout_p)));
        }
        Ok(())
    }

    pub fn header(&self) -> Vec<(String, String)> {
        vec![
            ("encoder.vocab_size".into(), self.vocab_size.to_string()),
            ("encoder.d_model".into(), self.d_model.to_string()),
            ("encoder.n_layers".into(), self.n_layers.to_string()),
            ("encoder.n_heads".into(), self.n_heads.to_string()),
            ("encoder.d_ff".into(), self.d_ff.to_string()),
            ("encoder.max_len".into(), self.max_len.to_string()),
            ("encoder.dropout_p".into(), self.dropout_p.to_string()),
        ]
    }

    pub fn from_header(h: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| -> Result<&str> {
            h.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::BadCheckpoint(format!("missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::BadCheckpoint(format!("bad `{k}`")))
        };
        Ok(EncoderSpec {
            vocab_size: num("encoder.vocab_size")?,
            d_model: num("encoder.d_model")?,
            n_layers: num("encoder.n_layers")?,
            n_heads: num("encoder.n_heads")?,
            d_ff: num("encoder.d_ff")?,
            max_len: num("encoder.max_len")?,
            dropout_p: get("encoder.dropout_p")?
                .parse()
                .map_err(|_| Error::BadCheckpoint("bad `encoder.dropout_p`".into()))?,
        })
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(init: &mut Init, store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: init.uniform(store, &format!("{name}.w"), &[d_in, d_out]),
            b: init.zeros(store, &format!("{name}.b"), &[d_out]),
        }
    }

    fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(p, self.w);
        let b = g.param(p, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(init: &mut Init, store: &mut ParamStore, name: &str, d: usize) -> Self {
        Norm {
            gain: init.ones(store, &format!("{name}.g"), &[d]),
            bias: init.zeros(store, &format!("{name}.b"), &[d]),
        }
    }

    fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(p, self.gain);
        let bias = g.param(p, self.bias);
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

#[derive(Debug, Clone)]
struct Layer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm1: Norm,
    ff1: Linear,
    ff2: Linear,
    norm2: Norm,
}

/// Parameter handles of an encoder; values live in the owning store under
/// the `encoder.` prefix.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    spec: EncoderSpec,
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_norm: Norm,
    layers: Vec<Layer>,
}

pub const ENCODER_PREFIX: &str = "encoder.";

impl TransformerEncoder {
    pub fn new(spec: EncoderSpec, init: &mut Init, store: &mut ParamStore) -> Result<Self> {
        spec.validate()?;
        let d = spec.d_model;
        let tok_emb = init.uniform(store, "encoder.tok_emb", &[spec.vocab_size, d]);
        let pos_emb = init.uniform(store, "encoder.pos_emb", &[spec.max_len, d]);
        let emb_norm = Norm::new(init, store, "encoder.emb_norm", d);
        let layers = (0..spec.n_layers)
            .map(|i| {
                let n = |s: &str| format!("encoder.layer{i}.{s}");
                Layer {
                    q: Linear::new(init, store, &n("attn.q"), d, d),
                    k: Linear::new(init, store, &n("attn.k"), d, d),
                    v: Linear::new(init, store, &n("attn.v"), d, d),
                    o: Linear::new(init, store, &n("attn.o"), d, d),
                    norm1: Norm::new(init, store, &n("norm1"), d),
                    ff1: Linear::new(init, store, &n("ff1"), d, spec.d_ff),
                    ff2: Linear::new(init, store, &n("ff2"), spec.d_ff, d),
                    norm2: Norm::new(init, store, &n("norm2"), d),
                }
            })
            .collect();
        Ok(TransformerEncoder {
            spec,
            tok_emb,
            pos_emb,
            emb_norm,
            layers,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// Token states, shape `[rows * seq_len, d_model]`.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, batch: &Batch) -> Result<Var> {
        batch.check(self.spec.vocab_size)?;
        let (rows, t) = (batch.rows(), batch.seq_len());
        if t > self.spec.max_len {
            return Err(Error::shape("encoder positions", &[t], &[self.spec.max_len]));
        }
        let (d, h) = (self.spec.d_model, self.spec.n_heads);
        let dh = d / h;
        let drop = self.spec.dropout_p;

        let ids: Vec<usize> = batch.ids().iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..rows).flat_map(|_| 0..t).collect();
        let tok_table = g.param(p, self.tok_emb);
        let pos_table = g.param(p, self.pos_emb);
        let tok = g.gather(tok_table, &ids)?;
        let pos = g.gather(pos_table, &positions)?;
        let x = g.add(tok, pos)?;
        let x = self.emb_norm.forward(g, p, x)?;
        let mut x = g.dropout(x, drop)?;

        // additive key mask, one [t, t] block per (row, head)
        let mut mask = Vec::with_capacity(rows * h * t * t);
        for &len in batch.lengths() {
            let block: Vec<f64> = (0..t * t)
                .map(|i| if i % t < len { 0.0 } else { MASKED_SCORE })
                .collect();
            for _ in 0..h {
                mask.extend_from_slice(&block);
            }
        }
        let mask = g.constant(Tensor::new(&[rows * h, t, t], mask)?);
        let scale = 1.0 / (dh as f64).sqrt();

        let split_heads = |g: &mut Graph, v: Var| -> Result<Var> {
            let v = g.reshape(v, &[rows, t, h, dh])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            g.reshape(v, &[rows * h, t, dh])
        };

        for layer in &self.layers {
            let q = layer.q.forward(g, p, x)?;
            let k = layer.k.forward(g, p, x)?;
            let v = layer.v.forward(g, p, x)?;
            let (q, k, v) = (split_heads(g, q)?, split_heads(g, k)?, split_heads(g, v)?);
            let scores = g.matmul_t(q, k, false, true)?;
            let scores = g.scale(scores, scale)?;
            let scores = g.add(scores, mask)?;
            let attn = g.softmax(scores)?;
            let ctx = g.matmul(attn, v)?;
            let ctx = g.reshape(ctx, &[rows, h, t, dh])?;
            let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = g.reshape(ctx, &[rows * t, d])?;
            let a = layer.o.forward(g, p, ctx)?;
            let a = g.dropout(a, drop)?;
            let x1 = g.add(x, a)?;
            let x1 = layer.norm1.forward(g, p, x1)?;

            let f = layer.ff1.forward(g, p, x1)?;
            let f = g.gelu(f)?;
            let f = layer.ff2.forward(g, p, f)?;
            let f = g.dropout(f, drop)?;
            let x2 = g.add(x1, f)?;
            x = layer.norm2.forward(g, p, x2)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p<'a>(s: &'a ParamStore, name: &str) -> &'a [f64] {
        s.by_name(name).unwrap().values()
    }

    fn linear(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let d_out = b.len();
        (0..d_out)
            .map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * d_out + j]).sum::<f64>())
            .collect()
    }

    fn norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mu = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(i, v)| g[i] * (v - mu) / (var + LAYER_NORM_EPS).sqrt() + b[i])
            .collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    /// One layer, one head, loops over the textbook equations.
    fn brute_force(s: &ParamStore, ids: &[usize]) -> Vec<Vec<f64>> {
        let d = p(s, "encoder.emb_norm.g").len();
        let x: Vec<Vec<f64>> = ids
            .iter()
            .enumerate()
            .map(|(pos, &id)| {
                let e: Vec<f64> = (0..d)
                    .map(|j| p(s, "encoder.tok_emb")[id * d + j] + p(s, "encoder.pos_emb")[pos * d + j])
                    .collect();
                norm(&e, p(s, "encoder.emb_norm.g"), p(s, "encoder.emb_norm.b"))
            })
            .collect();
        let lin = |v: &[f64], n: &str| linear(v, p(s, &format!("encoder.layer0.{n}.w")), p(s, &format!("encoder.layer0.{n}.b")));
        let q: Vec<_> = x.iter().map(|v| lin(v, "attn.q")).collect();
        let k: Vec<_> = x.iter().map(|v| lin(v, "attn.k")).collect();
        let v: Vec<_> = x.iter().map(|v| lin(v, "attn.v")).collect();
        (0..ids.len())
            .map(|i| {
                let scores: Vec<f64> = k
                    .iter()
                    .map(|kj| q[i].iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                let ctx: Vec<f64> = (0..d)
                    .map(|c| scores.iter().zip(&v).map(|(s, vj)| (s - m).exp() / z * vj[c]).sum())
                    .collect();
                let a = lin(&ctx, "attn.o");
                let r1: Vec<f64> = x[i].iter().zip(&a).map(|(u, w)| u + w).collect();
                let x1 = norm(&r1, p(s, "encoder.layer0.norm1.g"), p(s, "encoder.layer0.norm1.b"));
                let f: Vec<f64> = lin(&x1, "ff1").into_iter().map(gelu).collect();
                let f = lin(&f, "ff2");
                let r2: Vec<f64> = x1.iter().zip(&f).map(|(u, w)| u + w).collect();
                norm(&r2, p(s, "encoder.layer0.norm2.g"), p(s, "encoder.layer0.norm2.b"))
            })
            .collect()
    }

    fn check_against_brute_force(ids: Vec<u32>) {
        let spec = EncoderSpec {
            vocab_size: 6,
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            d_ff: 8,
            max_len: 4,
            dropout_p: 0.0,
        };
        let mut store = ParamStore::new();
        let mut init = Init::new(21);
        let enc = TransformerEncoder::new(spec, &mut init, &mut store).unwrap();
        // perturb gains and biases away from 1/0 so every term matters
        for (i, (name, t)) in store.iter_mut().enumerate() {
            if name.ends_with(".g") || name.ends_with(".b") {
                for (j, v) in t.values_mut().iter_mut().enumerate() {
                    *v += 0.1 * ((i + j) as f64).sin();
                }
            }
        }
        let batch = Batch::from_rows(&[ids.clone()]).unwrap();
        let mut g = Graph::new();
        let out = enc.forward(&mut g, &store, &batch).unwrap();
        let got = g.value(out);
        let want = brute_force(&store, &ids.iter().map(|&i| i as usize).collect::<Vec<_>>());
        for (row, w) in want.iter().enumerate() {
            for (c, wv) in w.iter().enumerate() {
                assert!((got[row * 4 + c] - wv).abs() < 1e-10, "row {row} col {c}: {} vs {wv}", got[row * 4 + c]);
            }
        }
    }

    #[test]
    fn single_token_matches_hand_computation() {
        check_against_brute_force(vec![3]);
    }

    #[test]
    fn three_tokens_match_hand_computation() {
        check_against_brute_force(vec![2, 5, 1]);
    }

    #[test]
    fn spec_validation() {
        assert!(EncoderSpec::new(10, 6, 1, 4).validate().is_err());
        assert!(EncoderSpec { vocab_size: 0, ..Default::default() }.validate().is_err());
        let s = EncoderSpec::default();
        assert_eq!(EncoderSpec::from_header(&s.header()).unwrap(), s);
    }
}
