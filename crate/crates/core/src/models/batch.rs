use crate::data::{normalize_headline, NewsEvent};
use crate::error::{Error, Result};
use crate::artifact;
use crate::tokenize::{self, TokenSeq, Vocab, PAD};

/// Lookup key for precomputed sentence embeddings: SHA-256 (hex) of the
/// normalized headline.
pub fn headline_key(text: &str) -> String {
    artifact::sha256_hex(normalize_headline(text).as_bytes())
}

pub const HEADLINE_HASH_RULE: &str = "sha256-hex(nfc, whitespace-collapsed, trimmed headline)";

/// One encoded training or evaluation item.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub seq: TokenSeq,
    pub key: String,
    pub target: f64,
}

impl Example {
    pub fn from_event(vocab: &Vocab, event: &NewsEvent, max_len: usize) -> Self {
        Example {
            seq: tokenize::encode(vocab, event.headline(), max_len),
            key: headline_key(event.headline()),
            target: event.sentiment(),
        }
    }
}

pub fn encode_events(vocab: &Vocab, events: &[NewsEvent], max_len: usize) -> Vec<Example> {
    events.iter().map(|e| Example::from_event(vocab, e, max_len)).collect()
}

/// Rows of token ids padded to a common length.
///
/// The common length is the longest row's unpadded length, so trailing
/// padding beyond it is dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    ids: Vec<u32>,
    lengths: Vec<usize>,
    seq_len: usize,
    keys: Vec<String>,
}

impl Batch {
    pub fn from_seqs(seqs: &[&TokenSeq], keys: Vec<String>) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let seq_len = seqs.iter().map(|s| s.length).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            let row = &s.ids[..s.length.min(s.ids.len())];
            ids.extend_from_slice(row);
            ids.extend(std::iter::repeat_n(PAD, seq_len - row.len()));
        }
        Ok(Batch {
            ids,
            lengths: seqs.iter().map(|s| s.length).collect(),
            seq_len,
            keys,
        })
    }

    pub fn from_examples(examples: &[&Example]) -> Result<Self> {
        let seqs: Vec<&TokenSeq> = examples.iter().map(|e| &e.seq).collect();
        Batch::from_seqs(&seqs, examples.iter().map(|e| e.key.clone()).collect())
    }

    /// Convenience for tests and examples: rows given directly as ids, with
    /// every id counted as content (no padding inside).
    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let seqs: Vec<TokenSeq> = rows
            .iter()
            .map(|r| TokenSeq {
                ids: r.clone(),
                length: r.len(),
            })
            .collect();
        let refs: Vec<&TokenSeq> = seqs.iter().collect();
        Batch::from_seqs(&refs, vec![String::new(); rows.len()])
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub(crate) fn check(&self, vocab_size: usize) -> Result<()> {
        if let Some(&id) = self.ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::IdOutOfRange { id, vocab_size });
        }
        if let Some(r) = self.lengths.iter().position(|&l| l == 0) {
            return Err(Error::AllPadRow(r));
        }
        Ok(())
    }
}
