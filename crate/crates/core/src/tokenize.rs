//! Subword and word tokenizers.
//!
//! Both share one pre-tokenizer: the normalized headline is split on
//! whitespace, and every character that is neither alphanumeric nor
//! whitespace becomes a token of its own.
//!
//! The subword vocabulary is learned by repeated highest-frequency pair
//! merges over the corpus words, rendered in Wordpiece form: a piece that does
//! not start a word carries the `##` prefix. Encoding is greedy longest match
//! per word, left to right.

use std::collections::HashMap;
use std::path::Path;

use crate::artifact;
use crate::data::normalize_headline;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];
pub const CONTINUATION: &str = "##";

/// Vocabulary slots reserved ahead of learned merges: the four specials plus
/// 256 character slots.
pub const BASE_SLOTS: usize = 260;

pub const DEFAULT_MAX_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabKind {
    Subword,
    Word,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    kind: VocabKind,
    tokens: Vec<String>,
    id_of: HashMap<String, u32>,
}

/// Token ids padded to a fixed length. `length` counts the non-pad prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub length: usize,
}

impl Vocab {
    /// Builds a vocabulary from learned tokens; specials are prepended.
    pub fn from_tokens<I, S>(kind: VocabKind, learned: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab {
            kind,
            tokens: Vec::new(),
            id_of: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s.to_string());
        }
        for t in learned {
            let t = t.into();
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::BadVocab(format!("invalid token `{t}`")));
            }
            if v.id_of.contains_key(&t) {
                return Err(Error::BadVocab(format!("duplicate token `{t}`")));
            }
            v.push(t);
        }
        Ok(v)
    }

    fn push(&mut self, t: String) -> bool {
        if self.id_of.contains_key(&t) {
            return false;
        }
        self.id_of.insert(t.clone(), self.tokens.len() as u32);
        self.tokens.push(t);
        true
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// File form: one token per line, line number (from 0) is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(kind: VocabKind, text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS.len() || lines[..4] != SPECIALS {
            return Err(Error::BadVocab("special tokens must occupy lines 0-3".into()));
        }
        Vocab::from_tokens(kind, lines[4..].iter().copied())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path, kind: VocabKind) -> Result<Self> {
        Vocab::from_text(kind, &artifact::read_to_string(path)?)
    }

    /// Content hash of the file form.
    pub fn hash(&self) -> String {
        artifact::short_hash(self.to_text().as_bytes())
    }
}

fn is_split_char(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Whitespace split with punctuation and symbols broken out as single tokens.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if is_split_char(c) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            } else {
                word.push(c);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

fn join_pieces(left: &str, right: &str) -> String {
    format!("{left}{}", right.strip_prefix(CONTINUATION).unwrap_or(right))
}

/// Learns a subword vocabulary of at most `target_size` entries (as long as
/// the corpus alphabet fits the 256 reserved character slots).
///
/// Each step merges the adjacent symbol pair with the highest corpus
/// frequency; ties go to the pair that occurs first when scanning words in
/// first-appearance order. Merging stops when `target_size - 260` new tokens
/// have been added or no pair remains.
pub fn train_subword_vocab<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Vocab> {
    if target_size < BASE_SLOTS {
        return Err(Error::InvalidConfig(format!(
            "subword vocabulary size {target_size} below minimum {BASE_SLOTS}"
        )));
    }
    // unique words in first-appearance order with counts
    let mut word_index: HashMap<String, usize> = HashMap::new();
    let mut words: Vec<(Vec<String>, u64)> = Vec::new();
    for line in corpus {
        for w in pre_tokenize(&normalize_headline(line.as_ref())) {
            match word_index.get(&w) {
                Some(&i) => words[i].1 += 1,
                None => {
                    word_index.insert(w.clone(), words.len());
                    let symbols = w
                        .chars()
                        .enumerate()
                        .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") })
                        .collect();
                    words.push((symbols, 1));
                }
            }
        }
    }
    if words.is_empty() {
        return Err(Error::CorpusEmpty);
    }

    let mut alphabet: Vec<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
    alphabet.sort();
    alphabet.dedup();
    let mut vocab = Vocab::from_tokens(VocabKind::Subword, alphabet)?;

    let budget = target_size - BASE_SLOTS;
    let mut added = 0;
    while added < budget {
        // pair -> (count, first occurrence rank)
        let mut pairs: HashMap<(&str, &str), (u64, usize)> = HashMap::new();
        let mut rank = 0;
        for (symbols, count) in &words {
            for w in symbols.windows(2) {
                let e = pairs.entry((w[0].as_str(), w[1].as_str())).or_insert((0, rank));
                e.0 += count;
                rank += 1;
            }
        }
        let Some((&(l, r), _)) = pairs
            .iter()
            .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then_with(|| b.1 .1.cmp(&a.1 .1)))
        else {
            break;
        };
        let (left, right) = (l.to_string(), r.to_string());
        let merged = join_pieces(&left, &right);
        for (symbols, _) in words.iter_mut() {
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i] == left && symbols[i + 1] == right {
                    symbols[i] = merged.clone();
                    symbols.remove(i + 1);
                }
                i += 1;
            }
        }
        if vocab.push(merged) {
            added += 1;
        }
    }
    Ok(vocab)
}

/// Word vocabulary: lowercased pre-tokens ordered by descending count, then
/// lexicographically; tokens seen fewer than `min_count` times are dropped and
/// at most `max_size` entries (specials included) are kept.
pub fn build_word_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize, min_count: u64) -> Result<Vocab> {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for line in corpus {
        for w in word_tokens(line.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::CorpusEmpty);
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size.saturating_sub(SPECIALS.len()));
    Vocab::from_tokens(VocabKind::Word, ranked.into_iter().map(|(w, _)| w))
}

fn word_tokens(text: &str) -> Vec<String> {
    pre_tokenize(&normalize_headline(text).to_lowercase())
}

/// Number of word-tokenizer tokens in `text`, before truncation.
pub fn word_count(text: &str) -> usize {
    word_tokens(text).len()
}

/// Greedy longest-match pieces for one pre-token; unmatched characters become UNK.
fn wordpiece(vocab: &Vocab, word: &str, out: &mut Vec<u32>) {
    let chars: Vec<char> = word.chars().collect();
    let mut start = 0;
    while start < chars.len() {
        let mut found = None;
        for end in (start + 1..=chars.len()).rev() {
            let body: String = chars[start..end].iter().collect();
            let piece = if start == 0 { body } else { format!("{CONTINUATION}{body}") };
            if let Some(id) = vocab.id(&piece) {
                found = Some((id, end));
                break;
            }
        }
        match found {
            Some((id, end)) => {
                out.push(id);
                start = end;
            }
            None => {
                out.push(UNK);
                start += 1;
            }
        }
    }
}

fn pad_to(mut ids: Vec<u32>, max_len: usize) -> TokenSeq {
    let length = ids.len();
    ids.resize(max_len, PAD);
    TokenSeq { ids, length }
}

/// `[CLS] pieces [SEP]`, truncated so `[SEP]` stays last, padded to
/// `max_len` (at least 2).
pub fn encode_subword(vocab: &Vocab, text: &str, max_len: usize) -> TokenSeq {
    debug_assert_eq!(vocab.kind(), VocabKind::Subword);
    let max_len = max_len.max(2);
    let mut pieces = Vec::new();
    for w in pre_tokenize(&normalize_headline(text)) {
        wordpiece(vocab, &w, &mut pieces);
    }
    pieces.truncate(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(pieces);
    ids.push(SEP);
    pad_to(ids, max_len)
}

/// Lowercased word tokens, out-of-vocabulary to UNK, no CLS/SEP.
pub fn encode_word(vocab: &Vocab, text: &str, max_len: usize) -> TokenSeq {
    debug_assert_eq!(vocab.kind(), VocabKind::Word);
    let mut ids: Vec<u32> = word_tokens(text)
        .iter()
        .map(|w| vocab.id(w).unwrap_or(UNK))
        .collect();
    ids.truncate(max_len);
    pad_to(ids, max_len)
}

/// Dispatches on the vocabulary kind.
pub fn encode(vocab: &Vocab, text: &str, max_len: usize) -> TokenSeq {
    match vocab.kind() {
        VocabKind::Subword => encode_subword(vocab, text, max_len),
        VocabKind::Word => encode_word(vocab, text, max_len),
    }
}

/// Concatenation of the non-special pieces with `##` stripped.
pub fn decode_pieces(vocab: &Vocab, seq: &TokenSeq) -> String {
    seq.ids[..seq.length]
        .iter()
        .filter(|&&id| id >= SPECIALS.len() as u32)
        .filter_map(|&id| vocab.token(id))
        .map(|t| t.strip_prefix(CONTINUATION).unwrap_or(t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn merge_trace_contains_aa() {
        let v = train_subword_vocab(&["aaab", "aaab"], 300).unwrap();
        assert!(v.id("aa").is_some());
        // by hand: (a,##a) first by occurrence, then (aa,##a), then (aaa,##b)
        assert_eq!(&v.tokens()[v.len() - 3..], ["aa", "aaa", "aaab"]);
        assert!(v.len() <= 300);
    }

    #[test]
    fn minimum_size_gives_character_vocab() {
        let v = train_subword_vocab(&["Apple beats estimates", "Tesla misses"], 260).unwrap();
        assert!(v.tokens()[4..]
            .iter()
            .all(|t| t.strip_prefix(CONTINUATION).unwrap_or(t).chars().count() == 1));
        assert!(train_subword_vocab(&["x"], 259).is_err());
        assert!(matches!(
            train_subword_vocab::<&str>(&["   "], 300),
            Err(Error::CorpusEmpty)
        ));
    }

    #[test]
    fn disjoint_corpora_learn_disjoint_merges() {
        let a = train_subword_vocab(&["abab abab"], 270).unwrap();
        let b = train_subword_vocab(&["cdcd cdcd"], 270).unwrap();
        let merges = |v: &Vocab| -> Vec<String> {
            v.tokens()[4..]
                .iter()
                .filter(|t| t.strip_prefix(CONTINUATION).unwrap_or(t).chars().count() > 1)
                .cloned()
                .collect()
        };
        let (ma, mb) = (merges(&a), merges(&b));
        assert!(!ma.is_empty() && !mb.is_empty());
        assert!(ma.iter().all(|t| !mb.contains(t)));
    }

    #[test]
    fn encode_empty_text() {
        let v = Vocab::from_tokens(VocabKind::Subword, ["a"]).unwrap();
        let s = encode_subword(&v, "", 6);
        assert_eq!(s.ids, [CLS, SEP, PAD, PAD, PAD, PAD]);
        assert_eq!(s.length, 2);
    }

    #[test]
    fn encode_truncates_with_sep_last() {
        let v = Vocab::from_tokens(VocabKind::Subword, ["a", "##a"]).unwrap();
        let s = encode_subword(&v, "aaaaaaaaaa", 5);
        assert_eq!(s.ids.len(), 5);
        assert_eq!(s.ids[4], SEP);
        assert_eq!(s.length, 5);
    }

    #[test]
    fn greedy_longest_match() {
        let v = Vocab::from_tokens(VocabKind::Subword, ["a", "aa", "aaa", "##a", "##b"]).unwrap();
        let s = encode_subword(&v, "aaab", 8);
        let aaa = v.id("aaa").unwrap();
        let b = v.id("##b").unwrap();
        assert_eq!(&s.ids[..4], &[CLS, aaa, b, SEP]);
        assert_eq!(s.length, 4);
        // unknown residue in the middle of a word
        let s = encode_subword(&v, "aza", 8);
        assert_eq!(&s.ids[..5], &[CLS, v.id("a").unwrap(), UNK, v.id("##a").unwrap(), SEP]);
    }

    #[test]
    fn word_encoding_rules() {
        let v = build_word_vocab(&["apple beats estimates ."], 100, 1).unwrap();
        let s = encode_word(&v, "Apple beats estimates.", 6);
        let ids: Vec<u32> = ["apple", "beats", "estimates", "."].iter().map(|w| v.id(w).unwrap()).collect();
        assert_eq!(&s.ids[..4], &ids[..]);
        assert_eq!(&s.ids[4..], &[PAD, PAD]);
        assert_eq!(s.length, 4);

        let s = encode_word(&v, "zzz qqq", 4);
        assert_eq!(s.ids, [UNK, UNK, PAD, PAD]);
        assert_eq!(s.length, 2);

        let s = encode_word(&v, "", 3);
        assert_eq!(s.ids, [PAD; 3]);
        assert_eq!(s.length, 0);
    }

    #[test]
    fn word_vocab_order_and_limits() {
        let v = build_word_vocab(&["b a a c c c"], 6, 1).unwrap();
        assert_eq!(&v.tokens()[4..], ["c", "a"]);
        let v = build_word_vocab(&["b a a c c c"], 100, 2).unwrap();
        assert_eq!(&v.tokens()[4..], ["c", "a"]);
    }

    #[test]
    fn file_round_trip_and_validation() {
        let v = train_subword_vocab(&["Apple beats estimates", "Apple misses"], 280).unwrap();
        let back = Vocab::from_text(VocabKind::Subword, &v.to_text()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        assert!(Vocab::from_text(VocabKind::Word, "[UNK]\n[PAD]\n[CLS]\n[SEP]\n").is_err());
        assert!(Vocab::from_text(VocabKind::Word, "[PAD]\n[UNK]\n[CLS]\n[SEP]\nx\nx\n").is_err());
    }

    #[test]
    fn pre_tokenizer_splits_punctuation() {
        assert_eq!(pre_tokenize("Apple's Q3: +5%"), ["Apple", "'", "s", "Q3", ":", "+", "5", "%"]);
    }

    proptest! {
        #[test]
        fn subword_decode_is_subsequence(text in "\\PC{0,40}") {
            let v = train_subword_vocab(&["Apple beats estimates", "shares fall on weak guidance"], 300).unwrap();
            let s = encode_subword(&v, &text, 64);
            prop_assert!(s.ids.iter().all(|&i| (i as usize) < v.len()));
            prop_assert!(s.length <= s.ids.len());
            prop_assert_eq!(&encode_subword(&v, &text, 64), &s);
            let decoded = decode_pieces(&v, &s);
            let norm: String = normalize_headline(&text);
            let mut it = norm.chars();
            prop_assert!(decoded.chars().all(|c| it.any(|n| n == c)), "{:?} not in {:?}", decoded, norm);
        }

        #[test]
        fn word_encoding_total(text in "\\PC{0,40}", max_len in 0usize..12) {
            let v = build_word_vocab(&["apple beats estimates"], 50, 1).unwrap();
            let s = encode_word(&v, &text, max_len);
            prop_assert_eq!(s.ids.len(), max_len);
            prop_assert!(s.length <= max_len);
            prop_assert!(s.ids[s.length..].iter().all(|&i| i == PAD));
        }
    }
}
