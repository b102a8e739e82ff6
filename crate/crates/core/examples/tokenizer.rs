//! Learns both vocabularies from a headline corpus and shows how
//! headlines are cut into pieces.
//!
//! cargo run --example tokenizer -- [SUBWORD_VOCAB_SIZE] ["headline" ...]

use fineas::synth::{generate, SynthConfig};
use fineas::tokenize::{build_word_vocab, decode_pieces, encode, pre_tokenize, train_subword_vocab, TokenSeq, Vocab};

fn pieces(vocab: &Vocab, seq: &TokenSeq) -> String {
    seq.ids[..seq.length]
        .iter()
        .map(|&id| vocab.token(id).unwrap_or("?"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn main() -> fineas::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let size = args.first().map_or(400, |s| s.parse().expect("SUBWORD_VOCAB_SIZE is an integer"));
    let mut probes: Vec<String> = args.iter().skip(1).cloned().collect();
    if probes.is_empty() {
        probes = vec![
            "AAPL shares soar after record quarter".into(),
            "Nvidia’s outlook beats analysts' forecasts".into(),
            "Ölpreis fällt: BP misses guidance".into(),
        ];
    }

    let events = generate(&SynthConfig {
        n_events: 2000,
        ..SynthConfig::default()
    })?;
    let corpus: Vec<&str> = events.iter().map(|e| e.headline()).collect();
    let subword = train_subword_vocab(&corpus, size)?;
    let word = build_word_vocab(&corpus, 5000, 1)?;
    println!("subword vocab: {} tokens (hash {})", subword.len(), &subword.hash()[..16]);
    println!("word vocab:    {} tokens (hash {})", word.len(), &word.hash()[..16]);

    for text in &probes {
        println!("\n{text}");
        println!("  pre-tokens: {:?}", pre_tokenize(text));
        let s = encode(&subword, text, 32);
        println!("  subword ids: {:?}", &s.ids[..s.length]);
        println!("  subword pieces: {}", pieces(&subword, &s));
        println!("  subword decoded: {}", decode_pieces(&subword, &s));
        println!("  word pieces: {}", pieces(&word, &encode(&word, text, 32)));
    }
    Ok(())
}
