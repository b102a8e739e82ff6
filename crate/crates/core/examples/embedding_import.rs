//! Writes a table of precomputed sentence embeddings keyed by headline
//! hash, loads it back and trains only the tanh head on top.
//!
//! cargo run --example embedding_import -- [OUT.csv]

use fineas::ingest::{build_bundle, IngestConfig};
use fineas::models::{encode_events, headline_key, EmbeddingTable, FineasModel, Model};
use fineas::synth::{generate, SynthConfig, CUES};
use fineas::tokenize::build_word_vocab;
use fineas::train::{constant_baseline_mse, evaluate, train, TrainConfig};

fn main() -> fineas::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("fineas-embeddings.csv"), Into::into);
    let events = generate(&SynthConfig {
        n_events: 2000,
        ..SynthConfig::default()
    })?;

    // stand-in encoder: cue indicators plus a length feature
    let mut table = EmbeddingTable::new(CUES.len() + 1);
    for e in &events {
        let words: Vec<&str> = e.headline().split(' ').collect();
        let mut v: Vec<f64> = CUES.iter().map(|(c, _)| f64::from(u8::from(words.contains(c)))).collect();
        v.push(words.len() as f64 / 10.0);
        table.insert(headline_key(e.headline()), v)?;
    }
    table.save(&out)?;
    let table = EmbeddingTable::load(&out)?;
    println!("{} vectors of dim {} in {}", table.len(), table.dim(), out.display());

    let bundle = build_bundle(
        &events,
        &IngestConfig {
            split_fractions: [0.8, 0.1, 0.1],
            ..IngestConfig::default()
        },
    )?;
    let corpus: Vec<&str> = bundle.train.iter().map(|e| e.headline()).collect();
    let vocab = build_word_vocab(&corpus, 1000, 1)?;
    let enc = |ev| encode_events(&vocab, ev, 64);
    let (tr, va, te) = (enc(&bundle.train), enc(&bundle.validation), enc(&bundle.test));

    let mut model = Model::Fineas(FineasModel::with_embeddings(table, 42));
    let record = train(
        &mut model,
        &tr,
        &va,
        &TrainConfig {
            max_epochs: 200,
            ..TrainConfig::default()
        },
    )?;
    println!(
        "head trained {} epochs: test MSE {:.4}, constant baseline {:.4}",
        record.epochs(),
        evaluate(&model, &te, 64)?,
        constant_baseline_mse(&tr, &te)?
    );
    Ok(())
}
