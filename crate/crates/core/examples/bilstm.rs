//! Trains the BiLSTM baseline on word tokens, saves a checkpoint, reloads
//! it and scores a few headlines.
//!
//! cargo run --example bilstm -- [HIDDEN] [MAX_EPOCHS]

use fineas::experiment::{evaluate_cell, train_cell, EncodedBundle, ExperimentSettings, Vocabs};
use fineas::ingest::{build_bundle, IngestConfig};
use fineas::models::{Arm, Batch, Model};
use fineas::synth::{generate, SynthConfig};
use fineas::tokenize::encode;

fn main() -> fineas::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let events = generate(&SynthConfig {
        n_events: 3000,
        ..SynthConfig::default()
    })?;
    let bundle = build_bundle(
        &events,
        &IngestConfig {
            split_fractions: [0.9, 0.05, 0.05],
            ..IngestConfig::default()
        },
    )?;

    let mut settings = ExperimentSettings::default();
    settings.bilstm.hidden = args.first().copied().unwrap_or(32);
    settings.bilstm.embed_dim = 32;
    settings.train.max_epochs = args.get(1).copied().unwrap_or(10);
    let vocabs = Vocabs::build(&bundle.train, &settings.tokenizer)?;
    let data = EncodedBundle::new(&bundle, &vocabs.word, settings.tokenizer.max_len);
    let (model, record) = train_cell(&data, Arm::Bilstm, &vocabs.word, &settings)?;
    let cell = evaluate_cell(&model, &data, &bundle.window_label, Arm::Bilstm, &record, 32)?;
    println!(
        "bilstm layers={} hidden={}: epochs={} test={:.4} oos={:.4} baseline={:.4}",
        settings.bilstm.layers,
        settings.bilstm.hidden,
        record.epochs(),
        cell.test_mse,
        cell.oos_mse.unwrap_or(f64::NAN),
        cell.baseline_test_mse
    );

    let dir = tempfile_dir();
    let path = dir.join("bilstm.ckpt");
    model.save(&path, &[("example".into(), "bilstm".into())])?;
    let (reloaded, header) = Model::load(&path, None)?;
    println!("checkpoint {} with {} header entries", path.display(), header.len());

    let texts = ["AAPL shares soars today", "AAPL shares plunges today", "AAPL shares report today"];
    let seqs: Vec<_> = texts.iter().map(|t| encode(&vocabs.word, t, 64)).collect();
    let batch = Batch::from_seqs(&seqs.iter().collect::<Vec<_>>(), vec![String::new(); texts.len()])?;
    for (t, (a, b)) in texts.iter().zip(model.predict(&batch)?.into_iter().zip(reloaded.predict(&batch)?)) {
        println!("  {a:+.4} (reloaded {b:+.4})  {t}");
    }
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("fineas-bilstm-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("temp dir is writable");
    dir
}
