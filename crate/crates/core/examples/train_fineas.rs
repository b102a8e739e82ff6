//! Trains the FinEAS regressor twice on a synthetic corpus, once with the
//! encoder frozen and once fine-tuned, and compares test MSE.
//!
//! cargo run --example train_fineas -- [N_EVENTS] [MAX_EPOCHS]

use fineas::experiment::{evaluate_cell, train_cell, EncodedBundle, ExperimentSettings, Vocabs};
use fineas::ingest::{build_bundle, IngestConfig};
use fineas::models::{Arm, EncoderSpec};
use fineas::synth::{generate, SynthConfig};

fn main() -> fineas::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let events = generate(&SynthConfig {
        n_events: args.first().copied().unwrap_or(3000),
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
    settings.encoder = EncoderSpec::new(0, 32, 2, 4);
    settings.tokenizer.subword_vocab_size = 400;
    settings.train.max_epochs = args.get(1).copied().unwrap_or(15);
    let vocabs = Vocabs::build(&bundle.train, &settings.tokenizer)?;
    let data = EncodedBundle::new(&bundle, &vocabs.subword, settings.tokenizer.max_len);
    println!(
        "train={} validation={} test={} oos={} subword vocab={}",
        data.train.len(),
        data.validation.len(),
        data.test.len(),
        data.oos.len(),
        vocabs.subword.len()
    );

    for arm in [Arm::FineasFrozen, Arm::FineasFinetune] {
        let start = std::time::Instant::now();
        let (model, record) = train_cell(&data, arm, &vocabs.subword, &settings)?;
        let cell = evaluate_cell(&model, &data, &bundle.window_label, arm, &record, settings.train.batch_size)?;
        println!(
            "{arm:<16} epochs={:<3} best={:<3} test={:.4} oos={:.4} baseline={:.4} ({:.1}s)",
            record.epochs(),
            record.best_epoch,
            cell.test_mse,
            cell.oos_mse.unwrap_or(f64::NAN),
            cell.baseline_test_mse,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
