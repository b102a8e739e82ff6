//! Runs the windows x arms experiment matrix in memory and prints both
//! result tables. Writes the report directory when OUT_DIR is given.
//!
//! cargo run --example run_matrix -- [EVENTS.csv] [OUT_DIR]

use std::path::PathBuf;

use fineas::data::ColumnMap;
use fineas::experiment::{run_experiment, ExperimentSettings};
use fineas::ingest::{build_bundle, load_events, IngestConfig};
use fineas::models::{Arm, EncoderSpec};
use fineas::report::STANDARD_WINDOWS;

fn main() -> fineas::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let raw = args.first().map_or_else(
        || PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/events_2y.csv"),
        PathBuf::from,
    );
    let events = load_events(&raw, &ColumnMap::default())?.events;

    let bundles = STANDARD_WINDOWS
        .iter()
        .map(|&m| {
            build_bundle(
                &events,
                &IngestConfig {
                    window_months: m,
                    split_fractions: [0.8, 0.1, 0.1],
                    ..IngestConfig::default()
                },
            )
        })
        .collect::<fineas::Result<Vec<_>>>()?;

    let mut settings = ExperimentSettings::default();
    settings.encoder = EncoderSpec::new(0, 16, 1, 2);
    settings.bilstm.hidden = 16;
    settings.bilstm.embed_dim = 16;
    settings.tokenizer.subword_vocab_size = 300;
    settings.train.max_epochs = 10;

    let report = run_experiment(&bundles, &Arm::ALL, &settings, "example")?;
    print!("{}\n{}", report.render_table1(), report.render_table2());
    if let Some(dir) = args.get(1) {
        let files = report.write(std::path::Path::new(dir))?;
        println!("wrote {} files to {dir}", files.len());
    }
    Ok(())
}
