//! Loads a headline CSV, then windows, filters, dedupes and splits it.
//!
//! cargo run --example ingest -- [EVENTS.csv] [WINDOW_MONTHS] [OUT_DIR]

use std::path::PathBuf;

use fineas::data::ColumnMap;
use fineas::ingest::{build_bundle, load_events, IngestConfig};

fn main() -> fineas::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let raw = args.first().map_or_else(
        || PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/events_2y.csv"),
        PathBuf::from,
    );
    let cfg = IngestConfig {
        window_months: args.get(1).map_or(12, |m| m.parse().expect("WINDOW_MONTHS is an integer")),
        split_fractions: [0.8, 0.1, 0.1],
        ..IngestConfig::default()
    };

    let loaded = load_events(&raw, &ColumnMap::default())?;
    println!("{}: {} events, {} rejected", raw.display(), loaded.events.len(), loaded.rejects.len());
    for r in loaded.rejects.iter().take(5) {
        println!("  reject line {}: {}", r.line, r.reason);
    }

    let bundle = build_bundle(&loaded.events, &cfg)?;
    println!(
        "window {} up to {}: train={} validation={} test={} oos={}",
        bundle.window_label,
        bundle.cutoff,
        bundle.train.len(),
        bundle.validation.len(),
        bundle.test.len(),
        bundle.oos.len()
    );
    println!("entities kept: {}", bundle.entities.join(" "));
    let problems = bundle.invariant_violations();
    println!("invariant violations: {}", problems.len());

    if let Some(out) = args.get(2) {
        bundle.write(std::path::Path::new(out))?;
        println!("bundle written to {out}");
    }
    Ok(())
}
