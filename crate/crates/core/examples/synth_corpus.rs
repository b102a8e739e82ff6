//! Writes a synthetic headline corpus in the canonical CSV layout.
//!
//! cargo run --example synth_corpus -- OUT.csv [N_EVENTS] [START] [END] [SEED]

use fineas::ingest::events_to_csv;
use fineas::synth::{generate, SynthConfig};

fn main() -> fineas::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = args.first().map_or("synthetic_events.csv", String::as_str);
    let mut cfg = SynthConfig::default();
    if let Some(n) = args.get(1) {
        cfg.n_events = n.parse().expect("N_EVENTS is an integer");
    }
    if let Some(s) = args.get(2) {
        cfg.start = s.parse().expect("START is RFC 3339");
    }
    if let Some(e) = args.get(3) {
        cfg.end = e.parse().expect("END is RFC 3339");
    }
    if let Some(seed) = args.get(4) {
        cfg.seed = seed.parse().expect("SEED is an integer");
    }
    let events = generate(&cfg)?;
    fineas::artifact::write_atomic(std::path::Path::new(out), &events_to_csv(&events)?)?;
    println!("wrote {} events to {out}", events.len());
    for e in events.iter().take(3) {
        println!("  {} {:5} {:+.3} {}", e.timestamp(), e.entity_id(), e.sentiment(), e.headline());
    }
    Ok(())
}
