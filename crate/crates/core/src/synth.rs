//! Synthetic headline corpus whose sentiment is a noisy function of one
//! cue word, for learnability and overfitting checks.
//!
//! A headline is `TICKER filler.. [cue] filler..`; its score is the cue's
//! polarity (0 without a cue) plus Gaussian noise, clamped to `[-1, 1]`.

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::data::NewsEvent;
use crate::error::{Error, Result};
use crate::numeric::rng::{self, stream};

pub const CUES: [(&str, f64); 6] = [
    ("soars", 0.9),
    ("beats", 0.6),
    ("edges", 0.3),
    ("slips", -0.3),
    ("misses", -0.6),
    ("plunges", -0.9),
];

pub const FILLERS: [&str; 24] = [
    "shares", "quarter", "analysts", "report", "today", "market", "investors", "update",
    "outlook", "sales", "guidance", "trading", "session", "company", "statement", "results",
    "revenue", "forecast", "week", "sector", "board", "filing", "stock", "earnings",
];

pub const TICKERS: [&str; 20] = [
    "AAPL", "MSFT", "AMZN", "TSLA", "GOOG", "META", "NVDA", "JPM", "BAC", "XOM",
    "WMT", "DIS", "NFLX", "INTC", "AMD", "PFE", "KO", "PEP", "NKE", "ORCL",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_events: usize,
    pub n_entities: usize,
    pub noise_sigma: f64,
    /// Probability that a headline carries no cue word.
    pub neutral_share: f64,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_events: 10_000,
            n_entities: 20,
            noise_sigma: 0.1,
            neutral_share: 1.0 / 7.0,
            start: "2020-08-11T23:59:59Z".parse().expect("valid literal"),
            end: "2021-02-25T23:59:59Z".parse().expect("valid literal"),
            seed: 7,
        }
    }
}

/// Events sorted by timestamp; timestamps are whole seconds in `(start, end]`.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<NewsEvent>> {
    if cfg.n_entities == 0 || cfg.n_entities > TICKERS.len() || cfg.end <= cfg.start {
        return Err(Error::InvalidConfig(format!("synthetic corpus settings: {cfg:?}")));
    }
    let mut r = rng::seeded(cfg.seed, stream::SYNTH);
    let span = (cfg.end - cfg.start).num_seconds() as u64;
    let mut events = Vec::with_capacity(cfg.n_events);
    for _ in 0..cfg.n_events {
        let ts = cfg.start + Duration::seconds(1 + rng::below(&mut r, span) as i64);
        let ticker = TICKERS[rng::below(&mut r, cfg.n_entities as u64) as usize];
        let n_fill = 4 + rng::below(&mut r, 5) as usize;
        let mut words: Vec<&str> = (0..n_fill)
            .map(|_| FILLERS[rng::below(&mut r, FILLERS.len() as u64) as usize])
            .collect();
        let polarity = if rng::unit(&mut r) < cfg.neutral_share {
            0.0
        } else {
            let (cue, p) = CUES[rng::below(&mut r, CUES.len() as u64) as usize];
            let at = rng::below(&mut r, n_fill as u64 + 1) as usize;
            words.insert(at, cue);
            p
        };
        let score = (polarity + cfg.noise_sigma * rng::normal(&mut r)).clamp(-1.0, 1.0);
        let headline = format!("{ticker} {}", words.join(" "));
        events.push(NewsEvent::new(ts, ticker, &headline, score)?);
    }
    events.sort_by_key(|e| e.timestamp());
    Ok(events)
}

/// `n` headlines with distinct texts, all inside `(start, end]`.
pub fn lexicon_corpus(n: usize, seed: u64) -> Result<Vec<NewsEvent>> {
    let mut cfg = SynthConfig {
        n_events: n * 4,
        seed,
        ..SynthConfig::default()
    };
    cfg.noise_sigma = 0.1;
    let mut seen = std::collections::HashSet::new();
    let out: Vec<NewsEvent> = generate(&cfg)?
        .into_iter()
        .filter(|e| seen.insert(e.headline().to_string()))
        .take(n)
        .collect();
    if out.len() < n {
        return Err(Error::InvalidConfig(format!("could not draw {n} distinct headlines")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let cfg = SynthConfig {
            n_events: 500,
            ..Default::default()
        };
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        assert!(a.iter().all(|e| (-1.0..=1.0).contains(&e.sentiment())));
        assert!(a.iter().all(|e| e.timestamp() > cfg.start && e.timestamp() <= cfg.end));
        assert!(a.windows(2).all(|w| w[0].timestamp() <= w[1].timestamp()));
        let cued = a.iter().filter(|e| CUES.iter().any(|(c, _)| e.headline().contains(c))).count();
        assert!(cued > 350 && cued < 480, "{cued}");
    }

    #[test]
    fn score_tracks_cue() {
        let a = generate(&SynthConfig {
            n_events: 300,
            ..Default::default()
        })
        .unwrap();
        for e in &a {
            let p = CUES
                .iter()
                .find(|(c, _)| e.headline().split(' ').any(|w| w == *c))
                .map_or(0.0, |c| c.1);
            assert!((e.sentiment() - p).abs() < 0.6);
        }
    }

    #[test]
    fn lexicon_corpus_is_distinct() {
        let c = lexicon_corpus(64, 3).unwrap();
        assert_eq!(c.len(), 64);
        let set: std::collections::HashSet<_> = c.iter().map(|e| e.headline()).collect();
        assert_eq!(set.len(), 64);
    }
}
