//! Evaluation reports: per-cell MSE, dataset histograms, and plain-text
//! tables laid out like the paper's result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::data::NewsEvent;
use crate::error::{Error, Result};
use crate::ingest::window_label;
use crate::models::Arm;
use crate::tokenize::word_count;

pub const REPORT_FORMAT: &str = "fineas-report/1";
pub const SENTIMENT_BINS: usize = 40;
pub const STANDARD_WINDOWS: [u32; 3] = [6, 12, 24];

/// Count per entity, word-count histogram and sentiment histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histograms {
    /// `(entity_id, count)`, count descending, ties by id.
    pub companies: Vec<(String, u64)>,
    /// `(word_count, count)` for every integer from the minimum to the maximum.
    pub word_counts: Vec<(usize, u64)>,
    /// `(lower_edge, count)` over 40 equal bins of `[-1, 1]`; a score of
    /// exactly 1 falls in the last bin.
    pub sentiment: Vec<(f64, u64)>,
}

pub fn sentiment_bin(score: f64) -> usize {
    let width = 2.0 / SENTIMENT_BINS as f64;
    (((score + 1.0) / width).floor().max(0.0) as usize).min(SENTIMENT_BINS - 1)
}

pub fn emit_histograms(events: &[NewsEvent]) -> Result<Histograms> {
    if events.is_empty() {
        return Err(Error::EmptySplit("histogram input".into()));
    }
    let mut companies: BTreeMap<&str, u64> = BTreeMap::new();
    let mut words: BTreeMap<usize, u64> = BTreeMap::new();
    let mut sentiment = vec![0u64; SENTIMENT_BINS];
    for e in events {
        *companies.entry(e.entity_id()).or_default() += 1;
        *words.entry(word_count(e.headline())).or_default() += 1;
        sentiment[sentiment_bin(e.sentiment())] += 1;
    }
    let mut companies: Vec<(String, u64)> = companies.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    companies.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let lo = *words.keys().next().expect("nonempty");
    let hi = *words.keys().next_back().expect("nonempty");
    let word_counts = (lo..=hi).map(|w| (w, words.get(&w).copied().unwrap_or(0))).collect();
    let width = 2.0 / SENTIMENT_BINS as f64;
    let sentiment = sentiment
        .into_iter()
        .enumerate()
        .map(|(i, c)| (-1.0 + i as f64 * width, c))
        .collect();
    Ok(Histograms {
        companies,
        word_counts,
        sentiment,
    })
}

fn bin_csv<K: std::fmt::Display>(rows: impl Iterator<Item = (K, u64)>) -> String {
    let mut s = String::from("bin,count\n");
    for (k, c) in rows {
        let _ = writeln!(s, "{k},{c}");
    }
    s
}

impl Histograms {
    pub fn total(&self) -> [u64; 3] {
        [
            self.companies.iter().map(|c| c.1).sum(),
            self.word_counts.iter().map(|c| c.1).sum(),
            self.sentiment.iter().map(|c| c.1).sum(),
        ]
    }

    pub fn companies_csv(&self) -> String {
        bin_csv(self.companies.iter().map(|(k, c)| (k.as_str(), *c)))
    }

    pub fn word_counts_csv(&self) -> String {
        bin_csv(self.word_counts.iter().copied())
    }

    pub fn sentiment_csv(&self) -> String {
        bin_csv(self.sentiment.iter().map(|&(lo, c)| (format!("{lo:.2}"), c)))
    }
}

/// Result of one (window, arm) experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub window: String,
    pub arm: Arm,
    pub test_mse: f64,
    /// `None` when the window has no out-of-sample events.
    pub oos_mse: Option<f64>,
    pub baseline_test_mse: f64,
    pub baseline_oos_mse: Option<f64>,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub n_oos: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowHistograms {
    pub window: String,
    pub histograms: Histograms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub config_hash: String,
    pub seed: u64,
    pub cells: Vec<CellResult>,
    /// Histograms of each window's in-sample events.
    pub histograms: Vec<WindowHistograms>,
}

fn window_months(label: &str) -> u32 {
    crate::ingest::parse_window_label(label).unwrap_or(u32::MAX)
}

fn fmt_mse(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn render(title: &str, columns: &[&str], rows: &[(String, Vec<String>)], footer: &str) -> String {
    let label_w = rows.iter().map(|r| r.0.chars().count()).max().unwrap_or(0).max(12);
    let col_w = 10;
    let mut s = format!("{title}\n\n{:label_w$}", "");
    for c in columns {
        let _ = write!(s, "  {c:>col_w$}");
    }
    s.push('\n');
    for (label, cells) in rows {
        let pad = label_w - label.chars().count();
        let _ = write!(s, "{label}{}", " ".repeat(pad));
        for c in cells {
            let _ = write!(s, "  {c:>col_w$}");
        }
        s.push('\n');
    }
    s.push('\n');
    s.push_str(footer);
    s.push('\n');
    s
}

impl EvalReport {
    pub fn new(config_hash: &str, seed: u64) -> Self {
        EvalReport {
            format: REPORT_FORMAT.into(),
            config_hash: config_hash.into(),
            seed,
            cells: Vec::new(),
            histograms: Vec::new(),
        }
    }

    pub fn cell(&self, window: &str, arm: Arm) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.window == window && c.arm == arm)
    }

    /// The three standard windows plus any other window with results,
    /// shortest first.
    pub fn windows(&self) -> Vec<String> {
        let mut w: Vec<String> = STANDARD_WINDOWS.iter().map(|&m| window_label(m)).collect();
        for c in &self.cells {
            if !w.contains(&c.window) {
                w.push(c.window.clone());
            }
        }
        w.sort_by_key(|l| window_months(l));
        w
    }

    fn footer(&self) -> String {
        format!("config_hash={} seed={}", self.config_hash, self.seed)
    }

    /// Frozen-backbone comparison: each window row is test MSE, its
    /// `↪ next 2w` sub-row is out-of-sample MSE.
    pub fn render_table1(&self) -> String {
        let arms = [Arm::FineasFrozen, Arm::BertFrozen, Arm::Bilstm];
        let mut rows = Vec::new();
        for w in self.windows() {
            let months = window_months(&w);
            let cells = |oos: bool| -> Vec<String> {
                arms.iter()
                    .map(|&a| fmt_mse(self.cell(&w, a).and_then(|c| if oos { c.oos_mse } else { Some(c.test_mse) })))
                    .collect()
            };
            rows.push((format!("{months} months"), cells(false)));
            rows.push(("↪ next 2w".to_string(), cells(true)));
        }
        render(
            "Table 1. MSE for the FinEAS, BERT and BiLSTM models (FinEAS and BERT backbones frozen)",
            &["FinEAS", "BERT", "BiLSTM"],
            &rows,
            &self.footer(),
        )
    }

    /// Fine-tuned comparison. FinBERT is not implemented; its column is
    /// kept for layout and reads `n/a`.
    pub fn render_table2(&self) -> String {
        let rows: Vec<(String, Vec<String>)> = self
            .windows()
            .into_iter()
            .map(|w| {
                let v = self.cell(&w, Arm::FineasFinetune).map(|c| c.test_mse);
                (format!("{} months", window_months(&w)), vec![fmt_mse(v), "n/a".to_string()])
            })
            .collect();
        render(
            "Table 2. MSE for the FinEAS and FinBERT models (no backbone frozen)",
            &["FinEAS", "FinBERT"],
            &rows,
            &self.footer(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Writes `report.json`, `table1.txt`, `table2.txt`, one histogram CSV
    /// per window and kind, and `manifest.txt` listing every file with its
    /// SHA-256 next to the config hash and seed.
    pub fn write(&self, dir: &Path) -> Result<Vec<String>> {
        let mut files: Vec<(String, Vec<u8>)> = vec![
            ("report.json".into(), self.to_json()?.into_bytes()),
            ("table1.txt".into(), self.render_table1().into_bytes()),
            ("table2.txt".into(), self.render_table2().into_bytes()),
        ];
        for h in &self.histograms {
            let hs = &h.histograms;
            files.push((format!("hist_{}_companies.csv", h.window), hs.companies_csv().into_bytes()));
            files.push((format!("hist_{}_word_counts.csv", h.window), hs.word_counts_csv().into_bytes()));
            files.push((format!("hist_{}_sentiment.csv", h.window), hs.sentiment_csv().into_bytes()));
        }
        let mut manifest = format!("config_hash={}\nseed={}\n", self.config_hash, self.seed);
        for (name, bytes) in &files {
            artifact::write_atomic(&dir.join(name), bytes)?;
            let _ = writeln!(manifest, "sha256.{name}={}", artifact::sha256_hex(bytes));
        }
        artifact::write_atomic(&dir.join("manifest.txt"), manifest.as_bytes())?;
        let mut names: Vec<String> = files.into_iter().map(|f| f.0).collect();
        names.push("manifest.txt".into());
        Ok(names)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;

    fn ev(entity: &str, headline: &str, s: f64) -> NewsEvent {
        NewsEvent::new(Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap(), entity, headline, s).unwrap()
    }

    #[test]
    fn company_bins() {
        let h = emit_histograms(&[ev("A", "x y", 0.1), ev("B", "x", 0.2), ev("A", "x y z", 0.3)]).unwrap();
        assert_eq!(h.companies, vec![("A".to_string(), 2), ("B".to_string(), 1)]);
        assert_eq!(h.word_counts, vec![(1, 1), (2, 1), (3, 1)]);
        assert_eq!(h.companies_csv(), "bin,count\nA,2\nB,1\n");
    }

    #[test]
    fn all_zero_scores_fill_one_bin() {
        let events: Vec<_> = (0..7).map(|_| ev("A", "flat day", 0.0)).collect();
        let h = emit_histograms(&events).unwrap();
        let nonzero: Vec<_> = h.sentiment.iter().filter(|b| b.1 > 0).collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!(nonzero[0].1, 7);
        assert_eq!(sentiment_bin(-1.0), 0);
        assert_eq!(sentiment_bin(1.0), 39);
        assert!(matches!(emit_histograms(&[]), Err(Error::EmptySplit(_))));
    }

    proptest! {
        #[test]
        fn bin_totals_equal_event_count(
            rows in prop::collection::vec((0u8..5, 1usize..9, -1.0f64..=1.0), 1..80)
        ) {
            let events: Vec<_> = rows
                .iter()
                .map(|&(e, w, s)| ev(&format!("E{e}"), &vec!["w"; w].join(" "), s))
                .collect();
            let h = emit_histograms(&events).unwrap();
            let n = events.len() as u64;
            prop_assert_eq!(h.total(), [n, n, n]);
        }
    }

    fn cell(window: &str, arm: Arm, test: f64) -> CellResult {
        CellResult {
            window: window.into(),
            arm,
            test_mse: test,
            oos_mse: Some(test * 2.0),
            baseline_test_mse: 0.3,
            baseline_oos_mse: Some(0.3),
            n_train: 10,
            n_validation: 1,
            n_test: 1,
            n_oos: 2,
            epochs: 3,
            best_epoch: 1,
            stopped_early: false,
        }
    }

    #[test]
    fn table_layouts() {
        let mut r = EvalReport::new("abc", 1);
        r.cells.push(cell("6m", Arm::FineasFrozen, 0.0556));
        r.cells.push(cell("6m", Arm::FineasFinetune, 0.0044));
        let t1 = r.render_table1();
        let lines: Vec<&str> = t1.lines().collect();
        assert!(lines[2].contains("FinEAS") && lines[2].contains("BERT") && lines[2].contains("BiLSTM"));
        let labels: Vec<&str> = lines[3..9].iter().map(|l| l.split("  ").next().unwrap().trim()).collect();
        assert_eq!(labels, ["6 months", "↪ next 2w", "12 months", "↪ next 2w", "24 months", "↪ next 2w"]);
        assert!(lines[3].contains("0.0556") && lines[4].contains("0.1112"));
        let t2 = r.render_table2();
        let lines: Vec<&str> = t2.lines().collect();
        assert!(lines[2].contains("FinEAS") && lines[2].contains("FinBERT"));
        assert!(lines[3].starts_with("6 months") && lines[3].contains("0.0044") && lines[3].contains("n/a"));
        assert!(lines[5].starts_with("24 months"));
        assert!(t2.ends_with("config_hash=abc seed=1\n"));
    }

    #[test]
    fn json_round_trip() {
        let mut r = EvalReport::new("abc", 1);
        r.cells.push(cell("12m", Arm::Bilstm, 0.2));
        r.histograms.push(WindowHistograms {
            window: "12m".into(),
            histograms: emit_histograms(&[ev("A", "x", 0.5)]).unwrap(),
        });
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }
}
