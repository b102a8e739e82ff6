//! Loading raw event files, filtering, temporal windowing and splitting.
//!
//! The pipeline applied by [`build_bundle`] is, in order:
//!
//! 1. [`window_events`]: keep `(cutoff - window, cutoff]` as the in-window
//!    sample and `(cutoff, cutoff + oos_days]` as the out-of-sample sample;
//! 2. [`top_entities`] ranked on the in-window sample, and the same entity
//!    set retained in both samples;
//! 3. [`dedupe`] on each sample;
//! 4. [`split_random`] of the in-window sample into train/validation/test.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Months, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::data::{format_timestamp, parse_timestamp, validate_event, ColumnMap, NewsEvent, CANONICAL_HEADER};
use crate::error::{Error, Result};
use crate::numeric::rng::{self, stream};

pub const BUNDLE_FORMAT: &str = "fineas-bundle/1";
pub const PARTITIONS: [&str; 4] = ["train", "validation", "test", "oos"];

/// Filtering, windowing and split parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub top_k_entities: usize,
    pub cutoff: DateTime<Utc>,
    pub window_months: u32,
    pub oos_days: u32,
    pub split_fractions: [f64; 3],
    pub seed: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            top_k_entities: 50,
            cutoff: Utc.with_ymd_and_hms(2021, 2, 11, 23, 59, 59).unwrap(),
            window_months: 6,
            oos_days: 14,
            split_fractions: [0.995, 0.0025, 0.0025],
            seed: 42,
        }
    }
}

impl IngestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k_entities == 0 {
            return Err(Error::InvalidConfig("top_k_entities must be >= 1".into()));
        }
        if self.window_months == 0 {
            return Err(Error::InvalidConfig("window_months must be >= 1".into()));
        }
        if self.oos_days == 0 {
            return Err(Error::InvalidConfig("oos_days must be >= 1".into()));
        }
        check_fractions(&self.split_fractions)
    }

    /// Lower (exclusive) bound of the in-window range.
    pub fn window_start(&self) -> DateTime<Utc> {
        window_start(self.cutoff, self.window_months)
    }

    /// Upper (inclusive) bound of the out-of-sample range.
    pub fn oos_end(&self) -> DateTime<Utc> {
        self.cutoff + Duration::days(i64::from(self.oos_days))
    }
}

pub fn window_label(months: u32) -> String {
    format!("{months}m")
}

/// Parses `"6m"`, `"12m"`, `"24m"` (or a bare month count).
pub fn parse_window_label(label: &str) -> Result<u32> {
    label
        .trim()
        .trim_end_matches('m')
        .parse()
        .ok()
        .filter(|&m| m > 0)
        .ok_or_else(|| Error::InvalidConfig(format!("window `{label}`")))
}

fn check_fractions(f: &[f64; 3]) -> Result<()> {
    if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidConfig(format!("split fractions {f:?} must be nonnegative and sum to 1")));
    }
    Ok(())
}

/// `cutoff` minus `months` calendar months, keeping the day of month and
/// clamping to the end of shorter months.
pub fn window_start(cutoff: DateTime<Utc>, months: u32) -> DateTime<Utc> {
    cutoff
        .checked_sub_months(Months::new(months))
        .unwrap_or(DateTime::<Utc>::MIN_UTC)
}

// ---- loading -------------------------------------------------------------------

/// A row that failed validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Reject {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub events: Vec<NewsEvent>,
    pub rejects: Vec<Reject>,
}

impl LoadReport {
    /// One `line,reason` row per reject, with a header.
    pub fn rejects_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["line", "reason"])?;
        for r in &self.rejects {
            w.write_record([r.line.to_string(), r.reason.clone()])?;
        }
        Ok(String::from_utf8(csv_into_bytes(w)?).expect("utf-8 input"))
    }
}

/// Reads every row of a CSV file through `mapping`. Rows failing validation
/// are reported in [`LoadReport::rejects`]; structural CSV errors abort.
pub fn load_events(path: &Path, mapping: &ColumnMap) -> Result<LoadReport> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    load_events_from_reader(file, mapping, path)
}

pub fn load_events_from_reader<R: Read>(reader: R, mapping: &ColumnMap, origin: &Path) -> Result<LoadReport> {
    let parse_err = |e: csv::Error| Error::ParseError {
        path: origin.to_path_buf(),
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(parse_err)?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let cols = [
        (&mapping.timestamp, column(&mapping.timestamp)?),
        (&mapping.entity, column(&mapping.entity)?),
        (&mapping.headline, column(&mapping.headline)?),
        (&mapping.sentiment, column(&mapping.sentiment)?),
    ];

    let mut report = LoadReport::default();
    for record in rdr.records() {
        let record = record.map_err(parse_err)?;
        let line = record.position().map_or(0, |p| p.line());
        let fields: HashMap<String, String> = cols
            .iter()
            .filter_map(|(name, idx)| record.get(*idx).map(|v| (name.to_string(), v.to_string())))
            .collect();
        match validate_event(&fields, mapping) {
            Ok(ev) => report.events.push(ev),
            Err(e) => report.rejects.push(Reject {
                line,
                reason: e.to_string(),
            }),
        }
    }
    Ok(report)
}

/// Canonical CSV text for a list of events.
pub fn events_to_csv(events: &[NewsEvent]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CANONICAL_HEADER)?;
    for ev in events {
        w.write_record(ev.to_record())?;
    }
    csv_into_bytes(w)
}

pub(crate) fn csv_into_bytes(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Io {
        path: PathBuf::from("<memory>"),
        source: e.into_error(),
    })
}

// ---- filtering -------------------------------------------------------------------

/// The `k` entity ids with the most events, ties broken lexicographically.
pub fn top_entities(events: &[NewsEvent], k: usize) -> Vec<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for ev in events {
        *counts.entry(ev.entity_id()).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().take(k).map(|(e, _)| e.to_string()).collect()
}

pub fn retain_entities(events: &[NewsEvent], keep: &HashSet<String>) -> Vec<NewsEvent> {
    events
        .iter()
        .filter(|ev| keep.contains(ev.entity_id()))
        .cloned()
        .collect()
}

/// Keeps events of the `k` most frequent entities, preserving order.
pub fn filter_top_entities(events: &[NewsEvent], k: usize) -> Vec<NewsEvent> {
    let keep: HashSet<String> = top_entities(events, k).into_iter().collect();
    retain_entities(events, &keep)
}

fn dedupe_key(ev: &NewsEvent) -> (&str, &str, u64) {
    // +0.0 and -0.0 are the same score
    let s = if ev.sentiment() == 0.0 { 0.0 } else { ev.sentiment() };
    (ev.entity_id(), ev.headline(), s.to_bits())
}

/// Drops later copies of `(entity_id, normalized headline, sentiment)`.
pub fn dedupe(events: &[NewsEvent]) -> Vec<NewsEvent> {
    let mut seen = HashSet::new();
    events
        .iter()
        .filter(|ev| seen.insert(dedupe_key(ev)))
        .cloned()
        .collect()
}

/// Splits into the in-window sample and the out-of-sample sample.
pub fn window_events(events: &[NewsEvent], cfg: &IngestConfig) -> (Vec<NewsEvent>, Vec<NewsEvent>) {
    let (start, cutoff, end) = (cfg.window_start(), cfg.cutoff, cfg.oos_end());
    let mut in_window = Vec::new();
    let mut oos = Vec::new();
    for ev in events {
        let ts = ev.timestamp();
        if start < ts && ts <= cutoff {
            in_window.push(ev.clone());
        } else if cutoff < ts && ts <= end {
            oos.push(ev.clone());
        }
    }
    (in_window, oos)
}

// ---- splitting --------------------------------------------------------------------

/// Partition sizes for `n` items: validation and test are `round(n * f)`
/// (half away from zero), train takes the remainder.
pub fn split_sizes(n: usize, fractions: &[f64; 3]) -> (usize, usize, usize) {
    let val = ((n as f64 * fractions[1]).round() as usize).min(n);
    let test = ((n as f64 * fractions[2]).round() as usize).min(n - val);
    (n - val - test, val, test)
}

pub type Split = (Vec<NewsEvent>, Vec<NewsEvent>, Vec<NewsEvent>);

/// Seeded Fisher-Yates shuffle followed by contiguous train/validation/test slices.
pub fn split_random(events: &[NewsEvent], fractions: &[f64; 3], seed: u64) -> Result<Split> {
    check_fractions(fractions)?;
    let n = events.len();
    let (n_train, n_val, n_test) = split_sizes(n, fractions);
    if n >= 400 {
        for ((name, size), f) in ["train", "validation", "test"]
            .into_iter()
            .zip([n_train, n_val, n_test])
            .zip(fractions)
        {
            if size == 0 && *f > 0.0 {
                return Err(Error::DegenerateSplit { partition: name, n });
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut order, &mut rng::seeded(seed, stream::SPLIT));
    let pick = |idx: &[usize]| idx.iter().map(|&i| events[i].clone()).collect::<Vec<_>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}

// ---- bundles ----------------------------------------------------------------------

/// Train/validation/test/out-of-sample partitions plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: Vec<NewsEvent>,
    pub validation: Vec<NewsEvent>,
    pub test: Vec<NewsEvent>,
    pub oos: Vec<NewsEvent>,
    pub window_label: String,
    pub cutoff: DateTime<Utc>,
    pub seed: u64,
    pub config: IngestConfig,
    /// Entities retained by the top-k filter, in rank order.
    pub entities: Vec<String>,
    /// Free-form provenance entries appended to `bundle.meta`.
    pub extra_meta: Vec<(String, String)>,
}

impl DatasetBundle {
    pub fn partition(&self, name: &str) -> Option<&[NewsEvent]> {
        match name {
            "train" => Some(&self.train),
            "validation" => Some(&self.validation),
            "test" => Some(&self.test),
            "oos" => Some(&self.oos),
            _ => None,
        }
    }

    /// In-sample partitions (train + validation + test) size.
    pub fn in_sample_len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    /// Checks disjointness, time ranges and split proportions; returns the
    /// list of violated invariants.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let start = window_start(self.cutoff, self.config.window_months);
        let end = self.cutoff + Duration::days(i64::from(self.config.oos_days));
        for (name, part) in [("train", &self.train), ("validation", &self.validation), ("test", &self.test)] {
            if part.iter().any(|e| e.timestamp() > self.cutoff || e.timestamp() <= start) {
                out.push(format!("{name} has events outside the window"));
            }
        }
        if self.oos.iter().any(|e| e.timestamp() <= self.cutoff || e.timestamp() > end) {
            out.push("oos has events outside (cutoff, cutoff + oos_days]".into());
        }
        let mut seen = HashSet::new();
        let mut dup = false;
        for ev in self.train.iter().chain(&self.validation).chain(&self.test).chain(&self.oos) {
            dup |= !seen.insert(dedupe_key(ev));
        }
        if dup {
            out.push("partitions share a record".into());
        }
        let (t, v, s) = split_sizes(self.in_sample_len(), &self.config.split_fractions);
        if (t, v, s) != (self.train.len(), self.validation.len(), self.test.len()) {
            out.push(format!(
                "split sizes {:?} differ from rule {:?}",
                (self.train.len(), self.validation.len(), self.test.len()),
                (t, v, s)
            ));
        }
        out
    }

    /// `bundle.meta` contents: one `key=value` per line, fixed key order.
    pub fn meta_text(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("format", BUNDLE_FORMAT.into());
        kv("window_label", self.window_label.clone());
        kv("window_months", c.window_months.to_string());
        kv("cutoff", format_timestamp(self.cutoff));
        kv("oos_days", c.oos_days.to_string());
        kv("seed", self.seed.to_string());
        kv("prng", rng::PRNG_NAME.into());
        kv("shuffle", "fisher-yates-descending".into());
        kv(
            "split_fractions",
            c.split_fractions.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        );
        kv("top_k_entities", c.top_k_entities.to_string());
        kv("entities", self.entities.join(","));
        kv("dedupe_key", "entity_id,normalized_headline,sentiment".into());
        for name in PARTITIONS {
            kv(&format!("rows.{name}"), self.partition(name).unwrap().len().to_string());
        }
        for (k, v) in &self.extra_meta {
            kv(k, v.clone());
        }
        s
    }

    /// Writes `train.csv`, `validation.csv`, `test.csv`, `oos.csv` and
    /// `bundle.meta` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for name in PARTITIONS {
            let bytes = events_to_csv(self.partition(name).unwrap())?;
            artifact::write_atomic(&dir.join(format!("{name}.csv")), &bytes)?;
        }
        artifact::write_atomic(&dir.join("bundle.meta"), self.meta_text().as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("bundle.meta");
        let meta = parse_meta(&artifact::read_to_string(&meta_path)?);
        let get = |k: &str| {
            meta.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::InvalidConfig(format!("{}: missing `{k}`", meta_path.display())))
        };
        let bad = |k: &str| Error::InvalidConfig(format!("{}: bad `{k}`", meta_path.display()));
        if get("format")? != BUNDLE_FORMAT {
            return Err(bad("format"));
        }
        let cutoff = parse_timestamp(get("cutoff")?).ok_or_else(|| bad("cutoff"))?;
        let fractions: Vec<f64> = get("split_fractions")?
            .split(',')
            .map(|x| x.parse().map_err(|_| bad("split_fractions")))
            .collect::<Result<_>>()?;
        let config = IngestConfig {
            top_k_entities: get("top_k_entities")?.parse().map_err(|_| bad("top_k_entities"))?,
            cutoff,
            window_months: get("window_months")?.parse().map_err(|_| bad("window_months"))?,
            oos_days: get("oos_days")?.parse().map_err(|_| bad("oos_days"))?,
            split_fractions: fractions.try_into().map_err(|_| bad("split_fractions"))?,
            seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
        };
        let mut parts = Vec::new();
        for name in PARTITIONS {
            let path = dir.join(format!("{name}.csv"));
            let report = load_events(&path, &ColumnMap::default())?;
            if let Some(r) = report.rejects.first() {
                return Err(Error::ParseError {
                    path,
                    line: r.line,
                    message: r.reason.clone(),
                });
            }
            parts.push(report.events);
        }
        let known: HashSet<String> = [
            "format", "window_label", "window_months", "cutoff", "oos_days", "seed", "prng", "shuffle",
            "split_fractions", "top_k_entities", "entities", "dedupe_key",
        ]
        .iter()
        .map(|s| s.to_string())
        .chain(PARTITIONS.iter().map(|p| format!("rows.{p}")))
        .collect();
        let entities = get("entities")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        let extra_meta = meta.iter().filter(|(k, _)| !known.contains(k)).cloned().collect();
        let mut parts = parts.into_iter();
        Ok(DatasetBundle {
            train: parts.next().unwrap(),
            validation: parts.next().unwrap(),
            test: parts.next().unwrap(),
            oos: parts.next().unwrap(),
            window_label: get("window_label")?.to_string(),
            cutoff,
            seed: config.seed,
            config,
            entities,
            extra_meta,
        })
    }
}

pub fn parse_meta(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.to_string()))
        .collect()
}

/// Runs window, entity filter, dedupe and split over loaded events.
pub fn build_bundle(events: &[NewsEvent], cfg: &IngestConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let (in_window, oos) = window_events(events, cfg);
    let entities = top_entities(&in_window, cfg.top_k_entities);
    let keep: HashSet<String> = entities.iter().cloned().collect();
    let in_window = dedupe(&retain_entities(&in_window, &keep));
    let oos = dedupe(&retain_entities(&oos, &keep));
    let (train, validation, test) = split_random(&in_window, &cfg.split_fractions, cfg.seed)?;
    Ok(DatasetBundle {
        train,
        validation,
        test,
        oos,
        window_label: window_label(cfg.window_months),
        cutoff: cfg.cutoff,
        seed: cfg.seed,
        config: cfg.clone(),
        entities,
        extra_meta: Vec::new(),
    })
}
