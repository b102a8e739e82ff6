//! Headline records and their validation.
//!
//! A [`NewsEvent`] is the unit every other stage consumes. Construction goes
//! through [`validate_event`], which normalizes the headline and rejects
//! malformed fields with an error naming the offending column.

use std::collections::HashMap;

use chrono::{DateTime, NaiveDateTime, SecondsFormat, TimeZone, Timelike, Utc};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Canonical CSV header, in column order.
pub const CANONICAL_HEADER: [&str; 4] = ["timestamp_utc", "entity_id", "headline", "sentiment"];

/// Names of the four logical fields inside a raw record.
///
/// Defaults to the canonical header; vendor exports are adapted by renaming.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub timestamp: String,
    pub entity: String,
    pub headline: String,
    pub sentiment: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            timestamp: CANONICAL_HEADER[0].into(),
            entity: CANONICAL_HEADER[1].into(),
            headline: CANONICAL_HEADER[2].into(),
            sentiment: CANONICAL_HEADER[3].into(),
        }
    }
}

impl ColumnMap {
    /// Column names used by RavenPack news exports.
    pub fn ravenpack() -> Self {
        ColumnMap {
            timestamp: "TIMESTAMP_UTC".into(),
            entity: "COMP".into(),
            headline: "EVENT_TEXT".into(),
            sentiment: "EVENT_SENTIMENT_SCORE".into(),
        }
    }
}

/// One headline with its sentiment target.
#[derive(Debug, Clone, PartialEq)]
pub struct NewsEvent {
    timestamp: DateTime<Utc>,
    entity_id: String,
    headline: String,
    sentiment: f64,
}

impl NewsEvent {
    /// Builds an event from already typed values, applying the same checks as
    /// [`validate_event`].
    pub fn new(
        timestamp: DateTime<Utc>,
        entity_id: impl Into<String>,
        headline: &str,
        sentiment: f64,
    ) -> Result<Self> {
        let headline = normalize_headline(headline);
        if headline.is_empty() {
            return Err(Error::EmptyHeadline("headline".into()));
        }
        check_score("sentiment", sentiment, &sentiment.to_string())?;
        Ok(NewsEvent {
            timestamp: timestamp.with_nanosecond(0).unwrap_or(timestamp),
            entity_id: entity_id.into(),
            headline,
            sentiment,
        })
    }

    pub fn timestamp(&self) -> DateTime<Utc> {
        self.timestamp
    }

    pub fn entity_id(&self) -> &str {
        &self.entity_id
    }

    /// Normalized headline text.
    pub fn headline(&self) -> &str {
        &self.headline
    }

    pub fn sentiment(&self) -> f64 {
        self.sentiment
    }

    /// The four canonical CSV fields, in header order.
    pub fn to_record(&self) -> [String; 4] {
        [
            format_timestamp(self.timestamp),
            self.entity_id.clone(),
            self.headline.clone(),
            self.sentiment.to_string(),
        ]
    }

    /// The record as a canonical field map, suitable for [`validate_event`].
    pub fn to_field_map(&self) -> HashMap<String, String> {
        CANONICAL_HEADER
            .iter()
            .map(|k| k.to_string())
            .zip(self.to_record())
            .collect()
    }
}

/// Trims, collapses internal whitespace runs to one space, and applies NFC.
pub fn normalize_headline(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// RFC 3339 with second precision and a `Z` suffix.
pub fn format_timestamp(ts: DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Accepts RFC 3339 (any offset, converted to UTC) and naive
/// `YYYY-MM-DD HH:MM:SS[.fff]` / `YYYY-MM-DDTHH:MM:SS[.fff]`, read as UTC.
/// Sub-second digits are truncated.
pub fn parse_timestamp(raw: &str) -> Option<DateTime<Utc>> {
    let raw = raw.trim();
    let parsed = DateTime::parse_from_rfc3339(raw)
        .map(|dt| dt.with_timezone(&Utc))
        .ok()
        .or_else(|| {
            ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f"]
                .iter()
                .find_map(|fmt| NaiveDateTime::parse_from_str(raw, fmt).ok())
                .map(|naive| Utc.from_utc_datetime(&naive))
        })?;
    parsed.with_nanosecond(0)
}

fn check_score(field: &str, value: f64, raw: &str) -> Result<()> {
    // NaN fails the range test as well
    if (-1.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::ScoreOutOfRange {
            field: field.to_string(),
            value: raw.to_string(),
        })
    }
}

/// Validates a raw field map (keys named by `columns`) into a [`NewsEvent`].
///
/// Fields are checked in the order timestamp, entity, headline, sentiment; the
/// first failure is returned.
pub fn validate_event(raw: &HashMap<String, String>, columns: &ColumnMap) -> Result<NewsEvent> {
    let get = |key: &str| {
        raw.get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::MissingField(key.to_string()))
    };
    let ts_raw = get(&columns.timestamp)?;
    let entity = get(&columns.entity)?;
    let text = get(&columns.headline)?;
    let score_raw = get(&columns.sentiment)?;

    let timestamp = parse_timestamp(ts_raw).ok_or_else(|| Error::BadTimestamp {
        field: columns.timestamp.clone(),
        value: ts_raw.to_string(),
    })?;
    let entity_id = entity.trim();
    if entity_id.is_empty() {
        return Err(Error::MissingField(columns.entity.clone()));
    }
    let headline = normalize_headline(text);
    if headline.is_empty() {
        return Err(Error::EmptyHeadline(columns.headline.clone()));
    }
    let sentiment: f64 = score_raw.trim().parse().map_err(|_| Error::ScoreOutOfRange {
        field: columns.sentiment.clone(),
        value: score_raw.to_string(),
    })?;
    check_score(&columns.sentiment, sentiment, score_raw)?;

    Ok(NewsEvent {
        timestamp,
        entity_id: entity_id.to_string(),
        headline,
        sentiment,
    })
}
