//! Turns tokenized, geolocated, timestamped message records into a
//! `CountsPanel`: message and author filtering, elongation normalization,
//! nearest-centroid region assignment, weekly binning, vocabulary selection,
//! and distinct-author counting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use chrono::NaiveDate;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::haversine_km;
use crate::panel::{CountsPanel, RegionInfo};

pub const SECONDS_PER_WEEK: i64 = 604_800;

/// One message as read from the input JSONL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MessageRecord {
    pub author: String,
    pub lat: f64,
    pub lon: f64,
    /// Seconds since epoch, UTC.
    pub ts: i64,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub rt: bool,
    #[serde(default)]
    pub url: bool,
}

/// Author retention bounds and vocabulary size.
#[derive(Debug, Clone)]
pub struct CorpusOptions {
    pub min_author_messages: usize,
    pub max_author_messages: usize,
    /// Words ranked by total token frequency before the burst filter.
    pub top_n_words: usize,
    /// A word must be used by strictly more than this many distinct authors
    /// in some single (region, week) cell.
    pub burst_threshold: u32,
    /// Week origin; derived from the earliest retained message when absent.
    pub origin: Option<NaiveDate>,
    /// Number of weeks; derived from the latest retained message when absent.
    pub n_weeks: Option<usize>,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            min_author_messages: 10,
            max_author_messages: 1000,
            top_n_words: 10_000,
            burst_threshold: 5,
            origin: None,
            n_weeks: None,
        }
    }
}

/// Counters reported by ingestion.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub messages_read: usize,
    pub messages_malformed: usize,
    pub messages_dropped_filter: usize,
    pub messages_before_origin: usize,
    pub messages_out_of_range: usize,
    pub authors_seen: usize,
    pub authors_kept: usize,
    pub vocab_candidates: usize,
    pub vocab_size: usize,
}

/// Collapses every run of 3+ identical characters to exactly two.
pub fn normalize_elongation(token: &str) -> String {
    let mut out = String::with_capacity(token.len());
    let mut prev: Option<char> = None;
    let mut run = 0usize;
    for ch in token.chars() {
        if Some(ch) == prev {
            run += 1;
        } else {
            prev = Some(ch);
            run = 1;
        }
        if run <= 2 {
            out.push(ch);
        }
    }
    out
}

/// Message-level filter: drops retweets (flagged or containing the token
/// "RT") and messages carrying a URL.
pub fn keep_message(record: &MessageRecord) -> bool {
    if record.rt || record.url {
        return false;
    }
    !record.tokens.iter().any(|t| t == "RT")
}

/// Streaming adapter over `keep_message`.
pub fn filter_messages<I: IntoIterator<Item = MessageRecord>>(
    records: I,
) -> impl Iterator<Item = MessageRecord> {
    records.into_iter().filter(keep_message)
}

/// Authors kept when their message count lies within the inclusive bounds.
pub fn filter_authors<'a, I: IntoIterator<Item = (&'a str, usize)>>(
    counts: I,
    min: usize,
    max: usize,
) -> HashSet<String> {
    counts
        .into_iter()
        .filter(|&(_, n)| n >= min && n <= max)
        .map(|(a, _)| a.to_string())
        .collect()
}

/// Region whose centroid is nearest (great-circle) to the author's mean
/// location; ties break toward the lowest region id.
pub fn assign_region(locations: &[(f64, f64)], centroids: &[RegionInfo]) -> Result<u32> {
    if centroids.is_empty() {
        return Err(Error::config("no region centroids supplied"));
    }
    if locations.is_empty() {
        return Err(Error::data("author has no messages to locate"));
    }
    let n = locations.len() as f64;
    let mean_lat = locations.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_lon = locations.iter().map(|p| p.1).sum::<f64>() / n;
    let mut best = (f64::INFINITY, u32::MAX);
    for c in centroids {
        let d = haversine_km(mean_lat, mean_lon, c.lat, c.lon);
        if d < best.0 - 1e-9 || (f64::abs(d - best.0) <= 1e-9 && c.region_id < best.1) {
            best = (d.min(best.0), c.region_id);
        }
    }
    Ok(best.1)
}

/// Week index of a timestamp relative to the origin date (UTC midnight).
/// Timestamps before the origin are rejected.
pub fn bin_week(ts: i64, origin: NaiveDate) -> Result<usize> {
    let origin_ts = origin.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp();
    if ts < origin_ts {
        return Err(Error::data(format!("timestamp {ts} precedes origin {origin}")));
    }
    Ok(((ts - origin_ts) / SECONDS_PER_WEEK) as usize)
}

/// Picks the vocabulary: top-N words by total token frequency (hashtags and
/// usernames excluded), then keeps words whose maximum distinct-author count
/// in a single (region, week) cell strictly exceeds the burst threshold.
///
/// `token_totals` maps word -> total occurrences; `cell_authors` maps
/// word -> per-(region, week) distinct author counts.
pub fn select_vocabulary(
    token_totals: &HashMap<String, u64>,
    cell_authors: &HashMap<String, HashMap<(u32, usize), u32>>,
    top_n: usize,
    burst_threshold: u32,
) -> Vec<String> {
    let mut ranked: Vec<(&String, u64)> = token_totals
        .iter()
        .filter(|(w, _)| !w.starts_with('#') && !w.starts_with('@'))
        .map(|(w, &n)| (w, n))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(top_n);

    let mut vocab: Vec<String> = ranked
        .into_iter()
        .filter(|(w, _)| {
            cell_authors
                .get(*w)
                .map(|cells| cells.values().any(|&n| n > burst_threshold))
                .unwrap_or(false)
        })
        .map(|(w, _)| w.clone())
        .collect();
    if vocab.is_empty() {
        log::warn!("vocabulary selection produced no words");
    }
    vocab.sort();
    vocab
}

/// Per-author aggregate collected in one streaming pass.
#[derive(Debug, Default, Clone)]
struct AuthorAccum {
    n_messages: usize,
    locations: Vec<(f64, f64)>,
    /// (week, normalized tokens) per message.
    messages: Vec<(i64, Vec<String>)>,
}

/// Full corpus aggregation: filtered records to a `CountsPanel`.
///
/// Counting is set-based per author, so input order never affects the output.
pub fn build_counts_panel<I: IntoIterator<Item = MessageRecord>>(
    records: I,
    centroids: &[RegionInfo],
    opts: &CorpusOptions,
    report: &mut IngestReport,
) -> Result<CountsPanel> {
    if centroids.is_empty() {
        return Err(Error::config("no region centroids supplied"));
    }
    // Pass 1 (streaming): message filter, elongation normalization, author
    // grouping.
    let mut authors: BTreeMap<String, AuthorAccum> = BTreeMap::new();
    for rec in records {
        report.messages_read += 1;
        if !keep_message(&rec) {
            report.messages_dropped_filter += 1;
            continue;
        }
        let entry = authors.entry(rec.author.clone()).or_default();
        entry.n_messages += 1;
        entry.locations.push((rec.lat, rec.lon));
        let tokens: Vec<String> = rec.tokens.iter().map(|t| normalize_elongation(t)).collect();
        entry.messages.push((rec.ts, tokens));
    }
    report.authors_seen = authors.len();

    // Author bounds, inclusive on both sides.
    authors.retain(|_, a| {
        a.n_messages >= opts.min_author_messages && a.n_messages <= opts.max_author_messages
    });
    report.authors_kept = authors.len();

    // Resolve the time axis.
    let min_ts = authors
        .values()
        .flat_map(|a| a.messages.iter().map(|m| m.0))
        .min();
    let origin = match opts.origin {
        Some(o) => o,
        None => match min_ts {
            Some(ts) => chrono::DateTime::from_timestamp(ts, 0)
                .ok_or_else(|| Error::data(format!("invalid timestamp {ts}")))?
                .date_naive(),
            None => NaiveDate::from_ymd_opt(2010, 1, 4).unwrap(),
        },
    };
    let origin_ts = origin.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp();
    let derived_weeks = authors
        .values()
        .flat_map(|a| a.messages.iter().map(|m| m.0))
        .filter(|&ts| ts >= origin_ts)
        .map(|ts| ((ts - origin_ts) / SECONDS_PER_WEEK) as usize + 1)
        .max()
        .unwrap_or(1);
    let n_weeks = opts.n_weeks.unwrap_or(derived_weeks);

    // Pass 2: per-author region, token totals, distinct-author cell counts,
    // exposure.
    let n_regions = centroids.len();
    let mut token_totals: HashMap<String, u64> = HashMap::new();
    let mut cell_authors: HashMap<String, HashMap<(u32, usize), u32>> = HashMap::new();
    let mut exposure_cells: HashMap<(u32, usize), u32> = HashMap::new();
    // BTreeMap iteration keeps author order deterministic.
    let mut per_author_cells: Vec<(u32, HashSet<(String, usize)>)> = Vec::new();

    for accum in authors.values() {
        let region = assign_region(&accum.locations, centroids)?;
        let mut weeks_posted: HashSet<usize> = HashSet::new();
        let mut word_weeks: HashSet<(String, usize)> = HashSet::new();
        for (ts, tokens) in &accum.messages {
            if *ts < origin_ts {
                report.messages_before_origin += 1;
                continue;
            }
            let week = ((ts - origin_ts) / SECONDS_PER_WEEK) as usize;
            if week >= n_weeks {
                report.messages_out_of_range += 1;
                continue;
            }
            weeks_posted.insert(week);
            for tok in tokens {
                *token_totals.entry(tok.clone()).or_insert(0) += 1;
                word_weeks.insert((tok.clone(), week));
            }
        }
        for &(ref word, week) in &word_weeks {
            *cell_authors
                .entry(word.clone())
                .or_default()
                .entry((region, week))
                .or_insert(0) += 1;
        }
        for &week in &weeks_posted {
            *exposure_cells.entry((region, week)).or_insert(0) += 1;
        }
        per_author_cells.push((region, word_weeks));
    }

    report.vocab_candidates = token_totals
        .keys()
        .filter(|w| !w.starts_with('#') && !w.starts_with('@'))
        .count();
    let vocab = select_vocabulary(
        &token_totals,
        &cell_authors,
        opts.top_n_words,
        opts.burst_threshold,
    );
    report.vocab_size = vocab.len();
    if vocab.is_empty() {
        log::warn!("empty corpus: writing a panel with no vocabulary");
    }
    let word_index: HashMap<&str, usize> =
        vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();

    let mut c = Array3::<u32>::zeros((vocab.len(), n_regions, n_weeks));
    let mut s = Array2::<u32>::zeros((n_regions, n_weeks));
    for ((region, week), n) in &exposure_cells {
        s[[*region as usize, *week]] = *n;
    }
    for (region, word_weeks) in &per_author_cells {
        for (word, week) in word_weeks {
            if let Some(&i) = word_index.get(word.as_str()) {
                c[[i, *region as usize, *week]] += 1;
            }
        }
    }

    let panel = CountsPanel {
        c,
        s,
        vocab,
        regions: centroids.to_vec(),
        week_origin: origin,
    };
    if panel.n_words() > 0 {
        panel.validate()?;
    }
    Ok(panel)
}

/// Reads MessageRecords from JSONL, counting malformed lines. Aborts when
/// more than 10% of nonempty lines fail to parse.
pub fn read_jsonl(path: &Path, report: &mut IngestReport) -> Result<Vec<MessageRecord>> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    let mut total = 0usize;
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match serde_json::from_str::<MessageRecord>(&line) {
            Ok(rec) => records.push(rec),
            Err(_) => report.messages_malformed += 1,
        }
    }
    if total > 0 && report.messages_malformed * 10 > total {
        return Err(Error::data(format!(
            "{} of {} lines malformed in {}",
            report.messages_malformed,
            total,
            path.display()
        )));
    }
    Ok(records)
}
