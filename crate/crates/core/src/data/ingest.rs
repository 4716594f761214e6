use std::path::Path;

use chrono::NaiveDateTime;

use super::{DatasetMeta, TraceDataset};
use crate::error::{Error, Result};

#[derive(Debug)]
pub struct IngestReport {
    pub dataset: TraceDataset,
    pub skipped_rows: usize,
    pub slots: usize,
}

fn parse_timestamp(raw: &str) -> Option<f64> {
    let raw = raw.trim();
    if let Ok(secs) = raw.parse::<f64>() {
        return Some(secs);
    }
    for fmt in ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(raw, fmt) {
            let utc = t.and_utc();
            return Some(utc.timestamp() as f64 + utc.timestamp_subsec_nanos() as f64 * 1e-9);
        }
    }
    None
}

/// Locates the timestamp, context-token and generated-token columns by
/// header name, falling back to the first three columns.
fn column_indices(header: &csv::StringRecord) -> (usize, usize, usize) {
    let find = |needle: &str| {
        header
            .iter()
            .position(|h| h.to_ascii_lowercase().contains(needle))
    };
    (
        find("timestamp").or_else(|| find("time")).unwrap_or(0),
        find("context").unwrap_or(1),
        find("generated").unwrap_or(2),
    )
}

/// Aggregates a per-request trace (timestamp, context tokens, generated
/// tokens) into token totals per slot of `slot_seconds`, then cuts
/// consecutive non-overlapping sequences of `context + horizon` slots.
pub fn ingest_traces(
    path: &Path,
    slot_seconds: f64,
    context: usize,
    horizon: usize,
    norm: f64,
) -> Result<IngestReport> {
    if !(slot_seconds > 0.0) {
        return Err(Error::Argument("slot duration must be positive".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let (ti, ci, gi) = column_indices(reader.headers()?);
    let mut requests = Vec::new();
    let mut skipped = 0usize;
    for record in reader.records() {
        let Ok(record) = record else {
            skipped += 1;
            continue;
        };
        let parsed = (|| {
            let t = parse_timestamp(record.get(ti)?)?;
            let c = record.get(ci)?.trim().parse::<f64>().ok()?;
            let g = record.get(gi)?.trim().parse::<f64>().ok()?;
            (c >= 0.0 && g >= 0.0 && t.is_finite()).then_some((t, c + g))
        })();
        match parsed {
            Some(r) => requests.push(r),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} unparseable rows in {}", path.display());
    }
    if requests.is_empty() {
        return Err(Error::Ingestion(format!("no usable requests in {}", path.display())));
    }
    let start = requests.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let end = requests.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let slots = ((end - start) / slot_seconds).floor() as usize + 1;
    let mut totals = vec![0.0; slots];
    for (t, tokens) in requests {
        let idx = (((t - start) / slot_seconds).floor() as usize).min(slots - 1);
        totals[idx] += tokens;
    }
    let len = context + horizon;
    let sequences: Vec<Vec<f64>> = totals.chunks_exact(len).map(|c| c.to_vec()).collect();
    if sequences.is_empty() {
        return Err(Error::Ingestion(format!(
            "{slots} slots are too few for one sequence of {len}"
        )));
    }
    let meta = DatasetMeta {
        source: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "trace".into()),
        slot_seconds,
        seed: None,
    };
    let dataset = TraceDataset::new(sequences, context, horizon, norm, meta)?;
    Ok(IngestReport {
        dataset,
        skipped_rows: skipped,
        slots,
    })
}
