//! Metrics emission: the per-epoch CSV and pretty-printed JSON summaries.
//!
//! The CSV layout is a stable contract — fixed column set, floats printed
//! in shortest round-trip form — so two runs that produced the same
//! numbers produce byte-identical files. That makes "same seed, same
//! output" testable with a plain byte comparison.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::SimError;

/// The fixed CSV header. Column meanings:
/// `epoch,peer,active_count,train_loss,val_accuracy,bytes_in,bytes_out,event`.
pub const CSV_HEADER: &str = "epoch,peer,active_count,train_loss,val_accuracy,bytes_in,bytes_out,event";

/// One peer's record for one completed epoch. `bytes_in`/`bytes_out` are
/// the epoch's deltas on the peer's store ledger; `event` holds zero or
/// more semicolon-joined annotations and never contains a comma.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: u64,
    pub peer: usize,
    pub active_count: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub event: String,
}

/// Renders rows under the fixed header. Floats use Rust's shortest
/// round-trip formatting, which is a pure function of the bits, so
/// identical numerics give identical bytes.
pub fn render_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        debug_assert!(!r.event.contains(','), "event text must stay comma-free");
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.peer,
            r.active_count,
            r.train_loss,
            r.val_accuracy,
            r.bytes_in,
            r.bytes_out,
            r.event
        ));
    }
    out
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<(), SimError> {
    fs::write(path, render_csv(rows))?;
    Ok(())
}

/// Writes any serializable summary as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SimError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
