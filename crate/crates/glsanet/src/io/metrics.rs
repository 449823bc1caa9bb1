//! Line-delimited metric records, one JSON object per model variant.

use super::atomic_write;
use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One evaluation record. `mul_add` is the raw counter value; giga-scaling is
/// display-level only and never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub model: String,
    pub per_class_top1: Vec<f64>,
    pub top1: f64,
    pub mul_add: u64,
    pub ntp_bytes: u64,
    pub tp_bytes: u64,
    pub seed: u64,
    pub config_hash: String,
}

pub fn render_lines(records: &[MetricRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_records(records: &[MetricRecord], path: &Path) -> Result<()> {
    atomic_write(path, render_lines(records).as_bytes())
}

pub fn parse_lines(text: &str) -> Result<Vec<MetricRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| crate::error::Error::Parse {
                offset: 0,
                message: format!("bad metric record: {e}"),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> MetricRecord {
        MetricRecord {
            model: "dbn-glsa".into(),
            per_class_top1: vec![100.0, 50.0],
            top1: 75.0,
            mul_add: 123456,
            ntp_bytes: 400,
            tp_bytes: 800,
            seed: 7,
            config_hash: "deadbeef".into(),
        }
    }

    #[test]
    fn keys_are_spelled_exactly() {
        let line = render_lines(&[record()]);
        for key in
            ["model", "per_class_top1", "top1", "mul_add", "ntp_bytes", "tp_bytes", "seed", "config_hash"]
        {
            assert!(line.contains(&format!("\"{key}\"")), "missing key {key} in {line}");
        }
    }

    #[test]
    fn round_trip_preserves_record() {
        let records = vec![record()];
        let text = render_lines(&records);
        assert_eq!(parse_lines(&text).unwrap(), records);
    }

    #[test]
    fn mul_add_is_not_rescaled() {
        let line = render_lines(&[record()]);
        assert!(line.contains("\"mul_add\":123456"), "{line}");
    }
}
