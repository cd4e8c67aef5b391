//! Metric suite: identification, pixel fidelity, and report assembly.
//!
//! Reports hold one row per evaluated clip plus a mean/std summary per
//! metric, with just enough provenance (config hash, seed, schema version)
//! to tie them to the run that produced them. No timestamps: two identical
//! runs must produce byte-identical reports.

pub mod classify;
pub mod eval;
pub mod hue;
pub mod nway;
pub mod psnr;
pub mod ssim;

pub use classify::{
    calibrated_random_scores, frame_feature_rows, oracle_scores, top1_accuracy, video_features,
    LogisticClassifier,
};
pub use eval::evaluate;
pub use hue::{hue_pcc_frame, hue_pcc_video, hue_sat_val};
pub use nway::{nway_topk, NwayOutcome, NwayTrial};
pub use psnr::{psnr_frame, psnr_video};
pub use ssim::{ssim_frame, ssim_video};

use crate::container::SCHEMA_VERSION;
use crate::error::{Error, Result};
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

/// A metric value that survives JSON even when infinite.
///
/// Finite values serialize as numbers; infinities as the strings `"inf"`
/// and `"-inf"`. JSON numbers round-trip f64 exactly, so serialization is
/// lossless either way.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValue(pub f64);

impl Serialize for MetricValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else if self.0 == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            Err(serde::ser::Error::custom("refusing to serialize NaN metric"))
        }
    }
}

struct MetricValueVisitor;

impl Visitor<'_> for MetricValueVisitor {
    type Value = MetricValue;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a number, \"inf\", or \"-inf\"")
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<MetricValue, E> {
        Ok(MetricValue(v))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<MetricValue, E> {
        Ok(MetricValue(v as f64))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<MetricValue, E> {
        Ok(MetricValue(v as f64))
    }

    fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<MetricValue, E> {
        match v {
            "inf" => Ok(MetricValue(f64::INFINITY)),
            "-inf" => Ok(MetricValue(f64::NEG_INFINITY)),
            other => Err(de::Error::custom(format!("unknown metric value {other:?}"))),
        }
    }
}

impl<'de> Deserialize<'de> for MetricValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        d.deserialize_any(MetricValueVisitor)
    }
}

/// Metrics for one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip_id: String,
    pub subject: usize,
    pub concept: usize,
    pub block: usize,
    pub values: BTreeMap<String, MetricValue>,
}

/// Mean and sample standard deviation of one metric over clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// ddof 1; zero when there are fewer than two rows.
    pub std: f64,
    pub count: usize,
}

/// Full evaluation output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub revision: String,
    pub seed: u64,
    /// How the summary was aggregated: `"clips"` for a single subject,
    /// `"clip_then_subject"` when subject means are averaged.
    pub aggregation: String,
    /// Clip ids that could not be paired with ground truth and were
    /// excluded from the rows.
    pub missing: Vec<String>,
    pub rows: Vec<ClipMetrics>,
    pub summary: BTreeMap<String, MetricSummary>,
}

fn mean_std(vals: &[f64]) -> MetricSummary {
    let n = vals.len();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        let ss = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        (ss / (n - 1) as f64).sqrt()
    };
    MetricSummary { mean, std, count: n }
}

fn capped(v: f64, key: &str, caps: &BTreeMap<String, f64>) -> f64 {
    match caps.get(key) {
        Some(&cap) => v.min(cap),
        None => v,
    }
}

/// Build the per-metric summary over all rows. `caps` clamps named metrics
/// before averaging, which is how infinite PSNR rows enter a finite mean.
#[must_use]
pub fn summarize(
    rows: &[ClipMetrics],
    caps: &BTreeMap<String, f64>,
) -> BTreeMap<String, MetricSummary> {
    let mut grouped: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in rows {
        for (k, v) in &row.values {
            grouped.entry(k.clone()).or_default().push(capped(v.0, k, caps));
        }
    }
    grouped
        .into_iter()
        .map(|(k, vals)| (k, mean_std(&vals)))
        .collect()
}

/// Two-stage summary: mean over each subject's clips first, then mean and
/// std across subjects. `count` is the subject count.
#[must_use]
pub fn summarize_by_subject(
    rows: &[ClipMetrics],
    caps: &BTreeMap<String, f64>,
) -> BTreeMap<String, MetricSummary> {
    let mut grouped: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for row in rows {
        for (k, v) in &row.values {
            grouped
                .entry(k.clone())
                .or_default()
                .entry(row.subject)
                .or_default()
                .push(capped(v.0, k, caps));
        }
    }
    grouped
        .into_iter()
        .map(|(k, by_subject)| {
            let subject_means: Vec<f64> = by_subject
                .values()
                .map(|vals| vals.iter().sum::<f64>() / vals.len() as f64)
                .collect();
            (k, mean_std(&subject_means))
        })
        .collect()
}

/// Write a report as pretty JSON.
pub fn save_report(path: &Path, report: &MetricsReport) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Load a report written by [`save_report`].
pub fn load_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path)?;
    let report: MetricsReport = serde_json::from_str(&text)?;
    if report.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: report.schema_version,
            supported: SCHEMA_VERSION,
        });
    }
    Ok(report)
}

/// Output format for [`render_report`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
}

/// Render a report for the terminal or for spreadsheets.
#[must_use]
pub fn render_report(report: &MetricsReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Table => {
            let mut out = format!(
                "config {}  seed {}  clips {}  aggregation {}\n",
                &report.config_hash[..12.min(report.config_hash.len())],
                report.seed,
                report.rows.len(),
                report.aggregation
            );
            if !report.missing.is_empty() {
                out.push_str(&format!(
                    "excluded {} unpaired clip(s): {}\n",
                    report.missing.len(),
                    report.missing.join(", ")
                ));
            }
            let width = report
                .summary
                .keys()
                .map(|k| k.len())
                .max()
                .unwrap_or(6)
                .max(6);
            out.push_str(&format!(
                "{:width$}  {:>10}  {:>10}  {:>5}\n",
                "metric", "mean", "std", "n"
            ));
            for (k, s) in &report.summary {
                out.push_str(&format!(
                    "{k:width$}  {:>10.4}  {:>10.4}  {:>5}\n",
                    s.mean, s.std, s.count
                ));
            }
            out
        }
        ReportFormat::Csv => {
            let mut keys: Vec<&str> = Vec::new();
            for row in &report.rows {
                for k in row.values.keys() {
                    if !keys.contains(&k.as_str()) {
                        keys.push(k);
                    }
                }
            }
            keys.sort_unstable();
            let mut out = String::from("clip_id,subject,concept,block");
            for k in &keys {
                out.push(',');
                out.push_str(k);
            }
            out.push('\n');
            for row in &report.rows {
                out.push_str(&format!(
                    "{},{},{},{}",
                    row.clip_id, row.subject, row.concept, row.block
                ));
                for k in &keys {
                    out.push(',');
                    match row.values.get(*k) {
                        Some(v) if v.0.is_finite() => out.push_str(&format!("{}", v.0)),
                        Some(v) if v.0 == f64::INFINITY => out.push_str("inf"),
                        Some(v) if v.0 == f64::NEG_INFINITY => out.push_str("-inf"),
                        _ => {}
                    }
                }
                out.push('\n');
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> MetricsReport {
        let mut rows = Vec::new();
        for (i, psnr) in [(0usize, 18.25), (1, f64::INFINITY), (2, 21.5)] {
            let mut values = BTreeMap::new();
            values.insert("psnr".to_string(), MetricValue(psnr));
            values.insert("ssim".to_string(), MetricValue(0.5 + 0.1 * i as f64));
            rows.push(ClipMetrics {
                clip_id: format!("b2_c0{i}_i00"),
                subject: 0,
                concept: i,
                block: 2,
                values,
            });
        }
        let mut caps = BTreeMap::new();
        caps.insert("psnr".to_string(), 100.0);
        let summary = summarize(&rows, &caps);
        MetricsReport {
            schema_version: SCHEMA_VERSION,
            config_hash: "deadbeef".repeat(8),
            revision: crate::revision(),
            seed: 7,
            aggregation: "clips".to_string(),
            missing: Vec::new(),
            rows,
            summary,
        }
    }

    #[test]
    fn infinite_psnr_serializes_as_inf_string() {
        let report = sample_report();
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"inf\""));
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn round_trip_is_lossless() {
        let report = sample_report();
        let json = serde_json::to_string_pretty(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        // and byte-stable across a second serialization
        let json2 = serde_json::to_string_pretty(&back).unwrap();
        assert_eq!(json, json2);
    }

    #[test]
    fn summary_caps_infinite_rows() {
        let report = sample_report();
        let psnr = &report.summary["psnr"];
        let expect_mean = (18.25 + 100.0 + 21.5) / 3.0;
        assert!((psnr.mean - expect_mean).abs() < 1e-12);
        assert!(psnr.std.is_finite());
        assert_eq!(psnr.count, 3);
    }

    fn row(id: &str, subject: usize, value: f64) -> ClipMetrics {
        let mut values = BTreeMap::new();
        values.insert("m".into(), MetricValue(value));
        ClipMetrics {
            clip_id: id.into(),
            subject,
            concept: 0,
            block: 1,
            values,
        }
    }

    #[test]
    fn summary_std_uses_sample_variance() {
        let r1 = row("a", 0, 1.0);
        let r2 = row("b", 0, 3.0);
        let s = summarize(&[r1.clone(), r2], &BTreeMap::new());
        // mean 2, ddof-1 variance = ((1)^2 + (1)^2) / 1 = 2
        assert_eq!(s["m"].mean, 2.0);
        assert!((s["m"].std - 2f64.sqrt()).abs() < 1e-15);
        // single row: std defined as zero
        let s1 = summarize(&[r1], &BTreeMap::new());
        assert_eq!(s1["m"].std, 0.0);
        assert_eq!(s1["m"].count, 1);
    }

    #[test]
    fn subject_aggregation_averages_subject_means() {
        // subject 0 clips: 1 and 3 (mean 2); subject 1 clip: 6 (mean 6)
        let rows = [row("a", 0, 1.0), row("b", 0, 3.0), row("c", 1, 6.0)];
        let s = summarize_by_subject(&rows, &BTreeMap::new());
        assert_eq!(s["m"].mean, 4.0);
        assert_eq!(s["m"].count, 2);
        assert!((s["m"].std - 8f64.sqrt()).abs() < 1e-12);
        // pooled aggregation weighs clips directly and differs
        let pooled = summarize(&rows, &BTreeMap::new());
        assert!((pooled["m"].mean - 10.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn nan_refuses_to_serialize() {
        let v = MetricValue(f64::NAN);
        assert!(serde_json::to_string(&v).is_err());
    }

    #[test]
    fn save_and_load() {
        let report = sample_report();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        save_report(&path, &report).unwrap();
        let back = load_report(&path).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn unsupported_schema_rejected() {
        let mut report = sample_report();
        report.schema_version = 99;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let json = serde_json::to_string(&report).unwrap();
        std::fs::write(&path, json).unwrap();
        let err = load_report(&path).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn renderers_cover_both_formats() {
        let report = sample_report();
        let table = render_report(&report, ReportFormat::Table);
        assert!(table.contains("metric"));
        assert!(table.contains("psnr"));
        assert!(table.contains("seed 7"));
        let csv = render_report(&report, ReportFormat::Csv);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "clip_id,subject,concept,block,psnr,ssim"
        );
        assert!(csv.contains(",inf,"));
        assert_eq!(csv.lines().count(), 4);
    }
}
