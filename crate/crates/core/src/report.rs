//! Structured report files produced by evaluation: per-attribute distance
//! reports, the cross-format consistency report, confidence summaries, and
//! judge summaries. Serialization is deterministic so identical inputs
//! yield identical bytes.

use crate::data::{FileMeta, Scenario};
use crate::judge::Dimension;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("parse error on {path}: {message}")]
    Parse { path: String, message: String },
}

/// Distance and ratio for one unordered group pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairDistance {
    pub group_a: String,
    pub group_b: String,
    pub distance: f64,
    /// distance / baseline; absent when the baseline is zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
}

/// Inter-group divergences for one attribute in one scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceReport {
    pub meta: FileMeta,
    pub attribute: String,
    pub scenario: Scenario,
    pub groups: Vec<String>,
    /// Users per group, for context when reading the numbers.
    pub group_sizes: BTreeMap<String, usize>,
    pub baseline: f64,
    /// Set when the baseline is zero and ratios are undefined.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub undefined_baseline: bool,
    pub pairs: Vec<PairDistance>,
}

/// Cross-format consistency: mean EMD over matched pairs against the
/// derangement baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub meta: FileMeta,
    pub users: usize,
    pub mean_emd: f64,
    pub baseline_emd: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    pub pairing_seed: u64,
    pub per_user: BTreeMap<String, f64>,
}

/// Mean selected-option probability per scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub meta: FileMeta,
    pub mean_confidence: BTreeMap<String, f64>,
    pub response_counts: BTreeMap<String, usize>,
}

/// Judge/human agreement for one dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub dimension: Dimension,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub icc3k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pearson: Option<f64>,
    pub shared_items: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeReport {
    pub meta: FileMeta,
    pub seeds_per_dimension: usize,
    pub per_dialogue: BTreeMap<String, BTreeMap<Dimension, f64>>,
    pub corpus_means: BTreeMap<Dimension, f64>,
    /// Corpus means from the human ratings file, when one was supplied.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub human_means: BTreeMap<Dimension, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alignment: Vec<AlignmentRow>,
}

/// Serialize a report as pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(report: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(report).expect("report serializes");
    bytes.push(b'\n');
    bytes
}

pub fn save_json<T: Serialize>(path: &Path, report: &T) -> Result<(), ReportError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| ReportError::Io {
                path: parent.display().to_string(),
                message: e.to_string(),
            })?;
        }
    }
    std::fs::write(path, to_json_bytes(report)).map_err(|e| ReportError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|e| ReportError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| ReportError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_report_bytes_are_stable() {
        let report = DistanceReport {
            meta: FileMeta::new(7),
            attribute: "age".into(),
            scenario: Scenario::Profile,
            groups: vec!["<30".into(), ">60".into()],
            group_sizes: BTreeMap::from([("<30".into(), 2), (">60".into(), 3)]),
            baseline: 0.125,
            undefined_baseline: false,
            pairs: vec![PairDistance {
                group_a: "<30".into(),
                group_b: ">60".into(),
                distance: 0.112,
                ratio: Some(0.896),
            }],
        };
        assert_eq!(to_json_bytes(&report), to_json_bytes(&report.clone()));
        let text = String::from_utf8(to_json_bytes(&report)).unwrap();
        let parsed: DistanceReport = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed.pairs[0].ratio, Some(0.896));
    }
}
