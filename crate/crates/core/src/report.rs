//! Serializable experiment reports and their CSV/JSON encodings.
//!
//! CSV output is comma-separated with a header row, `.` decimals, UTF-8 and
//! LF line endings. Floats are written in shortest round-trip form, so every
//! CSV re-parses to exactly the in-memory rows.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Provenance;
use crate::error::Result;
use crate::nn::Model;
use crate::train::HyperParams;

/// Assumptions recorded in every evaluation report.
pub const ASSUMPTIONS: &[&str] = &[
    "pixels scaled to [0, 1] by /255 with no mean-centering",
    "accuracies measured on the 10k MNIST test set",
    "perturbed and corrupted images are not clipped",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sigma_test: f64,
    pub accuracy: f64,
    pub mean_confidence_correct: f64,
    pub mean_k: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub hyperparams: Option<HyperParams>,
    pub model: String,
    pub model_hash: String,
    pub dataset: Provenance,
    pub corruption_seed: u64,
    pub code_version: String,
    pub assumptions: Vec<String>,
}

/// Accuracy and confidence per test-noise level, sorted by `sigma_test`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    pub fn row(&self, sigma_test: f64) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.sigma_test == sigma_test)
    }

    pub fn accuracy_at(&self, sigma_test: f64) -> Option<f64> {
        self.row(sigma_test).map(|r| r.accuracy)
    }

    /// `(sigma_test, accuracy)` pairs for plotting.
    pub fn plot_series(&self) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r.sigma_test, r.accuracy)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEntry {
    pub param: String,
    pub delta: f64,
    pub acc_before: f64,
    pub acc_after: f64,
    /// `(acc_after − acc_before) / delta`, accuracies in percentage points.
    pub sensitivity: f64,
}

impl SensitivityEntry {
    pub fn new(param: &str, delta: f64, acc_before: f64, acc_after: f64) -> Self {
        Self {
            param: param.to_string(),
            delta,
            acc_before,
            acc_after,
            sensitivity: (acc_after - acc_before) / delta,
        }
    }
}

/// Reference sensitivity published for a different dataset; carried as an
/// annotation only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSensitivity {
    pub param: String,
    pub value: f64,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub baseline: HyperParams,
    pub sigma_eval: f64,
    pub entries: Vec<SensitivityEntry>,
    pub reference: Vec<ReferenceSensitivity>,
    pub code_version: String,
}

/// Hex SHA-256 of the model's checkpoint bytes.
pub fn model_hash(model: &Model) -> String {
    let digest = Sha256::digest(model.to_checkpoint_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

pub fn from_csv<T: DeserializeOwned>(bytes: &[u8]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(bytes);
    Ok(r.deserialize().collect::<Result<Vec<T>, _>>()?)
}

/// Writes a CSV with an explicit header and string cells.
pub fn table_to_csv(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes via a sibling temp file and a rename, so readers never see a
/// partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Renders `(x, y)` series as a minimal standalone SVG line chart.
pub fn svg_line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let points = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, _) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    if !x0.is_finite() || x1 <= x0 {
        x0 = 0.0;
        x1 = x0 + 1.0;
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - y.clamp(0.0, 1.0) * (H - 2.0 * M);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\">{title}</text>\n\
         <line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">{y_label}</text>\n",
        W / 2.0,
        H - M,
        W - M,
        H - M,
        H - M,
        W / 2.0,
        H - 10.0,
        H / 2.0,
        H / 2.0,
    );
    for (i, (name, s)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>\n",
            W - M - 150.0,
            M + 15.0 * i as f64
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
