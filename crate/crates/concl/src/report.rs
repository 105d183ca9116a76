//! Run manifests and probe reports.

use std::path::Path;
use std::time::Duration;

use concl_core::probe::ProbeReport;
use serde::Serialize;

use crate::io::{write_atomic, IoError};

pub const MANIFEST_FILE: &str = "manifest.json";

/// What a command did, enough to reproduce it.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Resolved configuration, as the command used it.
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: u64,
    pub tool_version: String,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        Self {
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            duration_secs: 0.0,
        }
    }

    /// Writes `manifest.json` into `dir`, replacing any previous one.
    pub fn write(mut self, dir: &Path, elapsed: Duration) -> Result<(), IoError> {
        self.duration_secs = elapsed.as_secs_f64();
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
    }
}

#[derive(Serialize)]
struct ProbeSummary<'a> {
    miou: f64,
    per_class_iou: Vec<(u32, f64)>,
    knn_acc: Option<f64>,
    purity: Option<f64>,
    stage: usize,
    epochs: usize,
    knn_k: usize,
    purity_k: usize,
    purity_stage: usize,
    seeds: &'a [u64],
}

/// `probe.csv` (one row per class) and `probe.json` (the summary).
pub fn write_probe_report(dir: &Path, report: &ProbeReport, seeds: &[u64]) -> Result<(), IoError> {
    let mut csv = String::from("class,iou\n");
    for (c, iou) in &report.per_class_iou {
        csv.push_str(&format!("{c},{iou}\n"));
    }
    write_atomic(&dir.join("probe.csv"), csv.as_bytes())?;
    let c = &report.config;
    let summary = ProbeSummary {
        miou: report.miou,
        per_class_iou: report.per_class_iou.clone(),
        knn_acc: report.knn_acc,
        purity: report.purity,
        stage: c.stage,
        epochs: c.epochs,
        knn_k: c.knn_k,
        purity_k: c.purity_k,
        purity_stage: c.purity_stage,
        seeds,
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_atomic(&dir.join("probe.json"), text.as_bytes())
}
