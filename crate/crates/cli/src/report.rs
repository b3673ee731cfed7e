//! The pipeline report and its published JSON schema.

use drift_ptq_core::drift::{DriftProfile, LayerSensitivity};
use drift_ptq_core::quant::MemoryReport;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{PipelineError, Result};
use crate::evaluate::Evaluation;
use crate::pipeline::{HeadFitReport, Provenance, Stage1Output, Stage2Output, Stage3Output};

pub const REPORT_SCHEMA_ID: &str = "drift-ptq-report/1";
/// JSON schema every report is validated against before it is written.
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub records: usize,
    pub episodes: usize,
    pub episode_steps: usize,
    pub spatial_bins: usize,
    /// Episodes per spatial bin.
    pub bin_histogram: Vec<usize>,
    pub max_abs_action: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub calibration_records: usize,
    pub warmup_records: usize,
    pub head_fit: HeadFitReport,
    pub interface_layer: String,
    pub interface_samples: u64,
    pub drift: DriftProfile<f64>,
    pub sensitivity: LayerSensitivity<f64>,
    pub ranking: Vec<String>,
}

impl Stage1Report {
    pub fn of(s: &Stage1Output) -> Self {
        Self {
            calibration_records: s.calibration_records,
            warmup_records: s.warmup_records,
            head_fit: s.head_fit.clone(),
            interface_layer: s.interface.layer.clone(),
            interface_samples: s.interface.moments.count(),
            drift: s.drift.clone(),
            sensitivity: s.sensitivity.clone(),
            ranking: s.sensitivity.ranking(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMemory {
    pub variant: String,
    pub memory: MemoryReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub schema: String,
    pub provenance: Provenance,
    pub dataset: DatasetSummary,
    pub stage1: Stage1Report,
    pub stage2: Stage2Output,
    pub stage3: Stage3Output,
    pub memory: Vec<VariantMemory>,
    pub evaluation: Evaluation,
}

impl PipelineReport {
    pub fn to_json(&self) -> Result<String> {
        let v = serde_json::to_value(self)?;
        validate(&v)?;
        let mut s = serde_json::to_string_pretty(&v)?;
        s.push('\n');
        Ok(s)
    }
}

pub fn schema() -> Value {
    serde_json::from_str(REPORT_SCHEMA).expect("embedded schema is valid JSON")
}

pub fn validate(report: &Value) -> Result<()> {
    let validator = jsonschema::validator_for(&schema()).map_err(|e| PipelineError::Schema(format!("schema does not compile: {e}")))?;
    let errors: Vec<String> = validator
        .iter_errors(report)
        .map(|e| format!("{} at {}", e, e.instance_path))
        .collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(PipelineError::Schema(errors.join("; ")))
    }
}
