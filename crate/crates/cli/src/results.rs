//! The `results.json` document written by `run` and read by `report`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mcil_core::config::ExperimentConfig;
use mcil_core::encoders::Modality;
use mcil_core::metrics::{StageConfusion, StageMetrics};
use mcil_core::params::Fnv;
use mcil_core::scenario::{ClassLabel, Dataset};
use mcil_core::trainer::{Method, RunRecord};
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Accuracies are fractions in `[0, 1]` except `M1`, which is on a 0-100
/// scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsDoc {
    pub run_id: String,
    pub timestamp: String,
    pub tool_version: String,
    pub seed: u64,
    pub method: Method,
    pub config: serde_json::Value,
    /// Sorted by id.
    pub classes: Vec<ClassLabel>,
    /// Class ids of each task.
    pub tasks: Vec<Vec<usize>>,
    pub zero_shot: Vec<f64>,
    pub pre_task: Vec<Option<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    pub per_stage: Vec<StageMetrics>,
    #[serde(rename = "NMI_f_v")]
    pub nmi_f_v: Option<f64>,
    #[serde(rename = "NMI_f_a")]
    pub nmi_f_a: Option<f64>,
    pub acc_avg: Option<f64>,
    pub last_acc: Option<f64>,
    #[serde(rename = "M1")]
    pub m1: Option<f64>,
    #[serde(rename = "M2")]
    pub m2: Option<f64>,
    pub strong_modality: Vec<Modality>,
    pub epoch_losses: Vec<Vec<f64>>,
    pub confusion: Vec<StageConfusion>,
    /// Relative to the run directory.
    pub checkpoints: Vec<String>,
    pub incomplete: bool,
    pub error: Option<String>,
}

pub fn config_echo(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

/// Stable id derived from the config echo, so reruns share it.
pub fn run_id(cfg: &ExperimentConfig) -> String {
    let mut h = Fnv::new();
    h.write(config_echo(cfg).to_string().as_bytes());
    format!("{}-{:016x}", cfg.train.method.as_str(), h.finish())
}

fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn sorted_classes(ds: &Dataset) -> Vec<ClassLabel> {
    let mut classes = ds.classes().to_vec();
    classes.sort_by_key(|c| c.id);
    classes
}

impl ResultsDoc {
    fn empty(cfg: &ExperimentConfig, ds: &Dataset) -> Self {
        Self {
            run_id: run_id(cfg),
            timestamp: timestamp(),
            tool_version: TOOL_VERSION.to_string(),
            seed: cfg.train.seed,
            method: cfg.train.method,
            config: config_echo(cfg),
            classes: sorted_classes(ds),
            tasks: Vec::new(),
            zero_shot: Vec::new(),
            pre_task: Vec::new(),
            r: Vec::new(),
            per_stage: Vec::new(),
            nmi_f_v: None,
            nmi_f_a: None,
            acc_avg: None,
            last_acc: None,
            m1: None,
            m2: None,
            strong_modality: Vec::new(),
            epoch_losses: Vec::new(),
            confusion: Vec::new(),
            checkpoints: Vec::new(),
            incomplete: false,
            error: None,
        }
    }

    /// A run that failed before its first stage.
    pub fn failed(cfg: &ExperimentConfig, ds: &Dataset, error: String) -> Self {
        Self {
            incomplete: true,
            error: Some(error),
            ..Self::empty(cfg, ds)
        }
    }

    pub fn from_record(cfg: &ExperimentConfig, ds: &Dataset, record: &RunRecord, run_dir: &Path) -> Self {
        let ledger = &record.ledger;
        let m = &ledger.matrix;
        let mut doc = Self::empty(cfg, ds);
        doc.tasks = record.stream.tasks.iter().map(|t| t.classes.clone()).collect();
        doc.zero_shot = m.zero_shot().to_vec();
        doc.pre_task = (1..=m.tasks()).map(|t| m.pre_task(t)).collect();
        doc.r = m.rows().to_vec();
        doc.per_stage = ledger.per_stage().unwrap_or_default();
        doc.nmi_f_v = ledger.nmi_fv;
        doc.nmi_f_a = ledger.nmi_fa;
        doc.acc_avg = ledger.acc_avg().ok();
        doc.last_acc = ledger.last_acc().ok();
        doc.m1 = ledger.m1().ok();
        doc.m2 = ledger.m2().ok();
        doc.strong_modality = record.strong_modality.clone();
        doc.epoch_losses = record.epoch_losses.clone();
        doc.confusion = ledger.confusion.clone();
        doc.checkpoints = record
            .checkpoints
            .iter()
            .map(|p| p.strip_prefix(run_dir).unwrap_or(p).to_string_lossy().into_owned())
            .collect();
        doc.incomplete = record.incomplete;
        doc.error = record.error.clone();
        doc
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("results serialize");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_json())
    }

    /// Reads a results file; errors name the file.
    pub fn read(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: malformed results: {e}", path.display())))
    }

    /// `R` as CSV: one row per stage, one column per task, blank above the
    /// diagonal, then the zero-shot and pre-task references.
    pub fn matrix_csv(&self) -> String {
        let tasks = self.zero_shot.len();
        let mut s = String::from("row");
        for i in 1..=tasks {
            let _ = write!(s, ",task{i}");
        }
        s.push('\n');
        let cells = |label: String, values: Vec<Option<f64>>| -> String {
            let mut line = label;
            for i in 0..tasks {
                line.push(',');
                if let Some(Some(v)) = values.get(i) {
                    let _ = write!(line, "{v}");
                }
            }
            line.push('\n');
            line
        };
        for (t, row) in self.r.iter().enumerate() {
            s += &cells(format!("stage{}", t + 1), row.iter().map(|&v| Some(v)).collect());
        }
        s += &cells("zero_shot".into(), self.zero_shot.iter().map(|&v| Some(v)).collect());
        s += &cells("pre_task".into(), self.pre_task.clone());
        s
    }

    pub fn class_name(&self, id: usize) -> String {
        self.classes
            .iter()
            .find(|c| c.id == id)
            .map_or_else(|| id.to_string(), |c| c.name.clone())
    }

    /// The document with the timestamp blanked, for reproducibility checks.
    pub fn without_timestamp(&self) -> Self {
        Self {
            timestamp: String::new(),
            ..self.clone()
        }
    }
}
