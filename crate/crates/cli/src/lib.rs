//! Subcommands of the `mcil` binary. Each returns a process exit code:
//! [`EXIT_OK`], [`EXIT_RUNTIME`] or [`EXIT_USAGE`].

pub mod report;
pub mod results;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mcil_core::config::ExperimentConfig;
use mcil_core::encoders::{load_checkpoint, Model};
use mcil_core::scenario::{save_precomputed, Dataset};
use mcil_core::trainer::{run_scenario, Method, Observer, RunOptions, Session};
use mcil_core::Error;

pub use results::ResultsDoc;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const RESULTS_FILE: &str = "results.json";
pub const MATRIX_FILE: &str = "accuracy_matrix.csv";
pub const TIMING_FILE: &str = "timing.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// A failure together with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

fn is_usage_error(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::InvalidConfig(_) | Error::InvalidSplit(_) | Error::Ingest { .. })
}

fn classify(e: Error) -> Failure {
    if is_usage_error(&e) {
        Failure::usage(e.to_string())
    } else {
        Failure::runtime(e.to_string())
    }
}

fn report_exit(r: Result<(), Failure>) -> i32 {
    match r {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

/// Loads a config and applies `MCIL_SEED`.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(path).map_err(|e| Failure::usage(e.to_string()))?;
    cfg.apply_env().map_err(|e| Failure::usage(e.to_string()))?;
    Ok(cfg)
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, Failure> {
    cfg.load_dataset().map_err(|e| Failure::usage(e.to_string()))
}

fn require_parent(path: &Path) -> Result<(), Failure> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(Failure::usage(format!("output directory {} does not exist", parent.display())));
    }
    Ok(())
}

/// `gen-data --config C --out F`
pub fn cmd_gen_data(config: &Path, out: &Path) -> i32 {
    report_exit(gen_data(config, out))
}

fn gen_data(config: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    if cfg.data.synthetic.is_none() {
        return Err(Failure::usage("gen-data needs a [data] synthetic section"));
    }
    require_parent(out)?;
    let ds = load_dataset(&cfg)?;
    save_precomputed(&ds, out).map_err(|e| Failure::runtime(e.to_string()))
}

/// Prints per-task progress to stderr.
struct Progress {
    tasks: usize,
    started: Instant,
}

impl Observer for Progress {
    fn task_finished(&mut self, t: usize, _model: &Model) {
        eprintln!("task {t}/{} trained ({:.1}s)", self.tasks, self.started.elapsed().as_secs_f64());
    }
}

/// `run --config C --out D [--method M]`
pub fn cmd_run(config: &Path, out: &Path, method: Option<Method>) -> i32 {
    report_exit(run(config, out, method))
}

fn run(config: &Path, out: &Path, method: Option<Method>) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(m) = method {
        cfg.train.method = m;
    }
    let ds = load_dataset(&cfg)?;
    let results_path = out.join(RESULTS_FILE);
    if results_path.exists() {
        return Err(Failure::usage(format!("{} already holds a run", out.display())));
    }
    fs::create_dir_all(out).map_err(|e| Failure::usage(format!("{}: {e}", out.display())))?;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    if cfg.train.method != Method::ZeroShot {
        fs::create_dir_all(&ckpt_dir).map_err(|e| Failure::runtime(format!("{}: {e}", ckpt_dir.display())))?;
    }
    let echo = results::config_echo(&cfg);
    let options = RunOptions {
        checkpoint_dir: (cfg.train.method != Method::ZeroShot).then_some(ckpt_dir.as_path()),
        echo: echo.clone(),
    };
    let mut progress = Progress {
        tasks: cfg.train.tasks,
        started: Instant::now(),
    };
    let doc = match run_scenario(&ds, &cfg.model, &cfg.fusion, &cfg.train, &options, &mut progress) {
        Ok(record) => {
            write_timing(out, &record.stage_seconds)?;
            ResultsDoc::from_record(&cfg, &ds, &record, out)
        }
        Err(e) if is_usage_error(&e) => return Err(classify(e)),
        Err(e) => ResultsDoc::failed(&cfg, &ds, e.to_string()),
    };
    doc.write(&results_path).map_err(|e| Failure::runtime(e.to_string()))?;
    fs::write(out.join(MATRIX_FILE), doc.matrix_csv()).map_err(|e| Failure::runtime(e.to_string()))?;
    if doc.incomplete {
        return Err(Failure::runtime(format!(
            "run incomplete: {}",
            doc.error.as_deref().unwrap_or("unknown failure")
        )));
    }
    Ok(())
}

fn write_timing(out: &Path, seconds: &[f64]) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(&serde_json::json!({ "stage_seconds": seconds })).expect("json");
    fs::write(out.join(TIMING_FILE), text).map_err(|e| Failure::runtime(e.to_string()))
}

/// `eval --config C --checkpoint K [--task T]`: re-evaluates a saved model
/// on the stage it was saved after and prints the row as JSON.
pub fn cmd_eval(config: &Path, checkpoint: &Path, task: Option<usize>) -> i32 {
    report_exit(eval(config, checkpoint, task))
}

fn eval(config: &Path, checkpoint: &Path, task: Option<usize>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let ds = load_dataset(&cfg)?;
    let (model, echo) = load_checkpoint(checkpoint).map_err(|e| Failure::usage(e.to_string()))?;
    let t = task
        .or_else(|| echo.get("task").and_then(|v| v.as_u64()).map(|t| t as usize))
        .ok_or_else(|| Failure::usage("checkpoint does not record its task; pass --task"))?;
    let mut session = Session::new(&ds, &cfg.model, &cfg.fusion, &cfg.train).map_err(classify)?;
    session.restore(model, t).map_err(classify)?;
    let stage = session.evaluate_stage(t).map_err(classify)?;
    let out = serde_json::json!({
        "task": t,
        "row": stage.row,
        "acc": stage.pooled,
        "confusion": stage.confusion,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("json"));
    Ok(())
}

/// `report --out D RESULTS...`
pub fn cmd_report(results: &[PathBuf], out: &Path) -> i32 {
    report_exit(report::write_reports(results, out))
}
