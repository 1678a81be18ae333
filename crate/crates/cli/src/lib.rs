//! Command implementations behind the `taskvec` binary.
//!
//! Every command returns a typed report and maps failures onto the exit-code
//! contract: 0 success, 1 verification failure, 2 usage or schema error,
//! 3 numeric failure.

pub mod config;

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taskvec::data::TaskStream;
use taskvec::io::{load_pool, save_params, save_pool};
use taskvec::trainer::{RunResult, Runner};
use taskvec::verify::{run_suite_capped, CheckReport, Suite};
use taskvec::{Network, ParamVector, PoolState, UnlearnMode};

pub use config::{DatasetSpec, EditSpec, Preset, RunConfigFile};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const POOL_FILE: &str = "pool.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESULT_FILE: &str = "result.json";
pub const LOG_FILE: &str = "train.log";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: msg.into(),
        }
    }

    pub fn verification(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_VERIFY,
            message: msg.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<taskvec::Error> for CliError {
    fn from(e: taskvec::Error) -> Self {
        let code = match e {
            taskvec::Error::Numeric { .. } => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::usage(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn open_pool(path: &Path) -> Result<taskvec::io::PoolFile, CliError> {
    load_pool(path).map_err(|e| {
        let mut err = CliError::from(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    })
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

/// Test-size weighted mean of per-task accuracies.
fn weighted_fa(acc: &[f64], sizes: &[usize]) -> f64 {
    let w: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let total: f64 = w.iter().sum();
    acc.iter().zip(&w).map(|(a, w)| a * w).sum::<f64>() / total
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultFile {
    pub config: serde_json::Value,
    #[serde(flatten)]
    pub result: RunResult,
    pub edits: Vec<EditReport>,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub out_dir: PathBuf,
    pub result: RunResult,
    pub edits: Vec<EditReport>,
    pub network: Network,
    pub pool: PoolState,
}

fn metrics_csv(result: &RunResult) -> String {
    let mut s = String::from("after_task,eval_task,accuracy\n");
    for (k, row) in result.acc.rows().iter().enumerate() {
        for (t, a) in row.iter().enumerate() {
            s += &format!("{},{},{}\n", k + 1, t + 1, a);
        }
    }
    s
}

/// Trains the configured sequence and writes the pool, `metrics.csv`,
/// `result.json` and `train.log` into `out` (falling back to the config's
/// `out_dir`).
pub fn train(cfg: &RunConfigFile, out: Option<&Path>) -> Result<TrainOutput, CliError> {
    let out_dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| CliError::usage("no output directory: pass --out or set out_dir"))?;
    let stream = cfg.dataset.load()?;
    for e in &cfg.edits {
        check_edit_ids(e, stream.len())?;
    }
    fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;

    let mut log = String::new();
    log += &format!(
        "algo={:?} variant={} tasks={} input_dim={} classes={}\n",
        cfg.train.algo,
        cfg.train.variant.name(),
        stream.len(),
        stream.input_dim(),
        stream.total_classes()
    );
    let mut runner = Runner::new(cfg.train.clone(), stream.input_dim())?;
    for (i, task) in stream.tasks().iter().enumerate() {
        runner.step(task)?;
        let r = runner.result();
        let risk = r.risk.last().expect("one risk sample per task");
        log += &format!(
            "task {}: probe_acc={} train_loss={} individual_acc={} fa={} composed_risk={} upper_bound={}\n",
            i + 1,
            r.probe_acc[i],
            r.train_loss[i],
            r.individual_acc[i],
            r.fa,
            risk.composed,
            risk.upper_bound
        );
    }
    let result = runner.result();
    log += &format!("final: fa={} ff={}\n", result.fa, result.ff);
    let (pool, fisher, network) = runner.into_parts();

    let mut edits = Vec::new();
    for e in &cfg.edits {
        let rep = edit_report(&network, &pool, e, Some(&stream))?;
        log += &format!("edit {}: fa_tgt={:?} fa_ctrl={:?}\n", rep.label, rep.fa_tgt, rep.fa_ctrl);
        edits.push(rep);
    }

    save_pool(&out_dir.join(POOL_FILE), &network, &pool, Some(&fisher))?;
    write_file(&out_dir.join(METRICS_FILE), metrics_csv(&result).as_bytes())?;
    let file = ResultFile {
        config: serde_json::to_value(cfg).expect("config serializes"),
        result: result.clone(),
        edits: edits.clone(),
    };
    write_file(&out_dir.join(RESULT_FILE), to_json(&file).as_bytes())?;
    write_file(&out_dir.join(LOG_FILE), log.as_bytes())?;
    Ok(TrainOutput {
        out_dir,
        result,
        edits,
        network,
        pool,
    })
}

// ---------------------------------------------------------------- edit

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub task: usize,
    pub edited: f64,
    pub full: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub label: String,
    pub edit: EditSpec,
    /// Tasks whose accuracy the edit targets.
    pub targets: Vec<usize>,
    /// Mean accuracy of the edited model on the targets.
    pub fa_tgt: Option<f64>,
    /// Mean accuracy of the edited model on the remaining tasks.
    pub fa_ctrl: Option<f64>,
    /// The same two means for the unedited composition.
    pub full_fa_tgt: Option<f64>,
    pub full_fa_ctrl: Option<f64>,
    pub per_task: Vec<TaskAccuracy>,
}

fn check_edit_ids(e: &EditSpec, count: usize) -> Result<(), CliError> {
    let ids: Vec<usize> = match e {
        EditSpec::Specialize { specialize } => specialize.clone(),
        EditSpec::Unlearn { unlearn, .. } => vec![*unlearn],
    };
    match ids.iter().find(|&&t| t == 0 || t > count) {
        Some(t) => Err(CliError::usage(format!("unknown task id {t} (pool has tasks 1..={count})"))),
        None => Ok(()),
    }
}

fn label(e: &EditSpec) -> String {
    match e {
        EditSpec::Specialize { specialize } => {
            let ids: Vec<String> = specialize.iter().map(|t| t.to_string()).collect();
            format!("specialize {}", ids.join(","))
        }
        EditSpec::Unlearn { unlearn, raw: false } => format!("unlearn {unlearn}"),
        EditSpec::Unlearn { unlearn, raw: true } => format!("unlearn {unlearn} (raw)"),
    }
}

/// Weights of the edited model.
pub fn apply_edit(pool: &PoolState, e: &EditSpec) -> Result<ParamVector, CliError> {
    check_edit_ids(e, pool.count())?;
    let theta = match e {
        EditSpec::Specialize { specialize } => pool.edit_specialize(specialize)?,
        EditSpec::Unlearn { unlearn, raw } => {
            let mode = if *raw { UnlearnMode::Subtract } else { UnlearnMode::Renormalize };
            pool.edit_unlearn(*unlearn, mode)?
        }
    };
    Ok(theta)
}

fn check_dataset(network: &Network, theta: &ParamVector, stream: &TaskStream) -> Result<(), CliError> {
    let arch = network.arch(theta.layout())?;
    if stream.input_dim() != network.input_dim {
        return Err(CliError::usage(format!(
            "dataset has input dimension {} but the pool expects {}",
            stream.input_dim(),
            network.input_dim
        )));
    }
    if stream.len() != arch.num_heads() {
        return Err(CliError::usage(format!(
            "dataset has {} tasks but the pool has {} heads",
            stream.len(),
            arch.num_heads()
        )));
    }
    for (h, task) in stream.tasks().iter().enumerate() {
        if arch.head_range(h) != task.range {
            return Err(CliError::usage(format!(
                "task {} covers classes {}..{} but head {} covers {}..{}",
                h + 1,
                task.range.start,
                task.range.end,
                h + 1,
                arch.head_range(h).start,
                arch.head_range(h).end
            )));
        }
    }
    Ok(())
}

fn per_task_accuracy(network: &Network, theta: &ParamVector, stream: &TaskStream) -> Result<Vec<f64>, CliError> {
    check_dataset(network, theta, stream)?;
    let mut out = Vec::with_capacity(stream.len());
    for task in stream.tasks() {
        out.push(network.accuracy(theta, &task.test)?);
    }
    Ok(out)
}

fn edit_report(
    network: &Network,
    pool: &PoolState,
    e: &EditSpec,
    stream: Option<&TaskStream>,
) -> Result<EditReport, CliError> {
    let theta = apply_edit(pool, e)?;
    let targets = match e {
        EditSpec::Specialize { specialize } => specialize.clone(),
        EditSpec::Unlearn { unlearn, .. } => vec![*unlearn],
    };
    let mut rep = EditReport {
        label: label(e),
        edit: e.clone(),
        targets: targets.clone(),
        fa_tgt: None,
        fa_ctrl: None,
        full_fa_tgt: None,
        full_fa_ctrl: None,
        per_task: Vec::new(),
    };
    if let Some(stream) = stream {
        let full = pool.compose(None)?;
        let edited = per_task_accuracy(network, &theta, stream)?;
        let base = per_task_accuracy(network, &full, stream)?;
        let split = |v: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let (mut tgt, mut ctrl) = (Vec::new(), Vec::new());
            for (i, &a) in v.iter().enumerate() {
                if targets.contains(&(i + 1)) {
                    tgt.push(a);
                } else {
                    ctrl.push(a);
                }
            }
            (tgt, ctrl)
        };
        let (et, ec) = split(&edited);
        let (bt, bc) = split(&base);
        rep.fa_tgt = mean(&et);
        rep.fa_ctrl = mean(&ec);
        rep.full_fa_tgt = mean(&bt);
        rep.full_fa_ctrl = mean(&bc);
        rep.per_task = edited
            .iter()
            .zip(&base)
            .enumerate()
            .map(|(i, (&e, &f))| TaskAccuracy {
                task: i + 1,
                edited: e,
                full: f,
            })
            .collect();
    }
    Ok(rep)
}

/// Applies one edit to the pool at `pool_path`, writes the edited weights
/// to `out` and, given a dataset, measures `FA_TGT` / `FA_CTRL`.
pub fn edit(pool_path: &Path, e: &EditSpec, eval: Option<&DatasetSpec>, out: &Path) -> Result<EditReport, CliError> {
    let file = open_pool(pool_path)?;
    let stream = eval.map(|d| d.load()).transpose()?;
    let rep = edit_report(&file.network, &file.pool, e, stream.as_ref())?;
    let theta = apply_edit(&file.pool, e)?;
    save_params(out, &file.network, &theta)?;
    Ok(rep)
}

// ---------------------------------------------------------------- eval

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: usize,
    pub vectors: usize,
    pub per_task: Vec<f64>,
    pub test_sizes: Vec<usize>,
    /// Test-size weighted mean of `per_task`.
    pub overall: f64,
}

/// Accuracy of the composed model on every task of `dataset`.
pub fn eval(pool_path: &Path, dataset: &DatasetSpec) -> Result<EvalReport, CliError> {
    let file = open_pool(pool_path)?;
    let stream = dataset.load()?;
    let theta = file.pool.compose(None)?;
    let per_task = per_task_accuracy(&file.network, &theta, &stream)?;
    let test_sizes: Vec<usize> = stream.tasks().iter().map(|t| t.test.len()).collect();
    Ok(EvalReport {
        tasks: stream.len(),
        vectors: file.pool.count(),
        overall: weighted_fa(&per_task, &test_sizes),
        per_task,
        test_sizes,
    })
}

// ---------------------------------------------------------------- verify

/// Runs a suite and writes one line per check plus every instance residual.
pub fn verify(suite: Suite, seed: u64, out: &mut dyn std::io::Write) -> Result<Vec<CheckReport>, CliError> {
    let reports = run_suite_capped(suite, seed)?;
    let w = |out: &mut dyn std::io::Write, s: String| out.write_all(s.as_bytes()).map_err(|e| CliError::usage(e.to_string()));
    for r in &reports {
        let op = match r.bound {
            taskvec::verify::Bound::Upper => "<=",
            taskvec::verify::Bound::Lower => ">=",
        };
        w(
            out,
            format!(
                "{} {}: worst {:e} {op} {:e} over {} instances (worst seed {})\n",
                if r.pass { "PASS" } else { "FAIL" },
                r.check,
                r.max_residual,
                r.tolerance,
                r.instances,
                r.worst_seed
            ),
        )?;
        for (i, (v, s)) in r.residuals.iter().zip(&r.seeds).enumerate() {
            w(out, format!("    {} #{i} seed {s}: {v:e}\n", r.check))?;
        }
    }
    out.flush().ok();
    Ok(reports)
}

/// Turns failing reports into an exit-1 error naming the worst instance.
pub fn verify_outcome(reports: &[CheckReport]) -> Result<(), CliError> {
    let failed: Vec<&CheckReport> = reports.iter().filter(|r| !r.pass).collect();
    if failed.is_empty() {
        return Ok(());
    }
    let names: Vec<String> = failed
        .iter()
        .map(|r| format!("{} (worst seed {}, value {:e})", r.check, r.worst_seed, r.max_residual))
        .collect();
    Err(CliError::verification(format!("{} check(s) failed: {}", failed.len(), names.join("; "))))
}

pub fn print_json<T: Serialize>(v: &T) {
    let mut stdout = std::io::stdout().lock();
    let _ = stdout.write_all(to_json(v).as_bytes());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let numeric = taskvec::Error::Numeric {
            msg: "nan".into(),
            param_norm: f64::NAN,
        };
        assert_eq!(CliError::from(numeric).code, EXIT_NUMERIC);
        let io = taskvec::Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "x"));
        assert_eq!(CliError::from(io).code, EXIT_USAGE);
    }

    #[test]
    fn weighted_fa_uses_sizes() {
        assert_eq!(weighted_fa(&[1.0, 0.0], &[3, 1]), 0.75);
    }

    #[test]
    fn edit_ids_checked() {
        assert!(check_edit_ids(&EditSpec::Unlearn { unlearn: 0, raw: false }, 3).is_err());
        assert!(check_edit_ids(&EditSpec::Specialize { specialize: vec![1, 4] }, 3).is_err());
        assert!(check_edit_ids(&EditSpec::Specialize { specialize: vec![1, 3] }, 3).is_ok());
    }
}
