//! File-backed search runs: history, summary, checkpoints and resume.
//!
//! An output directory holds
//! - `history.jsonl`: one [`HistoryRecord`] per line,
//! - `summary.csv`: `iteration,best_fitness,mean_fitness`,
//! - `checkpoint.json`: run state plus the line counts of the two logs,
//! - `best.json` and `report.json`, written when the run completes.
//!
//! Resuming truncates both logs to the line counts of the last checkpoint, so
//! lines written after it (an interrupted run) are replayed identically.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ConfigError, SearchConfig};
use super::strategy::{Individual, RecordStatus, RunState, RunStateDoc, SamplingReport, Search, SearchError, Strategy, SummaryRow};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const HISTORY_FILE: &str = "history.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const BEST_FILE: &str = "best.json";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_HEADER: &str = "iteration,best_fitness,mean_fitness";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0} already holds a run; resume it or choose another directory")]
    Exists(PathBuf),
    #[error("cannot resume: {0}")]
    Resume(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Continue from `checkpoint.json` in the output directory.
    pub resume: bool,
    /// Stop (after checkpointing) once this many steps have run in this call.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub completed: bool,
    pub steps_run: u64,
    pub best: Option<Individual>,
    pub report: RunReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: Strategy,
    pub config_hash: String,
    pub evaluator: super::evaluate::Descriptor,
    pub iterations: u64,
    pub evaluated: usize,
    pub best_fitness: Option<f64>,
    pub best_hash: Option<String>,
    pub fitness: SamplingReport,
    pub failures: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    checkpoint_version: u32,
    config_hash: String,
    history_lines: u64,
    summary_lines: u64,
    state: RunStateDoc,
}

#[derive(Serialize)]
struct BestDoc<'a> {
    hash: &'a str,
    fitness: f64,
    params: u64,
    leaf_count: usize,
    birth_index: u64,
    tree: serde_json::Value,
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Cuts `path` back to its first `lines` lines.
fn truncate_lines(path: &Path, lines: u64) -> Result<(), RunError> {
    let data = fs::read(path).map_err(io_err(path))?;
    let mut seen = 0u64;
    let mut end = 0usize;
    for (i, &b) in data.iter().enumerate() {
        if seen == lines {
            break;
        }
        if b == b'\n' {
            seen += 1;
            end = i + 1;
        }
    }
    if seen < lines {
        return Err(RunError::Resume(format!("{} has {seen} complete lines, checkpoint expects {lines}", path.display())));
    }
    let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
    f.set_len(end as u64).map_err(io_err(path))
}

fn summary_line(row: &SummaryRow) -> String {
    format!("{},{},{}", row.iteration, row.best_fitness, row.mean_fitness)
}

struct Logs {
    history: BufWriter<File>,
    summary: BufWriter<File>,
    history_lines: u64,
    summary_lines: u64,
    dir: PathBuf,
}

impl Logs {
    fn flush(&mut self) -> Result<(), RunError> {
        let h = self.dir.join(HISTORY_FILE);
        let s = self.dir.join(SUMMARY_FILE);
        self.history.flush().map_err(io_err(&h))?;
        self.history.get_ref().sync_data().map_err(io_err(&h))?;
        self.summary.flush().map_err(io_err(&s))?;
        self.summary.get_ref().sync_data().map_err(io_err(&s))
    }
}

/// Runs (or resumes) the search described by `cfg`, logging into `out_dir`.
/// Relative seed paths in `cfg` resolve against `base_dir`.
pub fn run_search(cfg: &SearchConfig, base_dir: &Path, out_dir: &Path, opts: RunOptions) -> Result<RunOutcome, RunError> {
    let resolved = cfg.resolve(base_dir)?;
    let config_hash = cfg.result_hash();
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    let history_path = out_dir.join(HISTORY_FILE);
    let summary_path = out_dir.join(SUMMARY_FILE);

    let (state, mut logs) = if opts.resume {
        let text = fs::read_to_string(&checkpoint_path).map_err(io_err(&checkpoint_path))?;
        let doc: CheckpointDoc = serde_json::from_str(&text).map_err(|e| RunError::Resume(format!("checkpoint.json: {e}")))?;
        if doc.checkpoint_version != CHECKPOINT_VERSION {
            return Err(RunError::Resume(format!("checkpoint_version {} is not supported", doc.checkpoint_version)));
        }
        if doc.config_hash != config_hash {
            return Err(RunError::Resume("the configuration differs from the one that started the run".into()));
        }
        truncate_lines(&history_path, doc.history_lines)?;
        truncate_lines(&summary_path, doc.summary_lines)?;
        let append = |p: &Path| OpenOptions::new().append(true).open(p).map(BufWriter::new).map_err(io_err(p));
        let logs = Logs {
            history: append(&history_path)?,
            summary: append(&summary_path)?,
            history_lines: doc.history_lines,
            summary_lines: doc.summary_lines,
            dir: out_dir.to_path_buf(),
        };
        (Some(RunState::from_doc(doc.state)?), logs)
    } else {
        if checkpoint_path.exists() || history_path.exists() {
            return Err(RunError::Exists(out_dir.to_path_buf()));
        }
        fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
        let create = |p: &Path| File::create(p).map(BufWriter::new).map_err(io_err(p));
        let mut logs = Logs {
            history: create(&history_path)?,
            summary: create(&summary_path)?,
            history_lines: 0,
            summary_lines: 1,
            dir: out_dir.to_path_buf(),
        };
        writeln!(logs.summary, "{SUMMARY_HEADER}").map_err(io_err(&summary_path))?;
        (None, logs)
    };

    let settings = &resolved.settings;
    let mut search = match state {
        Some(s) => Search::resume(settings, &resolved.grammar, &resolved.evaluator, s)?,
        None => Search::new(settings, &resolved.grammar, &resolved.evaluator)?,
    };

    let checkpoint = |search: &Search, logs: &mut Logs| -> Result<(), RunError> {
        logs.flush()?;
        let doc = CheckpointDoc {
            checkpoint_version: CHECKPOINT_VERSION,
            config_hash: config_hash.clone(),
            history_lines: logs.history_lines,
            summary_lines: logs.summary_lines,
            state: search.state().to_doc(),
        };
        write_atomic(&checkpoint_path, serde_json::to_string(&doc).expect("checkpoint serialises").as_bytes())
    };

    let mut steps_run = 0u64;
    while !search.is_done() {
        if opts.stop_after.is_some_and(|n| steps_run >= n) {
            break;
        }
        let out = search.step()?;
        for r in &out.records {
            let line = serde_json::to_string(r).expect("record serialises");
            writeln!(logs.history, "{line}").map_err(io_err(&history_path))?;
            logs.history_lines += 1;
        }
        for row in &out.summary {
            writeln!(logs.summary, "{}", summary_line(row)).map_err(io_err(&summary_path))?;
            logs.summary_lines += 1;
        }
        steps_run += 1;
        if search.state().next_step % cfg.checkpoint_every == 0 {
            checkpoint(&search, &mut logs)?;
        }
    }
    checkpoint(&search, &mut logs)?;

    let completed = search.is_done();
    let state = search.into_state();
    let report = build_report(cfg, &config_hash, &resolved.evaluator, &state, &history_path)?;
    if completed {
        if let Some(best) = &state.best {
            let doc = BestDoc {
                hash: &best.hash,
                fitness: best.fitness(),
                params: best.params(),
                leaf_count: best.evaluation.leaf_count,
                birth_index: best.birth_index,
                tree: serde_json::from_str(&best.tree.to_json()).expect("tree JSON round-trips"),
            };
            write_atomic(&out_dir.join(BEST_FILE), serde_json::to_string_pretty(&doc).expect("serialises").as_bytes())?;
        }
        write_atomic(&out_dir.join(REPORT_FILE), serde_json::to_string_pretty(&report).expect("serialises").as_bytes())?;
    }
    Ok(RunOutcome { out_dir: out_dir.to_path_buf(), completed, steps_run, best: state.best, report })
}

fn build_report(
    cfg: &SearchConfig,
    config_hash: &str,
    evaluator: &super::evaluate::FitnessEvaluator,
    state: &RunState,
    history_path: &Path,
) -> Result<RunReport, RunError> {
    let text = fs::read_to_string(history_path).map_err(io_err(history_path))?;
    let failures = text
        .lines()
        .filter_map(|l| serde_json::from_str::<super::strategy::HistoryRecord>(l).ok())
        .filter(|r| matches!(r.status, RecordStatus::MutationFailed | RecordStatus::SampleFailed))
        .count() as u64;
    Ok(RunReport {
        strategy: cfg.strategy,
        config_hash: config_hash.to_string(),
        evaluator: evaluator.descriptor(),
        iterations: cfg.iterations,
        evaluated: state.fitnesses.len(),
        best_fitness: state.best.as_ref().map(Individual::fitness),
        best_hash: state.best.as_ref().map(|b| b.hash.clone()),
        fitness: SamplingReport::of(&state.fitnesses),
        failures,
    })
}

/// Reads a history file back into records.
pub fn read_history(path: &Path) -> Result<Vec<super::strategy::HistoryRecord>, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| RunError::Resume(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(iterations: u64) -> SearchConfig {
        SearchConfig::parse(&format!(
            "config_version = 1\nstrategy = \"regularized-evolution\"\niterations = {iterations}\npopulation_size = 6\ntournament_size = 3\n\
             seed = 11\ncheckpoint_every = 2\n[evaluator]\nkind = \"param-surrogate\"\n"
        ))
        .unwrap()
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = config(9);
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let full = run_search(&cfg, dir.path(), &a, RunOptions::default()).unwrap();
        assert!(full.completed);
        let part = run_search(&cfg, dir.path(), &b, RunOptions { resume: false, stop_after: Some(3) }).unwrap();
        assert!(!part.completed);
        // simulate a crash that left a torn line behind the checkpoint
        OpenOptions::new().append(true).open(b.join(HISTORY_FILE)).unwrap().write_all(b"{\"iteration\":").unwrap();
        let rest = run_search(&cfg, dir.path(), &b, RunOptions { resume: true, stop_after: None }).unwrap();
        assert!(rest.completed);
        for f in [HISTORY_FILE, SUMMARY_FILE, BEST_FILE, REPORT_FILE] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
        assert_eq!(read_history(&a.join(HISTORY_FILE)).unwrap().len(), 6 + 9);
    }

    #[test]
    fn refuses_to_overwrite_and_checks_config() {
        let cfg = config(2);
        let dir = tempfile::tempdir().unwrap();
        run_search(&cfg, dir.path(), dir.path(), RunOptions::default()).unwrap();
        assert!(matches!(run_search(&cfg, dir.path(), dir.path(), RunOptions::default()), Err(RunError::Exists(_))));
        let mut other = cfg.clone();
        other.seed = 12;
        let r = run_search(&other, dir.path(), dir.path(), RunOptions { resume: true, stop_after: None });
        assert!(matches!(r, Err(RunError::Resume(_))));
    }
}
