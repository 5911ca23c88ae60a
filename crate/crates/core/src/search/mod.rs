//! Fitness evaluation and search strategies, plus the file-backed run driver.

pub mod config;
pub mod evaluate;
pub mod run;
pub mod strategy;
pub mod task;

pub use config::{ConfigError, SearchConfig};
pub use evaluate::{evaluate_fitness, Descriptor, EvalError, EvalStatus, Evaluation, EvaluatorConfig, FitnessEvaluator, ToyTrainConfig};
pub use run::{read_history, run_search, RunError, RunOptions, RunOutcome, RunReport};
pub use strategy::{
    random_sampling, random_search, regularized_evolution, HistoryRecord, Individual, Init, Population, RecordStatus, RunState,
    SamplingReport, Search, SearchError, SearchSettings, Strategy, SummaryRow,
};
pub use task::{make_synthetic_task, Dataset, SyntheticTask, TaskId};
