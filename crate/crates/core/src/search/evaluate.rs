//! Fitness evaluators. Higher is better; every evaluator is a pure function of
//! (tree, evaluator configuration, seed).

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::task::{make_synthetic_task, SyntheticTask, TaskId};
use crate::grammar::Grammar;
use crate::interp::{InterpError, Model, Phase, Program, SgdConfig, Tensor, Target};
use crate::rng::RandomSource;
use crate::sampling::SampleLimits;
use crate::tree::{ArchitectureTree, Violation};

/// Toy-training recipe: SGD with momentum on a synthetic task, scored by the
/// best validation accuracy over the epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTrainConfig {
    pub task: TaskId,
    pub task_seed: u64,
    pub epochs: usize,
    /// Training examples used, taken from the front of the training split.
    pub train_samples: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Candidates whose forward pass needs more multiply-accumulates per
    /// sample than this are scored 0 without training.
    pub max_macs: u64,
    /// Same, for the activation elements a training step keeps per sample.
    pub max_activations: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        Self {
            task: TaskId::ImPatterns,
            task_seed: 0,
            epochs: 10,
            train_samples: super::task::TRAIN_SIZE,
            batch_size: 64,
            lr: sgd.lr,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            max_macs: 20_000_000,
            max_activations: 1_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EvaluatorConfig {
    /// 1 when the tree validates and a forward pass gives finite outputs, else 0.
    Validity,
    /// `-log10(parameter count)`: smaller networks score higher.
    ParamSurrogate,
    ToyTrain(ToyTrainConfig),
}

impl EvaluatorConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EvaluatorConfig::Validity => "validity",
            EvaluatorConfig::ParamSurrogate => "param-surrogate",
            EvaluatorConfig::ToyTrain(_) => "toy-train",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalStatus {
    Ok,
    /// Loss or outputs became NaN or infinite; fitness is 0.
    Diverged,
    /// Too expensive for the toy-train budget; fitness is 0.
    OverBudget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub fitness: f64,
    pub status: EvalStatus,
    pub params: u64,
    pub leaf_count: usize,
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("tree rejected: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("tree blueprint does not match task {task}: {detail}")]
    TaskMismatch { task: TaskId, detail: String },
    #[error(transparent)]
    Interp(#[from] InterpError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptor {
    pub name: String,
    /// SHA-256 of the evaluator configuration, grammar and limits.
    pub config_hash: String,
}

#[derive(Clone, Debug)]
pub struct FitnessEvaluator {
    config: EvaluatorConfig,
    grammar: Grammar,
    limits: SampleLimits,
    task: Option<Arc<SyntheticTask>>,
}

impl FitnessEvaluator {
    pub fn new(config: EvaluatorConfig, grammar: Grammar, limits: SampleLimits) -> Self {
        let task = match &config {
            EvaluatorConfig::ToyTrain(c) => Some(Arc::new(make_synthetic_task(c.task, c.task_seed))),
            _ => None,
        };
        Self { config, grammar, limits, task }
    }

    pub fn config(&self) -> &EvaluatorConfig {
        &self.config
    }

    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    pub fn limits(&self) -> &SampleLimits {
        &self.limits
    }

    pub fn task(&self) -> Option<&SyntheticTask> {
        self.task.as_deref()
    }

    pub fn descriptor(&self) -> Descriptor {
        let doc = serde_json::json!({
            "evaluator": self.config,
            "variant": self.grammar.variant(),
            "stop_probability": self.grammar.stop_probability(),
            "limits": self.limits,
        });
        let hash = hex::encode(Sha256::digest(doc.to_string().as_bytes()));
        Descriptor { name: self.config.name().to_string(), config_hash: hash }
    }

    /// Scores `tree`; the tree must validate first.
    pub fn evaluate(&self, tree: &ArchitectureTree, seed: u64) -> Result<Evaluation, EvalError> {
        tree.validate(&self.grammar, &tree.input, &self.limits).map_err(EvalError::Invalid)?;
        let params = tree.count_parameters().map_err(|e| InterpError::Shape(e.to_string()))?;
        let leaf_count = tree.leaf_count();
        let done = |fitness: f64, status| Ok(Evaluation { fitness, status, params, leaf_count });
        let mut rng = RandomSource::new(seed);
        match &self.config {
            EvaluatorConfig::ParamSurrogate => done(-(params.max(1) as f64).log10(), EvalStatus::Ok),
            EvaluatorConfig::Validity => {
                let mut model = Model::new(tree, &mut rng)?;
                let dims: Vec<usize> = std::iter::once(2).chain(tree.input.shape.iter().copied()).collect();
                let x = Tensor::from_vec(&dims, (0..dims.iter().product()).map(|_| rng.uniform() - 0.5).collect());
                let finite = model.predict(&x, Phase::Eval)?.is_finite();
                if finite {
                    done(1.0, EvalStatus::Ok)
                } else {
                    done(0.0, EvalStatus::Diverged)
                }
            }
            EvaluatorConfig::ToyTrain(cfg) => {
                let task = self.task.as_deref().expect("toy-train evaluator owns its task");
                if tree.blueprint() != task.blueprint() {
                    return Err(EvalError::TaskMismatch {
                        task: task.id,
                        detail: format!("tree has input {} and head {:?}", tree.input, tree.head),
                    });
                }
                let program = Program::compile(tree)?;
                if program.macs_per_sample() > cfg.max_macs || program.activations_per_sample() > cfg.max_activations {
                    return done(0.0, EvalStatus::OverBudget);
                }
                let (fitness, status) = toy_train(tree, task, cfg, &mut rng)?;
                done(fitness, status)
            }
        }
    }
}

/// Scores `tree` under `evaluator` with the evaluator seed `seed`.
pub fn evaluate_fitness(tree: &ArchitectureTree, evaluator: &FitnessEvaluator, seed: u64) -> Result<Evaluation, EvalError> {
    evaluator.evaluate(tree, seed)
}

fn toy_train(
    tree: &ArchitectureTree,
    task: &SyntheticTask,
    cfg: &ToyTrainConfig,
    rng: &mut RandomSource,
) -> Result<(f64, EvalStatus), EvalError> {
    let mut model = Model::new(tree, &mut rng.split(0))?;
    let mut order_rng = rng.split(1);
    let sgd = SgdConfig { lr: cfg.lr, momentum: cfg.momentum, weight_decay: cfg.weight_decay };
    let mut order: Vec<usize> = (0..task.train.len().min(cfg.train_samples)).collect();
    let mut best = 0.0f64;
    for _ in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut order_rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let (x, y) = task.train.batch(chunk);
            let loss = model.train_step(&x, Target::Labels(&y), &sgd)?;
            if !loss.is_finite() {
                return Ok((0.0, EvalStatus::Diverged));
            }
        }
        match accuracy(&mut model, &task.val.x, &task.val.y)? {
            Some(acc) => best = best.max(acc),
            None => return Ok((0.0, EvalStatus::Diverged)),
        }
    }
    Ok((best, EvalStatus::Ok))
}

const EVAL_CHUNK: usize = 64;

/// Eval-phase accuracy, or `None` when any logit is not finite.
pub fn accuracy(model: &mut Model, x: &Tensor, y: &[usize]) -> Result<Option<f64>, InterpError> {
    let mut correct = 0usize;
    for start in (0..y.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(y.len());
        let logits = model.predict(&x.slice_batch(start, end), Phase::Eval)?;
        if !logits.is_finite() {
            return Ok(None);
        }
        let k = logits.dims[1];
        for (row, &label) in logits.data.chunks(k).zip(&y[start..end]) {
            let mut arg = 0;
            for j in 1..k {
                if row[j] > row[arg] {
                    arg = j;
                }
            }
            correct += usize::from(arg == label);
        }
    }
    Ok(Some(correct as f64 / y.len() as f64))
}
