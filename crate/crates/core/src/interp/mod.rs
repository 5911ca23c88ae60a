//! Reference executor: parameters, forward and reverse passes, heads and SGD.
//!
//! Everything runs in f64 on the CPU. A tree is first flattened into a
//! [`Program`]; replicated branches become separate instruction runs whose
//! parameters are keyed by replica index.

pub mod gradcheck;
mod head;
mod ops;
mod params;
mod program;
mod tensor;

pub use head::{apply_head, head_backward, HeadCache};
pub use ops::{Aux, LEAKY_SLOPE, NORM_EPS, NORM_MOMENTUM};
pub use params::{sgd_step, Grads, ParamKey, ParamSet, ParamStore, SgdConfig, WeightDump};
pub use program::{Instr, Program};
pub use tensor::Tensor;

use std::sync::Arc;

use crate::rng::RandomSource;
use crate::terminal::Terminal;
use crate::tree::{ArchitectureTree, Head};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum InterpError {
    #[error("tree does not type-check: {0}")]
    Shape(String),
    #[error("node {0} is not a well-formed module")]
    Structure(usize),
    #[error("node {0} has no shape annotation")]
    Unannotated(usize),
    #[error("input has feature dims {got:?}, expected {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("backward needs a cache from a train-phase forward")]
    EvalCache,
}

/// Intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct Cache {
    pub phase: Phase,
    values: Vec<Option<Arc<Tensor>>>,
    aux: Vec<Aux>,
}

/// Fresh parameters for `tree` (backbone leaves with replicas, then head).
pub fn init_params(tree: &ArchitectureTree, rng: &mut RandomSource) -> Result<ParamStore, InterpError> {
    let prog = Program::compile(tree)?;
    Ok(ParamStore::init(&prog, &tree.head, rng))
}

/// Runs the backbone. Train phase keeps every intermediate and updates norm running statistics.
pub fn forward(prog: &Program, params: &mut ParamStore, x: &Tensor, phase: Phase) -> Result<(Tensor, Cache), InterpError> {
    if x.dims.len() != prog.input_state.shape.len() + 1 || x.dims[1..] != prog.input_state.shape[..] {
        return Err(InterpError::InputShape { expected: prog.input_state.shape.clone(), got: x.dims[1..].to_vec() });
    }
    let train = phase == Phase::Train;
    let mut values: Vec<Option<Arc<Tensor>>> = vec![None; prog.n_values];
    values[0] = Some(Arc::new(x.clone()));
    let mut aux = Vec::with_capacity(if train { prog.instrs.len() } else { 0 });
    for (i, ins) in prog.instrs.iter().enumerate() {
        let set = ins.key.as_ref().and_then(|k| params.entries.get_mut(k));
        let t0 = std::time::Instant::now();
        let first = ins.inputs[0];
        // an input nobody reads later can be overwritten instead of copied
        let dead = !train && prog.last_use[first] == i && first != prog.output;
        let (outs, a): (Vec<Arc<Tensor>>, Aux) = match ins.op {
            Terminal::Identity => (vec![shared(&values, first)], Aux::None),
            Terminal::Clone { b } => (vec![shared(&values, first); b as usize], Aux::None),
            Terminal::Relu | Terminal::Softmax | Terminal::PosEnc if dead => {
                let mut t = owned(values[first].take().expect("value computed"));
                ops::elementwise_in_place(&ins.op, &mut t, set.as_deref());
                (vec![Arc::new(t)], Aux::None)
            }
            Terminal::Add if dead => {
                let mut t = owned(values[first].take().expect("value computed"));
                for &v in &ins.inputs[1..] {
                    t.add_assign(values[v].as_ref().expect("value computed"));
                }
                (vec![Arc::new(t)], Aux::None)
            }
            _ => {
                let xs: Vec<&Tensor> = ins.inputs.iter().map(|&v| values[v].as_deref().expect("value computed")).collect();
                let (outs, a) = ops::forward(ins, &xs, set, train);
                (outs.into_iter().map(Arc::new).collect(), a)
            }
        };
        if std::env::var("PROF").is_ok() { eprintln!("PROF {:?} {} {}", t0.elapsed(), ins.op, ins.in_state); }
        for (&v, t) in ins.outputs.iter().zip(outs) {
            values[v] = Some(t);
        }
        if train {
            aux.push(a);
        } else {
            for &v in &ins.inputs {
                if prog.last_use[v] == i && v != prog.output {
                    values[v] = None;
                }
            }
        }
    }
    let out = owned(values[prog.output].clone().expect("output computed"));
    if !train {
        values.clear();
    }
    Ok((out, Cache { phase, values, aux }))
}

fn shared(values: &[Option<Arc<Tensor>>], v: usize) -> Arc<Tensor> {
    values[v].clone().expect("value computed")
}

fn owned(t: Arc<Tensor>) -> Tensor {
    Arc::try_unwrap(t).unwrap_or_else(|t| (*t).clone())
}

/// Reverse pass from `grad` (same dims as the backbone output). Returns parameter and input gradients.
pub fn backward(prog: &Program, params: &ParamStore, cache: &Cache, grad: &Tensor) -> Result<(Grads, Tensor), InterpError> {
    if cache.phase != Phase::Train {
        return Err(InterpError::EvalCache);
    }
    let mut grads = params.zero_grads();
    grads.head.clear();
    let mut g: Vec<Option<Tensor>> = vec![None; prog.n_values];
    g[prog.output] = Some(grad.clone());
    for (i, ins) in prog.instrs.iter().enumerate().rev() {
        let value = |v: usize| cache.values[v].as_deref().expect("train cache keeps values");
        let mut gs: Vec<Tensor> = ins.outputs.iter().map(|&v| g[v].take().unwrap_or_else(|| value(v).zeros_like())).collect();
        let dxs = if ins.op == Terminal::Identity {
            vec![gs.pop().expect("one output")]
        } else {
            let xs: Vec<&Tensor> = ins.inputs.iter().map(|&v| value(v)).collect();
            let ys: Vec<&Tensor> = ins.outputs.iter().map(|&v| value(v)).collect();
            let set = ins.key.as_ref().and_then(|k| params.entries.get(k));
            let pg = ins.key.as_ref().and_then(|k| grads.entries.get_mut(k));
            ops::backward(ins, &xs, &ys, &cache.aux[i], &gs, set, pg)
        };
        for (&v, dx) in ins.inputs.iter().zip(dxs) {
            match &mut g[v] {
                Some(acc) => acc.add_assign(&dx),
                slot => *slot = Some(dx),
            }
        }
    }
    let dx = g[0].take().unwrap_or_else(|| cache.values[0].as_deref().expect("input kept").zeros_like());
    Ok((grads, dx))
}

/// Mean softmax cross-entropy over the batch, with its gradient.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let k = logits.dims[1];
    let b = labels.len();
    let mut grad = logits.zeros_like();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - row[y];
        for j in 0..k {
            let p = (row[j] - m).exp() / z;
            grad.data[i * k + j] = (p - f64::from(u8::from(j == y))) / b as f64;
        }
    }
    (loss / b as f64, grad)
}

/// Mean squared error, with its gradient.
pub fn mse(pred: &Tensor, target: &Tensor) -> (f64, Tensor) {
    let n = pred.numel() as f64;
    let mut grad = pred.zeros_like();
    let mut loss = 0.0;
    for ((g, p), t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        loss += (p - t).powi(2);
        *g = 2.0 * (p - t) / n;
    }
    (loss / n, grad)
}

/// Supervision for one batch.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Labels(&'a [usize]),
    Dense(&'a Tensor),
}

/// A compiled tree with its parameters and head.
#[derive(Clone, Debug)]
pub struct Model {
    pub program: Program,
    pub params: ParamStore,
    pub head: Head,
}

impl Model {
    pub fn new(tree: &ArchitectureTree, rng: &mut RandomSource) -> Result<Model, InterpError> {
        let program = Program::compile(tree)?;
        let params = ParamStore::init(&program, &tree.head, rng);
        Ok(Model { program, params, head: tree.head.clone() })
    }

    /// Backbone plus head.
    pub fn predict(&mut self, x: &Tensor, phase: Phase) -> Result<Tensor, InterpError> {
        let (f, _) = forward(&self.program, &mut self.params, x, phase)?;
        Ok(apply_head(&f, &self.params.head, &self.head).0)
    }

    /// Train-phase loss without gradients.
    pub fn loss(&mut self, x: &Tensor, target: Target<'_>) -> Result<f64, InterpError> {
        let (f, _) = forward(&self.program, &mut self.params, x, Phase::Train)?;
        let (pred, _) = apply_head(&f, &self.params.head, &self.head);
        Ok(match target {
            Target::Labels(l) => cross_entropy(&pred, l).0,
            Target::Dense(t) => mse(&pred, t).0,
        })
    }

    /// Train-phase loss and gradients for one batch; input gradient included.
    pub fn loss_and_grads(&mut self, x: &Tensor, target: Target<'_>) -> Result<(f64, Grads, Tensor), InterpError> {
        let (f, cache) = forward(&self.program, &mut self.params, x, Phase::Train)?;
        let (pred, hc) = apply_head(&f, &self.params.head, &self.head);
        let (loss, gpred) = match target {
            Target::Labels(l) => cross_entropy(&pred, l),
            Target::Dense(t) => mse(&pred, t),
        };
        let mut hg: Vec<Tensor> = self.params.head.values.iter().map(Tensor::zeros_like).collect();
        let gf = head_backward(&hc, &self.params.head, &self.head, &gpred, &mut hg);
        let (mut grads, dx) = backward(&self.program, &self.params, &cache, &gf)?;
        grads.head = hg;
        Ok((loss, grads, dx))
    }

    /// One SGD step; returns the batch loss before the update.
    pub fn train_step(&mut self, x: &Tensor, target: Target<'_>, cfg: &SgdConfig) -> Result<f64, InterpError> {
        let (loss, grads, _) = self.loss_and_grads(x, target)?;
        sgd_step(&mut self.params, &grads, cfg);
        Ok(loss)
    }
}
