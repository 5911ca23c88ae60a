use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::program::Program;
use super::tensor::Tensor;
use crate::rng::RandomSource;
use crate::shape::{Mode, ShapeState};
use crate::terminal::Terminal;
use crate::tree::Head;

/// Identifies one parameterised leaf instance: the leaf's node id plus the
/// replica index taken at every enclosing replicated branch.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamKey {
    pub node: usize,
    pub replica: Vec<u8>,
}

/// Learnable tensors of one leaf (or the head), their momentum buffers, and
/// non-learned running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub names: Vec<&'static str>,
    pub values: Vec<Tensor>,
    pub velocity: Vec<Tensor>,
    pub buffers: Vec<Tensor>,
}

impl ParamSet {
    fn new(named: Vec<(&'static str, Tensor)>, buffers: Vec<Tensor>) -> Self {
        let velocity = named.iter().map(|(_, t)| t.zeros_like()).collect();
        let (names, values) = named.into_iter().unzip();
        Self { names, values, velocity, buffers }
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self.names.iter().position(|n| *n == name).unwrap_or_else(|| panic!("no parameter {name}"));
        &self.values[i]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub entries: BTreeMap<ParamKey, ParamSet>,
    pub head: ParamSet,
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads {
    pub entries: BTreeMap<ParamKey, Vec<Tensor>>,
    pub head: Vec<Tensor>,
}

fn uniform(dims: &[usize], bound: f64, rng: &mut RandomSource) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(-bound..=bound)).collect())
}

fn linear_set(fan_in: usize, d: usize, rng: &mut RandomSource) -> ParamSet {
    // uniform in +-1/sqrt(fan_in) for both weight and bias
    let bound = 1.0 / (fan_in as f64).sqrt();
    ParamSet::new(vec![("weight", uniform(&[fan_in, d], bound, rng)), ("bias", uniform(&[d], bound, rng))], Vec::new())
}

/// Fresh parameters for one leaf, or `None` if the op has none.
pub(crate) fn leaf_params(op: &Terminal, st: &ShapeState, rng: &mut RandomSource) -> Option<ParamSet> {
    match *op {
        Terminal::Linear { d } => {
            let fan_in = match st.mode {
                Mode::Im => st.shape[0],
                Mode::Col => st.shape[1],
            };
            Some(linear_set(fan_in, d as usize, rng))
        }
        Terminal::Conv1d { k, d, .. } => Some(linear_set(st.shape[1] * k as usize, d as usize, rng)),
        Terminal::Norm => {
            let n = match st.mode {
                Mode::Im => st.shape[0],
                Mode::Col => st.shape[1],
            };
            let buffers = match st.mode {
                Mode::Im => vec![Tensor::zeros(&[n]), Tensor::full(&[n], 1.0)],
                Mode::Col => Vec::new(),
            };
            Some(ParamSet::new(vec![("scale", Tensor::full(&[n], 1.0)), ("shift", Tensor::zeros(&[n]))], buffers))
        }
        Terminal::PosEnc => {
            let normal = Normal::new(0.0, 0.02).expect("valid std");
            let n = st.elements();
            Some(ParamSet::new(
                vec![("embedding", Tensor::from_vec(&st.shape, (0..n).map(|_| normal.sample(rng)).collect()))],
                Vec::new(),
            ))
        }
        _ => None,
    }
}

impl ParamStore {
    /// Initialises every parameterised leaf instance of `prog` in execution order, then the head.
    pub fn init(prog: &Program, head: &Head, rng: &mut RandomSource) -> Self {
        let mut entries = BTreeMap::new();
        for ins in &prog.instrs {
            if let Some(key) = &ins.key {
                if let Some(set) = leaf_params(&ins.op, &ins.in_state, rng) {
                    entries.insert(key.clone(), set);
                }
            }
        }
        let head = linear_set(head.fan_in(&prog.output_state), head.outputs(), rng);
        Self { entries, head }
    }

    /// Learnable scalars, head included.
    pub fn count(&self) -> usize {
        self.entries.values().map(ParamSet::count).sum::<usize>() + self.head.count()
    }

    /// Re-keys entries after node ids changed (e.g. after identity simplification).
    pub fn remap(&self, ids: &HashMap<usize, usize>) -> ParamStore {
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, v)| ids.get(&k.node).map(|&n| (ParamKey { node: n, replica: k.replica.clone() }, v.clone())))
            .collect();
        ParamStore { entries, head: self.head.clone() }
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.values.iter().map(Tensor::zeros_like).collect())).collect(),
            head: self.head.values.iter().map(Tensor::zeros_like).collect(),
        }
    }

    /// Serialisable copy of all values and buffers.
    pub fn dump(&self) -> WeightDump {
        let set = |s: &ParamSet| DumpSet {
            tensors: s.names.iter().zip(&s.values).map(|(n, t)| DumpTensor::of(n, t)).collect(),
            buffers: s.buffers.iter().map(|t| DumpTensor::of("running", t)).collect(),
        };
        WeightDump {
            weights_schema: 1,
            entries: self.entries.iter().map(|(k, s)| DumpEntry { key: k.clone(), set: set(s) }).collect(),
            head: set(&self.head),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl DumpTensor {
    fn of(name: &str, t: &Tensor) -> Self {
        Self { name: name.to_string(), dims: t.dims.clone(), data: t.data.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpSet {
    pub tensors: Vec<DumpTensor>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub buffers: Vec<DumpTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpEntry {
    pub key: ParamKey,
    #[serde(flatten)]
    pub set: DumpSet,
}

/// Weight file layout (`weights_schema` 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightDump {
    pub weights_schema: u32,
    pub entries: Vec<DumpEntry>,
    pub head: DumpSet,
}

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.05, momentum: 0.9, weight_decay: 5e-4 }
    }
}

fn step_set(set: &mut ParamSet, grads: &[Tensor], cfg: &SgdConfig) {
    for ((w, v), g) in set.values.iter_mut().zip(&mut set.velocity).zip(grads) {
        for ((w, v), g) in w.data.iter_mut().zip(&mut v.data).zip(&g.data) {
            let g = g + cfg.weight_decay * *w;
            *v = cfg.momentum * *v + g;
            *w -= cfg.lr * *v;
        }
    }
}

/// `v <- momentum * v + (g + wd * w)`, `w <- w - lr * v`.
pub fn sgd_step(params: &mut ParamStore, grads: &Grads, cfg: &SgdConfig) {
    for (k, set) in params.entries.iter_mut() {
        if let Some(g) = grads.entries.get(k) {
            step_set(set, g, cfg);
        }
    }
    step_set(&mut params.head, &grads.head, cfg);
}
