//! Built-in synthetic classification tasks. Regenerating a task from its id
//! and seed is bit-identical.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::grammar::Variant;
use crate::interp::Tensor;
use crate::rng::{mix64, RandomSource};
use crate::shape::ShapeState;
use crate::tree::{Blueprint, Head};

pub const TRAIN_SIZE: usize = 2048;
pub const VAL_SIZE: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskId {
    #[serde(rename = "im-patterns")]
    ImPatterns,
    #[serde(rename = "col-motifs")]
    ColMotifs,
    #[serde(rename = "1d-waves")]
    Waves1d,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::ImPatterns, TaskId::ColMotifs, TaskId::Waves1d];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::ImPatterns => "im-patterns",
            TaskId::ColMotifs => "col-motifs",
            TaskId::Waves1d => "1d-waves",
        }
    }

    pub fn input(self) -> ShapeState {
        match self {
            TaskId::ImPatterns => ShapeState::im(3, 16, 16),
            TaskId::ColMotifs => ShapeState::col(32, 8),
            TaskId::Waves1d => ShapeState::col(64, 1),
        }
    }

    pub fn classes(self) -> usize {
        match self {
            TaskId::ImPatterns => 4,
            TaskId::ColMotifs => 5,
            TaskId::Waves1d => 3,
        }
    }

    /// Grammar variant whose terminals suit the input.
    pub fn variant(self) -> Variant {
        match self {
            TaskId::ImPatterns => Variant::TwoD,
            TaskId::ColMotifs | TaskId::Waves1d => Variant::OneD,
        }
    }

    pub fn blueprint(self) -> Blueprint {
        Blueprint { input: self.input(), head: Head::Classification { classes: self.classes() } }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("unknown task '{0}' (expected im-patterns, col-motifs or 1d-waves)")]
pub struct UnknownTask(pub String);

impl FromStr for TaskId {
    type Err = UnknownTask;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskId::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| UnknownTask(s.to_string()))
    }
}

/// Inputs with batch first, and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.x.gather_batch(idx), idx.iter().map(|&i| self.y[i]).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub id: TaskId,
    pub seed: u64,
    pub input: ShapeState,
    pub classes: usize,
    pub train: Dataset,
    pub val: Dataset,
}

impl SyntheticTask {
    pub fn blueprint(&self) -> Blueprint {
        self.id.blueprint()
    }

    /// SHA-256 over labels and the little-endian bytes of every input value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for d in [&self.train, &self.val] {
            for v in &d.x.data {
                h.update(v.to_le_bytes());
            }
            for &y in &d.y {
                h.update((y as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Generates `task_id` deterministically from `seed`.
pub fn make_synthetic_task(task_id: TaskId, seed: u64) -> SyntheticTask {
    let mut rng = RandomSource::new(mix64(seed ^ mix64(task_id as u64 + 1)));
    // per-task constants (motifs) come first so they do not depend on dataset sizes
    let motifs = motif_table(&mut rng);
    let gen = |n: usize, rng: &mut RandomSource| {
        let classes = task_id.classes();
        let mut y: Vec<usize> = (0..n).map(|i| i % classes).collect();
        y.shuffle(rng);
        let row: usize = task_id.input().elements();
        let mut data = Vec::with_capacity(n * row);
        for &label in &y {
            match task_id {
                TaskId::ImPatterns => im_pattern(label, rng, &mut data),
                TaskId::ColMotifs => col_motif(label, &motifs, rng, &mut data),
                TaskId::Waves1d => wave(label, rng, &mut data),
            }
        }
        let dims: Vec<usize> = std::iter::once(n).chain(task_id.input().shape.iter().copied()).collect();
        Dataset { x: Tensor::from_vec(&dims, data), y }
    };
    let train = gen(TRAIN_SIZE, &mut rng);
    let val = gen(VAL_SIZE, &mut rng);
    SyntheticTask { id: task_id, seed, input: task_id.input(), classes: task_id.classes(), train, val }
}

fn noise(rng: &mut RandomSource, sigma: f64) -> f64 {
    Normal::new(0.0, sigma).expect("positive sigma").sample(rng)
}

/// Stripes at one of four orientations, random phase, Gaussian noise. Each
/// frequency completes whole periods over the 16x16 grid, so the spatial mean
/// carries no label information.
fn im_pattern(label: usize, rng: &mut RandomSource, out: &mut Vec<f64>) {
    const FREQS: [(f64, f64); 4] = [(3.0, 0.0), (0.0, 3.0), (3.0, 3.0), (3.0, -3.0)];
    let (fx, fy) = FREQS[label];
    let phase = rng.uniform() * 2.0 * PI;
    let amp = 0.15 + 0.3 * rng.uniform();
    for c in 0..3 {
        let shift = c as f64 * PI / 3.0;
        for i in 0..16 {
            for j in 0..16 {
                let arg = 2.0 * PI * (fx * i as f64 + fy * j as f64) / 16.0 + phase + shift;
                out.push(amp * arg.sin() + noise(rng, 1.0));
            }
        }
    }
}

const MOTIF_LEN: usize = 3;

fn motif_table(rng: &mut RandomSource) -> Vec<Vec<f64>> {
    (0..TaskId::ColMotifs.classes()).map(|_| (0..MOTIF_LEN * 8).map(|_| noise(rng, 1.0)).collect()).collect()
}

/// Gaussian token background with the class motif (three consecutive tokens) planted at a random position.
fn col_motif(label: usize, motifs: &[Vec<f64>], rng: &mut RandomSource, out: &mut Vec<f64>) {
    let start = out.len();
    for _ in 0..32 * 8 {
        out.push(noise(rng, 1.0));
    }
    let pos = rng.below(32 - MOTIF_LEN + 1);
    for (k, v) in motifs[label].iter().enumerate() {
        let slot = &mut out[start + pos * 8 + k];
        *slot = 0.3 * *slot + 1.5 * v;
    }
}

/// One sinusoid over 64 steps; the class is its frequency.
fn wave(label: usize, rng: &mut RandomSource, out: &mut Vec<f64>) {
    const FREQS: [f64; 3] = [2.0, 5.0, 9.0];
    let phase = rng.uniform() * 2.0 * PI;
    let amp = 0.5 + rng.uniform();
    for t in 0..64 {
        out.push(amp * (2.0 * PI * FREQS[label] * t as f64 / 64.0 + phase).sin() + noise(rng, 0.7));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_bit_identical() {
        for id in TaskId::ALL {
            let a = make_synthetic_task(id, 0);
            assert_eq!(a, make_synthetic_task(id, 0));
            assert_ne!(a.digest(), make_synthetic_task(id, 1).digest());
            assert_eq!(a.train.len(), TRAIN_SIZE);
            assert_eq!(a.val.len(), VAL_SIZE);
            assert_eq!(a.train.x.dims[1..], id.input().shape[..]);
        }
    }

    #[test]
    fn classes_are_balanced() {
        for id in TaskId::ALL {
            let t = make_synthetic_task(id, 3);
            for d in [&t.train, &t.val] {
                let k = t.classes;
                for c in 0..k {
                    let n = d.y.iter().filter(|&&y| y == c).count();
                    assert!(n.abs_diff(d.len() / k) <= 1, "{id}: class {c} has {n}");
                }
            }
        }
    }

    #[test]
    fn image_means_carry_no_label() {
        // whole periods: the per-image mean is the noise mean alone
        let t = make_synthetic_task(TaskId::ImPatterns, 0);
        let row = t.train.x.row_len();
        let mut by_class = vec![0.0; 4];
        for (i, &y) in t.train.y.iter().enumerate() {
            by_class[y] += t.train.x.data[i * row..(i + 1) * row].iter().sum::<f64>() / row as f64;
        }
        for m in by_class {
            assert!((m / 512.0).abs() < 0.01, "{m}");
        }
    }

    #[test]
    fn parses_names() {
        for id in TaskId::ALL {
            assert_eq!(id.name().parse::<TaskId>().unwrap(), id);
        }
        assert!("cifar".parse::<TaskId>().is_err());
    }
}
