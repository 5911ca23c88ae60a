//! Central finite-difference checks of the reverse pass.

use rand_distr::{Distribution, StandardNormal};

use super::ops;
use super::params::{leaf_params, ParamKey, ParamSet};
use super::program::Instr;
use super::tensor::Tensor;
use super::{InterpError, Model, Target};
use crate::rng::RandomSource;
use crate::shape::{aggregate_shape, transfer, ShapeState};
use crate::terminal::Terminal;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so vanishing gradients compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub probes: usize,
    /// Probes redrawn because the two step sizes disagreed (a leaky-relu kink inside the window).
    pub kinks_skipped: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.probes += 1;
        self.max_rel_error = self.max_rel_error.max(rel_error(analytic, numeric));
    }

    pub fn merge(&mut self, other: &GradCheck) {
        self.probes += other.probes;
        self.kinks_skipped += other.kinks_skipped;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn randn(dims: &[usize], rng: &mut RandomSource) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

fn batched(st: &ShapeState, batch: usize) -> Vec<usize> {
    std::iter::once(batch).chain(st.shape.iter().copied()).collect()
}

/// Where a probed scalar lives.
#[derive(Clone, Copy)]
enum Slot {
    Input(usize, usize),
    Param(usize, usize),
    Head(usize, usize),
    Entry(usize, usize, usize),
}

/// Draws probes until `probes` smooth ones are recorded. `eval` returns the
/// loss with the slot shifted by `delta`.
fn run_probes(
    probes: usize,
    rng: &mut RandomSource,
    mut draw: impl FnMut(&mut RandomSource) -> (Slot, f64),
    mut eval: impl FnMut(Slot, f64) -> f64,
) -> GradCheck {
    let mut out = GradCheck::default();
    let mut attempts = 0;
    while out.probes < probes {
        attempts += 1;
        let (slot, analytic) = draw(rng);
        let fd = |h: f64, eval: &mut dyn FnMut(Slot, f64) -> f64| (eval(slot, h) - eval(slot, -h)) / (2.0 * h);
        let coarse = fd(FD_STEP, &mut eval);
        let fine = fd(FD_STEP / 2.0, &mut eval);
        if rel_error(coarse, fine) > 1e-3 && attempts < 8 * probes {
            out.kinks_skipped += 1;
            continue;
        }
        out.record(analytic, fine);
    }
    out
}

/// Checks one terminal on random inputs against the loss `sum(w * y)` with random `w`.
pub fn check_op(op: &Terminal, inputs: &[ShapeState], batch: usize, probes: usize, rng: &mut RandomSource) -> Result<GradCheck, InterpError> {
    let shape_err = |e: crate::shape::ShapeError| InterpError::Shape(e.to_string());
    let outs: Vec<ShapeState> = match op {
        Terminal::Add | Terminal::Concat { .. } | Terminal::Matmul { .. } => vec![aggregate_shape(op, inputs).map_err(shape_err)?],
        _ => transfer(op, &inputs[0]).map_err(shape_err)?.output_states,
    };
    let n_in = inputs.len();
    let ins = Instr {
        op: *op,
        inputs: (0..n_in).collect(),
        outputs: (n_in..n_in + outs.len()).collect(),
        key: Some(ParamKey { node: 0, replica: Vec::new() }),
        in_state: inputs[0].clone(),
        out_state: outs[0].clone(),
    };
    let mut params: Option<ParamSet> = leaf_params(op, &inputs[0], rng);
    if let Some(p) = &mut params {
        // move away from the identity-like init so scale and shift matter
        for t in &mut p.values {
            for v in &mut t.data {
                let z: f64 = StandardNormal.sample(rng);
                *v += 0.3 * z;
            }
        }
    }
    let xs: Vec<Tensor> = inputs.iter().map(|s| randn(&batched(s, batch), rng)).collect();
    let ws: Vec<Tensor> = outs.iter().map(|s| randn(&batched(s, batch), rng)).collect();

    let loss = |xs: &[Tensor], p: &Option<ParamSet>| -> f64 {
        let mut p = p.clone();
        let refs: Vec<&Tensor> = xs.iter().collect();
        let (ys, _) = ops::forward(&ins, &refs, p.as_mut(), true);
        ys.iter().zip(&ws).map(|(y, w)| y.data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>()).sum()
    };

    let mut pstate = params.clone();
    let refs: Vec<&Tensor> = xs.iter().collect();
    let (ys, aux) = ops::forward(&ins, &refs, pstate.as_mut(), true);
    let yrefs: Vec<&Tensor> = ys.iter().collect();
    let mut pg: Option<Vec<Tensor>> = params.as_ref().map(|p| p.values.iter().map(Tensor::zeros_like).collect());
    let dxs = ops::backward(&ins, &refs, &yrefs, &aux, &ws, params.as_ref(), pg.as_mut());

    let n_param_tensors = params.as_ref().map_or(0, |p| p.values.len());
    let draw = |rng: &mut RandomSource| {
        let pick = rng.below(n_in + n_param_tensors);
        if pick < n_in {
            let i = rng.below(xs[pick].numel());
            (Slot::Input(pick, i), dxs[pick].data[i])
        } else {
            let t = pick - n_in;
            let i = rng.below(params.as_ref().unwrap().values[t].numel());
            (Slot::Param(t, i), pg.as_ref().unwrap()[t].data[i])
        }
    };
    let eval = |slot: Slot, delta: f64| match slot {
        Slot::Head(..) | Slot::Entry(..) => unreachable!("model slots"),
        Slot::Input(t, i) => {
            let mut xs2 = xs.clone();
            xs2[t].data[i] += delta;
            loss(&xs2, &params)
        }
        Slot::Param(t, i) => {
            let mut p2 = params.clone();
            p2.as_mut().unwrap().values[t].data[i] += delta;
            loss(&xs, &p2)
        }
    };
    Ok(run_probes(probes, rng, draw, eval))
}

/// Checks a whole model (backbone and head) under its training loss.
pub fn check_model(model: &Model, x: &Tensor, target: Target<'_>, probes: usize, rng: &mut RandomSource) -> Result<GradCheck, InterpError> {
    let mut m = model.clone();
    let (_, grads, dx) = m.loss_and_grads(x, target)?;
    let keys: Vec<ParamKey> = model.params.entries.keys().cloned().collect();
    // slots: 0 = input, 1 = head, 2.. = backbone entries
    let draw = |rng: &mut RandomSource| {
        let pick = rng.below(2 + keys.len());
        match pick {
            0 => {
                let i = rng.below(x.numel());
                (Slot::Input(0, i), dx.data[i])
            }
            1 => {
                let t = rng.below(grads.head.len());
                let i = rng.below(grads.head[t].numel());
                (Slot::Head(t, i), grads.head[t].data[i])
            }
            k => {
                let g = &grads.entries[&keys[k - 2]];
                let t = rng.below(g.len());
                let i = rng.below(g[t].numel());
                (Slot::Entry(k - 2, t, i), g[t].data[i])
            }
        }
    };
    let eval = |slot: Slot, delta: f64| {
        let mut m = model.clone();
        let mut x2 = x.clone();
        match slot {
            Slot::Input(_, i) => x2.data[i] += delta,
            Slot::Head(t, i) => m.params.head.values[t].data[i] += delta,
            Slot::Entry(k, t, i) => m.params.entries.get_mut(&keys[k]).expect("entry").values[t].data[i] += delta,
            Slot::Param(..) => unreachable!("op slots"),
        }
        m.loss(&x2, target).unwrap_or(f64::NAN)
    };
    Ok(run_probes(probes, rng, draw, eval))
}
