//! Shape, mode and branching-factor inference for single terminals.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::terminal::Terminal;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Im,
    Col,
}

impl Mode {
    pub fn rank(self) -> usize {
        match self {
            Mode::Im => 3,
            Mode::Col => 2,
        }
    }
}

/// Spatial size an open `im2col` expects `col2im` to restore.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PendingIm {
    pub h_out: usize,
    pub w_out: usize,
}

/// Feature shape (batch excluded), mode and branching factor at one point of a derivation.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShapeState {
    pub shape: Vec<usize>,
    pub mode: Mode,
    pub branching_factor: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending_im: Option<PendingIm>,
}

impl ShapeState {
    pub fn im(c: usize, h: usize, w: usize) -> Self {
        Self { shape: vec![c, h, w], mode: Mode::Im, branching_factor: 1, pending_im: None }
    }

    pub fn col(s: usize, d: usize) -> Self {
        Self { shape: vec![s, d], mode: Mode::Col, branching_factor: 1, pending_im: None }
    }

    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn with_branching(mut self, b: u8) -> Self {
        self.branching_factor = b;
        self
    }

    /// Checks the structural invariants of the state.
    pub fn check(&self) -> Result<(), ShapeError> {
        if self.shape.len() != self.mode.rank() {
            return Err(ShapeError::ModeViolation(format!(
                "{:?} mode needs rank {}, got shape {:?}",
                self.mode,
                self.mode.rank(),
                self.shape
            )));
        }
        if self.shape.contains(&0) {
            return Err(ShapeError::FeatureCollapsed(format!("zero dimension in {:?}", self.shape)));
        }
        if ![1, 2, 4, 8].contains(&self.branching_factor) {
            return Err(ShapeError::BranchArity(format!("branching factor {}", self.branching_factor)));
        }
        if self.mode == Mode::Im && self.pending_im.is_some() {
            return Err(ShapeError::PendingIm("image-mode state with an open im2col".into()));
        }
        Ok(())
    }
}

impl fmt::Display for ShapeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        write!(f, "{:?}({}) b={}", self.mode, dims.join(","), self.branching_factor)?;
        if let Some(p) = self.pending_im {
            write!(f, " pending={}x{}", p.h_out, p.w_out)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransferResult {
    pub output_states: Vec<ShapeState>,
    pub param_count: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ShapeError {
    #[error("feature collapsed: {0}")]
    FeatureCollapsed(String),
    #[error("divisibility: {0}")]
    Divisibility(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mode violation: {0}")]
    ModeViolation(String),
    #[error("pending im2col violation: {0}")]
    PendingIm(String),
    #[error("branch arity: {0}")]
    BranchArity(String),
    #[error("misplaced terminal: {0}")]
    Misplaced(String),
}

impl ShapeError {
    /// Stable code for each failure cause.
    pub fn code(&self) -> &'static str {
        match self {
            ShapeError::FeatureCollapsed(_) => "E_COLLAPSED",
            ShapeError::Divisibility(_) => "E_DIVISIBILITY",
            ShapeError::ShapeMismatch(_) => "E_SHAPE_MISMATCH",
            ShapeError::ModeViolation(_) => "E_MODE",
            ShapeError::PendingIm(_) => "E_PENDING_IM",
            ShapeError::BranchArity(_) => "E_BRANCH_ARITY",
            ShapeError::Misplaced(_) => "E_MISPLACED",
        }
    }
}

fn window_out(n: usize, k: usize, s: usize, p: usize) -> usize {
    let span = n + 2 * p;
    if span < k {
        0
    } else {
        (span - k) / s + 1
    }
}

/// Patch grid produced by `im2col`: returns `(l, h_out, w_out)`.
pub fn im2col_output(h: usize, w: usize, k: usize, s: usize, p: usize) -> Result<(usize, usize, usize), ShapeError> {
    let h_out = window_out(h, k, s, p);
    let w_out = window_out(w, k, s, p);
    if h_out == 0 || w_out == 0 {
        return Err(ShapeError::FeatureCollapsed(format!("im2col k={k} s={s} p={p} on {h}x{w}")));
    }
    Ok((h_out * w_out, h_out, w_out))
}

/// Output length of a 1-D sliding window.
pub fn conv1d_output(len: usize, k: usize, s: usize, p: usize) -> Result<usize, ShapeError> {
    match window_out(len, k, s, p) {
        0 => Err(ShapeError::FeatureCollapsed(format!("conv1d k={k} s={s} p={p} on length {len}"))),
        n => Ok(n),
    }
}

fn require_mode(op: &Terminal, st: &ShapeState, mode: Mode) -> Result<(), ShapeError> {
    if st.mode != mode {
        return Err(ShapeError::ModeViolation(format!("{op} needs {mode:?} mode, got {:?}", st.mode)));
    }
    Ok(())
}

fn single(state: ShapeState, param_count: u64) -> TransferResult {
    TransferResult { output_states: vec![state], param_count }
}

/// Applies a one-input terminal to `st`.
pub fn transfer(op: &Terminal, st: &ShapeState) -> Result<TransferResult, ShapeError> {
    st.check()?;
    match *op {
        Terminal::Identity | Terminal::Relu | Terminal::Softmax => Ok(single(st.clone(), 0)),
        Terminal::PosEnc => Ok(single(st.clone(), st.elements() as u64)),
        Terminal::Norm => {
            let dim = match st.mode {
                Mode::Im => st.shape[0],
                Mode::Col => st.shape[1],
            };
            Ok(single(st.clone(), 2 * dim as u64))
        }
        Terminal::Linear { d } => {
            let d = d as usize;
            let mut out = st.clone();
            let axis = match st.mode {
                Mode::Im => 0,
                Mode::Col => 1,
            };
            let fan_in = st.shape[axis];
            out.shape[axis] = d;
            Ok(single(out, (fan_in * d + d) as u64))
        }
        Terminal::Im2col { k, s, p } => {
            require_mode(op, st, Mode::Im)?;
            let (c, h, w) = (st.shape[0], st.shape[1], st.shape[2]);
            let k = k as usize;
            let (l, h_out, w_out) = im2col_output(h, w, k, s as usize, p as usize)?;
            let out = ShapeState {
                shape: vec![l, c * k * k],
                mode: Mode::Col,
                branching_factor: st.branching_factor,
                pending_im: Some(PendingIm { h_out, w_out }),
            };
            Ok(single(out, 0))
        }
        Terminal::Col2im => {
            require_mode(op, st, Mode::Col)?;
            let pending = st
                .pending_im
                .ok_or_else(|| ShapeError::PendingIm("col2im without an open im2col".into()))?;
            if st.shape[0] != pending.h_out * pending.w_out {
                return Err(ShapeError::PendingIm(format!(
                    "sequence length {} differs from {}x{}",
                    st.shape[0], pending.h_out, pending.w_out
                )));
            }
            let out = ShapeState {
                shape: vec![st.shape[1], pending.h_out, pending.w_out],
                mode: Mode::Im,
                branching_factor: st.branching_factor,
                pending_im: None,
            };
            Ok(single(out, 0))
        }
        Terminal::Permute { order } => {
            if order.len() != st.shape.len() {
                return Err(ShapeError::ModeViolation(format!("{op} on rank-{} features", st.shape.len())));
            }
            let mut out = st.clone();
            out.shape = order.as_slice().iter().map(|&o| st.shape[o as usize - 1]).collect();
            Ok(single(out, 0))
        }
        Terminal::Conv1d { k, s, p, d } => {
            require_mode(op, st, Mode::Col)?;
            let (len, ch) = (st.shape[0], st.shape[1]);
            let (k, d) = (k as usize, d as usize);
            let n = conv1d_output(len, k, s as usize, p as usize)?;
            let mut out = st.clone();
            out.shape = vec![n, d];
            Ok(single(out, (ch * k * d + d) as u64))
        }
        Terminal::Clone { b } => {
            let out = st.clone().with_branching(b);
            Ok(TransferResult { output_states: vec![out; b as usize], param_count: 0 })
        }
        Terminal::Group { dim, b } => {
            let axis = dim as usize;
            if axis == 0 || axis > st.shape.len() {
                return Err(ShapeError::ModeViolation(format!("{op} on rank-{} features", st.shape.len())));
            }
            let n = st.shape[axis - 1];
            if !n.is_multiple_of(b as usize) {
                return Err(ShapeError::Divisibility(format!("{op}: dimension {n} not divisible by {b}")));
            }
            let mut out = st.clone().with_branching(b);
            out.shape[axis - 1] = n / b as usize;
            Ok(TransferResult { output_states: vec![out; b as usize], param_count: 0 })
        }
        Terminal::Add | Terminal::Concat { .. } | Terminal::Matmul { .. } => {
            Err(ShapeError::Misplaced(format!("{op} aggregates branches and has no single-input form")))
        }
    }
}

/// Combines branch outputs. The returned state keeps the inner branching
/// factor; the enclosing module restores its own.
pub fn aggregate_shape(op: &Terminal, states: &[ShapeState]) -> Result<ShapeState, ShapeError> {
    let first = states.first().ok_or_else(|| ShapeError::BranchArity(format!("{op} with no branches")))?;
    for s in states {
        s.check()?;
        if s.mode != first.mode {
            return Err(ShapeError::ModeViolation(format!("{op} over mixed modes")));
        }
        if s.pending_im != first.pending_im {
            return Err(ShapeError::PendingIm(format!("{op} over branches with different open im2col targets")));
        }
    }
    let n = states.len();
    let mut out = first.clone();
    match *op {
        Terminal::Add => {
            if let Some(bad) = states.iter().find(|s| s.shape != first.shape) {
                return Err(ShapeError::ShapeMismatch(format!("add {:?} and {:?}", first.shape, bad.shape)));
            }
        }
        Terminal::Concat { dim, b } => {
            if n != b as usize {
                return Err(ShapeError::BranchArity(format!("{op} over {n} branches")));
            }
            let axis = dim as usize;
            if axis == 0 || axis > first.shape.len() {
                return Err(ShapeError::ModeViolation(format!("{op} on rank-{} features", first.shape.len())));
            }
            let mut total = 0;
            for s in states {
                for (i, (&a, &c)) in s.shape.iter().zip(&first.shape).enumerate() {
                    if i != axis - 1 && a != c {
                        return Err(ShapeError::ShapeMismatch(format!("concat {:?} and {:?}", first.shape, s.shape)));
                    }
                }
                total += s.shape[axis - 1];
            }
            out.shape[axis - 1] = total;
        }
        Terminal::Matmul { .. } => {
            if first.mode != Mode::Col {
                return Err(ShapeError::ModeViolation("matmul needs Col mode".into()));
            }
            if n != 2 {
                return Err(ShapeError::BranchArity(format!("matmul over {n} branches")));
            }
            let (a, b) = (&states[0].shape, &states[1].shape);
            out.shape = if a[1] == b[0] {
                vec![a[0], b[1]]
            } else if a == b {
                vec![a[0], b[0]]
            } else {
                return Err(ShapeError::ShapeMismatch(format!("matmul {a:?} by {b:?}")));
            };
        }
        _ => return Err(ShapeError::Misplaced(format!("{op} is not an aggregation"))),
    }
    Ok(out)
}

/// Whether a `matmul` over these two shapes multiplies by the transposed second operand.
pub fn matmul_transposes(a: &[usize], b: &[usize]) -> bool {
    a[1] != b[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terminal::PermuteOrder;

    #[test]
    fn im2col_formula() {
        assert_eq!(im2col_output(32, 32, 7, 2, 3).unwrap(), (256, 16, 16));
        assert_eq!(im2col_output(28, 28, 16, 16, 0).unwrap(), (1, 1, 1));
        assert_eq!(im2col_output(9, 5, 1, 1, 0).unwrap(), (45, 9, 5));
        assert!(matches!(im2col_output(4, 4, 8, 8, 0), Err(ShapeError::FeatureCollapsed(_))));
    }

    #[test]
    fn im2col_state() {
        let r = transfer(&Terminal::Im2col { k: 3, s: 1, p: 1 }, &ShapeState::im(3, 8, 8)).unwrap();
        let out = &r.output_states[0];
        assert_eq!(out.shape, vec![64, 27]);
        assert_eq!(out.mode, Mode::Col);
        assert_eq!(out.pending_im, Some(PendingIm { h_out: 8, w_out: 8 }));
        let back = transfer(&Terminal::Col2im, out).unwrap();
        assert_eq!(back.output_states[0], ShapeState::im(27, 8, 8));
    }

    #[test]
    fn col2im_needs_matching_length() {
        let mut st = transfer(&Terminal::Im2col { k: 1, s: 1, p: 0 }, &ShapeState::im(3, 4, 4)).unwrap().output_states[0].clone();
        st.shape[0] = 15;
        assert_eq!(transfer(&Terminal::Col2im, &st).unwrap_err().code(), "E_PENDING_IM");
        assert_eq!(transfer(&Terminal::Col2im, &ShapeState::col(16, 3)).unwrap_err().code(), "E_PENDING_IM");
    }

    #[test]
    fn permute_and_group() {
        let t = Terminal::Permute { order: PermuteOrder::new(&[2, 1]).unwrap() };
        assert_eq!(transfer(&t, &ShapeState::col(10, 5)).unwrap().output_states[0].shape, vec![5, 10]);
        let g = transfer(&Terminal::Group { dim: 1, b: 2 }, &ShapeState::im(64, 4, 4)).unwrap();
        assert_eq!(g.output_states.len(), 2);
        assert!(g.output_states.iter().all(|s| s.shape == vec![32, 4, 4] && s.branching_factor == 2));
        let err = transfer(&Terminal::Group { dim: 2, b: 8 }, &ShapeState::im(64, 4, 4)).unwrap_err();
        assert_eq!(err.code(), "E_DIVISIBILITY");
    }

    #[test]
    fn param_counts() {
        assert_eq!(transfer(&Terminal::Linear { d: 16 }, &ShapeState::col(4, 8)).unwrap().param_count, 144);
        assert_eq!(transfer(&Terminal::Linear { d: 16 }, &ShapeState::im(3, 5, 5)).unwrap().param_count, 64);
        assert_eq!(transfer(&Terminal::Norm, &ShapeState::im(6, 5, 5)).unwrap().param_count, 12);
        assert_eq!(transfer(&Terminal::PosEnc, &ShapeState::col(4, 8)).unwrap().param_count, 32);
        let c = transfer(&Terminal::Conv1d { k: 3, s: 1, p: 1, d: 32 }, &ShapeState::col(64, 1)).unwrap();
        assert_eq!(c.output_states[0].shape, vec![64, 32]);
        assert_eq!(c.param_count, 3 * 32 + 32);
    }

    #[test]
    fn aggregations() {
        let a = ShapeState::im(64, 8, 8).with_branching(2);
        assert_eq!(aggregate_shape(&Terminal::Add, &[a.clone(), a.clone()]).unwrap().shape, vec![64, 8, 8]);
        let q = ShapeState::col(16, 32).with_branching(2);
        assert_eq!(aggregate_shape(&Terminal::Matmul { scaled: false }, &[q.clone(), q.clone()]).unwrap().shape, vec![16, 16]);
        let v = ShapeState::col(32, 7).with_branching(2);
        assert_eq!(aggregate_shape(&Terminal::Matmul { scaled: true }, &[q.clone(), v]).unwrap().shape, vec![16, 7]);
        let parts = vec![ShapeState::im(16, 8, 8).with_branching(4); 4];
        assert_eq!(aggregate_shape(&Terminal::Concat { dim: 1, b: 4 }, &parts).unwrap().shape, vec![64, 8, 8]);
        let bad = [a.clone(), ShapeState::im(32, 8, 8).with_branching(2)];
        assert_eq!(aggregate_shape(&Terminal::Add, &bad).unwrap_err().code(), "E_SHAPE_MISMATCH");
        assert_eq!(aggregate_shape(&Terminal::Matmul { scaled: false }, &[a.clone(), a]).unwrap_err().code(), "E_MODE");
    }
}
