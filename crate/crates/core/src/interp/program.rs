use super::params::ParamKey;
use super::InterpError;
use crate::grammar::{Nonterminal, Symbol};
use crate::shape::ShapeState;
use crate::terminal::Terminal;
use crate::tree::{replication, ArchitectureTree, DerivationNode};

/// One terminal application over value slots.
#[derive(Clone, Debug)]
pub struct Instr {
    pub op: Terminal,
    pub inputs: Vec<usize>,
    pub outputs: Vec<usize>,
    pub key: Option<ParamKey>,
    /// State of the first input, batch excluded.
    pub in_state: ShapeState,
    pub out_state: ShapeState,
}

/// A tree flattened into straight-line code. Value 0 is the network input.
#[derive(Clone, Debug)]
pub struct Program {
    pub instrs: Vec<Instr>,
    pub n_values: usize,
    pub output: usize,
    pub input_state: ShapeState,
    pub output_state: ShapeState,
    /// Index of the last instruction reading each value.
    pub last_use: Vec<usize>,
}

struct Builder {
    instrs: Vec<Instr>,
    n_values: usize,
    replica: Vec<u8>,
}

impl Builder {
    fn fresh(&mut self) -> usize {
        self.n_values += 1;
        self.n_values - 1
    }

    fn emit(&mut self, pre: &DerivationNode, inputs: Vec<usize>, n_out: usize) -> Result<Vec<usize>, InterpError> {
        let leaf = pre.children.first().ok_or(InterpError::Structure(pre.node_id))?;
        let Symbol::T(op) = leaf.symbol else { return Err(InterpError::Structure(pre.node_id)) };
        let (Some(in_state), Some(out_state)) = (leaf.in_state.clone(), leaf.out_state.clone()) else {
            return Err(InterpError::Unannotated(leaf.node_id));
        };
        let outputs: Vec<usize> = (0..n_out).map(|_| self.fresh()).collect();
        let key = matches!(op, Terminal::Linear { .. } | Terminal::Conv1d { .. } | Terminal::Norm | Terminal::PosEnc)
            .then(|| ParamKey { node: leaf.node_id, replica: self.replica.clone() });
        self.instrs.push(Instr { op, inputs, outputs: outputs.clone(), key, in_state, out_state });
        Ok(outputs)
    }

    fn module(&mut self, n: &DerivationNode, x: usize) -> Result<usize, InterpError> {
        use Nonterminal::*;
        let kinds: Vec<Symbol> = n.children.iter().map(|c| c.symbol).collect();
        match kinds.as_slice() {
            [Symbol::N(M), Symbol::N(M)] => {
                let mid = self.module(&n.children[0], x)?;
                self.module(&n.children[1], mid)
            }
            [Symbol::N(C)] => Ok(self.emit(&n.children[0], vec![x], 1)?[0]),
            [Symbol::N(P | R), Symbol::N(M), Symbol::N(R)] => {
                let a = self.emit(&n.children[0], vec![x], 1)?[0];
                let b = self.module(&n.children[1], a)?;
                Ok(self.emit(&n.children[2], vec![b], 1)?[0])
            }
            [Symbol::N(B), .., Symbol::N(A)] => {
                let bt = n.children[0].child_terminal().and_then(|t| t.branch_factor()).ok_or(InterpError::Structure(n.node_id))?;
                let ins = self.emit(&n.children[0], vec![x], bt as usize)?;
                let factor = replication(n);
                let mut outs = Vec::with_capacity(ins.len());
                if factor > 1 {
                    // one stored body, run once per replica with its own parameters
                    for (r, &v) in ins.iter().enumerate() {
                        self.replica.push(r as u8);
                        outs.push(self.module(&n.children[1], v)?);
                        self.replica.pop();
                    }
                } else {
                    for (i, &v) in ins.iter().enumerate() {
                        outs.push(self.module(&n.children[1 + i], v)?);
                    }
                }
                Ok(self.emit(&n.children[n.children.len() - 1], outs, 1)?[0])
            }
            _ => Err(InterpError::Structure(n.node_id)),
        }
    }
}

impl Program {
    /// Multiply-accumulates of one sample's forward pass (dense maps and matmuls only).
    pub fn macs_per_sample(&self) -> u64 {
        self.instrs
            .iter()
            .map(|ins| {
                let (i, o) = (&ins.in_state.shape, &ins.out_state.shape);
                let n = |s: &[usize]| s.iter().product::<usize>() as u64;
                match ins.op {
                    Terminal::Linear { .. } | Terminal::Conv1d { .. } => {
                        // rows * fan_in * d, with fan_in the channel (Im) or last (Col) axis
                        let (fan_in, d) = match ins.in_state.mode {
                            crate::shape::Mode::Im => (i[0] as u64, o[0] as u64),
                            crate::shape::Mode::Col => (i[1] as u64, o[1] as u64),
                        };
                        let k = if let Terminal::Conv1d { k, .. } = ins.op { u64::from(k) } else { 1 };
                        n(o) / d * fan_in * k * d
                    }
                    // (a, k) times (k, c) or (c, k) transposed
                    Terminal::Matmul { .. } => n(o) * i[1] as u64,
                    _ => 0,
                }
            })
            .sum()
    }

    /// Elements of every value a training forward pass keeps for backward, per sample.
    pub fn activations_per_sample(&self) -> u64 {
        let n = |s: &ShapeState| s.shape.iter().product::<usize>() as u64;
        n(&self.input_state) + self.instrs.iter().map(|ins| n(&ins.out_state) * ins.outputs.len() as u64).sum::<u64>()
    }

    /// Flattens an annotated tree (annotating a copy if needed).
    pub fn compile(tree: &ArchitectureTree) -> Result<Program, InterpError> {
        let annotated;
        let t = if tree.root.out_state.is_some() {
            tree
        } else {
            annotated = tree.infer_shapes().map_err(|e| InterpError::Shape(e.to_string()))?;
            &annotated
        };
        let mut b = Builder { instrs: Vec::new(), n_values: 1, replica: Vec::new() };
        let output = b.module(&t.root, 0)?;
        let mut last_use = vec![usize::MAX; b.n_values];
        for (i, ins) in b.instrs.iter().enumerate() {
            for &v in &ins.inputs {
                last_use[v] = i;
            }
        }
        Ok(Program {
            instrs: b.instrs,
            n_values: b.n_values,
            output,
            input_state: t.input.clone(),
            output_state: t.output_state().cloned().expect("annotated"),
            last_use,
        })
    }
}
