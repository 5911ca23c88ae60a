//! Derivation trees: structure, shape annotation, leaves and parameter counts.

mod json;
mod simplify;
mod validate;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::grammar::{Grammar, Nonterminal, Symbol};
use crate::shape::{aggregate_shape, transfer, Mode, ShapeError, ShapeState};
use crate::terminal::Terminal;

pub use json::TreeFormatError;
pub use simplify::simplify_identities;
pub use validate::Violation;

/// Prediction head appended to the backbone.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Classification { classes: usize },
    Dense { channels: usize, height: usize, width: usize },
}

impl Head {
    /// Input width of the head's linear map for backbone features `st`.
    pub fn fan_in(&self, st: &ShapeState) -> usize {
        match (self, st.mode) {
            (Head::Classification { .. }, Mode::Im) => st.shape[0],
            (Head::Classification { .. }, Mode::Col) => st.shape[1],
            (Head::Dense { .. }, Mode::Im) => st.shape[0],
            (Head::Dense { .. }, Mode::Col) => 1,
        }
    }

    pub fn outputs(&self) -> usize {
        match *self {
            Head::Classification { classes } => classes,
            Head::Dense { channels, .. } => channels,
        }
    }

    pub fn param_count(&self, st: &ShapeState) -> u64 {
        let k = self.outputs();
        (self.fan_in(st) * k + k) as u64
    }
}

/// What the network consumes and what it predicts.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Blueprint {
    pub input: ShapeState,
    pub head: Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DerivationNode {
    pub node_id: usize,
    pub symbol: Symbol,
    /// Index of the chosen rule in the grammar; `None` until resolved.
    pub rule_index: Option<usize>,
    pub children: Vec<DerivationNode>,
    pub in_state: Option<ShapeState>,
    pub out_state: Option<ShapeState>,
}

impl DerivationNode {
    pub fn leaf(t: Terminal) -> Self {
        Self::new(Symbol::T(t), Vec::new())
    }

    /// Preterminal `nt` with the single terminal `t`.
    pub fn pre(nt: Nonterminal, t: Terminal) -> Self {
        Self::new(Symbol::N(nt), vec![Self::leaf(t)])
    }

    pub fn internal(nt: Nonterminal, children: Vec<DerivationNode>) -> Self {
        Self::new(Symbol::N(nt), children)
    }

    fn new(symbol: Symbol, children: Vec<DerivationNode>) -> Self {
        Self { node_id: 0, symbol, rule_index: None, children, in_state: None, out_state: None }
    }

    pub fn nonterminal(&self) -> Option<Nonterminal> {
        match self.symbol {
            Symbol::N(n) => Some(n),
            Symbol::T(_) => None,
        }
    }

    pub fn terminal(&self) -> Option<&Terminal> {
        match &self.symbol {
            Symbol::T(t) => Some(t),
            Symbol::N(_) => None,
        }
    }

    /// Terminal below a preterminal node.
    pub fn child_terminal(&self) -> Option<&Terminal> {
        match self.children.as_slice() {
            [c] => c.terminal(),
            _ => None,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(|c| c.node_count()).sum::<usize>()
    }

    /// Number of levels, a lone leaf being 1.
    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(|c| c.depth()).max().unwrap_or(0)
    }

    /// Nodes in depth-first preorder.
    pub fn preorder(&self) -> Vec<&DerivationNode> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(n) = stack.pop() {
            out.push(n);
            stack.extend(n.children.iter().rev());
        }
        out
    }

    /// Renumbers this subtree in preorder starting at `start`; returns the next free id.
    pub fn renumber_from(&mut self, start: usize) -> usize {
        self.node_id = start;
        let mut next = start + 1;
        for c in &mut self.children {
            next = c.renumber_from(next);
        }
        next
    }

    pub fn find(&self, id: usize) -> Option<&DerivationNode> {
        if self.node_id == id {
            return Some(self);
        }
        // ids are preorder, so the matching child is the last one starting at or before id
        let child = self.children.iter().take_while(|c| c.node_id <= id).last()?;
        child.find(id)
    }

    /// Child-index path from this node to the node with `id`.
    pub fn path_to(&self, id: usize) -> Option<Vec<usize>> {
        if self.node_id == id {
            return Some(Vec::new());
        }
        let (i, child) = self.children.iter().enumerate().take_while(|(_, c)| c.node_id <= id).last()?;
        let mut p = child.path_to(id)?;
        p.insert(0, i);
        Some(p)
    }

    pub fn at_path(&self, path: &[usize]) -> &DerivationNode {
        path.iter().fold(self, |n, &i| &n.children[i])
    }

    pub fn at_path_mut(&mut self, path: &[usize]) -> &mut DerivationNode {
        path.iter().fold(self, |n, &i| &mut n.children[i])
    }

    /// Drops all shape annotations.
    pub fn clear_states(&mut self) {
        self.in_state = None;
        self.out_state = None;
        for c in &mut self.children {
            c.clear_states();
        }
    }

    /// Fills `rule_index` everywhere by matching against `g`.
    pub fn resolve_rules(&mut self, g: &Grammar) -> Result<(), String> {
        if let Symbol::N(nt) = self.symbol {
            let rhs = normalised_rhs(self);
            let idx = g
                .find_rule(nt, &rhs)
                .ok_or_else(|| format!("node {}: no rule {nt} -> {}", self.node_id, fmt_rhs(&rhs)))?;
            self.rule_index = Some(idx);
        }
        for c in &mut self.children {
            c.resolve_rules(g)?;
        }
        Ok(())
    }
}

/// The rule right-hand side a node's children spell, with the two stored
/// branches of b = 2 folded back into the single M of `B M A`.
pub(crate) fn normalised_rhs(node: &DerivationNode) -> Vec<Symbol> {
    let mut rhs: Vec<Symbol> = node.children.iter().map(|c| c.symbol).collect();
    if rhs.len() == 4 && rhs[0] == Symbol::N(Nonterminal::B) {
        rhs.remove(2);
    }
    rhs
}

fn fmt_rhs(rhs: &[Symbol]) -> String {
    rhs.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureTree {
    pub root: DerivationNode,
    pub input: ShapeState,
    pub head: Head,
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum TreeErrorKind {
    #[error("{0} [{code}]", code = .0.code())]
    Shape(ShapeError),
    #[error("malformed derivation: {0}")]
    Structure(String),
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
#[error("node {node_id}: {kind}")]
pub struct TreeError {
    pub node_id: usize,
    pub kind: TreeErrorKind,
}

impl TreeError {
    fn structure(node: &DerivationNode, msg: impl Into<String>) -> Self {
        Self { node_id: node.node_id, kind: TreeErrorKind::Structure(msg.into()) }
    }
    fn shape(node: &DerivationNode, e: ShapeError) -> Self {
        Self { node_id: node.node_id, kind: TreeErrorKind::Shape(e) }
    }
}

/// One stored leaf in the leaf string, with the product of the enclosing
/// replication factors.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafEntry<'a> {
    pub node_id: usize,
    pub terminal: &'a Terminal,
    pub replicas: usize,
}

impl ArchitectureTree {
    pub fn new(root: DerivationNode, blueprint: &Blueprint) -> Self {
        let mut t = Self { root, input: blueprint.input.clone(), head: blueprint.head.clone() };
        t.renumber();
        t
    }

    pub fn blueprint(&self) -> Blueprint {
        Blueprint { input: self.input.clone(), head: self.head.clone() }
    }

    pub fn renumber(&mut self) {
        self.root.renumber_from(0);
    }

    pub fn node_count(&self) -> usize {
        self.root.node_count()
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    /// Largest product of replication factors along any root-to-leaf path.
    pub fn max_replication(&self) -> u64 {
        fn walk(n: &DerivationNode) -> u64 {
            let factor = replication(n) as u64;
            n.children
                .iter()
                .enumerate()
                .map(|(i, c)| if factor > 1 && i == 1 { walk(c).saturating_mul(factor) } else { walk(c) })
                .max()
                .unwrap_or(1)
        }
        walk(&self.root)
    }

    /// Annotates every node with its in/out state, in place.
    pub fn annotate(&mut self) -> Result<ShapeState, TreeError> {
        let input = self.input.clone();
        infer_node(&mut self.root, input)
    }

    /// Returns an annotated copy of the tree.
    pub fn infer_shapes(&self) -> Result<ArchitectureTree, TreeError> {
        let mut t = self.clone();
        t.annotate()?;
        Ok(t)
    }

    /// Backbone output state; requires annotation.
    pub fn output_state(&self) -> Option<&ShapeState> {
        self.root.out_state.as_ref()
    }

    /// Stored leaves, depth-first left to right.
    pub fn leaves(&self) -> Vec<LeafEntry<'_>> {
        fn walk<'a>(n: &'a DerivationNode, reps: usize, out: &mut Vec<LeafEntry<'a>>) {
            if let Symbol::T(t) = &n.symbol {
                out.push(LeafEntry { node_id: n.node_id, terminal: t, replicas: reps });
                return;
            }
            let factor = replication(n);
            for (i, c) in n.children.iter().enumerate() {
                let r = if factor > 1 && i == 1 { reps.saturating_mul(factor) } else { reps };
                walk(c, r, out);
            }
        }
        let mut out = Vec::new();
        walk(&self.root, 1, &mut out);
        out
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves().len()
    }

    /// Terminal names in leaf order.
    pub fn leaf_names(&self) -> Vec<&'static str> {
        self.leaves().iter().map(|l| l.terminal.name()).collect()
    }

    /// Leaf sequence with hyperparameters. A branch stored once but run b times
    /// is wrapped in `repeat(b){` ... `}`.
    pub fn leaves_string(&self) -> Vec<String> {
        fn walk(n: &DerivationNode, out: &mut Vec<String>) {
            if let Symbol::T(t) = &n.symbol {
                out.push(t.to_string());
                return;
            }
            let factor = replication(n);
            for (i, c) in n.children.iter().enumerate() {
                if factor > 1 && i == 1 {
                    out.push(format!("repeat({factor}){{"));
                    walk(c, out);
                    out.push("}".into());
                } else {
                    walk(c, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut out);
        out
    }

    /// Learnable scalars of backbone and head, counting each replica separately.
    pub fn count_parameters(&self) -> Result<u64, TreeError> {
        let annotated;
        let t = if self.root.out_state.is_some() {
            self
        } else {
            annotated = self.infer_shapes()?;
            &annotated
        };
        let mut total = 0u64;
        fn walk(n: &DerivationNode, reps: u64, total: &mut u64) {
            if let Symbol::T(t) = &n.symbol {
                if let Some(st) = &n.in_state {
                    if let Ok(r) = transfer(t, st) {
                        *total += reps * r.param_count;
                    }
                }
                return;
            }
            let factor = replication(n) as u64;
            for (i, c) in n.children.iter().enumerate() {
                walk(c, if factor > 1 && i == 1 { reps.saturating_mul(factor) } else { reps }, total);
            }
        }
        walk(&t.root, 1, &mut total);
        let out = t.output_state().expect("annotated");
        Ok(total + t.head.param_count(out))
    }

    /// Fills every node's `rule_index` from `g`.
    pub fn resolve_rules(&mut self, g: &Grammar) -> Result<(), String> {
        self.root.resolve_rules(g)
    }

    /// Largest feature tensor (batch excluded) over all annotated states.
    pub fn max_feature_elements(&self) -> usize {
        self.root
            .preorder()
            .iter()
            .flat_map(|n| n.in_state.iter().chain(n.out_state.iter()))
            .map(|s| s.elements())
            .max()
            .unwrap_or(0)
    }
}

impl fmt::Display for ArchitectureTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.leaves_string().join(" "))
    }
}

/// Replication factor of a branching module stored with one inner M (b in {4, 8}), else 1.
pub(crate) fn replication(n: &DerivationNode) -> usize {
    if n.children.len() == 3 && n.children[0].symbol == Symbol::N(Nonterminal::B) {
        n.children[0].child_terminal().and_then(|t| t.branch_factor()).map(usize::from).unwrap_or(1)
    } else {
        1
    }
}

fn annotate_pre(node: &mut DerivationNode, input: ShapeState, output: ShapeState) {
    if let Some(leaf) = node.children.first_mut() {
        leaf.in_state = Some(input.clone());
        leaf.out_state = Some(output.clone());
    }
    node.in_state = Some(input);
    node.out_state = Some(output);
}

fn pre_terminal(node: &DerivationNode, want: &[Nonterminal]) -> Result<Terminal, TreeError> {
    match node.symbol {
        Symbol::N(nt) if want.contains(&nt) => {}
        _ => return Err(TreeError::structure(node, format!("expected one of {want:?}, found {}", node.symbol))),
    }
    node.child_terminal()
        .copied()
        .ok_or_else(|| TreeError::structure(node, format!("{} must have exactly one terminal child", node.symbol)))
}

fn infer_unary(node: &mut DerivationNode, st: ShapeState, want: &[Nonterminal]) -> Result<ShapeState, TreeError> {
    let t = pre_terminal(node, want)?;
    let r = transfer(&t, &st).map_err(|e| TreeError::shape(node, e))?;
    if r.output_states.len() != 1 {
        return Err(TreeError::structure(node, format!("{t} opens branches outside a branching module")));
    }
    let out = r.output_states.into_iter().next().unwrap();
    annotate_pre(node, st, out.clone());
    Ok(out)
}

fn infer_node(node: &mut DerivationNode, st: ShapeState) -> Result<ShapeState, TreeError> {
    use Nonterminal::*;
    let nt = match node.symbol {
        Symbol::N(nt @ (S | M)) => nt,
        _ => return Err(TreeError::structure(node, format!("expected a module, found {}", node.symbol))),
    };
    let kinds: Vec<Symbol> = node.children.iter().map(|c| c.symbol).collect();
    let out = match kinds.as_slice() {
        [Symbol::N(M), Symbol::N(M)] => {
            let mid = infer_node(&mut node.children[0], st.clone())?;
            infer_node(&mut node.children[1], mid)?
        }
        [Symbol::N(C)] if nt == M => infer_unary(&mut node.children[0], st.clone(), &[C])?,
        [Symbol::N(P | R), Symbol::N(M), Symbol::N(R)] => {
            let a = infer_unary(&mut node.children[0], st.clone(), &[P, R])?;
            let b = infer_node(&mut node.children[1], a)?;
            infer_unary(&mut node.children[2], b, &[R])?
        }
        [Symbol::N(B), .., Symbol::N(A)] => infer_branching(node, st.clone())?,
        _ => return Err(TreeError::structure(node, format!("{nt} -> {} is not a module shape", fmt_rhs(&kinds)))),
    };
    node.in_state = Some(st);
    node.out_state = Some(out.clone());
    Ok(out)
}

fn infer_branching(node: &mut DerivationNode, st: ShapeState) -> Result<ShapeState, TreeError> {
    let n = node.children.len();
    let bt = pre_terminal(&node.children[0], &[Nonterminal::B])?;
    let b = bt
        .branch_factor()
        .ok_or_else(|| TreeError::structure(&node.children[0], format!("{bt} does not open branches")))?;
    let r = transfer(&bt, &st).map_err(|e| TreeError::shape(&node.children[0], e))?;
    let stored = if b == 2 { 2 } else { 1 };
    if n - 2 != stored {
        return Err(TreeError::structure(node, format!("b={b} needs {stored} stored branch(es), found {}", n - 2)));
    }
    annotate_pre(&mut node.children[0], st.clone(), r.output_states[0].clone());
    let mut outs = Vec::with_capacity(b as usize);
    for i in 0..stored {
        if node.children[1 + i].symbol != Symbol::N(Nonterminal::M) {
            return Err(TreeError::structure(&node.children[1 + i], "branch must be an M module"));
        }
        outs.push(infer_node(&mut node.children[1 + i], r.output_states[i].clone())?);
    }
    if stored == 1 {
        outs = vec![outs[0].clone(); b as usize];
    }
    let a_node = &mut node.children[n - 1];
    let at = pre_terminal(a_node, &[Nonterminal::A])?;
    // the guard context is recorded even if aggregation fails
    a_node.in_state = Some(outs[0].clone());
    let mut out = aggregate_shape(&at, &outs).map_err(|e| TreeError::shape(a_node, e))?;
    out.branching_factor = st.branching_factor;
    annotate_pre(a_node, outs[0].clone(), out.clone());
    Ok(out)
}
