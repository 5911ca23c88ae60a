use std::fmt;

use super::{normalised_rhs, ArchitectureTree, DerivationNode, TreeError};
use crate::grammar::{Grammar, Symbol};
use crate::sampling::SampleLimits;
use crate::shape::ShapeState;

/// One reason a tree is not a member of the space.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    InputMismatch { expected: ShapeState, found: ShapeState },
    Rule { node_id: usize, message: String },
    Guard { node_id: usize, message: String },
    Shape(TreeError),
    Resource { message: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::InputMismatch { expected, found } => write!(f, "input mismatch: expected {expected}, tree has {found}"),
            Violation::Rule { node_id, message } => write!(f, "rule violation at node {node_id}: {message}"),
            Violation::Guard { node_id, message } => write!(f, "guard violation at node {node_id}: {message}"),
            Violation::Shape(e) => write!(f, "shape violation at {e}"),
            Violation::Resource { message } => write!(f, "resource violation: {message}"),
        }
    }
}

fn check_rules(n: &DerivationNode, g: &Grammar, out: &mut Vec<Violation>) {
    if let Symbol::N(nt) = n.symbol {
        let rhs = normalised_rhs(n);
        match g.find_rule(nt, &rhs) {
            None => out.push(Violation::Rule {
                node_id: n.node_id,
                message: format!(
                    "{nt} -> {} is not a rule",
                    rhs.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ")
                ),
            }),
            Some(i) => {
                if n.rule_index.is_some_and(|r| r != i) {
                    out.push(Violation::Rule {
                        node_id: n.node_id,
                        message: format!("recorded rule {} but children spell rule {i}", n.rule_index.unwrap()),
                    });
                }
                if g.rule(i).probability <= 0.0 {
                    out.push(Violation::Rule { node_id: n.node_id, message: format!("rule {i} has probability zero") });
                }
                if n.children.len() == 4 {
                    let b = n.children[0].child_terminal().and_then(|t| t.branch_factor());
                    if b != Some(2) {
                        out.push(Violation::Rule {
                            node_id: n.node_id,
                            message: "two stored branches require b = 2".into(),
                        });
                    }
                }
            }
        }
    }
    for c in &n.children {
        check_rules(c, g, out);
    }
}

fn check_guards(n: &DerivationNode, g: &Grammar, out: &mut Vec<Violation>) {
    if let (Symbol::N(nt), Some(t), Some(st)) = (n.symbol, n.child_terminal(), n.in_state.as_ref()) {
        if let Some(i) = g.terminal_rule(nt, t) {
            if !g.rule(i).guard.accepts(st) {
                out.push(Violation::Guard { node_id: n.node_id, message: format!("{nt} -> {t} not allowed in {st}") });
            }
        }
    }
    for c in &n.children {
        check_guards(c, g, out);
    }
}

impl ArchitectureTree {
    /// Checks grammar membership, shapes and resource limits, collecting every
    /// violation found.
    pub fn validate(&self, g: &Grammar, input: &ShapeState, limits: &SampleLimits) -> Result<(), Vec<Violation>> {
        let mut out = Vec::new();
        if self.input != *input {
            out.push(Violation::InputMismatch { expected: input.clone(), found: self.input.clone() });
        }
        if self.root.symbol != Symbol::N(crate::grammar::Nonterminal::S) {
            out.push(Violation::Rule { node_id: self.root.node_id, message: "root must be S".into() });
        }
        check_rules(&self.root, g, &mut out);

        let mut t = self.clone();
        t.root.clear_states();
        let inferred = t.annotate();
        check_guards(&t.root, g, &mut out);
        match inferred {
            Err(e) => out.push(Violation::Shape(e)),
            Ok(_) => {
                let params = t.count_parameters().unwrap_or(u64::MAX);
                if params > limits.max_parameters {
                    out.push(Violation::Resource {
                        message: format!("{params} parameters exceed the cap of {}", limits.max_parameters),
                    });
                }
                let elems = t.max_feature_elements();
                if elems > limits.max_feature_elements {
                    out.push(Violation::Resource {
                        message: format!("feature with {elems} elements exceeds the cap of {}", limits.max_feature_elements),
                    });
                }
            }
        }
        let nodes = t.node_count();
        if nodes > limits.max_nodes {
            out.push(Violation::Resource { message: format!("{nodes} nodes exceed the cap of {}", limits.max_nodes) });
        }
        let rep = t.max_replication();
        if rep > limits.max_replication {
            out.push(Violation::Resource { message: format!("replication {rep} exceeds the cap of {}", limits.max_replication) });
        }
        let depth = t.depth();
        if depth > limits.max_depth {
            out.push(Violation::Resource { message: format!("depth {depth} exceeds the cap of {}", limits.max_depth) });
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{build_grammar, Nonterminal::*, Variant};
    use crate::terminal::Terminal;
    use crate::tree::{Blueprint, Head};

    fn m(t: Terminal) -> DerivationNode {
        DerivationNode::internal(M, vec![DerivationNode::pre(C, t)])
    }

    fn attention(b: u8, agg: Terminal) -> ArchitectureTree {
        let mut children = vec![DerivationNode::pre(B, Terminal::Clone { b })];
        children.push(m(Terminal::Identity));
        if b == 2 {
            children.push(m(Terminal::Identity));
        }
        children.push(DerivationNode::pre(A, agg));
        let root = DerivationNode::internal(S, vec![DerivationNode::internal(M, children), m(Terminal::Softmax)]);
        ArchitectureTree::new(root, &Blueprint { input: ShapeState::col(16, 32), head: Head::Classification { classes: 2 } })
    }

    #[test]
    fn matmul_under_b4_is_a_guard_violation() {
        let g = build_grammar(Variant::TwoD, 0.32).unwrap();
        let lim = SampleLimits::default();
        let ok = attention(2, Terminal::Matmul { scaled: true });
        assert_eq!(ok.validate(&g, &ok.input, &lim), Ok(()));
        let bad = attention(4, Terminal::Matmul { scaled: false });
        let errs = bad.validate(&g, &bad.input, &lim).unwrap_err();
        assert!(errs.iter().any(|v| matches!(v, Violation::Guard { .. })), "{errs:?}");
    }

    #[test]
    fn parameter_cap() {
        let g = build_grammar(Variant::TwoD, 0.32).unwrap();
        let t = attention(2, Terminal::Add);
        let lim = SampleLimits { max_parameters: 10, ..SampleLimits::default() };
        let errs = t.validate(&g, &t.input, &lim).unwrap_err();
        assert!(matches!(errs.as_slice(), [Violation::Resource { .. }]));
    }

    #[test]
    fn collects_several_violations() {
        let g = build_grammar(Variant::TwoD, 0.32).unwrap();
        let mut t = attention(2, Terminal::Add);
        t.root.children[0].rule_index = Some(0);
        let other = ShapeState::col(16, 8);
        let errs = t.validate(&g, &other, &SampleLimits::default()).unwrap_err();
        assert_eq!(errs.len(), 2, "{errs:?}");
    }
}
