//! Collapsing modules that compute the identity.

use std::collections::HashMap;

use super::{ArchitectureTree, DerivationNode};
use crate::grammar::{Nonterminal, Symbol};
use crate::terminal::Terminal;

fn is_identity_module(n: &DerivationNode) -> bool {
    n.symbol == Symbol::N(Nonterminal::M)
        && matches!(n.children.as_slice(), [c] if c.child_terminal() == Some(&Terminal::Identity))
}

/// Whether routing terminals `p` then `r` leave every tensor untouched.
fn routes_cancel(p: &Terminal, r: &Terminal) -> bool {
    match (p, r) {
        (Terminal::Identity, Terminal::Identity) => true,
        (Terminal::Permute { order: a }, Terminal::Permute { order: b }) => a.then(b).is_some_and(|o| o.is_identity()),
        (Terminal::Identity, t) | (t, Terminal::Identity) => t.is_identity_like(),
        _ => false,
    }
}

fn simplify_node(mut n: DerivationNode) -> DerivationNode {
    n.children = std::mem::take(&mut n.children).into_iter().map(simplify_node).collect();
    if n.symbol != Symbol::N(Nonterminal::M) {
        return n;
    }
    let kinds: Vec<Symbol> = n.children.iter().map(|c| c.symbol).collect();
    match kinds.as_slice() {
        [Symbol::N(Nonterminal::M), Symbol::N(Nonterminal::M)] => {
            if is_identity_module(&n.children[0]) {
                return n.children.pop().unwrap();
            }
            if is_identity_module(&n.children[1]) {
                n.children.pop();
                return n.children.pop().unwrap();
            }
            n
        }
        [Symbol::N(Nonterminal::P | Nonterminal::R), Symbol::N(Nonterminal::M), Symbol::N(Nonterminal::R)] => {
            let cancel = match (n.children[0].child_terminal(), n.children[2].child_terminal()) {
                (Some(p), Some(r)) => routes_cancel(p, r),
                _ => false,
            };
            if cancel && is_identity_module(&n.children[1]) {
                return n.children.swap_remove(1);
            }
            n
        }
        _ => n,
    }
}

impl ArchitectureTree {
    /// Simplified tree plus a map from surviving old node ids to new ones.
    pub fn simplify_with_map(&self) -> (ArchitectureTree, HashMap<usize, usize>) {
        let mut root = simplify_node(self.root.clone());
        root.clear_states();
        let old: Vec<usize> = root.preorder().iter().map(|n| n.node_id).collect();
        root.renumber_from(0);
        let map = old.into_iter().enumerate().map(|(new, old)| (old, new)).collect();
        // promoted nodes keep their own rule, so rule indices stay valid
        let t = ArchitectureTree { root, input: self.input.clone(), head: self.head.clone() };
        (t, map)
    }
}

/// Collapses identity routing modules and identity steps of sequential chains.
pub fn simplify_identities(tree: &ArchitectureTree) -> ArchitectureTree {
    tree.simplify_with_map().0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::Nonterminal::*;
    use crate::shape::ShapeState;
    use crate::terminal::PermuteOrder;
    use crate::tree::{Blueprint, Head};

    fn m(t: Terminal) -> DerivationNode {
        DerivationNode::internal(M, vec![DerivationNode::pre(C, t)])
    }

    fn route(p: Terminal, inner: DerivationNode, r: Terminal) -> DerivationNode {
        DerivationNode::internal(M, vec![DerivationNode::pre(P, p), inner, DerivationNode::pre(R, r)])
    }

    fn tree(first: DerivationNode, input: ShapeState) -> ArchitectureTree {
        let root = DerivationNode::internal(S, vec![first, m(Terminal::Relu)]);
        ArchitectureTree::new(root, &Blueprint { input, head: Head::Classification { classes: 2 } })
    }

    #[test]
    fn identity_routing_collapses() {
        let t = tree(route(Terminal::Identity, m(Terminal::Identity), Terminal::Identity), ShapeState::im(3, 4, 4));
        let s = simplify_identities(&t);
        assert_eq!(s.leaf_names(), vec!["identity", "relu"]);
        assert_eq!(s.node_count(), 7);
    }

    #[test]
    fn transposes_cancel() {
        let tr = Terminal::Permute { order: PermuteOrder::new(&[2, 1]).unwrap() };
        let t = tree(route(tr, m(Terminal::Identity), tr), ShapeState::col(5, 3));
        let s = simplify_identities(&t);
        assert_eq!(s.leaf_names(), vec!["identity", "relu"]);
        assert_eq!(s.infer_shapes().unwrap().output_state(), t.infer_shapes().unwrap().output_state());

        let a = Terminal::Permute { order: PermuteOrder::new(&[2, 3, 1]).unwrap() };
        let t = tree(route(a, m(Terminal::Identity), a), ShapeState::im(2, 3, 4));
        assert_eq!(simplify_identities(&t).leaf_count(), 4);
    }

    #[test]
    fn sequential_identities_drop() {
        let chain = DerivationNode::internal(M, vec![m(Terminal::Identity), m(Terminal::Linear { d: 16 })]);
        let t = tree(chain, ShapeState::col(5, 3));
        let (s, map) = t.simplify_with_map();
        assert_eq!(s.leaf_names(), vec!["linear", "relu"]);
        // the linear leaf keeps a mapping to its new id
        let old_leaf = t.leaves()[1].node_id;
        assert_eq!(map[&old_leaf], s.leaves()[0].node_id);
    }
}
