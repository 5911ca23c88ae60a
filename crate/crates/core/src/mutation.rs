//! Subtree-resampling mutation: pick a node, regrow it in place, keep the result if it validates.

use crate::grammar::{Grammar, Nonterminal, Symbol};
use crate::rng::RandomSource;
use crate::sampling::{sample_subtree, SampleLimits, SubtreeContext, SubtreeRequest};
use crate::shape::transfer;
use crate::tree::{replication, ArchitectureTree, DerivationNode};

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum MutationError {
    #[error("mutation failed after {0} attempts")]
    Failed(usize),
    #[error("no node {0} in the tree")]
    NoSuchNode(usize),
    #[error("tree does not type-check: {0}")]
    Invalid(String),
}

/// Mutates a node drawn uniformly from all nodes of `tree`.
pub fn mutate(
    tree: &ArchitectureTree,
    g: &Grammar,
    rng: &mut RandomSource,
    limits: &SampleLimits,
) -> Result<ArchitectureTree, MutationError> {
    let base = annotated(tree)?;
    let n = base.node_count();
    for _ in 0..limits.max_mutation_retries {
        let id = rng.below(n);
        if let Some(t) = attempt(&base, g, id, rng, limits) {
            return Ok(t);
        }
    }
    Err(MutationError::Failed(limits.max_mutation_retries))
}

/// Regrows the subtree at `node_id` (a terminal leaf regrows its parent).
pub fn mutate_at(
    tree: &ArchitectureTree,
    g: &Grammar,
    node_id: usize,
    rng: &mut RandomSource,
    limits: &SampleLimits,
) -> Result<ArchitectureTree, MutationError> {
    let base = annotated(tree)?;
    base.root.find(node_id).ok_or(MutationError::NoSuchNode(node_id))?;
    for _ in 0..limits.max_mutation_retries {
        if let Some(t) = attempt(&base, g, node_id, rng, limits) {
            return Ok(t);
        }
    }
    Err(MutationError::Failed(limits.max_mutation_retries))
}

fn annotated(tree: &ArchitectureTree) -> Result<ArchitectureTree, MutationError> {
    let mut t = tree.clone();
    t.renumber();
    t.annotate().map_err(|e| MutationError::Invalid(e.to_string()))?;
    Ok(t)
}

/// Backbone parameters inside `n`, scaled by the replicas `reps` it runs as.
fn subtree_params(n: &DerivationNode, reps: u64) -> u64 {
    if let Symbol::T(t) = &n.symbol {
        return match &n.in_state {
            Some(st) => transfer(t, st).map(|r| reps * r.param_count).unwrap_or(0),
            None => 0,
        };
    }
    let factor = replication(n) as u64;
    n.children
        .iter()
        .enumerate()
        .map(|(i, c)| subtree_params(c, if factor > 1 && i == 1 { reps * factor } else { reps }))
        .sum()
}

fn attempt(
    base: &ArchitectureTree,
    g: &Grammar,
    node_id: usize,
    rng: &mut RandomSource,
    limits: &SampleLimits,
) -> Option<ArchitectureTree> {
    let mut path = base.root.path_to(node_id)?;
    if base.root.at_path(&path).is_leaf() {
        path.pop();
    }
    let target = base.root.at_path(&path);
    let Symbol::N(nt) = target.symbol else { return None };

    let mut multiplier = 1u64;
    let mut cur = &base.root;
    for &i in &path {
        let f = replication(cur) as u64;
        if f > 1 && i == 1 {
            multiplier = multiplier.saturating_mul(f);
        }
        cur = &cur.children[i];
    }

    let context = if nt == Nonterminal::A {
        let parent = base.root.at_path(&path[..path.len() - 1]);
        let branches = &parent.children[1..parent.children.len() - 1];
        let mut outputs: Vec<_> = branches.iter().map(|c| c.out_state.clone()).collect::<Option<_>>()?;
        let b = replication(parent);
        if b > 1 {
            outputs = vec![outputs[0].clone(); b];
        }
        SubtreeContext::Branches { outputs, outer_b: parent.in_state.as_ref()?.branching_factor }
    } else {
        SubtreeContext::State(target.in_state.clone()?)
    };

    let total_params = base.count_parameters().ok()?;
    let outside_params = total_params - subtree_params(target, multiplier);
    let outside_nodes = base.node_count() - target.node_count();
    let req = SubtreeRequest {
        nt,
        context,
        depth: path.len(),
        multiplier,
        node_budget: limits.max_nodes.checked_sub(outside_nodes)?,
        param_budget: limits.max_parameters.checked_sub(outside_params)?,
        head: path.is_empty().then_some(&base.head),
    };
    let (mut fresh, _) = sample_subtree(g, &req, rng, limits).ok()?;

    let mut out = base.clone();
    out.root.clear_states();
    fresh.clear_states();
    *out.root.at_path_mut(&path) = fresh;
    out.renumber();
    out.validate(g, &base.input, limits).ok()?;
    out.annotate().ok()?;
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{build_grammar, Variant};
    use crate::sampling::sample_with_retries;
    use crate::shape::ShapeState;
    use crate::tree::{Blueprint, Head};

    fn setup() -> (Grammar, Blueprint, SampleLimits) {
        let g = build_grammar(Variant::TwoD, 0.4).unwrap();
        let bp = Blueprint { input: ShapeState::im(3, 16, 16), head: Head::Classification { classes: 5 } };
        (g, bp, SampleLimits::default())
    }

    #[test]
    fn mutants_validate() {
        let (g, bp, lim) = setup();
        let mut rng = RandomSource::new(11);
        let mut t = sample_with_retries(&g, &bp, &mut rng, &lim, 10).unwrap();
        for _ in 0..200 {
            t = mutate(&t, &g, &mut rng, &lim).unwrap();
            assert_eq!(t.validate(&g, &bp.input, &lim), Ok(()));
        }
    }

    #[test]
    fn leaf_mutation_is_local() {
        let (g, bp, lim) = setup();
        let mut rng = RandomSource::new(5);
        for _ in 0..50 {
            let t = sample_with_retries(&g, &bp, &mut rng, &lim, 10).unwrap();
            let leaf = t.leaves()[0].node_id;
            let mut path = t.root.path_to(leaf).unwrap();
            path.pop();
            let Ok(m) = mutate_at(&t, &g, leaf, &mut rng, &lim) else { continue };
            // everything but the regrown preterminal is untouched
            let (mut a, mut b) = (t.clone(), m.clone());
            a.root.clear_states();
            b.root.clear_states();
            *a.root.at_path_mut(&path) = DerivationNode::leaf(crate::terminal::Terminal::Identity);
            *b.root.at_path_mut(&path) = DerivationNode::leaf(crate::terminal::Terminal::Identity);
            a.renumber();
            b.renumber();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn root_mutation_resamples_everything() {
        let (g, bp, lim) = setup();
        let mut rng = RandomSource::new(8);
        let t = sample_with_retries(&g, &bp, &mut rng, &lim, 10).unwrap();
        let m = mutate_at(&t, &g, 0, &mut rng, &lim).unwrap();
        assert_eq!(m.input, t.input);
        assert_eq!(m.validate(&g, &bp.input, &lim), Ok(()));
        assert_eq!(mutate_at(&t, &g, 100_000, &mut rng, &lim), Err(MutationError::NoSuchNode(100_000)));
    }
}
