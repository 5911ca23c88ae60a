//! Sampling derivations with backtracking.
//!
//! Expansion is depth-first. Each nonterminal orders its applicable rules
//! once by a Gumbel-top-k draw (sampling without replacement, proportional
//! to probability). A rule fails when a terminal's shape transfer or a
//! resource check fails, or when one of its children runs out of rules; the
//! node then moves on to its next rule. A node that runs out of rules fails
//! its parent's current rule in turn.

use serde::{Deserialize, Serialize};

use crate::grammar::{Grammar, Nonterminal, Symbol};
use crate::rng::RandomSource;
use crate::shape::{aggregate_shape, transfer, ShapeState};
use crate::tree::{ArchitectureTree, Blueprint, DerivationNode, Head};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleLimits {
    pub max_nodes: usize,
    pub max_parameters: u64,
    pub max_feature_elements: usize,
    pub max_backtracks: usize,
    pub max_mutation_retries: usize,
    pub max_depth: usize,
    /// Largest product of nested replication factors; bounds the expanded program size.
    pub max_replication: u64,
}

impl Default for SampleLimits {
    fn default() -> Self {
        Self {
            max_nodes: 2_000,
            max_parameters: 50_000_000,
            max_feature_elements: 1 << 24,
            max_backtracks: 10_000,
            max_mutation_retries: 50,
            max_depth: 256,
            max_replication: 512,
        }
    }
}

impl SampleLimits {
    pub fn check(&self) -> Result<(), String> {
        let fields = [
            ("max_nodes", self.max_nodes as u64),
            ("max_parameters", self.max_parameters),
            ("max_feature_elements", self.max_feature_elements as u64),
            ("max_backtracks", self.max_backtracks as u64),
            ("max_mutation_retries", self.max_mutation_retries as u64),
            ("max_depth", self.max_depth as u64),
            ("max_replication", self.max_replication),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((k, _)) => Err(format!("limit {k} must be positive")),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SampleError {
    #[error("sampling failed: more than {0} backtracks")]
    BacktrackLimit(usize),
    #[error("sampling failed: no valid derivation from this context")]
    Exhausted,
    #[error("sampling failed after {0} attempts")]
    Retries(usize),
}

fn min_nodes(nt: Nonterminal) -> usize {
    match nt {
        Nonterminal::S => 7,
        Nonterminal::M => 3,
        _ => 2,
    }
}

fn min_levels(nt: Nonterminal) -> usize {
    match nt {
        Nonterminal::S => 4,
        Nonterminal::M => 3,
        _ => 2,
    }
}

/// Where a subtree is grown.
#[derive(Clone, Debug)]
pub enum SubtreeContext {
    /// Any symbol other than A, fed with this state.
    State(ShapeState),
    /// An aggregation over finished branch outputs.
    Branches { outputs: Vec<ShapeState>, outer_b: u8 },
}

/// Knobs for growing one subtree.
#[derive(Clone, Debug)]
pub struct SubtreeRequest<'a> {
    pub nt: Nonterminal,
    pub context: SubtreeContext,
    /// Depth of the subtree root within the whole tree.
    pub depth: usize,
    /// Parameter multiplier from enclosing replicated branches.
    pub multiplier: u64,
    /// Nodes still available for this subtree.
    pub node_budget: usize,
    /// Parameters still available for this subtree (already scaled).
    pub param_budget: u64,
    /// Head to account for once the subtree is complete.
    pub head: Option<&'a Head>,
}

/// What a finished node hands on: a feature state, or the inputs of the branches a B opened.
enum Out {
    State(ShapeState),
    Branches(Vec<ShapeState>),
}

impl Out {
    fn state(self) -> ShapeState {
        match self {
            Out::State(s) => s,
            Out::Branches(_) => unreachable!("branch op in a sequential position"),
        }
    }
}

type Grown = Option<(DerivationNode, Out)>;

fn node(symbol: Symbol, rule_index: Option<usize>, children: Vec<DerivationNode>) -> DerivationNode {
    DerivationNode { node_id: 0, symbol, rule_index, children, in_state: None, out_state: None }
}

struct Sampler<'a> {
    g: &'a Grammar,
    limits: &'a SampleLimits,
    rng: &'a mut RandomSource,
    node_budget: usize,
    param_budget: u64,
    head: Option<&'a Head>,
    root_depth: usize,
    nodes: usize,
    params: u64,
    backtracks: usize,
}

impl Sampler<'_> {
    fn order(&mut self, nt: Nonterminal, ctx: &ShapeState) -> Vec<usize> {
        let rules = self.g.applicable_rules(nt, ctx);
        if rules.len() <= 1 {
            return rules.iter().map(|w| w.rule).collect();
        }
        let mut keyed: Vec<(f64, usize)> = rules
            .iter()
            .map(|w| {
                let u = self.rng.uniform().max(f64::MIN_POSITIVE);
                (w.probability.ln() - (-u.ln()).ln(), w.rule)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0));
        keyed.into_iter().map(|(_, r)| r).collect()
    }

    fn fits(&self, st: &ShapeState) -> bool {
        st.elements() <= self.limits.max_feature_elements
    }

    fn room(&self, extra: usize, reserve: usize) -> bool {
        self.nodes + extra + reserve <= self.node_budget
    }

    /// Expands `nt`, leaving `reserve` nodes for symbols still pending after it.
    fn expand(
        &mut self,
        nt: Nonterminal,
        input: &SubtreeContext,
        depth: usize,
        mult: u64,
        reserve: usize,
    ) -> Result<Grown, SampleError> {
        let ctx = match input {
            SubtreeContext::State(s) => s.clone(),
            SubtreeContext::Branches { outputs, .. } => match outputs.first() {
                Some(s) => s.clone().with_branching(outputs.len() as u8),
                None => return Ok(None),
            },
        };
        for rule in self.order(nt, &ctx) {
            let (nodes, params) = (self.nodes, self.params);
            if let Some(done) = self.try_rule(rule, input, depth, mult, reserve)? {
                return Ok(Some(done));
            }
            self.nodes = nodes;
            self.params = params;
            self.backtracks += 1;
            if self.backtracks > self.limits.max_backtracks {
                return Err(SampleError::BacktrackLimit(self.limits.max_backtracks));
            }
        }
        Ok(None)
    }

    fn try_rule(
        &mut self,
        rule: usize,
        input: &SubtreeContext,
        depth: usize,
        mult: u64,
        reserve: usize,
    ) -> Result<Grown, SampleError> {
        let r = self.g.rule(rule);
        let nt = r.lhs;
        if let Some(t) = r.terminal() {
            self.nodes += 2;
            if !self.room(0, reserve) {
                return Ok(None);
            }
            let out = match (nt, input) {
                (Nonterminal::A, SubtreeContext::Branches { outputs, outer_b }) => {
                    let Ok(mut out) = aggregate_shape(&t, outputs) else { return Ok(None) };
                    out.branching_factor = *outer_b;
                    Out::State(out)
                }
                (Nonterminal::A, _) => return Ok(None),
                (_, SubtreeContext::State(st)) => {
                    let Ok(tr) = transfer(&t, st) else { return Ok(None) };
                    self.params = self.params.saturating_add(mult.saturating_mul(tr.param_count));
                    if self.params > self.param_budget {
                        return Ok(None);
                    }
                    if nt == Nonterminal::B {
                        Out::Branches(tr.output_states)
                    } else {
                        Out::State(tr.output_states.into_iter().next().expect("unary op"))
                    }
                }
                _ => return Ok(None),
            };
            let fits = match &out {
                Out::State(s) => self.fits(s),
                Out::Branches(v) => v.iter().all(|s| self.fits(s)),
            };
            if !fits {
                return Ok(None);
            }
            let leaf = node(Symbol::N(nt), Some(rule), vec![node(Symbol::T(t), None, Vec::new())]);
            return Ok(Some((leaf, out)));
        }

        let SubtreeContext::State(start) = input else { return Ok(None) };
        let body: Vec<Nonterminal> = r
            .rhs
            .iter()
            .filter_map(|s| match s {
                Symbol::N(n) => Some(*n),
                Symbol::T(_) => None,
            })
            .collect();
        self.nodes += 1;
        let needed: usize = body.iter().map(|&n| min_nodes(n)).sum();
        if !self.room(needed, reserve) || body.iter().any(|&n| depth + 1 + min_levels(n) > self.limits.max_depth) {
            return Ok(None);
        }
        let mut children = Vec::with_capacity(body.len() + 1);
        let out = if body.first() == Some(&Nonterminal::B) {
            let Some(st) = self.grow_branching(start, depth, mult, reserve, &mut children)? else { return Ok(None) };
            st
        } else {
            let mut cur = start.clone();
            for (i, &n) in body.iter().enumerate() {
                let later: usize = body[i + 1..].iter().map(|&n| min_nodes(n)).sum();
                let Some((child, out)) =
                    self.expand(n, &SubtreeContext::State(cur), depth + 1, mult, reserve + later)?
                else {
                    return Ok(None);
                };
                children.push(child);
                cur = out.state();
            }
            cur
        };
        if depth == self.root_depth {
            if let Some(h) = self.head {
                if self.params.saturating_add(h.param_count(&out)) > self.param_budget {
                    return Ok(None);
                }
            }
        }
        Ok(Some((node(Symbol::N(nt), Some(rule), children), Out::State(out))))
    }

    /// B, the branch bodies, then A. Replicated branches grow one stored body.
    fn grow_branching(
        &mut self,
        start: &ShapeState,
        depth: usize,
        mult: u64,
        reserve: usize,
        children: &mut Vec<DerivationNode>,
    ) -> Result<Option<ShapeState>, SampleError> {
        let (m, a) = (min_nodes(Nonterminal::M), min_nodes(Nonterminal::A));
        let Some((b_node, Out::Branches(inputs))) =
            self.expand(Nonterminal::B, &SubtreeContext::State(start.clone()), depth + 1, mult, reserve + m + a)?
        else {
            return Ok(None);
        };
        children.push(b_node);
        let b = inputs.len();
        let outputs = if b == 2 {
            if !self.room(m, reserve + a) {
                return Ok(None);
            }
            let mut outs = Vec::with_capacity(2);
            for (i, inp) in inputs.into_iter().enumerate() {
                let later = if i == 0 { m + a } else { a };
                let Some((child, out)) = self.expand(Nonterminal::M, &SubtreeContext::State(inp), depth + 1, mult, reserve + later)?
                else {
                    return Ok(None);
                };
                children.push(child);
                outs.push(out.state());
            }
            outs
        } else {
            let inp = inputs.into_iter().next().expect("at least one branch");
            let inner = mult.saturating_mul(b as u64);
            if inner > self.limits.max_replication {
                return Ok(None);
            }
            let Some((child, out)) =
                self.expand(Nonterminal::M, &SubtreeContext::State(inp), depth + 1, inner, reserve + a)?
            else {
                return Ok(None);
            };
            children.push(child);
            vec![out.state(); b]
        };
        let ctx = SubtreeContext::Branches { outputs, outer_b: start.branching_factor };
        let Some((a_node, out)) = self.expand(Nonterminal::A, &ctx, depth + 1, mult, reserve)? else { return Ok(None) };
        children.push(a_node);
        Ok(Some(out.state()))
    }
}

/// Grows one subtree rooted at `req.nt`. Returns the unannotated subtree and its output state.
/// A B root reports the input state of its first branch.
pub fn sample_subtree(
    g: &Grammar,
    req: &SubtreeRequest<'_>,
    rng: &mut RandomSource,
    limits: &SampleLimits,
) -> Result<(DerivationNode, ShapeState), SampleError> {
    let mut s = Sampler {
        g,
        limits,
        rng,
        node_budget: req.node_budget,
        param_budget: req.param_budget,
        head: req.head,
        root_depth: req.depth,
        nodes: 0,
        params: 0,
        backtracks: 0,
    };
    match s.expand(req.nt, &req.context, req.depth, req.multiplier, 0)? {
        Some((n, Out::State(st))) => Ok((n, st)),
        Some((n, Out::Branches(v))) => Ok((n, v.into_iter().next().expect("at least one branch"))),
        None => Err(SampleError::Exhausted),
    }
}

/// Draws a complete architecture for `blueprint`.
pub fn sample(
    g: &Grammar,
    blueprint: &Blueprint,
    rng: &mut RandomSource,
    limits: &SampleLimits,
) -> Result<ArchitectureTree, SampleError> {
    let req = SubtreeRequest {
        nt: Nonterminal::S,
        context: SubtreeContext::State(blueprint.input.clone()),
        depth: 0,
        multiplier: 1,
        node_budget: limits.max_nodes,
        param_budget: limits.max_parameters,
        head: Some(&blueprint.head),
    };
    let (root, _) = sample_subtree(g, &req, rng, limits)?;
    let mut tree = ArchitectureTree::new(root, blueprint);
    tree.annotate().expect("sampled trees type-check");
    Ok(tree)
}

/// Like [`sample`], retrying with fresh randomness after a failure.
pub fn sample_with_retries(
    g: &Grammar,
    blueprint: &Blueprint,
    rng: &mut RandomSource,
    limits: &SampleLimits,
    attempts: usize,
) -> Result<ArchitectureTree, SampleError> {
    for _ in 0..attempts {
        match sample(g, blueprint, rng, limits) {
            Ok(t) => return Ok(t),
            // children are not re-drawn once a rule fails, so fresh randomness can still succeed
            Err(SampleError::BacktrackLimit(_) | SampleError::Exhausted) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(SampleError::Retries(attempts))
}

/// `n` independent samples. Individual `i` uses its own split of `rng`, so the
/// population does not depend on how the work is scheduled.
pub fn random_population(
    g: &Grammar,
    blueprint: &Blueprint,
    n: usize,
    rng: &RandomSource,
    limits: &SampleLimits,
) -> Result<Vec<ArchitectureTree>, SampleError> {
    crate::parallel::map_indexed(n, |i| {
        let mut r = rng.split(i as u64);
        sample_with_retries(g, blueprint, &mut r, limits, 100)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{build_grammar, Variant};

    fn bp(input: ShapeState) -> Blueprint {
        Blueprint { input, head: Head::Classification { classes: 10 } }
    }

    #[test]
    fn deterministic_under_seed() {
        let g = build_grammar(Variant::TwoD, 0.32).unwrap();
        let b = bp(ShapeState::im(3, 32, 32));
        let lim = SampleLimits::default();
        let a = sample_with_retries(&g, &b, &mut RandomSource::new(42), &lim, 10).unwrap();
        let c = sample_with_retries(&g, &b, &mut RandomSource::new(42), &lim, 10).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.validate(&g, &b.input, &lim), Ok(()));
    }

    #[test]
    fn samples_validate() {
        for (variant, input) in [(Variant::TwoD, ShapeState::im(3, 16, 16)), (Variant::OneD, ShapeState::col(64, 1))] {
            let g = build_grammar(variant, 0.4).unwrap();
            let b = bp(input);
            let lim = SampleLimits::default();
            let mut rng = RandomSource::new(1);
            for _ in 0..200 {
                let t = sample_with_retries(&g, &b, &mut rng, &lim, 10).unwrap();
                assert_eq!(t.validate(&g, &b.input, &lim), Ok(()), "{t}");
            }
        }
    }

    #[test]
    fn tight_limits_are_respected() {
        let g = build_grammar(Variant::TwoD, 0.32).unwrap();
        let b = bp(ShapeState::im(3, 16, 16));
        let lim = SampleLimits { max_nodes: 60, max_parameters: 20_000, max_depth: 12, ..SampleLimits::default() };
        let mut rng = RandomSource::new(3);
        for _ in 0..100 {
            let t = sample_with_retries(&g, &b, &mut rng, &lim, 20).unwrap();
            assert!(t.node_count() <= 60);
            assert!(t.depth() <= 12);
            assert_eq!(t.validate(&g, &b.input, &lim), Ok(()));
        }
    }

    #[test]
    fn population_is_reproducible() {
        let g = build_grammar(Variant::TwoD, 0.5).unwrap();
        let b = bp(ShapeState::im(3, 16, 16));
        let lim = SampleLimits::default();
        let p1 = random_population(&g, &b, 20, &RandomSource::new(9), &lim).unwrap();
        let p2 = random_population(&g, &b, 20, &RandomSource::new(9), &lim).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn replication_cap_holds() {
        let g = build_grammar(Variant::TwoD, 0.32).unwrap();
        let b = bp(ShapeState::im(3, 16, 16));
        for cap in [1, 8] {
            let lim = SampleLimits { max_replication: cap, ..SampleLimits::default() };
            for t in random_population(&g, &b, 300, &RandomSource::new(5), &lim).unwrap() {
                assert!(t.max_replication() <= cap);
                assert_eq!(t.validate(&g, &b.input, &lim), Ok(()));
            }
        }
    }
}
