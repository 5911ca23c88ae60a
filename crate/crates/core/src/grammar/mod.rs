//! The parameterised grammar: symbols, guarded rules and their probabilities.

mod analysis;
mod counting;

use std::fmt;

use serde::Serialize;

use crate::shape::{Mode, ShapeState};
use crate::terminal::{
    PermuteOrder, Terminal, BRANCH_FACTORS, CONV1D_TRIPLES, CONV1D_WIDTHS, IM2COL_TRIPLES, LINEAR_WIDTHS, PERMUTE_ORDERS_2,
    PERMUTE_ORDERS_3,
};

pub use analysis::{
    branching_rate, critical_stop_probability, expectation_matrix, expected_string_length, spectral_radius, AnalysisError,
    Criticality, ExpectationMatrix,
};
pub use counting::{count_architecture_strings, GrammarSkeleton};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Nonterminal {
    S,
    M,
    B,
    A,
    P,
    R,
    C,
}

impl Nonterminal {
    pub const ALL: [Nonterminal; 7] =
        [Nonterminal::S, Nonterminal::M, Nonterminal::B, Nonterminal::A, Nonterminal::P, Nonterminal::R, Nonterminal::C];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Nonterminal::S => "S",
            Nonterminal::M => "M",
            Nonterminal::B => "B",
            Nonterminal::A => "A",
            Nonterminal::P => "P",
            Nonterminal::R => "R",
            Nonterminal::C => "C",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.name() == s)
    }

    /// Nonterminals whose rules produce a single terminal.
    pub fn is_preterminal(self) -> bool {
        !matches!(self, Nonterminal::S | Nonterminal::M)
    }
}

impl fmt::Display for Nonterminal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Symbol {
    N(Nonterminal),
    T(Terminal),
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::N(n) => n.fmt(f),
            Symbol::T(t) => t.fmt(f),
        }
    }
}

/// Context predicate on a rule. Mode is checked before branching factor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Guard {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub branching_factor: Option<u8>,
}

impl Guard {
    pub const NONE: Guard = Guard { mode: None, branching_factor: None };

    fn mode(mode: Mode) -> Self {
        Guard { mode: Some(mode), branching_factor: None }
    }

    pub fn accepts(&self, st: &ShapeState) -> bool {
        if let Some(m) = self.mode {
            if st.mode != m {
                return false;
            }
        }
        match self.branching_factor {
            Some(b) => st.branching_factor == b,
            None => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProductionRule {
    pub lhs: Nonterminal,
    pub guard: Guard,
    pub rhs: Vec<Symbol>,
    /// Unconditional probability within the lhs family. Rules disabled by the
    /// stop probability keep their slot with probability zero so rule indices
    /// only depend on the variant and module set.
    pub probability: f64,
}

impl ProductionRule {
    /// The terminal produced by a preterminal rule.
    pub fn terminal(&self) -> Option<Terminal> {
        match self.rhs.as_slice() {
            [Symbol::T(t)] => Some(*t),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
pub enum Variant {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "1d")]
    OneD,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::TwoD => "2d",
            Variant::OneD => "1d",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "2d" => Ok(Variant::TwoD),
            "1d" => Ok(Variant::OneD),
            other => Err(format!("unknown grammar variant `{other}` (expected 2d or 1d)")),
        }
    }
}

/// Which non-stopping module rules exist for M (and S).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModuleSet {
    pub sequential: bool,
    pub branching: bool,
    pub routing: bool,
}

impl ModuleSet {
    pub const ALL: ModuleSet = ModuleSet { sequential: true, branching: true, routing: true };
}

impl Default for ModuleSet {
    fn default() -> Self {
        Self::ALL
    }
}

/// A grammar without its stop probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrammarFamily {
    pub variant: Variant,
    pub modules: ModuleSet,
}

impl GrammarFamily {
    pub fn new(variant: Variant) -> Self {
        Self { variant, modules: ModuleSet::ALL }
    }

    pub fn at(&self, stop_probability: f64) -> Result<Grammar, GrammarError> {
        Grammar::with_modules(self.variant, stop_probability, self.modules)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrammarError {
    #[error("stop probability must lie in (0, 1], got {0}")]
    StopProbability(f64),
}

/// A rule offered in some context, with its renormalised probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedRule {
    pub rule: usize,
    pub probability: f64,
}

#[derive(Clone, Debug)]
pub struct Grammar {
    variant: Variant,
    stop_probability: f64,
    modules: ModuleSet,
    rules: Vec<ProductionRule>,
    by_lhs: [Vec<usize>; 7],
}

/// Builds the full grammar of `variant` with the given stop probability.
pub fn build_grammar(variant: Variant, stop_probability: f64) -> Result<Grammar, GrammarError> {
    Grammar::with_modules(variant, stop_probability, ModuleSet::ALL)
}

impl Grammar {
    pub fn with_modules(variant: Variant, stop_probability: f64, modules: ModuleSet) -> Result<Grammar, GrammarError> {
        // p = 1 is allowed so the degenerate all-stop grammar can be analysed.
        if !(stop_probability > 0.0 && stop_probability <= 1.0) {
            return Err(GrammarError::StopProbability(stop_probability));
        }
        let p = stop_probability;
        let mut rules = Vec::new();
        use Nonterminal::*;
        let n = Symbol::N;
        let router = match variant {
            Variant::TwoD => P,
            Variant::OneD => R,
        };

        let module_rhs = |modules: ModuleSet| {
            let mut v: Vec<Vec<Symbol>> = Vec::new();
            if modules.sequential {
                v.push(vec![n(M), n(M)]);
            }
            if modules.branching {
                v.push(vec![n(B), n(M), n(A)]);
            }
            if modules.routing {
                v.push(vec![n(router), n(M), n(R)]);
            }
            v
        };

        let start = module_rhs(modules);
        let k = start.len() as f64;
        for rhs in start {
            rules.push(ProductionRule { lhs: S, guard: Guard::NONE, rhs, probability: 1.0 / k });
        }
        let grow = module_rhs(modules);
        let k = grow.len() as f64;
        for rhs in grow {
            rules.push(ProductionRule { lhs: M, guard: Guard::NONE, rhs, probability: (1.0 - p) / k });
        }
        rules.push(ProductionRule { lhs: M, guard: Guard::NONE, rhs: vec![n(C)], probability: p });

        let dims: &[u8] = match variant {
            Variant::TwoD => &[1, 2, 3],
            Variant::OneD => &[1, 2],
        };
        let dim_guard = |dim: u8| if dim == 3 { Guard::mode(Mode::Im) } else { Guard::NONE };

        let mut family = |lhs: Nonterminal, opts: Vec<(Terminal, Guard)>| {
            let w = 1.0 / opts.len() as f64;
            for (t, guard) in opts {
                rules.push(ProductionRule { lhs, guard, rhs: vec![Symbol::T(t)], probability: w });
            }
        };

        let mut branch = Vec::new();
        for b in BRANCH_FACTORS {
            branch.push((Terminal::Clone { b }, Guard::NONE));
        }
        for &dim in dims {
            for b in BRANCH_FACTORS {
                branch.push((Terminal::Group { dim, b }, dim_guard(dim)));
            }
        }
        family(B, branch);

        let mut agg = Vec::new();
        for scaled in [false, true] {
            agg.push((Terminal::Matmul { scaled }, Guard { mode: Some(Mode::Col), branching_factor: Some(2) }));
        }
        agg.push((Terminal::Add, Guard::NONE));
        for &dim in dims {
            for b in BRANCH_FACTORS {
                let mut g = dim_guard(dim);
                g.branching_factor = Some(b);
                agg.push((Terminal::Concat { dim, b }, g));
            }
        }
        family(A, agg);

        let permute2 = || {
            PERMUTE_ORDERS_2
                .iter()
                .map(|o| (Terminal::Permute { order: PermuteOrder::new(o).unwrap() }, Guard::mode(Mode::Col)))
        };
        let permute3 = || {
            PERMUTE_ORDERS_3
                .iter()
                .map(|o| (Terminal::Permute { order: PermuteOrder::new(o).unwrap() }, Guard::mode(Mode::Im)))
        };
        match variant {
            Variant::TwoD => {
                let mut pre = vec![(Terminal::Identity, Guard::NONE)];
                for (k, s, p) in IM2COL_TRIPLES {
                    pre.push((Terminal::Im2col { k, s, p }, Guard::mode(Mode::Im)));
                }
                pre.extend(permute2());
                pre.extend(permute3());
                family(P, pre);

                let mut post = vec![(Terminal::Identity, Guard::NONE), (Terminal::Col2im, Guard::mode(Mode::Col))];
                post.extend(permute2());
                post.extend(permute3());
                family(R, post);
            }
            Variant::OneD => {
                let mut post = vec![(Terminal::Identity, Guard::NONE)];
                post.extend(permute2());
                family(R, post);
            }
        }

        let mut comp = vec![(Terminal::Identity, Guard::NONE)];
        for d in LINEAR_WIDTHS {
            comp.push((Terminal::Linear { d }, Guard::NONE));
        }
        for t in [Terminal::Norm, Terminal::Relu, Terminal::Softmax, Terminal::PosEnc] {
            comp.push((t, Guard::NONE));
        }
        if variant == Variant::OneD {
            for (k, s, p) in CONV1D_TRIPLES {
                for d in CONV1D_WIDTHS {
                    comp.push((Terminal::Conv1d { k, s, p, d }, Guard::NONE));
                }
            }
        }
        family(C, comp);

        let mut by_lhs: [Vec<usize>; 7] = Default::default();
        for (i, r) in rules.iter().enumerate() {
            by_lhs[r.lhs.index()].push(i);
        }
        Ok(Grammar { variant, stop_probability, modules, rules, by_lhs })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn stop_probability(&self) -> f64 {
        self.stop_probability
    }

    pub fn modules(&self) -> ModuleSet {
        self.modules
    }

    pub fn family(&self) -> GrammarFamily {
        GrammarFamily { variant: self.variant, modules: self.modules }
    }

    pub fn rules(&self) -> &[ProductionRule] {
        &self.rules
    }

    pub fn rule(&self, index: usize) -> &ProductionRule {
        &self.rules[index]
    }

    /// Indices of every rule with this lhs, in declaration order.
    pub fn rules_for(&self, lhs: Nonterminal) -> &[usize] {
        &self.by_lhs[lhs.index()]
    }

    /// Nonterminals that occur in this variant.
    pub fn nonterminals(&self) -> Vec<Nonterminal> {
        Nonterminal::ALL.into_iter().filter(|n| !self.by_lhs[n.index()].is_empty()).collect()
    }

    /// Rules whose guard accepts `state`, renormalised to sum to one.
    /// An empty list marks a dead end.
    pub fn applicable_rules(&self, lhs: Nonterminal, state: &ShapeState) -> Vec<WeightedRule> {
        let mut out: Vec<WeightedRule> = self.by_lhs[lhs.index()]
            .iter()
            .filter(|&&i| self.rules[i].probability > 0.0 && self.rules[i].guard.accepts(state))
            .map(|&i| WeightedRule { rule: i, probability: self.rules[i].probability })
            .collect();
        let total: f64 = out.iter().map(|w| w.probability).sum();
        for w in &mut out {
            w.probability /= total;
        }
        out
    }

    /// Finds the rule `lhs -> rhs`.
    pub fn find_rule(&self, lhs: Nonterminal, rhs: &[Symbol]) -> Option<usize> {
        self.by_lhs[lhs.index()].iter().copied().find(|&i| self.rules[i].rhs == rhs)
    }

    /// The preterminal rule producing `t` from `lhs`.
    pub fn terminal_rule(&self, lhs: Nonterminal, t: &Terminal) -> Option<usize> {
        self.by_lhs[lhs.index()].iter().copied().find(|&i| self.rules[i].terminal().as_ref() == Some(t))
    }

    /// JSON dump of every rule.
    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct RuleDump<'a> {
            index: usize,
            lhs: &'a str,
            guard: Guard,
            rhs: Vec<String>,
            probability: f64,
        }
        #[derive(Serialize)]
        struct Dump<'a> {
            grammar_schema: u32,
            variant: &'a str,
            stop_probability: f64,
            rules: Vec<RuleDump<'a>>,
        }
        let rules = self
            .rules
            .iter()
            .enumerate()
            .map(|(index, r)| RuleDump {
                index,
                lhs: r.lhs.name(),
                guard: r.guard,
                rhs: r.rhs.iter().map(|s| s.to_string()).collect(),
                probability: r.probability,
            })
            .collect();
        serde_json::to_value(Dump {
            grammar_schema: 1,
            variant: self.variant.name(),
            stop_probability: self.stop_probability,
            rules,
        })
        .expect("grammar dump serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn terminals(g: &Grammar, lhs: Nonterminal, st: &ShapeState) -> Vec<Terminal> {
        g.applicable_rules(lhs, st).iter().map(|w| g.rule(w.rule).terminal().unwrap()).collect()
    }

    #[test]
    fn option_list_sizes() {
        let g = build_grammar(Variant::TwoD, 0.32).unwrap();
        assert_eq!(g.rules_for(Nonterminal::B).len(), 12);
        assert_eq!(g.rules_for(Nonterminal::A).len(), 12);
        assert_eq!(g.rules_for(Nonterminal::P).len(), 14);
        assert_eq!(g.rules_for(Nonterminal::R).len(), 8);
        assert_eq!(g.rules_for(Nonterminal::C).len(), 13);
        let one = build_grammar(Variant::OneD, 0.32).unwrap();
        assert!(one.rules_for(Nonterminal::P).is_empty());
        assert_eq!(one.rules_for(Nonterminal::C).len(), 29);
        assert!(one.terminal_rule(Nonterminal::C, &Terminal::Conv1d { k: 3, s: 1, p: 1, d: 64 }).is_some());
        assert!(one.rules().iter().all(|r| !matches!(r.terminal(), Some(Terminal::Im2col { .. } | Terminal::Col2im))));
    }

    #[test]
    fn m_rule_probabilities() {
        let g = build_grammar(Variant::TwoD, 0.32).unwrap();
        let probs: Vec<f64> = g.rules_for(Nonterminal::M).iter().map(|&i| g.rule(i).probability).collect();
        for (got, want) in probs.iter().zip([0.68 / 3.0, 0.68 / 3.0, 0.68 / 3.0, 0.32]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((probs[0] - 0.2267).abs() < 5e-5);
    }

    #[test]
    fn start_symbol_never_on_rhs() {
        let g = build_grammar(Variant::TwoD, 0.5).unwrap();
        assert!(g.rules().iter().all(|r| !r.rhs.contains(&Symbol::N(Nonterminal::S))));
    }

    #[test]
    fn guards() {
        let g = build_grammar(Variant::TwoD, 0.32).unwrap();
        let col = ShapeState::col(16, 8);
        let p_col = terminals(&g, Nonterminal::P, &col);
        assert_eq!(p_col.len(), 2);
        assert!(p_col.iter().all(|t| matches!(t, Terminal::Identity | Terminal::Permute { .. })));

        let a2 = terminals(&g, Nonterminal::A, &col.clone().with_branching(2));
        assert!(a2.contains(&Terminal::Matmul { scaled: false }));
        assert!(a2.contains(&Terminal::Add));
        assert!(a2.contains(&Terminal::Concat { dim: 1, b: 2 }));

        let a8 = g.applicable_rules(Nonterminal::A, &col.clone().with_branching(8));
        assert!(a8.iter().all(|w| !matches!(g.rule(w.rule).terminal(), Some(Terminal::Matmul { .. }))));
        let total: f64 = a8.iter().map(|w| w.probability).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(a8.len(), 3);

        // matmul is only offered to token features
        let a_im = terminals(&g, Nonterminal::A, &ShapeState::im(4, 4, 4).with_branching(2));
        assert!(!a_im.iter().any(|t| matches!(t, Terminal::Matmul { .. })));
    }

    #[test]
    fn stop_probability_bounds() {
        assert!(build_grammar(Variant::TwoD, 0.0).is_err());
        assert!(build_grammar(Variant::TwoD, 1.5).is_err());
        assert!(build_grammar(Variant::TwoD, f64::NAN).is_err());
        let g = build_grammar(Variant::TwoD, 1.0).unwrap();
        let m = g.applicable_rules(Nonterminal::M, &ShapeState::im(3, 8, 8));
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn dump_has_schema() {
        let g = build_grammar(Variant::OneD, 0.4).unwrap();
        let v = g.to_json();
        assert_eq!(v["grammar_schema"], 1);
        assert_eq!(v["rules"].as_array().unwrap().len(), g.rules().len());
    }
}
