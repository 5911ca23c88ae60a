//! Counting architecture strings on the bracket abstraction of the grammar.
//!
//! Each module type with an opening and closing terminal (branch/aggregate,
//! route/route) is a bracket pair; computation terminals are plain symbols.
//! The abstraction is `S -> M M | [_t M ]_t` and `M -> M M | [_t M ]_t | c`
//! (optionally `M -> ε`, which turns one bracket type into the Dyck language).

use num_bigint::BigUint;

use super::{Grammar, Nonterminal};

/// Bracket abstraction of a grammar.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrammarSkeleton {
    /// (opening symbols, closing symbols) per bracket type.
    pub brackets: Vec<(u32, u32)>,
    /// Number of distinct computation symbols.
    pub computations: u32,
    /// Whether M may derive the empty string.
    pub nullable: bool,
}

impl GrammarSkeleton {
    /// One bracket pair, no computation symbols, empty M allowed.
    pub fn dyck1() -> Self {
        Self { brackets: vec![(1, 1)], computations: 0, nullable: true }
    }

    /// The abstraction of a concrete grammar: option counts for B/A and P/R
    /// (R/R in the 1D variant) and C, guards ignored.
    pub fn of_grammar(g: &Grammar) -> Self {
        let n = |x: Nonterminal| g.rules_for(x).len() as u32;
        let mut brackets = Vec::new();
        if g.modules().branching {
            brackets.push((n(Nonterminal::B), n(Nonterminal::A)));
        }
        if g.modules().routing {
            let open = if g.rules_for(Nonterminal::P).is_empty() { n(Nonterminal::R) } else { n(Nonterminal::P) };
            brackets.push((open, n(Nonterminal::R)));
        }
        Self { brackets, computations: n(Nonterminal::C), nullable: false }
    }
}

/// Number of distinct terminal strings of length exactly `n` derivable from S.
pub fn count_architecture_strings(skel: &GrammarSkeleton, n: usize) -> BigUint {
    if n < 2 && !skel.nullable {
        return BigUint::ZERO;
    }
    let pair_weight: BigUint = skel.brackets.iter().map(|&(o, c)| BigUint::from(o) * BigUint::from(c)).sum();
    // seq[k]: strings of length k that are a (possibly empty) sequence of items,
    // where item = c | [ M ]. The decomposition into top-level items is unique.
    // m[k]: strings M derives, i.e. seq[k] for k >= 1 plus ε if nullable.
    let mut seq: Vec<BigUint> = vec![BigUint::ZERO; n + 1];
    let mut m: Vec<BigUint> = vec![BigUint::ZERO; n + 1];
    let mut item: Vec<BigUint> = vec![BigUint::ZERO; n + 1];
    seq[0] = BigUint::from(1u8);
    if skel.nullable {
        m[0] = BigUint::from(1u8);
    }
    for len in 1..=n {
        item[len] = if len == 1 {
            BigUint::from(skel.computations)
        } else {
            &pair_weight * &m[len - 2]
        };
        let mut total = BigUint::ZERO;
        for j in 1..=len {
            if item[j] != BigUint::ZERO && seq[len - j] != BigUint::ZERO {
                total += &item[j] * &seq[len - j];
            }
        }
        seq[len] = total;
        m[len] = seq[len].clone();
    }
    // S covers every sequence of two or more items and every single bracketed
    // item. The only excluded sequences (a single c) have length 1, and with a
    // nullable M even those derive as S -> M M with one side empty.
    seq[n].clone()
}
