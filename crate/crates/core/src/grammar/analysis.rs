//! Branching-rate and expected-length analysis of a grammar.
//!
//! The analysis is mode-free: guards are ignored and every rule contributes
//! with its unconditional probability. The branching rule `M -> B M A` counts
//! its inner `M` twice for b = 2 and once for b in {4, 8}, since wider
//! branches repeat one derivation.

use super::{Grammar, GrammarFamily, Nonterminal, Symbol};

const N: usize = 7;

/// Expected number of each nonterminal produced by one expansion of each nonterminal.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpectationMatrix {
    pub entries: [[f64; N]; N],
}

impl ExpectationMatrix {
    pub fn get(&self, from: Nonterminal, to: Nonterminal) -> f64 {
        self.entries[from.index()][to.index()]
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("divergent expectation: branching rate {0} is not below 1")]
    Divergent(f64),
}

/// Outcome of the search for the stop probability at which the rate crosses 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Criticality {
    pub threshold: f64,
    pub always_subcritical: bool,
}

/// Expected multiplicity of the inner M of a branching module.
fn branch_multiplicity(g: &Grammar) -> f64 {
    g.rules_for(Nonterminal::B)
        .iter()
        .map(|&i| {
            let r = g.rule(i);
            match r.terminal().and_then(|t| t.branch_factor()) {
                Some(2) => 2.0 * r.probability,
                _ => r.probability,
            }
        })
        .sum()
}

fn is_branching_rhs(rhs: &[Symbol]) -> bool {
    rhs.first() == Some(&Symbol::N(Nonterminal::B))
}

pub fn expectation_matrix(g: &Grammar) -> ExpectationMatrix {
    let mult = branch_multiplicity(g);
    let mut entries = [[0.0; N]; N];
    for r in g.rules() {
        let branching = is_branching_rhs(&r.rhs);
        for s in &r.rhs {
            if let Symbol::N(y) = s {
                let count = if branching && *y == Nonterminal::M { mult } else { 1.0 };
                entries[r.lhs.index()][y.index()] += r.probability * count;
            }
        }
    }
    ExpectationMatrix { entries }
}

/// Spectral radius of a nonnegative matrix by power iteration on `A + I`,
/// which removes periodicity without moving the dominant eigenvector.
pub fn spectral_radius(a: &[[f64; N]; N]) -> f64 {
    // A nilpotent matrix makes the shifted eigenvalue defective and the
    // iteration crawl; detect it exactly first.
    let mut v = [1.0; N];
    for _ in 0..N {
        let mut w = [0.0; N];
        for i in 0..N {
            w[i] = (0..N).map(|j| a[i][j] * v[j]).sum::<f64>();
        }
        v = w;
    }
    if v.iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    let mut v = [1.0; N];
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let mut w = [0.0; N];
        for i in 0..N {
            w[i] = v[i] + (0..N).map(|j| a[i][j] * v[j]).sum::<f64>();
        }
        let norm = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if norm == 0.0 {
            return 0.0;
        }
        for x in &mut w {
            *x /= norm;
        }
        // v is normalised to max-norm 1, so `norm` estimates the eigenvalue of A + I
        let done = (norm - lambda).abs() <= 1e-10 * norm;
        lambda = norm;
        v = w;
        if done {
            break;
        }
    }
    (lambda - 1.0).max(0.0)
}

pub fn branching_rate(g: &Grammar) -> f64 {
    spectral_radius(&expectation_matrix(g).entries)
}

/// Bisection on the stop probability for a branching rate of exactly 1.
pub fn critical_stop_probability(family: &GrammarFamily) -> Criticality {
    let rate = |p: f64| branching_rate(&family.at(p).expect("probability in range"));
    let mut lo = 1e-9;
    let mut hi = 1.0;
    if rate(lo) <= 1.0 {
        return Criticality { threshold: 0.0, always_subcritical: true };
    }
    while hi - lo > 1e-6 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Criticality { threshold: 0.5 * (lo + hi), always_subcritical: false }
}

/// Expected number of leaves of a derivation from S.
///
/// Solves `E = t + A E`, where `t` counts terminals emitted directly by each
/// rule and `A` is the expectation matrix. Preterminals get `E = 1`.
pub fn expected_string_length(g: &Grammar) -> Result<f64, AnalysisError> {
    let a = expectation_matrix(g);
    let rho = spectral_radius(&a.entries);
    if rho >= 1.0 {
        return Err(AnalysisError::Divergent(rho));
    }
    let mut t = [0.0; N];
    for r in g.rules() {
        let terms = r.rhs.iter().filter(|s| matches!(s, Symbol::T(_))).count();
        t[r.lhs.index()] += r.probability * terms as f64;
    }
    // (I - A) E = t by Gaussian elimination with partial pivoting
    let mut m = [[0.0; N + 1]; N];
    for i in 0..N {
        for j in 0..N {
            m[i][j] = if i == j { 1.0 } else { 0.0 } - a.entries[i][j];
        }
        m[i][N] = t[i];
    }
    for col in 0..N {
        let piv = (col..N).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs())).unwrap();
        m.swap(col, piv);
        let d = m[col][col];
        for row in 0..N {
            if row != col && m[row][col] != 0.0 {
                let f = m[row][col] / d;
                for k in col..=N {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    let s = Nonterminal::S.index();
    Ok(m[s][N] / m[s][s])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{build_grammar, ModuleSet, Variant};

    fn mm(p: f64) -> f64 {
        expectation_matrix(&build_grammar(Variant::TwoD, p).unwrap()).get(Nonterminal::M, Nonterminal::M)
    }

    #[test]
    fn mm_entry_matches_hand_count() {
        for p in [0.1, 0.32, 0.5, 0.9] {
            // MM: two Ms; BMA: 1/3 of the options double the M; PMR: one M
            let hand = 2.0 * (1.0 - p) / 3.0 + (1.0 - p) / 3.0 * (1.0 / 3.0 * 2.0 + 2.0 / 3.0) + (1.0 - p) / 3.0;
            assert!((mm(p) - hand).abs() < 1e-12);
            assert!((mm(p) - 13.0 * (1.0 - p) / 9.0).abs() < 1e-12);
        }
        assert_eq!(mm(1.0), 0.0);
    }

    #[test]
    fn preterminal_rows_are_zero() {
        let e = expectation_matrix(&build_grammar(Variant::TwoD, 0.3).unwrap());
        for x in [Nonterminal::B, Nonterminal::A, Nonterminal::P, Nonterminal::R, Nonterminal::C] {
            assert!(e.entries[x.index()].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rates() {
        let r = |p| branching_rate(&build_grammar(Variant::TwoD, p).unwrap());
        assert!((r(0.32) - 13.0 * 0.68 / 9.0).abs() < 1e-8);
        assert!((r(0.25) - 13.0 * 0.75 / 9.0).abs() < 1e-8);
        assert_eq!(r(1.0), 0.0);
    }

    #[test]
    fn critical_points() {
        let c = critical_stop_probability(&GrammarFamily::new(Variant::TwoD));
        assert!(!c.always_subcritical);
        assert!((c.threshold - 4.0 / 13.0).abs() < 1e-4);

        let seq_only = GrammarFamily {
            variant: Variant::TwoD,
            modules: ModuleSet { sequential: true, branching: false, routing: false },
        };
        assert!((critical_stop_probability(&seq_only).threshold - 0.5).abs() < 1e-4);

        let with_routing = GrammarFamily {
            variant: Variant::TwoD,
            modules: ModuleSet { sequential: true, branching: false, routing: true },
        };
        assert!((critical_stop_probability(&with_routing).threshold - 1.0 / 3.0).abs() < 1e-4);

        let stop_only = GrammarFamily {
            variant: Variant::TwoD,
            modules: ModuleSet { sequential: false, branching: false, routing: false },
        };
        let c = critical_stop_probability(&stop_only);
        assert!(c.always_subcritical);
        assert_eq!(c.threshold, 0.0);
    }

    #[test]
    fn expected_lengths() {
        let e = |p| expected_string_length(&build_grammar(Variant::TwoD, p).unwrap()).unwrap();
        // hand solution of the two-unknown system
        let hand = |p: f64| {
            let em = (4.0 * (1.0 - p) / 3.0 + p) / (1.0 - 13.0 * (1.0 - p) / 9.0);
            (4.0 + 13.0 / 3.0 * em) / 3.0
        };
        for p in [0.35, 0.5, 0.7, 0.9] {
            assert!((e(p) - hand(p)).abs() < 1e-9, "p={p}");
        }
        assert!((e(0.9) - 3.08).abs() < 5e-3);
        assert!((e(1.0) - (2.0 + (2.0 + 4.0 / 3.0) + 3.0) / 3.0).abs() < 1e-12);
        assert!(matches!(
            expected_string_length(&build_grammar(Variant::TwoD, 0.25).unwrap()),
            Err(AnalysisError::Divergent(_))
        ));
    }
}
