//! Size statistics of sampled architectures: terminal and nonterminal counts,
//! mean branching factor, and how often each terminal family occurs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::grammar::{Grammar, Nonterminal, Symbol};
use crate::rng::RandomSource;
use crate::sampling::{random_population, SampleError, SampleLimits};
use crate::tree::{ArchitectureTree, Blueprint, DerivationNode};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation.
    pub std: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary { min: f64::NAN, mean: f64::NAN, median: f64::NAN, std: f64::NAN, max: f64::NAN };
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        let median = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
        Summary { min: v[0], mean, median, std: var.sqrt(), max: v[n - 1] }
    }
}

/// Per-tree counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreeCounts {
    /// Stored leaves.
    pub terminals: usize,
    /// M nodes (the root S and preterminal nodes excluded).
    pub nonterminals: usize,
    /// Mean branching factor of the states the leaves consume (1 outside any branch).
    pub branching: f64,
}

impl TreeCounts {
    /// `tree` must be annotated.
    pub fn of(tree: &ArchitectureTree) -> TreeCounts {
        fn walk(n: &DerivationNode, m: &mut usize, b: &mut Vec<f64>) {
            match n.symbol {
                Symbol::T(_) => b.push(n.in_state.as_ref().map_or(1.0, |s| f64::from(s.branching_factor))),
                Symbol::N(nt) => {
                    if nt == Nonterminal::M {
                        *m += 1;
                    }
                    for c in &n.children {
                        walk(c, m, b);
                    }
                }
            }
        }
        let (mut m, mut b) = (0, Vec::new());
        walk(&tree.root, &mut m, &mut b);
        TreeCounts { terminals: b.len(), nonterminals: m, branching: b.iter().sum::<f64>() / b.len().max(1) as f64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityStats {
    pub samples: usize,
    pub terminals: Summary,
    pub nonterminals: Summary,
    pub branching: Summary,
    /// Leaf count per terminal family; every family the grammar offers is listed.
    pub histogram: BTreeMap<String, u64>,
}

impl ComplexityStats {
    pub fn collect(grammar: &Grammar, trees: &[ArchitectureTree]) -> ComplexityStats {
        let mut histogram: BTreeMap<String, u64> = BTreeMap::new();
        for r in grammar.rules() {
            for s in &r.rhs {
                if let Symbol::T(t) = s {
                    histogram.entry(t.name().to_string()).or_insert(0);
                }
            }
        }
        let mut t = Vec::new();
        let mut m = Vec::new();
        let mut b = Vec::new();
        for tree in trees {
            let c = TreeCounts::of(tree);
            t.push(c.terminals as f64);
            m.push(c.nonterminals as f64);
            b.push(c.branching);
            for name in tree.leaf_names() {
                *histogram.entry(name.to_string()).or_insert(0) += 1;
            }
        }
        ComplexityStats {
            samples: trees.len(),
            terminals: Summary::of(&t),
            nonterminals: Summary::of(&m),
            branching: Summary::of(&b),
            histogram,
        }
    }

    /// `type,min,mean,median,std,max`, one row per count type.
    pub fn table_csv(&self) -> String {
        let mut s = String::from("type,min,mean,median,std,max\n");
        for (name, v) in [("terminals", &self.terminals), ("nonterminals", &self.nonterminals), ("branching_factor", &self.branching)] {
            writeln!(s, "{name},{},{},{},{},{}", v.min, v.mean, v.median, v.std, v.max).unwrap();
        }
        s
    }

    /// `terminal,count,frequency`, in name order.
    pub fn histogram_csv(&self) -> String {
        let total: u64 = self.histogram.values().sum();
        let mut s = String::from("terminal,count,frequency\n");
        for (name, &c) in &self.histogram {
            writeln!(s, "{name},{c},{}", c as f64 / total.max(1) as f64).unwrap();
        }
        s
    }

    /// Horizontal bar chart of the histogram.
    pub fn histogram_svg(&self) -> String {
        const ROW: usize = 22;
        const LABEL: usize = 90;
        const BAR: f64 = 400.0;
        let max = self.histogram.values().copied().max().unwrap_or(0).max(1) as f64;
        let h = ROW * self.histogram.len() + 20;
        let w = LABEL + BAR as usize + 80;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
        );
        for (i, (name, &c)) in self.histogram.iter().enumerate() {
            let y = 10 + i * ROW;
            let len = BAR * c as f64 / max;
            writeln!(s, "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{name}</text>", LABEL - 6, y + 14).unwrap();
            writeln!(s, "  <rect x=\"{LABEL}\" y=\"{}\" width=\"{len:.1}\" height=\"{}\" fill=\"#4878a8\"/>", y + 2, ROW - 6).unwrap();
            writeln!(s, "  <text x=\"{:.1}\" y=\"{}\">{c}</text>", LABEL as f64 + len + 4.0, y + 14).unwrap();
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Samples `n` trees (individual `i` from split `i` of `seed`) and summarises them.
pub fn sample_stats(
    grammar: &Grammar,
    blueprint: &Blueprint,
    n: usize,
    seed: u64,
    limits: &SampleLimits,
) -> Result<ComplexityStats, SampleError> {
    let trees = random_population(grammar, blueprint, n, &RandomSource::new(seed), limits)?;
    Ok(ComplexityStats::collect(grammar, &trees))
}
