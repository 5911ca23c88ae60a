//! Toy-train scores with known answers: chance level for a network that
//! cannot learn features, a high score for a small conv net.

use einspace::grammar::{build_grammar, Nonterminal, Symbol, Variant};
use einspace::sampling::SampleLimits;
use einspace::search::{EvalStatus, EvaluatorConfig, FitnessEvaluator, TaskId, ToyTrainConfig};
use einspace::terminal::Terminal;
use einspace::tree::{ArchitectureTree, DerivationNode};

fn evaluator(cfg: ToyTrainConfig) -> FitnessEvaluator {
    FitnessEvaluator::new(EvaluatorConfig::ToyTrain(cfg), build_grammar(Variant::TwoD, 0.32).unwrap(), SampleLimits::default())
}

/// Input straight into the classification head.
fn identity_tree() -> ArchitectureTree {
    let idm = || DerivationNode::internal(Nonterminal::M, vec![DerivationNode::pre(Nonterminal::C, Terminal::Identity)]);
    let mut root = DerivationNode::internal(Nonterminal::M, vec![idm(), idm()]);
    root.symbol = Symbol::N(Nonterminal::S);
    let mut t = ArchitectureTree::new(root, &TaskId::ImPatterns.blueprint());
    t.annotate().unwrap();
    t
}

fn seed(name: &str) -> ArchitectureTree {
    einspace::seeds::by_name(name).unwrap().build(&TaskId::ImPatterns.blueprint()).unwrap()
}

#[test]
fn identity_scores_chance() {
    let ev = evaluator(ToyTrainConfig { epochs: 3, ..Default::default() });
    let e = ev.evaluate(&identity_tree(), 0).unwrap();
    assert_eq!(e.status, EvalStatus::Ok);
    assert!((e.fitness - 0.25).abs() <= 0.05, "{}", e.fitness);
}

#[test]
fn reference_conv_learns_the_task() {
    let ev = evaluator(ToyTrainConfig { epochs: 6, ..Default::default() });
    let e = ev.evaluate(&seed("reference-conv"), 0).unwrap();
    assert!(e.fitness > 0.8, "{}", e.fitness);
}

#[test]
fn conv_seed_beats_identity_on_paired_seeds() {
    let ev = evaluator(ToyTrainConfig { epochs: 3, train_samples: 1024, ..Default::default() });
    let (conv, id) = (seed("conv-stem-block"), identity_tree());
    for s in 0..3 {
        let a = ev.evaluate(&conv, s).unwrap().fitness;
        let b = ev.evaluate(&id, s).unwrap().fitness;
        assert!(a > b, "seed {s}: {a} <= {b}");
    }
}

#[test]
fn evaluation_is_deterministic() {
    let ev = evaluator(ToyTrainConfig { epochs: 1, train_samples: 256, ..Default::default() });
    let t = seed("conv-stem-block");
    assert_eq!(ev.evaluate(&t, 7).unwrap(), ev.evaluate(&t, 7).unwrap());
}

#[test]
fn oversized_networks_are_not_trained() {
    let ev = evaluator(ToyTrainConfig { max_macs: 1000, ..Default::default() });
    let e = ev.evaluate(&seed("reference-conv"), 0).unwrap();
    assert_eq!((e.status, e.fitness), (EvalStatus::OverBudget, 0.0));
}
