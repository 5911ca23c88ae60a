//! Property-based checks of the library's invariants.

use einspace::grammar::{build_grammar, Variant};
use einspace::mutation::{mutate, mutate_at};
use einspace::rng::RandomSource;
use einspace::sampling::{sample_with_retries, SampleLimits};
use einspace::search::{EvalStatus, Evaluation, EvaluatorConfig, FitnessEvaluator, Individual, Population};
use einspace::shape::{im2col_output, ShapeState};
use einspace::stats::Summary;
use einspace::terminal::Terminal;
use einspace::tree::{ArchitectureTree, Blueprint, DerivationNode, Head};
use proptest::prelude::*;

fn small_limits() -> SampleLimits {
    SampleLimits { max_parameters: 500_000, max_feature_elements: 1 << 15, ..SampleLimits::default() }
}

fn blueprint(variant: Variant) -> Blueprint {
    match variant {
        Variant::TwoD => Blueprint { input: ShapeState::im(3, 8, 8), head: Head::Classification { classes: 3 } },
        Variant::OneD => Blueprint { input: ShapeState::col(16, 4), head: Head::Classification { classes: 3 } },
    }
}

fn variant() -> impl Strategy<Value = Variant> {
    prop_oneof![Just(Variant::TwoD), Just(Variant::OneD)]
}

fn draw(v: Variant, p: f64, seed: u64) -> Option<ArchitectureTree> {
    let g = build_grammar(v, p).unwrap();
    sample_with_retries(&g, &blueprint(v), &mut RandomSource::new(seed), &small_limits(), 50).ok()
}

/// Window positions counted one by one.
fn windows(n: usize, k: usize, s: usize, p: usize) -> usize {
    (0..).take_while(|i| i * s + k <= n + 2 * p).count()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn im2col_counts_windows(h in 1usize..40, w in 1usize..40, k in 1usize..8, s in 1usize..5, p in 0usize..4) {
        let (hh, ww) = (windows(h, k, s, p), windows(w, k, s, p));
        match im2col_output(h, w, k, s, p) {
            Ok((l, ho, wo)) => prop_assert_eq!((l, ho, wo), (hh * ww, hh, ww)),
            Err(_) => prop_assert!(hh == 0 || ww == 0),
        }
    }

    #[test]
    fn samples_validate_and_roundtrip(v in variant(), p in 0.35f64..0.95, seed in any::<u64>()) {
        let g = build_grammar(v, p).unwrap();
        let bp = blueprint(v);
        if let Some(t) = draw(v, p, seed) {
            prop_assert_eq!(t.validate(&g, &bp.input, &small_limits()), Ok(()));
            let back = ArchitectureTree::from_json(&t.to_json()).unwrap();
            prop_assert_eq!(back.hash(), t.hash());
            prop_assert_eq!(back.leaves_string(), t.leaves_string());
            prop_assert_eq!(draw(v, p, seed).unwrap().hash(), t.hash());
        }
    }

    #[test]
    fn mutants_validate(v in variant(), seed in any::<u64>()) {
        let g = build_grammar(v, 0.5).unwrap();
        let bp = blueprint(v);
        let Some(t) = draw(v, 0.5, seed) else { return Ok(()) };
        let mut rng = RandomSource::new(seed ^ 1);
        if let Ok(m) = mutate(&t, &g, &mut rng, &small_limits()) {
            prop_assert_eq!(&m.input, &t.input);
            prop_assert_eq!(m.validate(&g, &bp.input, &small_limits()), Ok(()));
        }
    }

    #[test]
    fn leaf_mutation_touches_only_its_preterminal(v in variant(), seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let g = build_grammar(v, 0.5).unwrap();
        let Some(t) = draw(v, 0.5, seed) else { return Ok(()) };
        let leaves = t.leaves();
        let leaf = leaves[pick.index(leaves.len())].node_id;
        let mut path = t.root.path_to(leaf).unwrap();
        path.pop();
        let Ok(m) = mutate_at(&t, &g, leaf, &mut RandomSource::new(seed ^ 2), &small_limits()) else { return Ok(()) };
        let (mut a, mut b) = (t.clone(), m.clone());
        for x in [&mut a, &mut b] {
            x.root.clear_states();
            *x.root.at_path_mut(&path) = DerivationNode::leaf(Terminal::Identity);
            x.renumber();
        }
        prop_assert_eq!(a, b);
    }

    #[test]
    fn validity_is_a_pure_function_of_the_seed(seed in any::<u64>(), eval_seed in any::<u64>()) {
        let g = build_grammar(Variant::TwoD, 0.5).unwrap();
        let Some(t) = draw(Variant::TwoD, 0.5, seed) else { return Ok(()) };
        let ev = FitnessEvaluator::new(EvaluatorConfig::Validity, g, small_limits());
        let a = ev.evaluate(&t, eval_seed).unwrap();
        prop_assert_eq!(a.clone(), ev.evaluate(&t, eval_seed).unwrap());
        prop_assert_eq!(a.status, EvalStatus::Ok);
    }

    #[test]
    fn population_keeps_the_newest(cap in 1usize..12, pushes in 0usize..40) {
        let tree = einspace::seeds::by_name("conv-stem-block").unwrap().build_default();
        let mut pop = Population::new(cap);
        for i in 0..pushes {
            let ind = Individual {
                tree: tree.clone(),
                hash: String::new(),
                evaluation: Evaluation { fitness: 0.0, status: EvalStatus::Ok, params: 0, leaf_count: 0 },
                birth_index: i as u64,
                parent_hash: None,
            };
            let evicted = pop.push(ind);
            prop_assert_eq!(evicted.map(|e| e.birth_index), (i >= cap).then(|| (i - cap) as u64));
        }
        let births: Vec<u64> = pop.iter().map(|m| m.birth_index).collect();
        let want: Vec<u64> = (pushes.saturating_sub(cap)..pushes).map(|i| i as u64).collect();
        prop_assert_eq!(births, want);
    }

    #[test]
    fn summary_is_ordered(xs in prop::collection::vec(-1e6f64..1e6, 1..50)) {
        let s = Summary::of(&xs);
        prop_assert!(s.min <= s.median && s.median <= s.max);
        prop_assert!(s.min <= s.mean + 1e-6 && s.mean <= s.max + 1e-6);
        prop_assert!(s.std >= 0.0);
    }

    #[test]
    fn rng_state_restores_the_stream(seed in any::<u64>(), skip in 0usize..100) {
        let mut a = RandomSource::new(seed);
        for _ in 0..skip {
            a.uniform();
        }
        let mut b = RandomSource::restore(&a.state()).unwrap();
        let xs: Vec<f64> = (0..10).map(|_| a.uniform()).collect();
        let ys: Vec<f64> = (0..10).map(|_| b.uniform()).collect();
        prop_assert_eq!(xs, ys);
    }
}

#[test]
fn small_blueprints_are_mostly_sampleable() {
    for v in [Variant::TwoD, Variant::OneD] {
        let ok = (0..40).filter(|&s| draw(v, 0.5, s).is_some()).count();
        assert!(ok >= 30, "{v:?}: {ok}/40");
    }
}
