//! Seed architectures against their recorded leaf strings and sizes.

use std::path::PathBuf;

use einspace::grammar::{build_grammar, Variant};
use einspace::sampling::SampleLimits;
use einspace::seeds::catalogue;

fn golden(name: &str) -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../testdata/seeds").join(format!("{name}.leaves"));
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display())).trim().to_string()
}

#[test]
fn leaf_strings_match_golden_files() {
    for s in catalogue() {
        let t = s.build_default();
        assert_eq!(t.leaves_string().join(" "), golden(s.name), "{}", s.name);
    }
}

#[test]
fn seeds_are_grammar_valid() {
    let g = build_grammar(Variant::TwoD, 0.32).unwrap();
    let limits = SampleLimits { max_parameters: u64::MAX, max_feature_elements: usize::MAX, ..SampleLimits::default() };
    for s in catalogue() {
        let t = s.build_default();
        assert_eq!(t.validate(&g, &s.blueprint.input, &limits), Ok(()), "{}", s.name);
    }
}

#[test]
fn parameter_counts_are_pinned() {
    let want = [
        ("conv-block-skip", 2420),
        ("conv-stem-block", 2900),
        ("reference-conv", 5316),
        ("resnet18", 11_215_818),
        ("wrn16-4", 2_751_146),
        ("vit", 4_114_954),
        ("mixer", 17_372_682),
    ];
    for (name, params) in want {
        let s = einspace::seeds::by_name(name).unwrap();
        let got = s.build_default().count_parameters().unwrap();
        assert_eq!(got, params, "{name}");
        if let Some((reference, tol)) = s.reference_params {
            assert!((got as f64 - reference as f64).abs() <= tol * reference as f64, "{name}: {got} vs {reference}");
        }
    }
}
