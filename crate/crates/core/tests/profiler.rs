use proptest::prelude::*;
use smith_core::profiler::{
    closed_form_budget, count_attention_entries, instrument, ProfileShape, BYTES_PER_ENTRY,
};

fn shape(n: u64, ls: u64, b: u64, a: u64, l: u64) -> ProfileShape {
    ProfileShape { n, ls, b, a, l }
}

#[test]
fn small_shape_counts() {
    let s = shape(64, 8, 1, 1, 1);
    let counts = instrument(s).unwrap();
    assert_eq!(
        (counts.flat, counts.sentence_level, counts.document_level),
        (4096, 512, 64)
    );
    let budget = count_attention_entries(s).unwrap();
    assert_eq!(budget.hierarchical_total, 576);
    assert!(budget.instrumented.unwrap().matches_closed_form);
}

#[test]
fn production_shape_reduction() {
    let budget = count_attention_entries(shape(1536, 32, 32, 4, 3)).unwrap();
    let expected = 1536f64.powi(2) / (32.0 * 1536.0 + 48f64.powi(2));
    assert!((budget.reduction_factor - expected).abs() < 1e-12);
    assert!(budget.reduction_factor >= 40.0);
    assert_eq!(budget.flat_bytes, budget.flat_entries * BYTES_PER_ENTRY);
    let run = budget.instrumented.unwrap();
    assert_eq!((run.b, run.l), (1, 1));
    assert!(run.matches_closed_form);
}

#[test]
fn invalid_shapes_are_rejected() {
    for s in [
        shape(64, 1, 1, 1, 1),
        shape(64, 8, 0, 1, 1),
        shape(1, 8, 1, 1, 1),
        shape(64, 8, 1, 1, 0),
    ] {
        assert!(closed_form_budget(s).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn instrumented_counts_equal_closed_form(
        n in 2u64..80,
        ls in 2u64..20,
        b in 1u64..3,
        a in prop::sample::select(vec![1u64, 2, 4]),
        l in 1u64..3,
    ) {
        let s = shape(n, ls, b, a, l);
        prop_assert_eq!(instrument(s).unwrap(), s.closed_form());
        let budget = closed_form_budget(s).unwrap();
        prop_assert_eq!(budget.hierarchical_total, budget.sentence_level_entries + budget.document_level_entries);
        if let Some(total) = s.combined_form() {
            prop_assert_eq!(total, budget.hierarchical_total);
            prop_assert_eq!(budget.padding_entries, 0);
        }
    }
}
