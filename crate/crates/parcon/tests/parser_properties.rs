//! Property tests for the expression grammar: everything the toolkit can
//! print re-parses to an equal descriptor.

use parcon::model::{parse_space, parse_time, SpaceFn, TimeFn, TimePiece};
use proptest::prelude::*;

/// Sane, exactly-representable-enough coefficients (the renderer emits
/// shortest round-trip decimals, so any finite f64 survives; keep magnitudes
/// readable).
fn coeff() -> impl Strategy<Value = f64> {
    prop_oneof![
        (-1e6..1e6f64).prop_filter("nonzero", |v| v.abs() > 1e-12),
        Just(1.0),
        Just(-1.0),
        Just(0.5),
    ]
}

fn space_fn() -> impl Strategy<Value = SpaceFn> {
    prop_oneof![
        coeff().prop_map(SpaceFn::Constant),
        Just(SpaceFn::Constant(0.0)),
        // Strictly increasing modes with nonzero coefficients.
        prop::collection::btree_set(1u32..40, 1..5).prop_flat_map(|modes| {
            let modes: Vec<u32> = modes.into_iter().collect();
            prop::collection::vec(coeff(), modes.len()).prop_map(move |cs| {
                SpaceFn::SineSeries(cs.into_iter().zip(modes.iter().copied()).collect())
            })
        }),
        // Nonzero trailing coefficient keeps the form canonical.
        prop::collection::vec(coeff(), 1..6).prop_map(SpaceFn::Polynomial),
        prop::collection::vec(-10.0..10.0f64, 2..12).prop_map(SpaceFn::Tabulated),
    ]
}

fn time_piece() -> impl Strategy<Value = TimePiece> {
    prop_oneof![
        coeff().prop_map(TimePiece::Constant),
        coeff().prop_map(TimePiece::Exponential),
        prop::collection::vec(coeff(), 2..5).prop_map(TimePiece::Polynomial),
    ]
}

fn time_fn() -> impl Strategy<Value = TimeFn> {
    prop_oneof![
        time_piece().prop_map(TimeFn::Uniform),
        (prop::collection::btree_set(1u32..100, 1..4), prop::collection::vec(time_piece(), 5))
            .prop_map(|(cuts, pieces)| {
                let mut edges: Vec<f64> = vec![0.0];
                edges.extend(cuts.iter().map(|c| *c as f64 / 100.0 * 3.0));
                edges.push(3.0);
                let spans: Vec<(f64, f64, TimePiece)> = edges
                    .windows(2)
                    .zip(pieces)
                    .map(|(w, p)| (w[0], w[1], p))
                    .collect();
                TimeFn::Piecewise(spans)
            }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn space_descriptors_round_trip(fd in space_fn()) {
        let text = fd.render();
        let back = parse_space(&text).unwrap_or_else(|e| panic!("{text}: {e}"));
        prop_assert_eq!(back, fd);
    }

    #[test]
    fn time_descriptors_round_trip(fd in time_fn()) {
        let text = fd.render();
        let back = parse_time(&text).unwrap_or_else(|e| panic!("{text}: {e}"));
        prop_assert_eq!(back, fd);
    }

    #[test]
    fn evaluation_matches_reparse(fd in space_fn(), x in 0.0..1.0f64) {
        let back = parse_space(&fd.render()).unwrap();
        let a = fd.eval(x, 1.0).unwrap();
        let b = back.eval(x, 1.0).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }
}
