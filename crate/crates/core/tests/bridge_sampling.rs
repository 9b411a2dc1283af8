use approx::assert_abs_diff_eq;
use dbc::bridge::{bias_table, BridgeParams, EvalRule, ThetaSchedule, TimeGrid, REFERENCE_BIAS_TABLE};
use dbc::critic::Sampler;
use proptest::prelude::*;

// Plain numerical integration of the GOU velocity coefficient, used as an
// independent check of the closed-form weights.
fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let n = 20_000;
    let h = (b - a) / n as f64;
    (0..n).map(|i| f(a + (i as f64 + 0.5) * h)).sum::<f64>() * h
}

#[test]
fn right_rule_reproduces_the_reference_table() {
    let cells = bias_table(EvalRule::Right);
    assert_eq!(cells.len(), REFERENCE_BIAS_TABLE.len() * 3);
    for c in &cells {
        assert!(c.deviation() <= 0.05, "{c:?}");
    }
}

#[test]
fn sampler_with_a_constant_predictor_lands_on_it() {
    // f(z, t) = y makes each step move a ctilde-weighted fraction toward y;
    // the weights telescope, so the endpoint is y for any tau.
    for kind in [ThetaSchedule::default(), ThetaSchedule::linear(0.1, 5.0), ThetaSchedule::cosine(0.5, 2.0)] {
        let bridge = BridgeParams::new(kind);
        for steps in [1, 5, 50] {
            let sampler = Sampler::uniform(&bridge, steps);
            let end = sampler.run(0.3, |_, _| 4.25);
            assert_abs_diff_eq!(end, 4.25, epsilon = 1e-12);
        }
    }
}

#[test]
fn ctilde_matches_numerical_integration() {
    let bridge = BridgeParams::default();
    for (lo, hi) in [(0.0, 0.2), (0.2, 0.7), (0.7, 1.0)] {
        let numeric = integrate(|t| bridge.velocity_coeff(t), lo, hi);
        let closed = bridge.ctilde(lo, hi).unwrap();
        assert_abs_diff_eq!(closed, numeric, epsilon = 1e-3 * closed.abs().max(1.0));
    }
}

proptest! {
    #[test]
    fn weights_telescope_on_any_grid(mut cuts in prop::collection::vec(0.001f64..0.999, 0..12)) {
        cuts.sort_by(f64::total_cmp);
        cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
        let mut points = vec![0.0];
        points.extend(cuts);
        points.push(1.0);
        let grid = TimeGrid::new(points).unwrap();
        let w = BridgeParams::default().ctilde_weights(&grid);
        prop_assert_eq!(w.len(), grid.steps());
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn interpolation_hits_both_ends(a in -50.0f64..50.0, b in -50.0f64..50.0) {
        let bridge = BridgeParams::default();
        prop_assert!((bridge.interpolate(a, b, 0.0) - a).abs() < 1e-12);
        prop_assert!((bridge.interpolate(a, b, 1.0) - b).abs() < 1e-9 * (1.0 + b.abs()));
    }
}
