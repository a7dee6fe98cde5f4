//! Monte Carlo frequencies agree with computed values.

use dyncert::checker::{max_until, simulate, SolverConfig, UntilProperty};
use dyncert::expr::Valuation;
use dyncert::scenario::GridScenario;

#[test]
fn reference_open_frequency_matches_value() {
    let m = GridScenario::reference_open().build().unwrap();
    let c = m.instantiate(&Valuation::parse(&[("p1", "0.1"), ("p2", "0.4")]).unwrap()).unwrap();
    let prop = UntilProperty::mission();
    let r = max_until(&c, &prop, &SolverConfig::default()).unwrap();
    let freq = simulate(&c, &r.policy, &prop, 100_000, 10_000, 20240601).unwrap();
    assert!((freq - r.value_at_initial).abs() <= 0.01, "{freq} vs {}", r.value_at_initial);
    // same seed, same estimate, whatever the thread schedule
    assert_eq!(freq, simulate(&c, &r.policy, &prop, 100_000, 10_000, 20240601).unwrap());
}

#[test]
fn low_value_valuation_is_also_matched() {
    let m = GridScenario::small_open().build().unwrap();
    let c = m.instantiate(&Valuation::parse(&[("p1", "0.6"), ("p2", "0.05")]).unwrap()).unwrap();
    let prop = UntilProperty::mission();
    let r = max_until(&c, &prop, &SolverConfig::default()).unwrap();
    assert!(r.value_at_initial < 0.9);
    let freq = simulate(&c, &r.policy, &prop, 50_000, 10_000, 3).unwrap();
    assert!((freq - r.value_at_initial).abs() <= 0.01, "{freq} vs {}", r.value_at_initial);
}
