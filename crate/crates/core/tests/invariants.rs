//! End-to-end invariants of scenario runs under randomized gains and seeds.

use proptest::prelude::*;
use range_pebo::scenarios::{run_scenario, GainValue, ScenarioConfig};

fn short(name: &str, duration: f64) -> ScenarioConfig {
    let mut c = ScenarioConfig::bundled(name).unwrap().with_noise_free();
    c.duration = duration;
    c.t_settle = 0.5 * duration;
    c.trace_stride = 1;
    c
}

fn set(c: &mut ScenarioConfig, key: &str, v: f64) {
    c.gains.insert(key.to_string(), GainValue::Scalar(v));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    // ω solves ω̇ = -γ k_p |φ|² ω from 1, so it stays in (0, 1] and never increases.
    #[test]
    fn pebo_omega_is_monotone_in_unit_interval(gamma in 5.0..100.0f64, k_p in 0.0..5.0f64, zeta0 in -1.0..1.0f64) {
        let mut c = short("ie_pebo", 3.0);
        set(&mut c, "gamma", gamma);
        set(&mut c, "k_p", k_p);
        set(&mut c, "zeta0", zeta0);
        let r = run_scenario(&c, 1).unwrap();
        let omega = r.trace.column("omega").unwrap();
        prop_assert!((omega[0] - 1.0).abs() < 1e-15);
        for w in omega.windows(2) {
            prop_assert!(w[1] > 0.0 && w[1] <= w[0] + 1e-15, "{} -> {}", w[0], w[1]);
        }
    }

    // Noise-free, the range error r̃ = r̂ - r obeys r̃̇ = -γ|φ|² r̃, so |r̃| never grows.
    #[test]
    fn gradient_range_error_never_grows(gamma in 5.0..100.0f64, r_hat0 in -5.0..5.0f64) {
        let mut c = short("pe_gradient", 3.0);
        set(&mut c, "gamma", gamma);
        set(&mut c, "r_hat0", r_hat0);
        let r = run_scenario(&c, 1).unwrap();
        let err = r.trace.column("err_r").unwrap();
        for w in err.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-12, "{} -> {}", w[0], w[1]);
        }
    }

    // Attitude estimate stays on SO(3) for any initial attitude guess.
    #[test]
    fn navigation_attitude_stays_orthogonal(a in -3.1..3.1f64, b in -3.1..3.1f64, c3 in -3.1..3.1f64) {
        let mut c = short("nav", 0.5);
        c.gains.insert("qc0".into(), GainValue::List(vec![a, b, c3]));
        let r = run_scenario(&c, 1).unwrap();
        prop_assert!(!r.aborted());
        for e in r.trace.column("orth_err").unwrap() {
            prop_assert!(e < 1e-9, "orth_err {e}");
        }
    }

    // A run is a pure function of the config and seed.
    #[test]
    fn runs_are_deterministic_per_seed(seed in 0u64..1000) {
        let mut c = ScenarioConfig::bundled("pe_pebo").unwrap();
        c.duration = 0.5;
        let a = run_scenario(&c, seed).unwrap();
        let b = run_scenario(&c, seed).unwrap();
        prop_assert_eq!(a.trace.to_csv_string(), b.trace.to_csv_string());
    }
}

#[test]
fn distinct_seeds_give_distinct_noise() {
    let mut c = ScenarioConfig::bundled("pe_pebo").unwrap();
    c.duration = 0.5;
    let a = run_scenario(&c, 1).unwrap();
    let b = run_scenario(&c, 2).unwrap();
    assert_ne!(a.trace.to_csv_string(), b.trace.to_csv_string());
}

#[test]
fn pv_drem_trace_is_finite_and_converging() {
    let c = short("pv_drem", 20.0);
    let r = run_scenario(&c, 1).unwrap();
    assert!(r.summary.all_finite);
    let err = r.trace.column("err_bias").unwrap();
    assert!(err.last().unwrap() < &1e-6, "bias error {} -> {}", err[0], err.last().unwrap());
}
