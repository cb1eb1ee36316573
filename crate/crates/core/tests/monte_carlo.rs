//! Statistical consistency checks against analytic values.

mod common;

use merton_lab::market::{sample_noise, sample_noise_antithetic, simulate_asset_prices, TimeGrid};
use merton_lab::oracle::{gradient_ascent, grid_search, PolicyFamily, SearchSpec};
use merton_lab::stats::{Estimate, Pairing};
use merton_lab::utility::UtilitySpec;
use merton_lab::variational::{perturbation_processes, utility_samples};
use merton_lab::wealth::{
    simulate_wealth_dollars, simulate_wealth_weights, Control, ControlLaw, DollarPolicy, PortfolioPolicy, Scenario, StoppedPolicy, DEFAULT_THRESHOLD,
};

#[test]
fn expected_terminal_price_grows_at_drift() {
    let m = common::desk();
    let g = TimeGrid::new(1.0, 250).unwrap();
    let noise = sample_noise(&m, &g, 1, 20_000).unwrap();
    let p = simulate_asset_prices(&m, &g, &noise).unwrap();
    let terminal: Vec<f64> = (0..p.n_paths).map(|i| p.risky_at(i, 250)[0]).collect();
    let e = Estimate::from_samples(&terminal, Pairing::Independent);
    assert!(e.within(0.08f64.exp(), 3.0, 0.0), "{e:?}");
    assert_eq!(p.riskless_at(0, 250), 0.02f64.exp());
}

/// Mean absolute relative gap between the dollar Euler path driven by
/// `pi X` and the weight log-Euler path on the same noise.
fn scheme_gap(n_steps: usize) -> f64 {
    let m = common::desk();
    let g = TimeGrid::new(1.0, n_steps).unwrap();
    let noise = sample_noise(&m, &g, 5, 2_000).unwrap();
    let pi = 1.5;
    let w = simulate_wealth_weights(&m, &g, &noise, &PortfolioPolicy(ControlLaw::constant(&[pi])).into(), 1.0).unwrap();
    let law = ControlLaw::feedback(move |input, out| out[0] = pi * input.wealth);
    let d = simulate_wealth_dollars(&m, &g, &noise, &DollarPolicy(law), 1.0).unwrap();
    (0..w.n_paths)
        .map(|i| {
            let (a, b) = (w.wealth_of(i)[n_steps], d.wealth_of(i)[n_steps]);
            ((a - b) / a).abs()
        })
        .sum::<f64>()
        / w.n_paths as f64
}

#[test]
fn dollar_and_weight_schemes_converge_together() {
    let coarse = scheme_gap(25);
    let fine = scheme_gap(400);
    // strong order one half: 16x finer steps, about 4x smaller gap
    assert!(fine < 0.05, "{fine}");
    assert!(coarse / fine > 2.5, "{coarse} / {fine}");
}

#[test]
fn expected_log_wealth_is_concave_in_weights() {
    let m = common::desk();
    let g = TimeGrid::new(1.0, 100).unwrap();
    let noise = sample_noise_antithetic(&m, &g, 9, 2_000).unwrap();
    let scn = Scenario::new(&m, g, &noise).unwrap();
    for (a, b) in [(0.5, 2.5), (0.0, 1.0), (1.2, 3.0)] {
        let s = utility_samples(&scn, &[Control::weights(&[a]), Control::weights(&[b]), Control::weights(&[0.5 * (a + b)])], &UtilitySpec::Log, 1.0).unwrap();
        let gap: Vec<f64> = (0..s[0].len()).map(|i| s[2][i] - 0.5 * (s[0][i] + s[1][i])).collect();
        let e = Estimate::from_samples(&gap, Pairing::Antithetic);
        let expected = 0.04 * (b - a) * (b - a) / 8.0;
        assert!((e.mean - expected).abs() < 1e-12, "{a},{b}: {e:?}");
    }
}

#[test]
fn ito_product_rule_for_first_order_term() {
    let m = common::desk();
    let g = TimeGrid::new(1.0, 250).unwrap();
    let noise = sample_noise(&m, &g, 21, 20_000).unwrap();
    let scn = Scenario::new(&m, g, &noise).unwrap();
    let u = UtilitySpec::power(0.5).unwrap();
    let policy: StoppedPolicy = PortfolioPolicy(ControlLaw::constant(&[2.0])).into();
    let dir = ControlLaw::constant(&[-1.0]);
    let dt = g.dt();
    let mut diff = Vec::with_capacity(scn.n_paths());
    for i in 0..scn.n_paths() {
        let p = perturbation_processes(&scn, i, &policy, &dir, &u, 1.0).unwrap();
        let drift: f64 = (0..250).map(|k| (-p.g[k] + p.i_omega[k] * p.h[k]) * dt).sum();
        diff.push(p.f1[250] * p.i_omega[250] - drift);
    }
    let e = Estimate::from_samples(&diff, Pairing::Independent);
    assert!(e.mean.abs() < 3.0 * e.std_error + 1e-3, "{e:?}");
}

#[test]
fn power_grid_search_agrees_with_closed_form() {
    let m = common::desk();
    let g = TimeGrid::new(1.0, 100).unwrap();
    let spec = SearchSpec {
        family: PolicyFamily::ConstantWeights,
        lower: vec![2.0],
        upper: vec![4.0],
        step: 0.25,
        n_paths: 20_000,
        seed: 4,
        crn: true,
        antithetic: true,
        threshold: DEFAULT_THRESHOLD,
    };
    let r = grid_search(&UtilitySpec::power(0.5).unwrap(), &m, &g, &spec, 1.0).unwrap();
    assert!((r.best().coords[0] - 3.0).abs() <= 0.25 + 1e-9, "{:?}", r.best());
    assert!(r.local_maxima <= 1);
}

#[test]
fn power_gradient_ascent_reaches_merton_point() {
    let m = common::desk();
    let g = TimeGrid::new(1.0, 50).unwrap();
    let noise = sample_noise_antithetic(&m, &g, 2, 4_000).unwrap();
    let r = gradient_ascent(&UtilitySpec::power(0.5).unwrap(), &m, &g, &noise, &[1.0], None, 200, 1e-4, 1.0).unwrap();
    assert!(r.converged, "{:?}", r.last());
    assert!((r.last().policy[0] - 3.0).abs() < 0.15, "{:?}", r.last());
    for w in r.trajectory.windows(2) {
        let slack = 2.0 * (w[0].objective.std_error + w[1].objective.std_error);
        assert!(w[1].objective.mean >= w[0].objective.mean - slack);
    }
}
