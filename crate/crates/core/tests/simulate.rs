use dpm_core::simulate::{
    calibrate_offset, capped_poisson_mean, generate, pilot_rate, SimConfig, TouchProfile,
    PRODUCT_A_DAILY_RATE,
};
use dpm_core::{Dataset, ModelParams};

fn params(c: f64, phi: f64, effect: f64) -> ModelParams {
    ModelParams::new(c, phi, vec![effect; 3], vec![effect; 3]).unwrap()
}

fn simulate(params: ModelParams, touch: TouchProfile, n: usize, horizon: usize, seed: u64) -> Dataset {
    generate(&SimConfig {
        true_params: params,
        n_customers: n,
        horizon,
        touch,
        seed,
    })
    .unwrap()
}

#[test]
fn calibrated_product_a_rate_is_within_a_factor_of_two() {
    let touch = TouchProfile::product_a();
    let base = params(0.0, 0.5, 0.5);
    let c = calibrate_offset(&base, &touch, 180, PRODUCT_A_DAILY_RATE, 5).unwrap();
    let data = simulate(ModelParams { c, ..base }, touch, 6000, 180, 6);
    assert!(data.customer_days() >= 1_000_000);
    let rate = data.daily_purchase_rate();
    assert!(rate > PRODUCT_A_DAILY_RATE / 2.0 && rate < PRODUCT_A_DAILY_RATE * 2.0, "{rate}");
}

#[test]
fn realized_touch_means_match_capped_poisson_means() {
    let touch = TouchProfile::product_b().scaled(4.0);
    let data = simulate(params(-12.0, 0.5, 0.0), touch.clone(), 6000, 180, 8);
    let days = data.customer_days() as f64;
    assert!(days >= 1_000_000.0);
    let channels = touch.r.iter().chain(&touch.m).enumerate();
    for (j, ch) in channels {
        let total: u64 = data
            .customers()
            .iter()
            .map(|h| (0..h.horizon()).map(|t| u64::from(h.channel(t, j))).sum::<u64>())
            .sum();
        let expected = capped_poisson_mean(ch.mean, ch.cap);
        let realized = total as f64 / days;
        assert!((realized / expected - 1.0).abs() < 0.05, "channel {j}: {realized} vs {expected}");
    }
}

#[test]
fn rare_product_b_target_needs_a_strongly_negative_offset() {
    // Without damping the offset is the propensity level itself.
    let touch = TouchProfile::product_b();
    let base = params(0.0, 0.0, 0.5);
    let c = calibrate_offset(&base, &touch, 180, 1e-4, 9).unwrap();
    assert!(c < -5.0, "{c}");
    // The target lies between the pilot rates at the two bracket ends.
    let low = pilot_rate(&ModelParams { c: -30.0, ..base.clone() }, &touch, 180, 100_000, 9, false).unwrap();
    let high = pilot_rate(&ModelParams { c: 5.0, ..base }, &touch, 180, 100_000, 9, false).unwrap();
    assert!(low < 1e-4 && 1e-4 < high);
}

#[test]
fn more_touches_never_lower_the_purchase_rate() {
    let base = params(-6.0, 0.5, 0.5);
    let touch = TouchProfile::product_b();
    let once = pilot_rate(&base, &touch, 180, 500_000, 10, false).unwrap();
    let twice = pilot_rate(&base, &touch.scaled(2.0), 180, 500_000, 10, false).unwrap();
    assert!(twice >= once, "{twice} < {once}");
}

#[test]
fn hazard_is_homogeneous_without_touch_effects() {
    let data = simulate(params(-3.0, 0.3, 0.0), TouchProfile::product_b(), 20_000, 60, 12);
    let (mut events, mut at_risk) = ([0.0f64; 2], [0.0f64; 2]);
    for h in data.customers() {
        for t in 0..h.horizon() {
            let half = usize::from(t >= 30);
            at_risk[half] += 1.0;
            events[half] += f64::from(h.y()[t]);
        }
    }
    let rate = [events[0] / at_risk[0], events[1] / at_risk[1]];
    let se = (rate[0] * (1.0 - rate[0]) / at_risk[0] + rate[1] * (1.0 - rate[1]) / at_risk[1]).sqrt();
    assert!((rate[0] - rate[1]).abs() < 3.0 * se, "{rate:?} se {se}");
}
