use chrono::{Duration, NaiveDate};
use dnsward::analytics::ProportionPoint;
use dnsward::intervention::{estimate_effect, fit_counterfactual, ItsConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 220;
const AT: i64 = 160;

fn d0() -> NaiveDate {
    NaiveDate::from_ymd_opt(2018, 1, 1).unwrap()
}

fn pts(scope: &str, vals: &[f64]) -> Vec<ProportionPoint> {
    vals.iter()
        .enumerate()
        .map(|(i, v)| ProportionPoint { date: d0() + Duration::days(i as i64), scope: scope.into(), value: Some(*v) })
        .collect()
}

fn cfg(control: bool) -> ItsConfig {
    ItsConfig {
        pre_window: 60,
        post_window: 30,
        use_control_covariate: control,
        weekday_dummies: true,
        n_permutations: 200,
        ..ItsConfig::default()
    }
}

/// Control series and a treated series following `a + b * control` plus noise,
/// shifted by `step` from the intervention on.
fn linear(seed: u64, a: f64, b: f64, noise: f64, step: f64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c: Vec<f64> = (0..N).map(|_| 0.1 + rng.random_range(0.0..0.1)).collect();
    let t = c
        .iter()
        .enumerate()
        .map(|(i, c)| a + b * c + rng.random_range(-noise..noise) + if i as i64 >= AT { step } else { 0.0 })
        .collect();
    (t, c)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn scale_equivariant(seed in any::<u64>(), k in 0.1f64..10.0, step in -0.05f64..0.05) {
        let (t, c) = linear(seed, 0.05, 0.8, 0.01, step);
        let at = d0() + Duration::days(AT);
        let base = estimate_effect(&pts("t", &t), &pts("c", &c), at, &cfg(true)).unwrap();
        let ts: Vec<f64> = t.iter().map(|v| v * k).collect();
        let cs: Vec<f64> = c.iter().map(|v| v * k).collect();
        let scaled = estimate_effect(&pts("t", &ts), &pts("c", &cs), at, &cfg(true)).unwrap();
        let tol = 1e-8 * (1.0 + base.effect.abs() * k);
        prop_assert!((scaled.effect - k * base.effect).abs() < tol, "{} vs {}", scaled.effect, k * base.effect);
        prop_assert!((scaled.ci_low - k * base.ci_low).abs() < tol * 10.0);
        prop_assert_eq!(scaled.p_value, base.p_value);
    }

    #[test]
    fn recovers_linear_relation(seed in any::<u64>(), a in 0.0f64..0.2, b in 0.2f64..2.0) {
        let (t, c) = linear(seed, a, b, 0.005, 0.0);
        let at = d0() + Duration::days(AT);
        let m = fit_counterfactual(&pts("t", &t), &pts("c", &c), at, &cfg(true)).unwrap();
        let coef = m.coefficients.iter().find(|x| x.name == "control").unwrap();
        let se = coef.std_error.unwrap();
        prop_assert!((coef.estimate - b).abs() <= 3.0 * se + 1e-12, "b {} est {} se {}", b, coef.estimate, se);
    }

    #[test]
    fn identical_series_have_zero_effect(seed in any::<u64>()) {
        let (t, _) = linear(seed, 0.1, 1.0, 0.02, 0.0);
        let at = d0() + Duration::days(AT);
        let e = estimate_effect(&pts("t", &t), &pts("c", &t), at, &cfg(true)).unwrap();
        prop_assert!(e.effect.abs() < 1e-9);
        prop_assert_eq!(e.p_value, 1.0);
    }
}

#[test]
fn null_effects_centre_on_zero() {
    // Over many pure-noise series the estimated effect averages out.
    let at = d0() + Duration::days(AT);
    let effects: Vec<f64> = (0..200)
        .map(|s| {
            let (t, c) = linear(s, 0.05, 0.8, 0.02, 0.0);
            estimate_effect(&pts("t", &t), &pts("c", &c), at, &cfg(true)).unwrap().effect
        })
        .collect();
    let mean = effects.iter().sum::<f64>() / effects.len() as f64;
    let sd = (effects.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (effects.len() - 1) as f64).sqrt();
    assert!(mean.abs() < 3.0 * sd / (effects.len() as f64).sqrt(), "mean {mean} sd {sd}");
}
