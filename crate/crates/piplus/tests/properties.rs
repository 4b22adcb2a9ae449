use proptest::prelude::*;

use piplus::bounds::BoundBundle;
use piplus::funcs::{build_kl, compose, invert, MonotoneFn};
use piplus::model::{lq_model, Benchmark, Grid, GridModel, PolicyTable, SelectRule};
use piplus::pi::{run_pi, PiOptions};
use piplus::piplus::{regularize, run_piplus, PiPlusOptions};
use piplus::verify::{
    check_robust_stability, perturbed_rollout, rollout, Perturbation, RobustOptions, RolloutOptions, EPS_CHECK,
};

fn small_lq(a: f64, k0: f64) -> (Benchmark, GridModel) {
    let b = lq_model(a, 1.0, 1.0, 1.0, -2.0, 2.0, k0)
        .unwrap()
        .with_grid(Grid::uniform_1d(-2.0, 2.0, 41).unwrap());
    let gm = b.grid_model().unwrap();
    (b, gm)
}

/// A stabilizing pair (a, k0) with |a + k0| ≤ 0.8.
fn lq_params() -> impl Strategy<Value = (f64, f64)> {
    (0.5..1.1f64, -0.8..0.8f64).prop_map(|(a, c)| (a, c - a))
}

fn power(c: f64, p: f64) -> MonotoneFn {
    MonotoneFn::strict(move |s| c * s.powf(p) + s, 4.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inverse_lands_on_the_target(c in 0.1..5.0f64, p in 0.5..3.0f64, y in 0.0..20.0f64) {
        let f = power(c, p);
        let s = invert(&f, y).unwrap();
        prop_assert!(f.eval(s) >= y);
        prop_assert!(f.eval(s) - y <= 1e-9 * (1.0 + y));
    }

    #[test]
    fn composition_stays_monotone(c in 0.1..5.0f64, p in 0.5..3.0f64, s1 in 0.0..3.0f64, ds in 0.0..1.0f64) {
        let h = compose(&power(c, p), &MonotoneFn::linear(0.5, 4.0)).unwrap();
        prop_assert!(h.eval(s1) <= h.eval(s1 + ds));
        prop_assert_eq!(h.eval(0.0), 0.0);
    }

    #[test]
    fn generated_kl_decreases_in_k_and_grows_in_s(
        lower in 0.2..1.0f64,
        upper in 1.0..4.0f64,
        rate in 0.05..0.9f64,
        s in 0.01..3.0f64,
        ds in 0.0..1.0f64,
    ) {
        let beta = build_kl(
            &MonotoneFn::linear(lower, 4.0),
            &MonotoneFn::linear(upper, 4.0),
            &MonotoneFn::linear(rate, 4.0),
        );
        let a = beta.series(s, 20).unwrap();
        let b = beta.series(s + ds, 20).unwrap();
        prop_assert!(a[0] >= s * (1.0 - 1e-9));
        for k in 0..20 {
            prop_assert!(a[k + 1] <= a[k] * (1.0 + 1e-12));
            prop_assert!(a[k] <= b[k] * (1.0 + 1e-12));
        }
        prop_assert_eq!(beta.eval(0.0, 3).unwrap(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn regularization_contains_and_grows(
        picks in proptest::collection::vec(0usize..401, 41),
        sep in 0.0..0.2f64,
    ) {
        let (_, gm) = small_lq(0.9, -0.5);
        let h = PolicyTable::singleton(picks);
        let d = gm.grid.cell_diameter();
        let near = regularize(&gm, &h, d, sep);
        let far = regularize(&gm, &h, 3.0 * d, sep);
        let loose = regularize(&gm, &h, d, 0.0);
        prop_assert!(h.is_subset_of(&near));
        prop_assert!(near.is_subset_of(&far));
        prop_assert!(near.is_subset_of(&loose));
    }

    #[test]
    fn piplus_values_never_increase((a, k0) in lq_params()) {
        let (b, gm) = small_lq(a, k0);
        let h0 = gm.policy_from_fn(|x| b.h0(x));
        let run = run_piplus(&gm, &h0, 4, &PiPlusOptions::default()).unwrap();
        for w in run.traces.windows(2) {
            for (new, old) in w[1].values.values.iter().zip(&w[0].values.values) {
                prop_assert!(*new <= old + EPS_CHECK * (1.0 + old.abs()));
            }
        }
    }

    #[test]
    fn zero_perturbation_is_the_plain_rollout((a, k0) in lq_params(), x0 in -2.0..2.0f64, seed in 0u64..1000) {
        let (b, gm) = small_lq(a, k0);
        let h0 = gm.policy_from_fn(|x| b.h0(x));
        let plain = rollout(&gm, &h0, &[x0], RolloutOptions::default());
        for mode in [Perturbation::Uniform { seed }, Perturbation::Adversarial] {
            let pert = perturbed_rollout(&gm, &h0, &|_: &[f64]| 0.0, &[x0], RolloutOptions::default(), mode);
            prop_assert_eq!(&pert, &plain);
        }
    }

    #[test]
    fn seeded_runs_repeat(seed in 0u64..1000) {
        let (b, gm) = small_lq(0.9, -0.5);
        let h0 = gm.policy_from_fn(|x| b.h0(x));
        let opts = PiOptions { select: SelectRule::Random { seed }, ..PiOptions::default() };
        let x = run_pi(&gm, &h0, 3, &opts);
        let y = run_pi(&gm, &h0, 3, &opts);
        prop_assert_eq!(x.traces, y.traces);
        let p = run_piplus(&gm, &h0, 3, &PiPlusOptions::default()).unwrap();
        let q = run_piplus(&gm, &h0, 3, &PiPlusOptions::default()).unwrap();
        prop_assert_eq!(p, q);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn robust_margin_grows_with_the_practical_offset(d1 in 0.0..0.05f64, extra in 0.0..0.05f64, seed in 0u64..100) {
        let (b, gm) = small_lq(0.9, -0.5);
        let bundle = BoundBundle::build(&b.cert, gm.max_sigma()).unwrap();
        let h0 = gm.policy_from_fn(|x| b.h0(x));
        let base = RobustOptions { trials: 60, horizon: 30, seed, delta: d1, big_delta: 2.0, ..RobustOptions::default() };
        let wide = RobustOptions { delta: d1 + extra, ..base.clone() };
        let m1 = check_robust_stability(&gm, &h0, &bundle.beta, &base, 0).unwrap().margin.unwrap_or(0.0);
        let m2 = check_robust_stability(&gm, &h0, &bundle.beta, &wide, 0).unwrap().margin.unwrap_or(0.0);
        prop_assert!(m2 >= m1, "margin {} at δ = {}, {} at δ = {}", m1, d1, m2, d1 + extra);
    }
}
