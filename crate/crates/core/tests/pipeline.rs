use meritluck::agents::SpectatorMixture;
use meritluck::econometrics::elasticity_fit;
use meritluck::effort::{sample_population, sample_population_with, EffortDistribution};
use meritluck::environments::{LuckEnvironment, Timing};
use meritluck::experiment::{export_dataset, import_dataset, run_study_with};
use meritluck::meritprob::{multiplier_ratio_grid, pi_curve, AdvantageKind, PiOptions};
use meritluck::Execution;
use proptest::prelude::*;

#[test]
fn sequential_and_parallel_agree_bit_for_bit() {
    let dist = EffortDistribution::default();
    let a = sample_population_with(&dist, 300, 4, Execution::Sequential).unwrap();
    let b = sample_population_with(&dist, 300, 4, Execution::Parallel).unwrap();
    assert_eq!(a, b);

    let grid = multiplier_ratio_grid();
    let seq = PiOptions { exec: Execution::Sequential, ..PiOptions::default() };
    let par = PiOptions { exec: Execution::Parallel, ..PiOptions::default() };
    let c1 = pi_curve(&a, AdvantageKind::Multiplicative, &grid, &seq).unwrap();
    let c2 = pi_curve(&a, AdvantageKind::Multiplicative, &grid, &par).unwrap();
    assert_eq!(c1, c2);

    let env = LuckEnvironment::opportunities(Timing::ExAnte);
    let mix = SpectatorMixture::calibrated_opportunities();
    let s1 = run_study_with(&mix, &env, &a, Some(&c1), 40, 8, Execution::Sequential).unwrap();
    let s2 = run_study_with(&mix, &env, &a, Some(&c1), 40, 8, Execution::Parallel).unwrap();
    assert_eq!(s1, s2);
}

#[test]
fn dataset_survives_csv_and_refits_identically() {
    let pop = sample_population(&EffortDistribution::default(), 200, 1).unwrap();
    let env = LuckEnvironment::outcomes(0.0);
    let data = run_study_with(
        &SpectatorMixture::calibrated_outcomes(),
        &env,
        &pop,
        None,
        30,
        2,
        Execution::default(),
    )
    .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("d.csv");
    export_dataset(&data, &p).unwrap();
    let back = import_dataset(&p).unwrap();
    assert_eq!(back, data);
    let (f1, f2) = (elasticity_fit(&data, |_| true).unwrap(), elasticity_fit(&back, |_| true).unwrap());
    assert_eq!(f1.coefficients, f2.coefficients);
    assert_eq!(f1.ses, f2.ses);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pi_curve_stays_in_range_and_never_rises(seed in 0u64..1000, n in 20usize..120) {
        let pop = sample_population(&EffortDistribution::lognormal(2.5, 0.4), n, seed).unwrap();
        let curve = pi_curve(&pop, AdvantageKind::Multiplicative, &multiplier_ratio_grid(), &PiOptions::default()).unwrap();
        prop_assert_eq!(curve.points[0].pi_hat, 1.0);
        for w in curve.points.windows(2) {
            prop_assert!((0.5..=1.0).contains(&w[1].pi_hat));
            prop_assert!(w[1].pi_hat <= w[0].pi_hat + 1e-12);
        }
    }

    #[test]
    fn every_spectator_contributes_twelve_rounds(seed in 0u64..1000, n in 1usize..8) {
        let pop = sample_population(&EffortDistribution::default(), 60, seed).unwrap();
        let data = run_study_with(
            &SpectatorMixture::calibrated_outcomes(),
            &LuckEnvironment::outcomes(0.0),
            &pop,
            None,
            n,
            seed,
            Execution::Sequential,
        )
        .unwrap();
        prop_assert_eq!(data.len(), 12 * n);
        for d in &data {
            prop_assert!((0.0..=0.5).contains(&d.r));
            prop_assert!((0.5..=1.0).contains(&d.pi_true));
        }
    }
}
