//! Fast self-checks run by `meritluck validate`.

use anyhow::{ensure, Result};
use meritluck::agents::{optimal_redistribution, snap_to_grid, RedistributionGrid};
use meritluck::econometrics::{ols_clustered, Regressors};
use meritluck::experiment::{generate_design, ROUNDS};
use meritluck::meritprob::{check_convexity, pi_analytic, pi_from_q, q_from_pi, standard_bins, AdvantageKind};
use meritluck::rng;
use rand::Rng;

use crate::commands::{curve, load_population};
use crate::config::RunConfig;

pub struct Check {
    pub name: &'static str,
    pub run: fn(&RunConfig) -> Result<()>,
}

pub fn all() -> Vec<Check> {
    vec![
        Check { name: "q_pi_lattice_roundtrip", run: q_pi_roundtrip },
        Check { name: "redistribution_bounded_and_snapped", run: redistribution_on_grid },
        Check { name: "empirical_pi_tracks_closed_form", run: empirical_vs_closed_form },
        Check { name: "pi_curves_decreasing", run: curves_decreasing },
        Check { name: "designs_cover_every_bin", run: designs_cover_bins },
        Check { name: "ols_recovers_exact_line", run: ols_exact },
    ]
}

fn q_pi_roundtrip(_: &RunConfig) -> Result<()> {
    for k in 0..=100 {
        let q = k as f64 / 100.0;
        let back = q_from_pi(pi_from_q(q)?)?;
        ensure!((back - q).abs() < 1e-12, "q={q} came back as {back}");
    }
    Ok(())
}

fn redistribution_on_grid(_: &RunConfig) -> Result<()> {
    let grid = RedistributionGrid::default();
    let mut g = rng::stream(7, 0, 0);
    for _ in 0..2000 {
        let (f, pi) = (g.random_range(0.0..=0.5), g.random_range(0.5..=1.0));
        let r = optimal_redistribution(f, pi)?;
        ensure!(f - 1e-12 <= r && r <= 0.5 + 1e-12, "r*({f}, {pi}) = {r} outside [f, 0.5]");
        let snapped = snap_to_grid(r, &grid);
        ensure!(grid.contains(snapped), "{r} snapped to {snapped}, which is off the grid");
    }
    Ok(())
}

fn empirical_vs_closed_form(cfg: &RunConfig) -> Result<()> {
    if !cfg.effort.is_continuous() || cfg.population_csv.is_some() {
        return Ok(());
    }
    let pop = load_population(cfg)?;
    let c = curve(cfg, &pop, AdvantageKind::Multiplicative)?;
    let tol = 3.0 / (pop.len() as f64).sqrt();
    for p in &c.points {
        let exact = pi_analytic(&cfg.effort, p.advantage)?;
        ensure!(
            (p.pi_hat - exact).abs() <= tol,
            "m={}: empirical {} vs closed form {exact}",
            p.advantage,
            p.pi_hat
        );
    }
    Ok(())
}

fn curves_decreasing(cfg: &RunConfig) -> Result<()> {
    let pop = load_population(cfg)?;
    for kind in [AdvantageKind::Multiplicative, AdvantageKind::Additive] {
        let report = check_convexity(&curve(cfg, &pop, kind)?, 1e-2)?;
        ensure!(report.decreasing, "{} curve increases somewhere", kind.label());
    }
    Ok(())
}

fn designs_cover_bins(cfg: &RunConfig) -> Result<()> {
    let pop = load_population(cfg)?;
    let bins = standard_bins();
    for arm in &cfg.arms {
        let c = match arm.curve_kind() {
            Some(k) => Some(curve(cfg, &pop, k)?),
            None => None,
        };
        let d = generate_design(&arm.environment(cfg), &pop, c.as_ref(), "s00000", cfg.seed)?;
        ensure!(d.decisions.len() == ROUNDS, "arm {}: {} rounds", arm.name, d.decisions.len());
        let mut seen = vec![false; bins.len()];
        for dec in &d.decisions {
            seen[bins.assign(dec.pi_target)? - 1] = true;
        }
        ensure!(seen.iter().all(|&s| s), "arm {}: a bin has no round", arm.name);
    }
    Ok(())
}

fn ols_exact(_: &RunConfig) -> Result<()> {
    let x: Vec<f64> = (0..40).map(|i| i as f64 / 10.0).collect();
    let y: Vec<f64> = x.iter().map(|v| 0.25 - 1.5 * v).collect();
    let clusters: Vec<usize> = (0..40).map(|i| i / 4).collect();
    let fit = ols_clustered(&y, &Regressors::new().with_intercept(40).with("x", x), &clusters)?;
    ensure!((fit.coefficients[0] - 0.25).abs() < 1e-10 && (fit.coefficients[1] + 1.5).abs() < 1e-10);
    Ok(())
}

/// Runs every check, printing one line each. Returns the number of failures.
pub fn run_all(cfg: &RunConfig) -> usize {
    let mut failed = 0;
    for c in all() {
        match (c.run)(cfg) {
            Ok(()) => println!("PASS {}", c.name),
            Err(e) => {
                failed += 1;
                println!("FAIL {}: {e:#}", c.name);
            }
        }
    }
    failed
}
