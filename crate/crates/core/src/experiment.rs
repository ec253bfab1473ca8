//! Twelve-decision session designs and simulated spectator studies.
//!
//! Each spectator sees one decision per merit-probability bin, in random
//! order. Under outcome luck the drawn `pi` fixes the coin-flip chance
//! `q = 2 (1 - pi)`; under opportunity luck it is inverted through the
//! empirical curve into a multiplier pair, and a concrete worker pair whose
//! advantaged member actually won is drawn from the population.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{decide, sample_spectator_population, DecisionFeatures, Observed, SpectatorMixture, SpectatorModel};
use crate::csvio;
use crate::effort::{Worker, WorkerPopulation};
use crate::environments::{
    resolve_headstart_match, resolve_opportunity_match, resolve_outcome_match, EnvKind, LuckEnvironment, LuckVariant,
    MatchRecord, Timing,
};
use crate::error::{Error, Result};
use crate::meritprob::{
    draw_pi_per_bin, invert_pi_to_headstarts, invert_pi_to_multipliers, q_from_pi, standard_bins, AdvantagePair,
    PiCurve,
};
use crate::par::{self, Execution};
use crate::rng::{self, SimRng};

/// Attempts at drawing a worker pair whose resolved winner matches the
/// advantage assignment.
pub const MAX_PAIR_ATTEMPTS: usize = 10_000;

pub const ROUNDS: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignDecision {
    /// 1-based presentation position.
    pub round: usize,
    /// 1-based merit-probability bin.
    pub bin: usize,
    pub pi_target: f64,
    /// Curve or formula value at the realized features.
    pub pi_features: f64,
    /// `pi_disclosed` is filled in per spectator when the session runs.
    pub features: DecisionFeatures,
    pub matched: MatchRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionDesign {
    pub spectator_id: String,
    pub env: EnvKind,
    pub timing: Option<Timing>,
    /// Sorted by round.
    pub decisions: Vec<DesignDecision>,
}

fn draw_two<R: Rng + ?Sized>(workers: &[Worker], rng: &mut R) -> (usize, usize) {
    let i = rng.random_range(0..workers.len());
    let mut j = rng.random_range(0..workers.len() - 1);
    if j >= i {
        j += 1;
    }
    (i, j)
}

/// Draws worker pairs, gives the first the high advantage, and keeps the
/// first pair the advantaged worker wins (any winner when advantages are
/// equal).
fn advantaged_pair<R, F>(
    workers: &[Worker],
    pair: &AdvantagePair,
    bin: usize,
    pi_target: f64,
    rng: &mut R,
    resolve: F,
) -> Result<MatchRecord>
where
    R: Rng + ?Sized,
    F: Fn(&Worker, f64, &Worker, f64, &mut R) -> Result<MatchRecord>,
{
    let equal = pair.high == pair.low;
    for _ in 0..MAX_PAIR_ATTEMPTS {
        let (i, j) = draw_two(workers, rng);
        let rec = resolve(&workers[i], pair.high, &workers[j], pair.low, rng)?;
        if equal || rec.winner_id == workers[i].id {
            return Ok(rec);
        }
    }
    Err(Error::Design {
        bin,
        pi_target,
        reason: format!(
            "no worker pair with advantages ({}, {}) was won by the advantaged worker in {MAX_PAIR_ATTEMPTS} draws",
            pair.high, pair.low
        ),
    })
}

fn design_error(bin: usize, pi_target: f64, e: Error) -> Error {
    match e {
        Error::Design { .. } => e,
        other => Error::Design {
            bin,
            pi_target,
            reason: other.to_string(),
        },
    }
}

fn build_decision(
    env: &LuckEnvironment,
    workers: &[Worker],
    curve: Option<&PiCurve>,
    bin: usize,
    pi_target: f64,
    rng: &mut SimRng,
) -> Result<DesignDecision> {
    let (observed, pi_features, mut matched) = match &env.variant {
        LuckVariant::OutcomeLuck { .. } => {
            let q = q_from_pi(pi_target)?;
            let (i, j) = draw_two(workers, rng);
            let rec = resolve_outcome_match(&workers[i], &workers[j], q, rng)?;
            (Observed::Outcome { q }, pi_target, rec)
        }
        LuckVariant::OpportunityLuck { model, .. } => {
            let curve = curve.ok_or_else(|| Error::Contract("opportunity designs need a pi curve".into()))?;
            let pair = invert_pi_to_multipliers(pi_target, curve, model, rng)?;
            let rec = advantaged_pair(workers, &pair, bin, pi_target, rng, |a, ma, b, mb, r| {
                resolve_opportunity_match(a, ma, b, mb, r)
            })?;
            let (m_w, m_l) = (rec.advantage_w.unwrap_or(pair.high), rec.advantage_l.unwrap_or(pair.low));
            (Observed::Opportunity { m_w, m_l }, pair.curve_pi, rec)
        }
        LuckVariant::HeadstartLuck { support } => {
            let curve = curve.ok_or_else(|| Error::Contract("headstart designs need a pi curve".into()))?;
            let pair = invert_pi_to_headstarts(pi_target, curve, support, rng)?;
            let rec = advantaged_pair(workers, &pair, bin, pi_target, rng, |a, ba, b, bb, r| {
                resolve_headstart_match(a, ba, b, bb, r)
            })?;
            let (b_w, b_l) = (rec.advantage_w.unwrap_or(pair.high), rec.advantage_l.unwrap_or(pair.low));
            (Observed::Headstart { b_w, b_l }, pair.curve_pi, rec)
        }
    };
    matched.pi_true = Some(pi_target);
    Ok(DesignDecision {
        round: 0,
        bin,
        pi_target,
        pi_features,
        features: DecisionFeatures {
            observed,
            pi_disclosed: None,
        },
        matched,
    })
}

/// One decision per bin, presented in a uniformly random order.
pub fn generate_design(
    env: &LuckEnvironment,
    population: &WorkerPopulation,
    curve: Option<&PiCurve>,
    spectator_id: &str,
    seed: u64,
) -> Result<SessionDesign> {
    env.validate()?;
    let workers = population.workers();
    if workers.len() < 2 {
        return Err(Error::InvalidPopulation("designs need at least 2 workers".into()));
    }
    let mut r = rng::stream(seed, rng::tag::DESIGN, 0);
    let bins = standard_bins();
    let targets = draw_pi_per_bin(&bins, &mut r);
    let mut decisions = targets
        .iter()
        .enumerate()
        .map(|(k, &pi)| build_decision(env, workers, curve, k + 1, pi, &mut r).map_err(|e| design_error(k + 1, pi, e)))
        .collect::<Result<Vec<_>>>()?;
    decisions.shuffle(&mut r);
    for (pos, d) in decisions.iter_mut().enumerate() {
        d.round = pos + 1;
    }
    Ok(SessionDesign {
        spectator_id: spectator_id.to_string(),
        env: env.kind(),
        timing: env.timing(),
        decisions,
    })
}

/// One row of a decision dataset. Headstarts are stored in `m_w`/`m_l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub spectator_id: String,
    pub round: usize,
    pub env: EnvKind,
    pub timing: Option<Timing>,
    pub informed: bool,
    pub q: Option<f64>,
    pub m_w: Option<f64>,
    pub m_l: Option<f64>,
    pub pi_true: f64,
    pub effort_w: f64,
    pub effort_l: f64,
    pub r: f64,
}

/// Applies the spectator's policy to every round; informed spectators are
/// shown each decision's `pi`.
pub fn run_session(model: &SpectatorModel, design: &SessionDesign, curve: Option<&PiCurve>) -> Result<Vec<DecisionRecord>> {
    if design.decisions.len() != ROUNDS {
        return Err(Error::Contract(format!(
            "a session has {ROUNDS} decisions, design holds {}",
            design.decisions.len()
        )));
    }
    design
        .decisions
        .iter()
        .map(|d| {
            let features = DecisionFeatures {
                pi_disclosed: model.informed.then_some(d.pi_target),
                ..d.features
            };
            let r = decide(model, &features, curve)?;
            let (q, m_w, m_l) = match features.observed {
                Observed::Outcome { q } => (Some(q), None, None),
                Observed::Opportunity { m_w, m_l } => (None, Some(m_w), Some(m_l)),
                Observed::Headstart { b_w, b_l } => (None, Some(b_w), Some(b_l)),
            };
            Ok(DecisionRecord {
                spectator_id: model.id.clone(),
                round: d.round,
                env: design.env,
                timing: design.timing,
                informed: model.informed,
                q,
                m_w,
                m_l,
                pi_true: d.pi_target,
                effort_w: d.matched.effort_w,
                effort_l: d.matched.effort_l,
                r,
            })
        })
        .collect()
}

pub fn run_study(
    mixture: &SpectatorMixture,
    env: &LuckEnvironment,
    population: &WorkerPopulation,
    curve: Option<&PiCurve>,
    n_spectators: usize,
    seed: u64,
) -> Result<Vec<DecisionRecord>> {
    run_study_with(mixture, env, population, curve, n_spectators, seed, Execution::default())
}

/// Samples spectators, builds an independent design for each and stacks the
/// sessions, sorted by `(spectator_id, round)`.
pub fn run_study_with(
    mixture: &SpectatorMixture,
    env: &LuckEnvironment,
    population: &WorkerPopulation,
    curve: Option<&PiCurve>,
    n_spectators: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<DecisionRecord>> {
    let spectators = sample_spectator_population(mixture, n_spectators, seed)?;
    let sessions = par::try_map_range(exec, spectators.len(), |i| {
        let model = &spectators[i];
        let design_seed = rng::derive(seed, rng::tag::SESSION_SEED, i as u64);
        let design = generate_design(env, population, curve, &model.id, design_seed)?;
        run_session(model, &design, curve)
    })?;
    let mut records: Vec<DecisionRecord> = sessions.into_iter().flatten().collect();
    records.sort_by(|a, b| a.spectator_id.cmp(&b.spectator_id).then(a.round.cmp(&b.round)));
    Ok(records)
}

const COLUMNS: [&str; 12] = [
    "spectator_id",
    "round",
    "env",
    "timing",
    "informed",
    "q",
    "m_w",
    "m_l",
    "pi_true",
    "effort_w",
    "effort_l",
    "r",
];

pub fn export_dataset(records: &[DecisionRecord], path: &Path) -> Result<()> {
    let mut w = csvio::writer(path)?;
    w.write_record(COLUMNS)?;
    for d in records {
        w.write_record([
            d.spectator_id.clone(),
            d.round.to_string(),
            d.env.label().to_string(),
            d.timing.map(|t| t.label().to_string()).unwrap_or_default(),
            d.informed.to_string(),
            csvio::opt_string(d.q),
            csvio::opt_string(d.m_w),
            csvio::opt_string(d.m_l),
            d.pi_true.to_string(),
            d.effort_w.to_string(),
            d.effort_l.to_string(),
            d.r.to_string(),
        ])?;
    }
    csvio::flush(w, path)
}

pub fn import_dataset(path: &Path) -> Result<Vec<DecisionRecord>> {
    let mut reader = csvio::reader(path)?;
    let cols = csvio::Columns::resolve(reader.headers()?, &COLUMNS)?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let round_raw = cols.cell(&record, 1);
        let round = round_raw
            .parse()
            .map_err(|_| csvio::parse_err(&record, "round", format!("expected a round number, found `{round_raw}`")))?;
        let env_raw = cols.cell(&record, 2);
        let env = EnvKind::parse(env_raw)
            .ok_or_else(|| csvio::parse_err(&record, "env", format!("unknown environment `{env_raw}`")))?;
        let timing = match cols.cell(&record, 3) {
            "" => None,
            t => Some(
                Timing::parse(t).ok_or_else(|| csvio::parse_err(&record, "timing", format!("unknown timing `{t}`")))?,
            ),
        };
        out.push(DecisionRecord {
            spectator_id: cols.cell(&record, 0).to_string(),
            round,
            env,
            timing,
            informed: csvio::bool_cell(&cols, &record, 4)?,
            q: csvio::opt_f64_cell(&cols, &record, 5)?,
            m_w: csvio::opt_f64_cell(&cols, &record, 6)?,
            m_l: csvio::opt_f64_cell(&cols, &record, 7)?,
            pi_true: csvio::f64_cell(&cols, &record, 8)?,
            effort_w: csvio::f64_cell(&cols, &record, 9)?,
            effort_l: csvio::f64_cell(&cols, &record, 10)?,
            r: csvio::f64_cell(&cols, &record, 11)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{optimal_redistribution, snap_to_grid, Policy, RedistributionGrid};
    use crate::effort::{sample_population, EffortDistribution};
    use crate::environments::MultiplierModel;
    use crate::meritprob::{headstart_grid, multiplier_ratio_grid, pi_curve, AdvantageKind, PiOptions};
    use std::collections::{BTreeMap, BTreeSet};
    use std::sync::OnceLock;

    struct Fixture {
        population: WorkerPopulation,
        mult: PiCurve,
        add: PiCurve,
    }

    fn fixture() -> &'static Fixture {
        static F: OnceLock<Fixture> = OnceLock::new();
        F.get_or_init(|| {
            let population = sample_population(&EffortDistribution::default(), 800, 1).unwrap();
            let o = PiOptions::default();
            let mult = pi_curve(&population, AdvantageKind::Multiplicative, &multiplier_ratio_grid(), &o).unwrap();
            let add = pi_curve(&population, AdvantageKind::Additive, &headstart_grid(), &o).unwrap();
            Fixture { population, mult, add }
        })
    }

    fn opp_env() -> LuckEnvironment {
        LuckEnvironment::opportunities(Timing::ExAnte)
    }

    fn spectator(policy: Policy, informed: bool) -> SpectatorModel {
        SpectatorModel {
            id: "s00000".into(),
            policy,
            informed,
        }
    }

    fn assert_covers_bins(d: &SessionDesign) {
        assert_eq!(d.decisions.len(), ROUNDS);
        let rounds: Vec<usize> = d.decisions.iter().map(|x| x.round).collect();
        assert_eq!(rounds, (1..=12).collect::<Vec<_>>());
        let bins: BTreeSet<usize> = d.decisions.iter().map(|x| x.bin).collect();
        assert_eq!(bins, (1..=12).collect());
        let binning = standard_bins();
        for x in &d.decisions {
            assert_eq!(binning.assign(x.pi_target).unwrap(), x.bin);
        }
    }

    #[test]
    fn outcome_designs() {
        let f = fixture();
        for seed in 0..20 {
            let d = generate_design(&LuckEnvironment::outcomes(0.0), &f.population, None, "s", seed).unwrap();
            assert_covers_bins(&d);
            let qs: Vec<f64> = d
                .decisions
                .iter()
                .map(|x| match x.features.observed {
                    Observed::Outcome { q } => q,
                    _ => panic!("outcome features expected"),
                })
                .collect();
            assert!(qs.contains(&1.0) && qs.contains(&0.0));
            for (x, q) in d.decisions.iter().zip(&qs) {
                assert_eq!(*q, q_from_pi(x.pi_target).unwrap());
                assert_eq!(x.matched.q_used, Some(*q));
                assert_eq!(x.matched.pi_true, Some(x.pi_target));
            }
        }
    }

    #[test]
    fn opportunity_designs() {
        let f = fixture();
        let grid = MultiplierModel::default().grid();
        let on_grid = |m: f64| grid.iter().any(|g| (g - m).abs() < 1e-9);
        for seed in 0..20 {
            let d = generate_design(&opp_env(), &f.population, Some(&f.mult), "s", seed).unwrap();
            assert_covers_bins(&d);
            assert_eq!(d.timing, Some(Timing::ExAnte));
            for x in &d.decisions {
                let Observed::Opportunity { m_w, m_l } = x.features.observed else {
                    panic!("opportunity features expected")
                };
                assert!(on_grid(m_w) && on_grid(m_l));
                let gap = (x.pi_features - x.pi_target).abs();
                assert!(f.mult.points.iter().all(|p| (p.pi_hat - x.pi_target).abs() >= gap - 1e-12));
                if x.bin == 12 {
                    assert!(m_w <= m_l);
                } else if m_w != m_l {
                    assert!(m_w > m_l);
                }
                assert!(x.matched.score_w().unwrap() >= x.matched.score_l().unwrap());
            }
        }
    }

    #[test]
    fn headstart_designs() {
        let f = fixture();
        let env = LuckEnvironment::headstarts((0..=15).collect());
        let d = generate_design(&env, &f.population, Some(&f.add), "s", 3).unwrap();
        assert_covers_bins(&d);
        for x in &d.decisions {
            let Observed::Headstart { b_w, b_l } = x.features.observed else {
                panic!("headstart features expected")
            };
            assert!(b_w >= b_l || x.bin == 12);
        }
    }

    #[test]
    fn designs_are_deterministic() {
        let f = fixture();
        let a = generate_design(&opp_env(), &f.population, Some(&f.mult), "s", 42).unwrap();
        let b = generate_design(&opp_env(), &f.population, Some(&f.mult), "s", 42).unwrap();
        let c = generate_design(&opp_env(), &f.population, Some(&f.mult), "s", 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn design_failures_name_the_bin() {
        let f = fixture();
        match generate_design(&opp_env(), &f.population, None, "s", 1) {
            Err(Error::Design { bin, .. }) => assert_eq!(bin, 1),
            other => panic!("expected a design error, got {other:?}"),
        }
        let narrow = LuckEnvironment {
            variant: LuckVariant::OpportunityLuck {
                model: MultiplierModel {
                    high: 1.2,
                    ..MultiplierModel::default()
                },
                timing: Timing::ExAnte,
            },
            ..opp_env()
        };
        match generate_design(&narrow, &f.population, Some(&f.mult), "s", 1) {
            Err(Error::Design { bin, pi_target, .. }) => assert_eq!((bin, pi_target), (1, 0.5)),
            other => panic!("expected a design error, got {other:?}"),
        }
    }

    #[test]
    fn sessions() {
        let f = fixture();
        let d = generate_design(&LuckEnvironment::outcomes(0.0), &f.population, None, "s00000", 8).unwrap();
        let never = run_session(&spectator(Policy::Never, false), &d, None).unwrap();
        assert!(never.iter().all(|r| r.r == 0.0));
        let bayes = run_session(&spectator(Policy::Bayesian { fair_share: 0.131 }, false), &d, None).unwrap();
        let bin1 = d.decisions.iter().position(|x| x.bin == 1).unwrap();
        assert_eq!(bayes[bin1].r, 0.5);
        assert_eq!(bayes[bin1].q, Some(1.0));

        let od = generate_design(&opp_env(), &f.population, Some(&f.mult), "s00000", 8).unwrap();
        let heur = spectator(Policy::default_opportunities_heuristic(), false);
        let mut by_diff: BTreeMap<i64, BTreeSet<u64>> = BTreeMap::new();
        for seed in 0..40 {
            let od = generate_design(&opp_env(), &f.population, Some(&f.mult), "s00000", seed).unwrap();
            for rec in run_session(&heur, &od, Some(&f.mult)).unwrap() {
                let diff = ((rec.m_w.unwrap() - rec.m_l.unwrap()) * 10.0).round() as i64;
                by_diff.entry(diff).or_default().insert(rec.r.to_bits());
            }
        }
        assert!(by_diff.values().all(|rs| rs.len() == 1));
        let informed = run_session(&spectator(Policy::Bayesian { fair_share: 0.2 }, true), &od, None).unwrap();
        for (rec, x) in informed.iter().zip(&od.decisions) {
            assert_eq!(rec.r, snap_to_grid(optimal_redistribution(0.2, x.pi_target).unwrap(), &RedistributionGrid::default()));
            assert!(rec.informed);
        }
    }

    #[test]
    fn studies_are_sorted_and_reproducible() {
        let f = fixture();
        let mix = SpectatorMixture::calibrated_opportunities();
        let run = |exec| run_study_with(&mix, &opp_env(), &f.population, Some(&f.mult), 10, 5, exec).unwrap();
        let a = run(Execution::Parallel);
        assert_eq!(a.len(), 120);
        assert!(a.windows(2).all(|w| (&w[0].spectator_id, w[0].round) < (&w[1].spectator_id, w[1].round)));
        assert_eq!(a, run(Execution::Sequential));
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        export_dataset(&a, &p1).unwrap();
        export_dataset(&run(Execution::Parallel), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bayesian_bin_means_follow_the_optimal_rule() {
        let f = fixture();
        let fs = 0.2;
        let data = run_study(&SpectatorMixture::bayesian(fs), &LuckEnvironment::outcomes(0.0), &f.population, None, 600, 9)
            .unwrap();
        let binning = standard_bins();
        let grid = RedistributionGrid::default();
        for b in &binning.bins {
            let rs: Vec<f64> = data
                .iter()
                .filter(|d| binning.assign(d.pi_true).unwrap() == b.index)
                .map(|d| d.r)
                .collect();
            assert_eq!(rs.len(), 600);
            let mean = rs.iter().sum::<f64>() / rs.len() as f64;
            // Expected snapped choice under a uniform draw over the bin's percents.
            let pcts: Vec<u32> = (b.lo_pct..=b.hi_pct).collect();
            let expected = pcts
                .iter()
                .map(|&p| snap_to_grid(optimal_redistribution(fs, p as f64 / 100.0).unwrap(), &grid))
                .sum::<f64>()
                / pcts.len() as f64;
            assert!((mean - expected).abs() < 0.02, "bin {}: {mean} vs {expected}", b.index);
        }
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let f = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("decisions.csv");
        for env in [LuckEnvironment::outcomes(0.0), opp_env()] {
            let data = run_study(
                &SpectatorMixture::calibrated_outcomes().with_informed(true),
                &env,
                &f.population,
                Some(&f.mult),
                7,
                2,
            )
            .unwrap();
            export_dataset(&data, &path).unwrap();
            assert_eq!(import_dataset(&path).unwrap(), data);
        }
        export_dataset(&[], &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "spectator_id,round,env,timing,informed,q,m_w,m_l,pi_true,effort_w,effort_l,r\n"
        );
        assert!(import_dataset(&path).unwrap().is_empty());

        std::fs::write(&path, "spectator_id,round,env,timing,informed,q,m_w,m_l,pi_true,effort_w,effort_l\n").unwrap();
        match import_dataset(&path) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "r"),
            other => panic!("expected missing column, got {other:?}"),
        }
        std::fs::write(
            &path,
            "spectator_id,round,env,timing,informed,q,m_w,m_l,pi_true,effort_w,effort_l,r\n\
             s1,1,outcomes,,false,0.2,,,0.9,20,10,0.1\n\
             s1,2,outcomes,,false,0.2,,,0.9,20,10,lots\n",
        )
        .unwrap();
        match import_dataset(&path) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column.as_str()), (3, "r")),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }
}
