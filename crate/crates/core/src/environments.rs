//! Luck mechanisms that turn a pair of workers into a winner and a loser.
//!
//! Outcome luck flips a coin with probability `q`; opportunity luck scales
//! effort by a per-worker productivity multiplier; headstart luck adds a
//! per-worker score bonus. Effort and score ties are broken by a fair coin.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::csvio;
use crate::effort::{Worker, WorkerPopulation};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rng;

/// Scores within this relative distance count as tied.
pub(crate) const SCORE_TIE_RTOL: f64 = 1e-12;

pub(crate) fn scores_tied(a: f64, b: f64) -> bool {
    (a - b).abs() <= SCORE_TIE_RTOL * a.abs().max(b.abs())
}

/// Multiplier distribution: point masses at `low` and `high` plus a uniform
/// component on `(low, high)`, rounded to the nearest tenth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiplierModel {
    pub low: f64,
    pub high: f64,
    pub p_low: f64,
    pub p_high: f64,
}

impl Default for MultiplierModel {
    fn default() -> Self {
        MultiplierModel {
            low: 1.0,
            high: 4.0,
            p_low: 0.05,
            p_high: 0.05,
        }
    }
}

fn to_tenths(x: f64) -> i64 {
    (x * 10.0 + 0.5).floor() as i64
}

/// Rounds to the 0.1 grid, halves going up.
pub fn round_to_tenth(x: f64) -> f64 {
    to_tenths(x) as f64 / 10.0
}

impl MultiplierModel {
    pub fn p_uniform(&self) -> f64 {
        1.0 - self.p_low - self.p_high
    }

    pub fn validate(&self) -> Result<()> {
        let on_grid = |x: f64| ((x * 10.0).round() - x * 10.0).abs() < 1e-9;
        if !(self.low > 0.0 && self.high > self.low && on_grid(self.low) && on_grid(self.high)) {
            return Err(Error::Parameter(format!(
                "multiplier bounds must be positive tenths with low < high, got [{}, {}]",
                self.low, self.high
            )));
        }
        let probs = [self.p_low, self.p_high, self.p_uniform()];
        if probs.iter().any(|p| !(-1e-12..=1.0 + 1e-12).contains(p)) {
            return Err(Error::Parameter(format!(
                "multiplier mixture probabilities must lie in [0,1], got {probs:?}"
            )));
        }
        Ok(())
    }

    /// Every value the model can produce, ascending.
    pub fn grid(&self) -> Vec<f64> {
        (to_tenths(self.low)..=to_tenths(self.high)).map(|t| t as f64 / 10.0).collect()
    }

    /// Draws one multiplier. Rounding cells are half-open, `[k - 0.05, k + 0.05)`,
    /// so the top cell `[high - 0.05, high)` spills into the `high` point mass.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        if u < self.p_low {
            self.low
        } else if u < self.p_low + self.p_high {
            self.high
        } else {
            let x = rng.random_range(self.low..self.high);
            round_to_tenth(x).clamp(self.low, self.high)
        }
    }
}

pub fn sample_multiplier<R: Rng + ?Sized>(model: &MultiplierModel, rng: &mut R) -> f64 {
    model.sample(rng)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    #[default]
    ExAnte,
    ExPost,
}

impl Timing {
    pub fn label(self) -> &'static str {
        match self {
            Timing::ExAnte => "ex_ante",
            Timing::ExPost => "ex_post",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ex_ante" => Some(Timing::ExAnte),
            "ex_post" => Some(Timing::ExPost),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RulesDisclosure {
    #[default]
    Before,
    After,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LuckVariant {
    OutcomeLuck {
        q: f64,
    },
    OpportunityLuck {
        #[serde(default)]
        model: MultiplierModel,
        #[serde(default)]
        timing: Timing,
    },
    HeadstartLuck {
        support: Vec<u32>,
    },
}

/// Timing and rules disclosure are labels only; they never change mechanics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LuckEnvironment {
    pub variant: LuckVariant,
    #[serde(default)]
    pub rules_disclosure: RulesDisclosure,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Outcomes,
    Opportunities,
    Headstarts,
}

impl EnvKind {
    pub fn label(self) -> &'static str {
        match self {
            EnvKind::Outcomes => "outcomes",
            EnvKind::Opportunities => "opportunities",
            EnvKind::Headstarts => "headstarts",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "outcomes" => Some(EnvKind::Outcomes),
            "opportunities" => Some(EnvKind::Opportunities),
            "headstarts" => Some(EnvKind::Headstarts),
            _ => None,
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl LuckEnvironment {
    pub fn outcomes(q: f64) -> Self {
        LuckEnvironment {
            variant: LuckVariant::OutcomeLuck { q },
            rules_disclosure: RulesDisclosure::Before,
        }
    }

    pub fn opportunities(timing: Timing) -> Self {
        LuckEnvironment {
            variant: LuckVariant::OpportunityLuck {
                model: MultiplierModel::default(),
                timing,
            },
            rules_disclosure: RulesDisclosure::Before,
        }
    }

    pub fn headstarts(support: Vec<u32>) -> Self {
        LuckEnvironment {
            variant: LuckVariant::HeadstartLuck { support },
            rules_disclosure: RulesDisclosure::Before,
        }
    }

    pub fn kind(&self) -> EnvKind {
        match self.variant {
            LuckVariant::OutcomeLuck { .. } => EnvKind::Outcomes,
            LuckVariant::OpportunityLuck { .. } => EnvKind::Opportunities,
            LuckVariant::HeadstartLuck { .. } => EnvKind::Headstarts,
        }
    }

    pub fn timing(&self) -> Option<Timing> {
        match &self.variant {
            LuckVariant::OpportunityLuck { timing, .. } => Some(*timing),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.variant {
            LuckVariant::OutcomeLuck { q } => check_q(*q),
            LuckVariant::OpportunityLuck { model, .. } => model.validate(),
            LuckVariant::HeadstartLuck { support } => {
                if support.is_empty() {
                    Err(Error::Parameter("headstart support is empty".into()))
                } else {
                    Ok(())
                }
            }
        }
    }
}

fn check_q(q: f64) -> Result<()> {
    if (0.0..=1.0).contains(&q) {
        Ok(())
    } else {
        Err(Error::Domain(format!("coin-flip probability must lie in [0,1], got {q}")))
    }
}

/// One resolved worker pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub env: EnvKind,
    pub winner_id: String,
    pub loser_id: String,
    pub effort_w: f64,
    pub effort_l: f64,
    /// Multiplier or headstart; absent under outcome luck.
    pub advantage_w: Option<f64>,
    pub advantage_l: Option<f64>,
    pub q_used: Option<f64>,
    /// Outcome luck only.
    pub coin_flip_occurred: Option<bool>,
    /// An effort or score tie was settled by a fair coin.
    pub tie_broken: bool,
    pub merit_flag: bool,
    pub pi_true: Option<f64>,
}

impl MatchRecord {
    fn new(env: EnvKind, winner: &Worker, loser: &Worker) -> Self {
        MatchRecord {
            env,
            winner_id: winner.id.clone(),
            loser_id: loser.id.clone(),
            effort_w: winner.effort,
            effort_l: loser.effort,
            advantage_w: None,
            advantage_l: None,
            q_used: None,
            coin_flip_occurred: None,
            tie_broken: false,
            merit_flag: winner.effort >= loser.effort,
            pi_true: None,
        }
    }

    pub fn score_w(&self) -> Option<f64> {
        self.advantage_w.and_then(|a| self.score(a, self.effort_w))
    }

    pub fn score_l(&self) -> Option<f64> {
        self.advantage_l.and_then(|a| self.score(a, self.effort_l))
    }

    fn score(&self, adv: f64, effort: f64) -> Option<f64> {
        match self.env {
            EnvKind::Outcomes => None,
            EnvKind::Opportunities => Some(adv * effort),
            EnvKind::Headstarts => Some(adv + effort),
        }
    }
}

/// Resolves a pair under outcome luck: with probability `q` a fair coin picks
/// the winner, otherwise the higher effort wins.
pub fn resolve_outcome_match<R: Rng + ?Sized>(a: &Worker, b: &Worker, q: f64, rng: &mut R) -> Result<MatchRecord> {
    check_q(q)?;
    let coin = rng.random::<f64>() < q;
    let mut tie_broken = false;
    let a_wins = if coin {
        rng.random::<bool>()
    } else if a.effort > b.effort {
        true
    } else if b.effort > a.effort {
        false
    } else {
        tie_broken = true;
        rng.random::<bool>()
    };
    let (w, l) = if a_wins { (a, b) } else { (b, a) };
    let mut rec = MatchRecord::new(EnvKind::Outcomes, w, l);
    rec.q_used = Some(q);
    rec.coin_flip_occurred = Some(coin);
    rec.tie_broken = tie_broken;
    Ok(rec)
}

#[allow(clippy::too_many_arguments)]
fn resolve_by_score<R: Rng + ?Sized>(
    env: EnvKind,
    a: &Worker,
    score_a: f64,
    adv_a: f64,
    b: &Worker,
    score_b: f64,
    adv_b: f64,
    rng: &mut R,
) -> MatchRecord {
    let (a_wins, tie) = if scores_tied(score_a, score_b) {
        (rng.random::<bool>(), true)
    } else {
        (score_a > score_b, false)
    };
    let (w, aw, l, al) = if a_wins { (a, adv_a, b, adv_b) } else { (b, adv_b, a, adv_a) };
    let mut rec = MatchRecord::new(env, w, l);
    rec.advantage_w = Some(aw);
    rec.advantage_l = Some(al);
    rec.tie_broken = tie;
    rec
}

/// Resolves a pair under opportunity luck: the higher `multiplier * effort` wins.
pub fn resolve_opportunity_match<R: Rng + ?Sized>(
    a: &Worker,
    m_a: f64,
    b: &Worker,
    m_b: f64,
    rng: &mut R,
) -> Result<MatchRecord> {
    if !(m_a > 0.0 && m_b > 0.0 && m_a.is_finite() && m_b.is_finite()) {
        return Err(Error::Domain(format!("multipliers must be positive, got ({m_a}, {m_b})")));
    }
    Ok(resolve_by_score(EnvKind::Opportunities, a, m_a * a.effort, m_a, b, m_b * b.effort, m_b, rng))
}

/// Resolves a pair under headstart luck: the higher `headstart + effort` wins.
pub fn resolve_headstart_match<R: Rng + ?Sized>(
    a: &Worker,
    b_a: f64,
    b: &Worker,
    b_b: f64,
    rng: &mut R,
) -> Result<MatchRecord> {
    if !(b_a >= 0.0 && b_b >= 0.0 && b_a.is_finite() && b_b.is_finite()) {
        return Err(Error::Domain(format!("headstarts must be nonnegative, got ({b_a}, {b_b})")));
    }
    Ok(resolve_by_score(EnvKind::Headstarts, a, a.effort + b_a, b_a, b, b.effort + b_b, b_b, rng))
}

/// Resolves `(a, b)` under `env` with the supplied advantages (ignored for
/// outcome luck, where `q` comes from the environment).
pub(crate) fn resolve_in_env<R: Rng + ?Sized>(
    env: &LuckEnvironment,
    a: &Worker,
    adv_a: f64,
    b: &Worker,
    adv_b: f64,
    rng: &mut R,
) -> Result<MatchRecord> {
    match &env.variant {
        LuckVariant::OutcomeLuck { q } => resolve_outcome_match(a, b, *q, rng),
        LuckVariant::OpportunityLuck { .. } => resolve_opportunity_match(a, adv_a, b, adv_b, rng),
        LuckVariant::HeadstartLuck { .. } => resolve_headstart_match(a, adv_a, b, adv_b, rng),
    }
}

fn sample_advantage<R: Rng + ?Sized>(env: &LuckEnvironment, rng: &mut R) -> f64 {
    match &env.variant {
        LuckVariant::OutcomeLuck { .. } => 0.0,
        LuckVariant::OpportunityLuck { model, .. } => model.sample(rng),
        LuckVariant::HeadstartLuck { support } => support[rng.random_range(0..support.len())] as f64,
    }
}

/// Randomly pairs the population (an odd worker out is dropped), assigns
/// advantages per worker and resolves every pair under `env`.
pub fn pair_all(population: &WorkerPopulation, env: &LuckEnvironment, seed: u64) -> Result<Vec<MatchRecord>> {
    pair_all_with(population, env, seed, Execution::default())
}

pub fn pair_all_with(
    population: &WorkerPopulation,
    env: &LuckEnvironment,
    seed: u64,
    exec: Execution,
) -> Result<Vec<MatchRecord>> {
    let workers = population.workers();
    if workers.len() < 2 {
        return Err(Error::InvalidPopulation("need at least 2 workers to pair".into()));
    }
    env.validate()?;
    let mut order: Vec<usize> = (0..workers.len()).collect();
    order.shuffle(&mut rng::stream(seed, rng::tag::PAIRING, 0));
    let advantages = par::map_range(exec, workers.len(), |i| {
        sample_advantage(env, &mut rng::stream(seed, rng::tag::ADVANTAGE, i as u64))
    });
    par::try_map_range(exec, workers.len() / 2, |k| {
        let (i, j) = (order[2 * k], order[2 * k + 1]);
        let mut r = rng::stream(seed, rng::tag::MATCH, k as u64);
        resolve_in_env(env, &workers[i], advantages[i], &workers[j], advantages[j], &mut r)
    })
}

pub fn write_matches_csv(records: &[MatchRecord], path: &Path) -> Result<()> {
    let mut w = csvio::writer(path)?;
    w.write_record([
        "match_id", "winner_id", "loser_id", "effort_w", "effort_l", "adv_w", "adv_l", "q", "coin_flip", "merit_flag",
    ])?;
    for (k, m) in records.iter().enumerate() {
        w.write_record([
            k.to_string(),
            m.winner_id.clone(),
            m.loser_id.clone(),
            m.effort_w.to_string(),
            m.effort_l.to_string(),
            csvio::opt_string(m.advantage_w),
            csvio::opt_string(m.advantage_l),
            csvio::opt_string(m.q_used),
            m.coin_flip_occurred.map(|c| c.to_string()).unwrap_or_default(),
            m.merit_flag.to_string(),
        ])?;
    }
    csvio::flush(w, path)
}
