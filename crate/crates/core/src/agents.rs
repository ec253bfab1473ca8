//! Spectator decision models.
//!
//! A spectator with fair share `f` for the lower performer and quadratic loss
//! around the merit-based split chooses `r* = pi f + (1 - pi)(1 - f)`: when the
//! winner surely outworked the loser the loser keeps `f`, and when the result
//! is pure luck the split is even. Observed choices live on an eleven-level
//! grid of prize fractions. Besides this Bayesian rule, spectators may follow
//! a linear heuristic in the observable feature (coin-flip chance or
//! multiplier difference) or never redistribute.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meritprob::{pi_from_q, AdvantageKind, PiCurve};
use crate::rng;

const GRID_TOL: f64 = 1e-9;

/// Allowed redistribution levels as fractions of the prize.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedistributionGrid {
    levels: Vec<f64>,
}

impl Default for RedistributionGrid {
    /// `{0.0, 0.1, ..., 1.0}`: $0.50 steps on a $5 prize.
    fn default() -> Self {
        RedistributionGrid {
            levels: (0..=10).map(|k| k as f64 / 10.0).collect(),
        }
    }
}

impl RedistributionGrid {
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn contains(&self, r: f64) -> bool {
        self.levels.iter().any(|&l| (l - r).abs() < GRID_TOL)
    }
}

/// Nearest grid level; exact midpoints go to the level closer to 0.5.
pub fn snap_to_grid(r: f64, grid: &RedistributionGrid) -> f64 {
    let mut best = grid.levels[0];
    for &level in &grid.levels[1..] {
        let (d_new, d_best) = ((level - r).abs(), (best - r).abs());
        if d_new < d_best - GRID_TOL || (d_new <= d_best + GRID_TOL && (level - 0.5).abs() < (best - 0.5).abs()) {
            best = level;
        }
    }
    best
}

fn snap(r: f64) -> f64 {
    snap_to_grid(r, &RedistributionGrid::default())
}

/// `pi f + (1 - pi)(1 - f)`, the loss-minimizing share for the loser.
pub fn optimal_redistribution(f: f64, pi: f64) -> Result<f64> {
    if !(0.0..=0.5).contains(&f) {
        return Err(Error::Domain(format!("fair share must lie in [0, 0.5], got {f}")));
    }
    if !(0.5..=1.0).contains(&pi) {
        return Err(Error::Domain(format!("pi must lie in [0.5, 1], got {pi}")));
    }
    Ok(pi * f + (1.0 - pi) * (1.0 - f))
}

pub const DEFAULT_OPPORTUNITY_INTERCEPT: f64 = 0.179;
pub const DEFAULT_OPPORTUNITY_SLOPE: f64 = 0.04;
pub const DEFAULT_OUTCOME_INTERCEPT: f64 = 0.131;
pub const DEFAULT_OUTCOME_PLATEAU: f64 = 0.345;
pub const DEFAULT_Q_KINK: f64 = 0.55;

/// Slope per unit `q` that reaches `plateau` at the kink.
pub fn outcome_slope_for_plateau(intercept: f64, plateau: f64, q_kink: f64) -> f64 {
    (plateau - intercept) / q_kink
}

/// `clamp(a0 + a1 (m_w - m_l), 0, 0.5)`
pub fn heuristic_opportunities(a0: f64, a1: f64, m_w: f64, m_l: f64) -> f64 {
    (a0 + a1 * (m_w - m_l)).clamp(0.0, 0.5)
}

/// `clamp(c0 + c1 min(q, q_kink), 0, 0.5)`
pub fn heuristic_outcomes(c0: f64, c1: f64, q_kink: f64, q: f64) -> f64 {
    (c0 + c1 * q.min(q_kink)).clamp(0.0, 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", content = "parameters", rename_all = "snake_case")]
pub enum Policy {
    Bayesian { fair_share: f64 },
    HeuristicOutcomes { intercept: f64, slope: f64, q_kink: f64 },
    HeuristicOpportunities { intercept: f64, slope: f64 },
    Never,
}

impl Policy {
    pub fn default_outcomes_heuristic() -> Self {
        Policy::HeuristicOutcomes {
            intercept: DEFAULT_OUTCOME_INTERCEPT,
            slope: outcome_slope_for_plateau(DEFAULT_OUTCOME_INTERCEPT, DEFAULT_OUTCOME_PLATEAU, DEFAULT_Q_KINK),
            q_kink: DEFAULT_Q_KINK,
        }
    }

    pub fn default_opportunities_heuristic() -> Self {
        Policy::HeuristicOpportunities {
            intercept: DEFAULT_OPPORTUNITY_INTERCEPT,
            slope: DEFAULT_OPPORTUNITY_SLOPE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Policy::Bayesian { fair_share } if !(0.0..=0.5).contains(&fair_share) => Err(Error::Parameter(format!(
                "fair share must lie in [0, 0.5], got {fair_share}"
            ))),
            Policy::HeuristicOutcomes { intercept, slope, q_kink } => {
                if !intercept.is_finite() || !slope.is_finite() {
                    Err(Error::Parameter("heuristic coefficients must be finite".into()))
                } else if !(q_kink > 0.0 && q_kink <= 1.0) {
                    Err(Error::Parameter(format!("q_kink must lie in (0, 1], got {q_kink}")))
                } else {
                    Ok(())
                }
            }
            Policy::HeuristicOpportunities { intercept, slope } if !intercept.is_finite() || !slope.is_finite() => {
                Err(Error::Parameter("heuristic coefficients must be finite".into()))
            }
            _ => Ok(()),
        }
    }

    /// Fair share used once the spectator is told `pi`: the Bayesian `f`, or
    /// a heuristic's intercept (its share when merit is certain).
    pub fn effective_fair_share(&self) -> Option<f64> {
        match *self {
            Policy::Bayesian { fair_share } => Some(fair_share),
            Policy::HeuristicOutcomes { intercept, .. } | Policy::HeuristicOpportunities { intercept, .. } => {
                Some(intercept.clamp(0.0, 0.5))
            }
            Policy::Never => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectatorModel {
    pub id: String,
    #[serde(flatten)]
    pub policy: Policy,
    pub informed: bool,
}

/// What the spectator sees about the winner/loser pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observed {
    Outcome { q: f64 },
    Opportunity { m_w: f64, m_l: f64 },
    Headstart { b_w: f64, b_l: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionFeatures {
    pub observed: Observed,
    /// Disclosed to informed spectators only.
    pub pi_disclosed: Option<f64>,
}

impl DecisionFeatures {
    pub fn validate(&self) -> Result<()> {
        if let Some(pi) = self.pi_disclosed {
            if !(0.5..=1.0).contains(&pi) {
                return Err(Error::Contract(format!("disclosed pi must lie in [0.5, 1], got {pi}")));
            }
        }
        match self.observed {
            Observed::Outcome { q } if !(0.0..=1.0).contains(&q) => {
                Err(Error::Contract(format!("q must lie in [0, 1], got {q}")))
            }
            Observed::Opportunity { m_w, m_l } if !(m_w > 0.0 && m_l > 0.0) => {
                Err(Error::Contract(format!("multipliers must be positive, got ({m_w}, {m_l})")))
            }
            Observed::Headstart { b_w, b_l } if !(b_w >= 0.0 && b_l >= 0.0) => {
                Err(Error::Contract(format!("headstarts must be nonnegative, got ({b_w}, {b_l})")))
            }
            _ => Ok(()),
        }
    }
}

fn curve_pi(curve: Option<&PiCurve>, kind: AdvantageKind, adv_w: f64, adv_l: f64) -> Result<f64> {
    match curve {
        Some(c) if c.kind == kind && !c.is_empty() => Ok(c.pi_for_advantages(adv_w, adv_l)),
        _ => Err(Error::Contract(format!(
            "a nonempty {} pi curve is needed to evaluate these features",
            kind.label()
        ))),
    }
}

/// Redistribution chosen by `model`, always a grid level.
///
/// Uninformed Bayesian spectators infer `pi` from the features: `1 - q/2`
/// under outcome luck, the curve under opportunity luck. Heuristic
/// spectators respond linearly to the feature; headstart differences are
/// treated like multiplier differences.
pub fn decide(model: &SpectatorModel, features: &DecisionFeatures, curve: Option<&PiCurve>) -> Result<f64> {
    features.validate()?;
    if model.policy == Policy::Never {
        return Ok(0.0);
    }
    if model.informed {
        let pi = features
            .pi_disclosed
            .ok_or_else(|| Error::Contract(format!("informed spectator {} was not shown pi", model.id)))?;
        let f = model.policy.effective_fair_share().expect("never handled above");
        return Ok(snap(optimal_redistribution(f, pi)?));
    }
    let r = match (model.policy, features.observed) {
        (Policy::Bayesian { fair_share }, obs) => {
            let pi = match obs {
                Observed::Outcome { q } => pi_from_q(q)?,
                Observed::Opportunity { m_w, m_l } => curve_pi(curve, AdvantageKind::Multiplicative, m_w, m_l)?,
                Observed::Headstart { b_w, b_l } => curve_pi(curve, AdvantageKind::Additive, b_w, b_l)?,
            };
            optimal_redistribution(fair_share, pi)?
        }
        (Policy::HeuristicOutcomes { intercept, slope, q_kink }, Observed::Outcome { q }) => {
            heuristic_outcomes(intercept, slope, q_kink, q)
        }
        (Policy::HeuristicOpportunities { intercept, slope }, Observed::Opportunity { m_w, m_l }) => {
            heuristic_opportunities(intercept, slope, m_w, m_l)
        }
        (Policy::HeuristicOpportunities { intercept, slope }, Observed::Headstart { b_w, b_l }) => {
            heuristic_opportunities(intercept, slope, b_w, b_l)
        }
        (policy, obs) => {
            return Err(Error::Contract(format!(
                "policy {policy:?} of spectator {} cannot act on {obs:?}",
                model.id
            )))
        }
    };
    Ok(snap(r))
}

/// Normal heterogeneity `mean + sd z`; `sd = 0` pins the value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    #[serde(default)]
    pub sd: f64,
}

impl Spread {
    pub fn fixed(mean: f64) -> Self {
        Spread { mean, sd: 0.0 }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.mean + self.sd * z
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.mean.is_finite() && self.sd.is_finite() && self.sd >= 0.0 {
            Ok(())
        } else {
            Err(Error::Parameter(format!("{what}: need finite mean and sd >= 0")))
        }
    }
}

/// Parameter law of the heuristic type, which differs by environment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeuristicSpec {
    /// Plateau height is `intercept + amplitude`, reached at `q_kink`.
    Outcomes { intercept: Spread, amplitude: Spread, q_kink: f64 },
    Opportunities { intercept: Spread, slope: Spread },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shares {
    pub never: f64,
    pub heuristic: f64,
    pub bayesian: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectatorMixture {
    pub shares: Shares,
    pub heuristic: HeuristicSpec,
    /// Bayesian fair shares are clamped to [0, 0.5] after drawing.
    pub fair_share: Spread,
    #[serde(default)]
    pub informed: bool,
}

impl SpectatorMixture {
    /// Outcome-luck population: 9.6% never redistribute, the rest follow the
    /// kinked heuristic. Means are set so that, after never-types, clamping
    /// and grid snapping, the population reproduces the reported aggregates.
    pub fn calibrated_outcomes() -> Self {
        SpectatorMixture {
            shares: Shares {
                never: 0.096,
                heuristic: 0.904,
                bayesian: 0.0,
            },
            heuristic: HeuristicSpec::Outcomes {
                intercept: Spread { mean: 0.165, sd: 0.06 },
                amplitude: Spread { mean: 0.196, sd: 0.04 },
                q_kink: DEFAULT_Q_KINK,
            },
            fair_share: Spread::fixed(DEFAULT_OUTCOME_INTERCEPT),
            informed: false,
        }
    }

    /// Opportunity-luck population: 15.9% never redistribute, the rest
    /// respond linearly to the multiplier difference.
    pub fn calibrated_opportunities() -> Self {
        SpectatorMixture {
            shares: Shares {
                never: 0.159,
                heuristic: 0.841,
                bayesian: 0.0,
            },
            heuristic: HeuristicSpec::Opportunities {
                intercept: Spread { mean: 0.24, sd: 0.06 },
                slope: Spread { mean: 0.045, sd: 0.015 },
            },
            fair_share: Spread::fixed(DEFAULT_OPPORTUNITY_INTERCEPT),
            informed: false,
        }
    }

    /// Everyone Bayesian with the same fair share.
    pub fn bayesian(f: f64) -> Self {
        SpectatorMixture {
            shares: Shares {
                never: 0.0,
                heuristic: 0.0,
                bayesian: 1.0,
            },
            heuristic: HeuristicSpec::Opportunities {
                intercept: Spread::fixed(DEFAULT_OPPORTUNITY_INTERCEPT),
                slope: Spread::fixed(DEFAULT_OPPORTUNITY_SLOPE),
            },
            fair_share: Spread::fixed(f),
            informed: false,
        }
    }

    pub fn never() -> Self {
        SpectatorMixture {
            shares: Shares {
                never: 1.0,
                heuristic: 0.0,
                bayesian: 0.0,
            },
            ..Self::bayesian(DEFAULT_OUTCOME_INTERCEPT)
        }
    }

    pub fn with_informed(mut self, informed: bool) -> Self {
        self.informed = informed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let Shares { never, heuristic, bayesian } = self.shares;
        if [never, heuristic, bayesian].iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Parameter("mixture shares must be nonnegative".into()));
        }
        if ((never + heuristic + bayesian) - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!(
                "mixture shares sum to {}, not 1",
                never + heuristic + bayesian
            )));
        }
        self.fair_share.validate("fair_share")?;
        match self.heuristic {
            HeuristicSpec::Outcomes { intercept, amplitude, q_kink } => {
                intercept.validate("intercept")?;
                amplitude.validate("amplitude")?;
                if !(q_kink > 0.0 && q_kink <= 1.0) {
                    return Err(Error::Parameter(format!("q_kink must lie in (0, 1], got {q_kink}")));
                }
            }
            HeuristicSpec::Opportunities { intercept, slope } => {
                intercept.validate("intercept")?;
                slope.validate("slope")?;
            }
        }
        Ok(())
    }

    fn draw_policy<R: Rng + ?Sized>(&self, rng: &mut R) -> Policy {
        let u: f64 = rng.random();
        if u < self.shares.never {
            Policy::Never
        } else if u < self.shares.never + self.shares.heuristic {
            match self.heuristic {
                HeuristicSpec::Outcomes { intercept, amplitude, q_kink } => Policy::HeuristicOutcomes {
                    intercept: intercept.sample(rng),
                    slope: amplitude.sample(rng) / q_kink,
                    q_kink,
                },
                HeuristicSpec::Opportunities { intercept, slope } => Policy::HeuristicOpportunities {
                    intercept: intercept.sample(rng),
                    slope: slope.sample(rng),
                },
            }
        } else {
            Policy::Bayesian {
                fair_share: self.fair_share.sample(rng).clamp(0.0, 0.5),
            }
        }
    }
}

pub fn spectator_id(i: usize) -> String {
    format!("s{i:05}")
}

/// `n` spectators with independent type and parameter draws; spectator `i`
/// uses its own random stream so the roster is stable under parallelism.
pub fn sample_spectator_population(mixture: &SpectatorMixture, n: usize, seed: u64) -> Result<Vec<SpectatorModel>> {
    mixture.validate()?;
    if n == 0 {
        return Err(Error::Parameter("need at least one spectator".into()));
    }
    Ok((0..n)
        .map(|i| {
            let mut r = rng::stream(seed, rng::tag::SPECTATOR, i as u64);
            SpectatorModel {
                id: spectator_id(i),
                policy: mixture.draw_policy(&mut r),
                informed: mixture.informed,
            }
        })
        .collect())
}
