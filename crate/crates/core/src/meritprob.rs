//! Merit probability: the chance that the winner of a pair is the worker who
//! exerted (weakly) more effort, given what a spectator can observe.
//!
//! Under outcome luck this is `1 - q/2`. Under opportunity luck it depends on
//! the winner's relative advantage `m` (multiplier ratio) or `b` (headstart
//! difference). Writing `x = e2 / e1` for the relative effort of the
//! disadvantaged worker and `F` for its law, the advantaged worker wins when
//! `x < x*(m) = m` and exerted more effort when `x <= x_hat = 1`, so
//!
//! ```text
//! pi(m) = F(x_hat) / F(x*(m)) = (1/2) / F(m),   m > 1.
//! ```
//!
//! `pi` is decreasing in `m`, and convex whenever `2 f(m)^2 >= f'(m) F(m)`,
//! which log-concavity of `F` guarantees. For additive headstarts the same
//! algebra holds with `x = e2 - e1`, `x_hat = 0` and `x*(b) = b`.
//!
//! The empirical oracle enumerates every unordered worker pair twice (each
//! worker takes the advantage once) and counts, among observations the
//! advantaged worker wins, those where the winner's effort is at least the
//! loser's. Counts are kept in integer half-units, so partitioned evaluation
//! is exactly order independent.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::csvio;
use crate::effort::{EffortDistribution, RatioLaw, WorkerPopulation, FD_RELATIVE_STEP};
use crate::environments::{round_to_tenth, scores_tied, MultiplierModel};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

const LATTICE: f64 = 200.0;

fn on_lattice(x: f64) -> Option<f64> {
    let k = (x * LATTICE).round();
    ((x * LATTICE - k).abs() < 1e-7).then_some(k)
}

/// `pi = 1 - q/2`. Inputs on the half-percent lattice map exactly.
pub fn pi_from_q(q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!("q must lie in [0,1], got {q}")));
    }
    Ok(match on_lattice(q / 2.0) {
        Some(k) => (LATTICE - k) / LATTICE,
        None => 1.0 - q / 2.0,
    })
}

/// `q = 2 (1 - pi)`. Inputs on the half-percent lattice map exactly.
pub fn q_from_pi(pi: f64) -> Result<f64> {
    if !(0.5..=1.0).contains(&pi) {
        return Err(Error::Domain(format!("pi must lie in [0.5,1], got {pi}")));
    }
    Ok(match on_lattice(pi) {
        Some(k) => (LATTICE - k) / (LATTICE / 2.0),
        None => 2.0 * (1.0 - pi),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageKind {
    #[default]
    Multiplicative,
    Additive,
}

impl AdvantageKind {
    pub fn label(self) -> &'static str {
        match self {
            AdvantageKind::Multiplicative => "multiplicative",
            AdvantageKind::Additive => "additive",
        }
    }

    fn score(self, effort: f64, advantage: f64) -> f64 {
        match self {
            AdvantageKind::Multiplicative => effort * advantage,
            AdvantageKind::Additive => effort + advantage,
        }
    }

    /// The advantage at which both workers are on equal footing.
    fn neutral(self) -> f64 {
        match self {
            AdvantageKind::Multiplicative => 1.0,
            AdvantageKind::Additive => 0.0,
        }
    }
}

/// Whether an effort tie counts as the winner having exerted more effort.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeritConvention {
    /// `e_w >= e_l`
    #[default]
    Weak,
    /// `e_w > e_l`
    Strict,
}

/// How the enumeration oracle scores exact score ties.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreTieRule {
    /// The advantaged worker is credited with the win.
    #[default]
    Advantaged,
    /// Half an observation to each side.
    Split,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PiOptions {
    pub merit: MeritConvention,
    pub ties: ScoreTieRule,
    pub exec: Execution,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiEstimate {
    pub pi: f64,
    /// Observations enumerated: both advantage assignments of every unordered pair.
    pub n_pairings: u64,
}

#[derive(Default, Clone, Copy)]
struct HalfCounts {
    wins: u64,
    merit_wins: u64,
}

impl std::ops::Add for HalfCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        HalfCounts {
            wins: self.wins + o.wins,
            merit_wins: self.merit_wins + o.merit_wins,
        }
    }
}

fn observe(kind: AdvantageKind, adv: f64, advantaged: f64, other: f64, opts: &PiOptions) -> HalfCounts {
    let s_adv = kind.score(advantaged, adv);
    let wins = if scores_tied(s_adv, other) {
        match opts.ties {
            ScoreTieRule::Advantaged => 2,
            ScoreTieRule::Split => 1,
        }
    } else if s_adv > other {
        2
    } else {
        0
    };
    let merit = match opts.merit {
        MeritConvention::Weak => advantaged >= other,
        MeritConvention::Strict => advantaged > other,
    };
    HalfCounts {
        wins,
        merit_wins: if merit { wins } else { 0 },
    }
}

fn enumerate(efforts: &[f64], kind: AdvantageKind, adv: f64, opts: &PiOptions) -> PiEstimate {
    let n = efforts.len();
    let rows = par::map_range(opts.exec, n, |i| {
        let ei = efforts[i];
        efforts[i + 1..].iter().fold(HalfCounts::default(), |acc, &ej| {
            acc + observe(kind, adv, ei, ej, opts) + observe(kind, adv, ej, ei, opts)
        })
    });
    let total = rows.into_iter().fold(HalfCounts::default(), |a, b| a + b);
    let pi = if total.wins == 0 {
        1.0
    } else {
        total.merit_wins as f64 / total.wins as f64
    };
    PiEstimate {
        pi,
        n_pairings: (n as u64) * (n as u64 - 1),
    }
}

/// Empirical merit probability for relative multiplier `m >= 1` over all
/// worker pairings.
pub fn pi_empirical(population: &WorkerPopulation, m: f64, opts: &PiOptions) -> Result<PiEstimate> {
    if !(m >= 1.0) || !m.is_finite() {
        return Err(Error::Domain(format!(
            "relative multiplier must be >= 1 (normalize as max/min), got {m}"
        )));
    }
    Ok(enumerate(&population.efforts(), AdvantageKind::Multiplicative, m, opts))
}

/// Empirical merit probability for relative headstart `b >= 0`.
pub fn pi_headstart(population: &WorkerPopulation, b: f64, opts: &PiOptions) -> Result<PiEstimate> {
    if !(b >= 0.0) || !b.is_finite() {
        return Err(Error::Domain(format!("headstart must be nonnegative, got {b}")));
    }
    Ok(enumerate(&population.efforts(), AdvantageKind::Additive, b, opts))
}

/// Closed-form `pi(m) = 0.5 / F(m)` for continuous effort models.
pub fn pi_analytic(dist: &EffortDistribution, m: f64) -> Result<f64> {
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::Domain(format!("relative multiplier must be positive, got {m}")));
    }
    if !dist.is_continuous() {
        return Err(Error::Unsupported(
            "analytic pi needs a continuous effort model; use pi_empirical".into(),
        ));
    }
    if m <= 1.0 {
        return Ok(1.0);
    }
    Ok((0.5 / dist.ratio_cdf(m)?).clamp(0.5, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiPoint {
    pub advantage: f64,
    pub pi_hat: f64,
    pub n_pairings: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiCurve {
    pub points: Vec<PiPoint>,
    pub kind: AdvantageKind,
}

/// `{1.0, 1.1, ..., 4.0}`
pub fn multiplier_ratio_grid() -> Vec<f64> {
    (10..=40).map(|k| k as f64 / 10.0).collect()
}

/// `{0, 1, ..., 15}`
pub fn headstart_grid() -> Vec<f64> {
    (0..=15).map(|b| b as f64).collect()
}

fn check_grid(kind: AdvantageKind, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Domain("advantage grid is empty".into()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Domain("advantage grid must be strictly increasing".into()));
    }
    if grid[0] < kind.neutral() {
        return Err(Error::Domain(format!(
            "{} grid starts below {}",
            kind.label(),
            kind.neutral()
        )));
    }
    Ok(())
}

/// Evaluates the empirical oracle at every grid point.
pub fn pi_curve(population: &WorkerPopulation, kind: AdvantageKind, grid: &[f64], opts: &PiOptions) -> Result<PiCurve> {
    check_grid(kind, grid)?;
    let efforts = population.efforts();
    let points = grid
        .iter()
        .map(|&adv| {
            let est = enumerate(&efforts, kind, adv, opts);
            PiPoint {
                advantage: adv,
                pi_hat: est.pi,
                n_pairings: est.n_pairings,
            }
        })
        .collect();
    Ok(PiCurve { points, kind })
}

/// Analytic multiplicative curve for a continuous effort model.
pub fn pi_curve_analytic(dist: &EffortDistribution, grid: &[f64]) -> Result<PiCurve> {
    check_grid(AdvantageKind::Multiplicative, grid)?;
    let points = grid
        .iter()
        .map(|&m| {
            Ok(PiPoint {
                advantage: m,
                pi_hat: pi_analytic(dist, m)?,
                n_pairings: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PiCurve {
        points,
        kind: AdvantageKind::Multiplicative,
    })
}

impl PiCurve {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Linear interpolation in the advantage, flat beyond either end.
    pub fn lookup(&self, advantage: f64) -> f64 {
        let pts = &self.points;
        let first = pts.first().expect("nonempty curve");
        if advantage <= first.advantage {
            return first.pi_hat;
        }
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if advantage <= b.advantage {
                let t = (advantage - a.advantage) / (b.advantage - a.advantage);
                return a.pi_hat + t * (b.pi_hat - a.pi_hat);
            }
        }
        pts.last().expect("nonempty curve").pi_hat
    }

    /// Merit probability implied by the winner's and loser's advantages. A
    /// winner without the larger advantage must have outworked the loser.
    pub fn pi_for_advantages(&self, adv_w: f64, adv_l: f64) -> f64 {
        let rel = match self.kind {
            AdvantageKind::Multiplicative => adv_w / adv_l,
            AdvantageKind::Additive => adv_w - adv_l,
        };
        if rel <= self.kind.neutral() + 1e-12 {
            1.0
        } else {
            self.lookup(rel)
        }
    }

    /// Index of the point whose `pi_hat` is nearest to `target`; ties go to
    /// the smaller advantage.
    pub fn nearest(&self, target: f64) -> usize {
        let mut best = 0;
        let mut best_gap = f64::INFINITY;
        for (k, p) in self.points.iter().enumerate() {
            let gap = (p.pi_hat - target).abs();
            if gap < best_gap - 1e-12 {
                best = k;
                best_gap = gap;
            }
        }
        best
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csvio::writer(path)?;
        w.write_record(["advantage", "pi_hat", "n_pairings", "kind"])?;
        for p in &self.points {
            w.write_record([
                p.advantage.to_string(),
                p.pi_hat.to_string(),
                p.n_pairings.to_string(),
                self.kind.label().to_string(),
            ])?;
        }
        csvio::flush(w, path)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csvio::reader(path)?;
        let cols = csvio::Columns::resolve(r.headers()?, &["advantage", "pi_hat", "n_pairings", "kind"])?;
        let mut points = Vec::new();
        let mut kind = None;
        for record in r.records() {
            let record = record?;
            let k = match cols.cell(&record, 3) {
                "multiplicative" => AdvantageKind::Multiplicative,
                "additive" => AdvantageKind::Additive,
                other => return Err(csvio::parse_err(&record, "kind", format!("unknown kind `{other}`"))),
            };
            if kind.is_some_and(|prev| prev != k) {
                return Err(csvio::parse_err(&record, "kind", "mixed advantage kinds"));
            }
            kind = Some(k);
            let n = cols.cell(&record, 2);
            points.push(PiPoint {
                advantage: csvio::f64_cell(&cols, &record, 0)?,
                pi_hat: csvio::f64_cell(&cols, &record, 1)?,
                n_pairings: n
                    .parse()
                    .map_err(|_| csvio::parse_err(&record, "n_pairings", format!("expected a count, found `{n}`")))?,
            });
        }
        let kind = kind.ok_or_else(|| Error::Contract(format!("{} holds no curve points", path.display())))?;
        Ok(PiCurve { points, kind })
    }
}

/// A concrete advantage pair chosen to hit a target merit probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantagePair {
    pub high: f64,
    pub low: f64,
    /// Grid advantage (ratio or difference) picked from the curve.
    pub relative: f64,
    /// Curve value at `relative`.
    pub curve_pi: f64,
}

fn check_target(pi_target: f64) -> Result<()> {
    if (0.5..=1.0).contains(&pi_target) {
        Ok(())
    } else {
        Err(Error::Domain(format!("pi target must lie in [0.5,1], got {pi_target}")))
    }
}

/// Maps a target `pi` to a multiplier pair: nearest grid ratio on the curve,
/// then a uniformly drawn low multiplier that keeps the high one on the grid.
pub fn invert_pi_to_multipliers<R: Rng + ?Sized>(
    pi_target: f64,
    curve: &PiCurve,
    model: &MultiplierModel,
    rng: &mut R,
) -> Result<AdvantagePair> {
    check_target(pi_target)?;
    if curve.kind != AdvantageKind::Multiplicative || curve.is_empty() {
        return Err(Error::Inversion("multiplier inversion needs a nonempty multiplicative curve".into()));
    }
    let k = curve.nearest(pi_target);
    let PiPoint { advantage: ratio, pi_hat, .. } = curve.points[k];
    let admissible: Vec<f64> = model
        .grid()
        .into_iter()
        .filter(|&low| low * ratio <= model.high + 1e-9)
        .collect();
    if admissible.is_empty() {
        return Err(Error::Inversion(format!(
            "no low multiplier in [{}, {}] supports ratio {ratio}",
            model.low, model.high
        )));
    }
    let low = admissible[rng.random_range(0..admissible.len())];
    Ok(AdvantagePair {
        high: round_to_tenth(low * ratio),
        low,
        relative: ratio,
        curve_pi: pi_hat,
    })
}

/// Headstart analogue of [`invert_pi_to_multipliers`]: both headstarts are
/// drawn from `support`.
pub fn invert_pi_to_headstarts<R: Rng + ?Sized>(
    pi_target: f64,
    curve: &PiCurve,
    support: &[u32],
    rng: &mut R,
) -> Result<AdvantagePair> {
    check_target(pi_target)?;
    if curve.kind != AdvantageKind::Additive || curve.is_empty() {
        return Err(Error::Inversion("headstart inversion needs a nonempty additive curve".into()));
    }
    let k = curve.nearest(pi_target);
    let PiPoint { advantage: b, pi_hat, .. } = curve.points[k];
    let b = b.round() as u32;
    let admissible: Vec<u32> = support.iter().copied().filter(|low| support.contains(&(low + b))).collect();
    if admissible.is_empty() {
        return Err(Error::Inversion(format!("no headstart pair in the support differs by {b}")));
    }
    let low = admissible[rng.random_range(0..admissible.len())];
    Ok(AdvantagePair {
        high: (low + b) as f64,
        low: low as f64,
        relative: b as f64,
        curve_pi: pi_hat,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PiBin {
    /// 1-based, ordered by increasing pi.
    pub index: usize,
    pub lo_pct: u32,
    pub hi_pct: u32,
}

impl PiBin {
    pub fn lo(&self) -> f64 {
        self.lo_pct as f64 / 100.0
    }

    pub fn hi(&self) -> f64 {
        self.hi_pct as f64 / 100.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiBinning {
    pub bins: Vec<PiBin>,
}

/// The twelve design bins over the percent grid: `{0.50}`, `{0.51..0.54}`,
/// `{0.55..0.59}`, ..., `{0.95..0.99}`, `{1.00}`.
pub fn standard_bins() -> PiBinning {
    let mut ranges = vec![(50, 50), (51, 54)];
    ranges.extend((0..9).map(|k| (55 + 5 * k, 59 + 5 * k)));
    ranges.push((100, 100));
    PiBinning {
        bins: ranges
            .into_iter()
            .enumerate()
            .map(|(i, (lo_pct, hi_pct))| PiBin {
                index: i + 1,
                lo_pct,
                hi_pct,
            })
            .collect(),
    }
}

impl PiBinning {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    /// 1-based bin of `pi` after rounding to the percent grid.
    pub fn assign(&self, pi: f64) -> Result<usize> {
        if !pi.is_finite() {
            return Err(Error::Binning(format!("pi is not finite: {pi}")));
        }
        let pct = (pi * 100.0).round();
        self.bins
            .iter()
            .find(|b| pct >= b.lo_pct as f64 && pct <= b.hi_pct as f64)
            .map(|b| b.index)
            .ok_or_else(|| Error::Binning(format!("pi {pi} falls outside every bin")))
    }

    pub fn bin(&self, index: usize) -> &PiBin {
        &self.bins[index - 1]
    }
}

/// One uniform percent-grid draw per bin, in bin order.
pub fn draw_pi_per_bin<R: Rng + ?Sized>(binning: &PiBinning, rng: &mut R) -> Vec<f64> {
    binning
        .bins
        .iter()
        .map(|b| rng.random_range(b.lo_pct..=b.hi_pct) as f64 / 100.0)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePointCheck {
    pub advantage: f64,
    pub pi: f64,
    pub first_difference: Option<f64>,
    pub second_difference: Option<f64>,
    pub decreasing_ok: bool,
    pub convex_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub kind: AdvantageKind,
    pub tolerance: f64,
    pub points: Vec<CurvePointCheck>,
    pub max_first_difference: f64,
    pub min_second_difference: f64,
    pub decreasing: bool,
    pub convex: bool,
}

pub const CONVEXITY_TOLERANCE: f64 = 1e-3;

/// First differences should be `<= tolerance` and second differences
/// `>= -tolerance` on an evenly spaced advantage grid.
pub fn check_convexity(curve: &PiCurve, tolerance: f64) -> Result<ConvexityReport> {
    let pts = &curve.points;
    if pts.len() < 3 {
        return Err(Error::Domain(format!(
            "convexity check needs at least 3 points, got {}",
            pts.len()
        )));
    }
    let step = pts[1].advantage - pts[0].advantage;
    if pts
        .windows(2)
        .any(|w| ((w[1].advantage - w[0].advantage) - step).abs() > 1e-9 * step.abs().max(1.0))
    {
        return Err(Error::Domain("convexity check needs an evenly spaced grid".into()));
    }
    let n = pts.len();
    let points: Vec<CurvePointCheck> = (0..n)
        .map(|k| {
            let first = (k > 0).then(|| pts[k].pi_hat - pts[k - 1].pi_hat);
            let second = (k > 0 && k + 1 < n).then(|| pts[k + 1].pi_hat - 2.0 * pts[k].pi_hat + pts[k - 1].pi_hat);
            CurvePointCheck {
                advantage: pts[k].advantage,
                pi: pts[k].pi_hat,
                first_difference: first,
                second_difference: second,
                decreasing_ok: first.is_none_or(|d| d <= tolerance),
                convex_ok: second.is_none_or(|d| d >= -tolerance),
            }
        })
        .collect();
    let max_first = points.iter().filter_map(|p| p.first_difference).fold(f64::NEG_INFINITY, f64::max);
    let min_second = points.iter().filter_map(|p| p.second_difference).fold(f64::INFINITY, f64::min);
    Ok(ConvexityReport {
        kind: curve.kind,
        tolerance,
        decreasing: points.iter().all(|p| p.decreasing_ok),
        convex: points.iter().all(|p| p.convex_ok),
        points,
        max_first_difference: max_first,
        min_second_difference: min_second,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogConcavityPoint {
    pub m: f64,
    pub cdf: f64,
    pub density: f64,
    pub density_slope: f64,
    /// `2 f(m)^2 - f'(m) F(m)`
    pub margin: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogConcavityReport {
    pub tolerance: f64,
    pub points: Vec<LogConcavityPoint>,
    pub min_margin: f64,
    pub violations: Vec<f64>,
    pub passed: bool,
}

pub const LOGCONCAVITY_TOLERANCE: f64 = 1e-6;

/// Evaluates the sufficient condition for convexity of `pi`,
/// `2 f(m)^2 >= f'(m) F(m)`, with `f'` by central differences.
pub fn check_logconcavity<L: RatioLaw + ?Sized>(law: &L, grid: &[f64]) -> Result<LogConcavityReport> {
    if grid.is_empty() {
        return Err(Error::Domain("log-concavity grid is empty".into()));
    }
    let points = grid
        .iter()
        .map(|&m| {
            if !(m > 0.0) || !m.is_finite() {
                return Err(Error::Domain(format!("grid point must be positive, got {m}")));
            }
            let h = FD_RELATIVE_STEP * m;
            let cdf = law.ratio_cdf(m)?;
            let density = law.ratio_density(m)?;
            let density_slope = (law.ratio_density(m + h)? - law.ratio_density(m - h)?) / (2.0 * h);
            let margin = 2.0 * density * density - density_slope * cdf;
            Ok(LogConcavityPoint {
                m,
                cdf,
                density,
                density_slope,
                margin,
                pass: margin >= -LOGCONCAVITY_TOLERANCE,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let violations: Vec<f64> = points.iter().filter(|p| !p.pass).map(|p| p.m).collect();
    Ok(LogConcavityReport {
        tolerance: LOGCONCAVITY_TOLERANCE,
        min_margin: points.iter().map(|p| p.margin).fold(f64::INFINITY, f64::min),
        passed: violations.is_empty(),
        violations,
        points,
    })
}
