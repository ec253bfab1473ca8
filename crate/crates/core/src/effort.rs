//! Worker effort models and the distributional primitives of relative effort.
//!
//! The merit-probability engine needs the law of the relative effort of two
//! independent workers, either as a ratio `e2 / e1` (multiplicative
//! advantages) or as a difference `e2 - e1` (additive headstarts). Discrete
//! models (empirical samples, integer-rounded normal) are handled by exact
//! summation over their probability mass function; continuous models use
//! closed forms or deterministic quadrature.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};

use crate::csvio;
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rng;

/// Relative finite-difference step for density slopes.
pub const FD_RELATIVE_STEP: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EffortDistribution {
    /// Resampling from observed encryption counts.
    Empirical { samples: Vec<u32> },
    /// Normal draw rounded to the nearest integer, redrawn while below `min`.
    TruncatedRoundedNormal { mean: f64, sd: f64, min: f64 },
    Lognormal { mu_log: f64, sigma_log: f64 },
    /// Uniform on `[lower, upper)`; only `lower = 0` is supported.
    Uniform {
        #[serde(default)]
        lower: f64,
        upper: f64,
    },
}

impl Default for EffortDistribution {
    fn default() -> Self {
        EffortDistribution::TruncatedRoundedNormal {
            mean: 18.0,
            sd: 5.5,
            min: 5.0,
        }
    }
}

fn std_normal() -> StdNormal {
    StdNormal::new(0.0, 1.0).expect("standard normal")
}

impl EffortDistribution {
    pub fn uniform(upper: f64) -> Self {
        EffortDistribution::Uniform { lower: 0.0, upper }
    }

    pub fn lognormal(mu_log: f64, sigma_log: f64) -> Self {
        EffortDistribution::Lognormal { mu_log, sigma_log }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EffortDistribution::Empirical { samples } => {
                if samples.is_empty() {
                    return Err(Error::Parameter("empirical effort samples are empty".into()));
                }
                if samples.iter().all(|&s| s == 0) {
                    return Err(Error::Parameter("empirical effort samples are all zero".into()));
                }
            }
            EffortDistribution::TruncatedRoundedNormal { mean, sd, min } => {
                if !(sd.is_finite() && *sd > 0.0) {
                    return Err(Error::Parameter(format!("sd must be positive, got {sd}")));
                }
                if !(mean.is_finite() && min.is_finite() && *min >= 0.0) {
                    return Err(Error::Parameter(format!("invalid mean {mean} / min {min}")));
                }
                if *min > mean + 4.0 * sd {
                    return Err(Error::Parameter(format!(
                        "truncation point {min} leaves almost no mass above it"
                    )));
                }
            }
            EffortDistribution::Lognormal { mu_log, sigma_log } => {
                if !(sigma_log.is_finite() && *sigma_log > 0.0 && mu_log.is_finite()) {
                    return Err(Error::Parameter(format!(
                        "lognormal needs finite mu_log and sigma_log > 0, got ({mu_log}, {sigma_log})"
                    )));
                }
            }
            EffortDistribution::Uniform { lower, upper } => {
                if *lower != 0.0 {
                    return Err(Error::Parameter(format!("uniform lower bound must be 0, got {lower}")));
                }
                if !(upper.is_finite() && *upper > 0.0) {
                    return Err(Error::Parameter(format!("uniform upper bound must be positive, got {upper}")));
                }
            }
        }
        Ok(())
    }

    pub fn is_continuous(&self) -> bool {
        matches!(
            self,
            EffortDistribution::Lognormal { .. } | EffortDistribution::Uniform { .. }
        )
    }

    /// Draws one effort value. Parameters must already be validated.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            EffortDistribution::Empirical { samples } => samples[rng.random_range(0..samples.len())] as f64,
            EffortDistribution::TruncatedRoundedNormal { mean, sd, min } => {
                let normal = Normal::new(*mean, *sd).expect("validated");
                loop {
                    let v = normal.sample(rng).round();
                    if v >= *min {
                        return v;
                    }
                }
            }
            EffortDistribution::Lognormal { mu_log, sigma_log } => {
                LogNormal::new(*mu_log, *sigma_log).expect("validated").sample(rng)
            }
            EffortDistribution::Uniform { upper, .. } => rng.random_range(0.0..*upper),
        }
    }

    /// Probability mass function of a discrete model as sorted `(value, prob)`.
    /// `positive_only` drops zero-effort mass and renormalizes.
    fn pmf(&self, positive_only: bool) -> Option<Vec<(f64, f64)>> {
        let mut pmf: Vec<(f64, f64)> = match self {
            EffortDistribution::Empirical { samples } => {
                let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
                for &s in samples {
                    *counts.entry(s).or_default() += 1;
                }
                counts.into_iter().map(|(v, c)| (v as f64, c as f64)).collect()
            }
            EffortDistribution::TruncatedRoundedNormal { mean, sd, min } => {
                let n = std_normal();
                let lo = min.ceil() as i64;
                let hi = (mean + 12.0 * sd).ceil() as i64;
                (lo..=hi)
                    .map(|k| {
                        let k = k as f64;
                        let p = n.cdf((k + 0.5 - mean) / sd) - n.cdf((k - 0.5 - mean) / sd);
                        (k, p)
                    })
                    .filter(|&(_, p)| p > 0.0)
                    .collect()
            }
            _ => return None,
        };
        if positive_only {
            pmf.retain(|&(v, _)| v > 0.0);
        }
        let total: f64 = pmf.iter().map(|&(_, p)| p).sum();
        for entry in &mut pmf {
            entry.1 /= total;
        }
        Some(pmf)
    }

    /// `Pr(e2 / e1 <= t)` for independent efforts.
    pub fn ratio_cdf(&self, t: f64) -> Result<f64> {
        self.validate()?;
        if !(t > 0.0) || t.is_nan() {
            return Err(Error::Domain(format!("ratio threshold must be positive, got {t}")));
        }
        if t.is_infinite() {
            return Ok(1.0);
        }
        Ok(match self {
            EffortDistribution::Lognormal { sigma_log, .. } => {
                std_normal().cdf(t.ln() / (sigma_log * std::f64::consts::SQRT_2))
            }
            // The ratio of two iid U(0, c) draws does not depend on c.
            EffortDistribution::Uniform { .. } => {
                if t <= 1.0 {
                    t / 2.0
                } else {
                    1.0 - 1.0 / (2.0 * t)
                }
            }
            _ => {
                let pmf = self.pmf(true).expect("discrete model");
                let mut acc = 0.0;
                for &(e1, p1) in &pmf {
                    let cut = t * e1 * (1.0 + 1e-12);
                    let mass: f64 = pmf.iter().take_while(|&&(e2, _)| e2 <= cut).map(|&(_, p)| p).sum();
                    acc += p1 * mass;
                }
                acc.min(1.0)
            }
        })
    }

    /// `Pr(e2 - e1 <= d)` for independent efforts.
    pub fn diff_cdf(&self, d: f64) -> Result<f64> {
        self.validate()?;
        if d.is_nan() {
            return Err(Error::Domain("difference threshold is NaN".into()));
        }
        Ok(match self {
            EffortDistribution::Uniform { upper, .. } => {
                // Triangular law of the difference on [-c, c].
                let x = d / upper;
                if x <= -1.0 {
                    0.0
                } else if x <= 0.0 {
                    (1.0 + x).powi(2) / 2.0
                } else if x < 1.0 {
                    1.0 - (1.0 - x).powi(2) / 2.0
                } else {
                    1.0
                }
            }
            EffortDistribution::Lognormal { mu_log, sigma_log } => lognormal_diff_cdf(*mu_log, *sigma_log, d),
            _ => {
                let pmf = self.pmf(false).expect("discrete model");
                let mut acc = 0.0;
                for &(e1, p1) in &pmf {
                    let cut = e1 + d + 1e-9;
                    let mass: f64 = pmf.iter().take_while(|&&(e2, _)| e2 <= cut).map(|&(_, p)| p).sum();
                    acc += p1 * mass;
                }
                acc.min(1.0)
            }
        })
    }

    /// Density of `e2 / e1` at `t` (continuous models only).
    pub fn ratio_density(&self, t: f64) -> Result<f64> {
        self.validate()?;
        if !self.is_continuous() {
            return Err(Error::Unsupported(
                "ratio density is undefined for discrete effort models; use the empirical pi oracle".into(),
            ));
        }
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::Domain(format!("ratio must be positive and finite, got {t}")));
        }
        match self {
            EffortDistribution::Lognormal { sigma_log, .. } => {
                let s = sigma_log * std::f64::consts::SQRT_2;
                Ok(std_normal().pdf(t.ln() / s) / (t * s))
            }
            EffortDistribution::Uniform { .. } => Ok(if t <= 1.0 { 0.5 } else { 0.5 / (t * t) }),
            _ => unreachable!("discrete models are rejected above"),
        }
    }
}

/// `Pr(e2 - e1 <= d)` for iid lognormal efforts by composite Simpson
/// quadrature over the standard-normal factor of `e1`.
fn lognormal_diff_cdf(mu: f64, sigma: f64, d: f64) -> f64 {
    const HALF_WIDTH: f64 = 10.0;
    const INTERVALS: usize = 4000;
    let n = std_normal();
    let h = 2.0 * HALF_WIDTH / INTERVALS as f64;
    let integrand = |z: f64| {
        let e1 = (mu + sigma * z).exp();
        let upper = e1 + d;
        if upper <= 0.0 {
            0.0
        } else {
            n.pdf(z) * n.cdf((upper.ln() - mu) / sigma)
        }
    };
    let mut acc = integrand(-HALF_WIDTH) + integrand(HALF_WIDTH);
    for k in 1..INTERVALS {
        let z = -HALF_WIDTH + k as f64 * h;
        acc += if k % 2 == 1 { 4.0 } else { 2.0 } * integrand(z);
    }
    (acc * h / 3.0).clamp(0.0, 1.0)
}

/// Law of the relative effort `x = e2 / e1`: what the log-concavity check
/// consumes.
pub trait RatioLaw {
    fn ratio_cdf(&self, t: f64) -> Result<f64>;
    fn ratio_density(&self, t: f64) -> Result<f64>;
}

impl RatioLaw for EffortDistribution {
    fn ratio_cdf(&self, t: f64) -> Result<f64> {
        EffortDistribution::ratio_cdf(self, t)
    }

    fn ratio_density(&self, t: f64) -> Result<f64> {
        if !self.is_continuous() {
            return Err(Error::Unsupported("log-concavity needs a continuous effort model".into()));
        }
        EffortDistribution::ratio_density(self, t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Worker {
    pub id: String,
    pub effort: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerPopulation {
    workers: Vec<Worker>,
    pub condition_label: String,
}

impl WorkerPopulation {
    pub fn new(workers: Vec<Worker>, condition_label: impl Into<String>) -> Result<Self> {
        if workers.len() < 2 {
            return Err(Error::InvalidPopulation(format!(
                "need at least 2 workers, got {}",
                workers.len()
            )));
        }
        let mut seen = HashSet::with_capacity(workers.len());
        for w in &workers {
            if !(w.effort.is_finite() && w.effort >= 0.0) {
                return Err(Error::InvalidPopulation(format!(
                    "worker {} has invalid effort {}",
                    w.id, w.effort
                )));
            }
            if !seen.insert(w.id.as_str()) {
                return Err(Error::InvalidPopulation(format!("duplicate worker id {}", w.id)));
            }
        }
        Ok(WorkerPopulation {
            workers,
            condition_label: condition_label.into(),
        })
    }

    /// Builds a population from bare effort values with generated ids.
    pub fn from_efforts(efforts: &[f64], condition_label: impl Into<String>) -> Result<Self> {
        let workers = efforts
            .iter()
            .enumerate()
            .map(|(i, &effort)| Worker {
                id: worker_id(i),
                effort,
            })
            .collect();
        Self::new(workers, condition_label)
    }

    pub fn workers(&self) -> &[Worker] {
        &self.workers
    }

    pub fn len(&self) -> usize {
        self.workers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.workers.is_empty()
    }

    pub fn efforts(&self) -> Vec<f64> {
        self.workers.iter().map(|w| w.effort).collect()
    }

    pub fn mean_effort(&self) -> f64 {
        self.workers.iter().map(|w| w.effort).sum::<f64>() / self.len() as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csvio::writer(path)?;
        w.write_record(["worker_id", "effort"])?;
        for worker in &self.workers {
            w.write_record([worker.id.as_str(), &worker.effort.to_string()])?;
        }
        csvio::flush(w, path)
    }

    pub fn read_csv(path: &Path, condition_label: impl Into<String>) -> Result<Self> {
        let mut r = csvio::reader(path)?;
        let cols = csvio::Columns::resolve(r.headers()?, &["worker_id", "effort"])?;
        let mut workers = Vec::new();
        for record in r.records() {
            let record = record?;
            let id = cols.cell(&record, 0).to_string();
            if id.is_empty() {
                return Err(csvio::parse_err(&record, "worker_id", "empty worker id"));
            }
            let effort = csvio::f64_cell(&cols, &record, 1)?;
            workers.push(Worker { id, effort });
        }
        Self::new(workers, condition_label)
    }
}

pub(crate) fn worker_id(i: usize) -> String {
    format!("w{i:05}")
}

/// Draws `n` independent workers from `dist`. Worker `i` uses its own seed
/// stream, so the result is bit-identical for any thread count.
pub fn sample_population(dist: &EffortDistribution, n: usize, seed: u64) -> Result<WorkerPopulation> {
    sample_population_with(dist, n, seed, Execution::default())
}

pub fn sample_population_with(
    dist: &EffortDistribution,
    n: usize,
    seed: u64,
    exec: Execution,
) -> Result<WorkerPopulation> {
    if n < 2 {
        return Err(Error::InvalidPopulation(format!("need at least 2 workers, got {n}")));
    }
    dist.validate()?;
    let workers = par::map_range(exec, n, |i| {
        let mut rng = rng::stream(seed, rng::tag::EFFORT, i as u64);
        Worker {
            id: worker_id(i),
            effort: dist.sample(&mut rng),
        }
    });
    WorkerPopulation::new(workers, "")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phi(x: f64) -> f64 {
        std_normal().cdf(x)
    }

    #[test]
    fn uniform_population_support() {
        let pop = sample_population(&EffortDistribution::uniform(1.0), 2, 7).unwrap();
        assert_eq!(pop.len(), 2);
        assert!(pop.efforts().iter().all(|&e| (0.0..=1.0).contains(&e)));
    }

    #[test]
    fn default_population_mean_and_floor() {
        let pop = sample_population(&EffortDistribution::default(), 800, 1).unwrap();
        let mean = pop.mean_effort();
        assert!((17.0..=19.0).contains(&mean), "mean {mean}");
        assert!(pop.efforts().iter().all(|&e| e >= 5.0 && e.fract() == 0.0));
    }

    #[test]
    fn empirical_resampling_support() {
        let dist = EffortDistribution::Empirical { samples: vec![10, 20] };
        let pop = sample_population(&dist, 4, 3).unwrap();
        assert!(pop.efforts().iter().all(|&e| e == 10.0 || e == 20.0));
    }

    #[test]
    fn population_errors() {
        assert!(matches!(
            sample_population(&EffortDistribution::default(), 1, 0),
            Err(Error::InvalidPopulation(_))
        ));
        let bad = EffortDistribution::Lognormal {
            mu_log: 0.0,
            sigma_log: 0.0,
        };
        assert!(matches!(sample_population(&bad, 10, 0), Err(Error::Parameter(_))));
        let dup = vec![
            Worker { id: "a".into(), effort: 1.0 },
            Worker { id: "a".into(), effort: 2.0 },
        ];
        assert!(WorkerPopulation::new(dup, "").is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_thread_invariant() {
        let d = EffortDistribution::lognormal(2.9, 0.3);
        let a = sample_population_with(&d, 500, 11, Execution::Sequential).unwrap();
        let b = sample_population_with(&d, 500, 11, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ratio_cdf_lognormal_closed_form() {
        let d = EffortDistribution::lognormal(0.0, 0.3);
        assert!((d.ratio_cdf(1.0).unwrap() - 0.5).abs() < 1e-15);
        let expected = phi(2f64.ln() / (0.3 * 2f64.sqrt()));
        assert!((d.ratio_cdf(2.0).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn ratio_cdf_lognormal_matches_monte_carlo() {
        let mut r = rng::stream(5, 0, 0);
        let n = LogNormal::new(0.0, 0.3).unwrap();
        let draws = 1_000_000;
        let hits = (0..draws)
            .filter(|_| {
                let e1: f64 = n.sample(&mut r);
                let e2: f64 = n.sample(&mut r);
                e2 / e1 <= 2.0
            })
            .count();
        let mc = hits as f64 / draws as f64;
        let d = EffortDistribution::lognormal(0.0, 0.3);
        assert!((d.ratio_cdf(2.0).unwrap() - mc).abs() < 0.002);
    }

    #[test]
    fn ratio_cdf_domain_and_limits() {
        let u = EffortDistribution::uniform(1.0);
        assert!(matches!(u.ratio_cdf(0.0), Err(Error::Domain(_))));
        assert!(matches!(u.ratio_cdf(-1.0), Err(Error::Domain(_))));
        assert_eq!(u.ratio_cdf(f64::INFINITY).unwrap(), 1.0);
        assert!(u.ratio_cdf(1e9).unwrap() > 1.0 - 1e-9);
    }

    #[test]
    fn diff_cdf_reference_values() {
        assert!((EffortDistribution::uniform(1.0).diff_cdf(0.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(EffortDistribution::uniform(1.0).diff_cdf(1.0).unwrap(), 1.0);
        let ln = EffortDistribution::lognormal(2.9, 0.3);
        assert!((ln.diff_cdf(0.0).unwrap() - 0.5).abs() < 1e-6);
        let trn = EffortDistribution::default().diff_cdf(0.0).unwrap();
        assert!((0.5..=0.56).contains(&trn), "{trn}");
    }

    #[test]
    fn truncated_normal_diff_cdf_matches_monte_carlo() {
        let d = EffortDistribution::default();
        let mut r = rng::stream(9, 0, 0);
        let draws = 400_000;
        let hits = (0..draws)
            .filter(|_| {
                let a = d.sample(&mut r);
                let b = d.sample(&mut r);
                b - a <= 0.0
            })
            .count();
        let mc = hits as f64 / draws as f64;
        assert!((d.diff_cdf(0.0).unwrap() - mc).abs() < 0.004, "{mc}");
    }

    #[test]
    fn ratio_density_reference_values() {
        let ln = EffortDistribution::lognormal(0.0, 0.3);
        let s = 0.3 * 2f64.sqrt();
        let peak = std_normal().pdf(0.0) / s;
        assert!((ln.ratio_density(1.0).unwrap() - peak).abs() < 1e-12);
        // finite differences of the closed-form cdf agree with the closed form
        let h = 1e-4;
        let fd = (ln.ratio_cdf(1.3 + h).unwrap() - ln.ratio_cdf(1.3 - h).unwrap()) / (2.0 * h);
        assert!((ln.ratio_density(1.3).unwrap() - fd).abs() < 1e-6);

        let u = EffortDistribution::uniform(1.0);
        assert!((u.ratio_density(1.0).unwrap() - 0.5).abs() < 1e-6);
        for t in [1.5, 2.0, 3.7] {
            let analytic = 1.0 / (2.0 * t * t);
            assert!((u.ratio_density(t).unwrap() - analytic).abs() < 1e-6);
        }
        assert!(matches!(
            EffortDistribution::default().ratio_density(1.0),
            Err(Error::Unsupported(_))
        ));
    }

    fn density_mass(d: &EffortDistribution, lo: f64, hi: f64) -> f64 {
        // trapezoid on a log grid
        let n = 20_000;
        let (a, b) = (lo.ln(), hi.ln());
        let step = (b - a) / n as f64;
        (0..=n)
            .map(|k| {
                let u = a + k as f64 * step;
                let t = u.exp();
                let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                w * d.ratio_density(t).unwrap() * t * step
            })
            .sum()
    }

    #[test]
    fn ratio_density_normalizes() {
        let ln = EffortDistribution::lognormal(0.0, 0.3);
        assert!((density_mass(&ln, 1e-3, 1e3) - 1.0).abs() < 1e-3);
        let u = EffortDistribution::uniform(2.0);
        assert!((density_mass(&u, 1e-4, 1e4) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn empirical_ratio_excludes_zero_effort() {
        let with_zero = EffortDistribution::Empirical { samples: vec![0, 10, 20] };
        let without = EffortDistribution::Empirical { samples: vec![10, 20] };
        for t in [0.4, 0.5, 1.0, 1.9, 2.0, 3.0] {
            assert_eq!(with_zero.ratio_cdf(t).unwrap(), without.ratio_cdf(t).unwrap());
        }
        // {10,20}: ratios 1,2,0.5,1 equally likely
        assert!((without.ratio_cdf(1.0).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn population_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("workers.csv");
        let pop = sample_population(&EffortDistribution::lognormal(2.9, 0.3), 25, 4).unwrap();
        pop.write_csv(&path).unwrap();
        let back = WorkerPopulation::read_csv(&path, "").unwrap();
        assert_eq!(pop, back);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("worker_id,effort\n"));
    }

    #[test]
    fn distribution_json_schema() {
        let d: EffortDistribution =
            serde_json::from_str(r#"{"kind":"truncated_rounded_normal","mean":18,"sd":5.5,"min":5}"#).unwrap();
        assert_eq!(d, EffortDistribution::default());
        let u: EffortDistribution = serde_json::from_str(r#"{"kind":"uniform","upper":1}"#).unwrap();
        assert_eq!(u, EffortDistribution::uniform(1.0));
    }
}
