//! Estimation on decision datasets: spectator-clustered OLS and the analyses
//! built on it (elasticities, bin means, redistribution gaps, margins,
//! residualization and effort-gap accounting).
//!
//! Standard errors are CR1: the cluster sandwich scaled by
//! `G/(G-1) * (N-1)/(N-K)`. Least squares goes through a QR factorization; a
//! column whose R diagonal falls below `1e-10` of its own norm is reported as
//! collinear.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::csvio;
use crate::error::{Error, Result};
use crate::experiment::{DecisionRecord, ROUNDS};
use crate::meritprob::PiBinning;

pub const RANK_TOL: f64 = 1e-10;

/// Below this many clusters p-values use Student t with `G - 1` degrees of
/// freedom instead of the normal approximation.
pub const NORMAL_APPROX_MIN_CLUSTERS: usize = 30;

/// Named regressor columns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Regressors {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl Regressors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, column: Vec<f64>) -> Self {
        self.names.push(name.into());
        self.columns.push(column);
        self
    }

    pub fn with_intercept(self, n: usize) -> Self {
        self.with("const", vec![1.0; n])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    fn matrix(&self, n: usize) -> Result<DMatrix<f64>> {
        if self.columns.is_empty() {
            return Err(Error::Contract("regression needs at least one regressor".into()));
        }
        if let Some((name, col)) = self.names.iter().zip(&self.columns).find(|(_, c)| c.len() != n) {
            return Err(Error::Contract(format!(
                "regressor `{name}` has {} rows, response has {n}",
                col.len()
            )));
        }
        Ok(DMatrix::from_fn(n, self.columns.len(), |i, j| self.columns[j][i]))
    }
}

struct LeastSquares {
    beta: DVector<f64>,
    residuals: DVector<f64>,
    /// `(X'X)^-1`
    bread: DMatrix<f64>,
}

fn least_squares(y: &[f64], x: &DMatrix<f64>) -> Result<LeastSquares> {
    let (n, k) = x.shape();
    if n < k {
        return Err(Error::DegreesOfFreedom(format!("{n} observations for {k} coefficients")));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    for j in 0..k {
        let norm = x.column(j).norm();
        if norm == 0.0 || r[(j, j)].abs() <= RANK_TOL * norm {
            return Err(Error::SingularDesign { column: j });
        }
    }
    let yv = DVector::from_column_slice(y);
    let qty = qr.q().transpose() * &yv;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or(Error::SingularDesign { column: k - 1 })?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or(Error::SingularDesign { column: k - 1 })?;
    let bread = &r_inv * r_inv.transpose();
    let residuals = yv - x * &beta;
    Ok(LeastSquares { beta, residuals, bread })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    /// CR1 cluster-robust covariance, row-major.
    pub covariance: Vec<Vec<f64>>,
    pub ses: Vec<f64>,
    pub n_obs: usize,
    pub n_clusters: usize,
    pub r_squared: f64,
    #[serde(skip)]
    pub residuals: Vec<f64>,
}

/// JSON export shape for a fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub ses: Vec<f64>,
    pub p_values: Vec<f64>,
    pub n_obs: usize,
    pub n_clusters: usize,
    pub r_squared: f64,
}

impl RegressionFit {
    pub fn coef(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|k| self.coefficients[k])
    }

    pub fn se(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|k| self.ses[k])
    }

    /// Two-sided p-values of the zero null; reporting only.
    pub fn p_values(&self) -> Vec<f64> {
        let g = self.n_clusters;
        let tail: Box<dyn Fn(f64) -> f64> = if g < NORMAL_APPROX_MIN_CLUSTERS {
            let t = StudentsT::new(0.0, 1.0, (g - 1) as f64).expect("at least 2 clusters");
            Box::new(move |z: f64| 2.0 * (1.0 - t.cdf(z.abs())))
        } else {
            let n = Normal::standard();
            Box::new(move |z: f64| 2.0 * (1.0 - n.cdf(z.abs())))
        };
        self.coefficients
            .iter()
            .zip(&self.ses)
            .map(|(&b, &se)| if se > 0.0 { tail(b / se) } else if b == 0.0 { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn stars(&self) -> Vec<&'static str> {
        self.p_values()
            .into_iter()
            .map(|p| match p {
                p if p < 0.01 => "***",
                p if p < 0.05 => "**",
                p if p < 0.1 => "*",
                _ => "",
            })
            .collect()
    }

    pub fn summary(&self) -> FitSummary {
        FitSummary {
            names: self.names.clone(),
            coefficients: self.coefficients.clone(),
            ses: self.ses.clone(),
            p_values: self.p_values(),
            n_obs: self.n_obs,
            n_clusters: self.n_clusters,
            r_squared: self.r_squared,
        }
    }

    /// Standard error of `coef[a] - coef[b]`.
    pub fn difference_se(&self, a: usize, b: usize) -> f64 {
        let v = &self.covariance;
        (v[a][a] + v[b][b] - 2.0 * v[a][b]).max(0.0).sqrt()
    }
}

/// OLS of `y` on `x` with CR1 standard errors clustered on `clusters`.
pub fn ols_clustered<C: Ord>(y: &[f64], x: &Regressors, clusters: &[C]) -> Result<RegressionFit> {
    let n = y.len();
    if clusters.len() != n {
        return Err(Error::Contract(format!("{} cluster ids for {n} observations", clusters.len())));
    }
    let xm = x.matrix(n)?;
    let k = xm.ncols();
    let mut groups: BTreeMap<&C, Vec<usize>> = BTreeMap::new();
    for (i, c) in clusters.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    let g = groups.len();
    if g < 2 {
        return Err(Error::DegreesOfFreedom(format!("clustered errors need at least 2 clusters, got {g}")));
    }
    if n <= k {
        return Err(Error::DegreesOfFreedom(format!("{n} observations for {k} coefficients")));
    }
    let ls = least_squares(y, &xm)?;
    let mut meat = DMatrix::<f64>::zeros(k, k);
    for rows in groups.values() {
        let mut score = DVector::<f64>::zeros(k);
        for &i in rows {
            score += xm.row(i).transpose() * ls.residuals[i];
        }
        meat += &score * score.transpose();
    }
    let scale = (g as f64 / (g - 1) as f64) * ((n - 1) as f64 / (n - k) as f64);
    let v = (&ls.bread * meat * &ls.bread) * scale;
    let v = (&v + v.transpose()) * 0.5;
    let ssr = ls.residuals.norm_squared();
    let mean = y.iter().sum::<f64>() / n as f64;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    Ok(RegressionFit {
        names: x.names.clone(),
        coefficients: ls.beta.iter().copied().collect(),
        ses: (0..k).map(|j| v[(j, j)].max(0.0).sqrt()).collect(),
        covariance: (0..k).map(|i| (0..k).map(|j| v[(i, j)]).collect()).collect(),
        n_obs: n,
        n_clusters: g,
        r_squared: if sst > 0.0 { 1.0 - ssr / sst } else { 1.0 },
        residuals: ls.residuals.iter().copied().collect(),
    })
}

fn nonempty<'a>(data: &'a [DecisionRecord], what: &str) -> Result<&'a [DecisionRecord]> {
    if data.is_empty() {
        Err(Error::Contract(format!("{what}: dataset is empty")))
    } else {
        Ok(data)
    }
}

fn luck(data: &[DecisionRecord]) -> Vec<f64> {
    data.iter().map(|d| 1.0 - d.pi_true).collect()
}

fn responses(data: &[DecisionRecord]) -> Vec<f64> {
    data.iter().map(|d| d.r).collect()
}

fn spectators(data: &[DecisionRecord]) -> Vec<&str> {
    data.iter().map(|d| d.spectator_id.as_str()).collect()
}

/// `r = alpha + beta (1 - pi)`, clustered by spectator, on the rows kept by
/// `filter`. Coefficients are named `const` and `one_minus_pi`.
pub fn elasticity_fit<F: Fn(&DecisionRecord) -> bool>(data: &[DecisionRecord], filter: F) -> Result<RegressionFit> {
    let kept: Vec<DecisionRecord> = data.iter().filter(|d| filter(d)).cloned().collect();
    let kept = nonempty(&kept, "elasticity fit")?;
    let x = Regressors::new()
        .with_intercept(kept.len())
        .with("one_minus_pi", luck(kept));
    ols_clustered(&responses(kept), &x, &spectators(kept))
}

/// Mean of `r` with a spectator-clustered standard error.
pub fn mean_fit(data: &[DecisionRecord]) -> Result<RegressionFit> {
    let data = nonempty(data, "mean")?;
    ols_clustered(&responses(data), &Regressors::new().with_intercept(data.len()), &spectators(data))
}

fn bin_indices(data: &[DecisionRecord], binning: &PiBinning) -> Result<Vec<usize>> {
    data.iter().map(|d| binning.assign(d.pi_true)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinEstimate {
    pub bin: usize,
    /// Bin edges in `pi`.
    pub low: f64,
    pub high: f64,
    pub estimate: f64,
    pub se: f64,
    pub n: usize,
}

/// Per-bin mean redistribution (`gamma_b`) from the full dummy regression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinTable {
    pub levels: Vec<BinEstimate>,
    pub fit: RegressionFit,
}

impl BinTable {
    /// `gamma_b - gamma_ref` for every bin, with SEs from the joint covariance.
    pub fn relative_to(&self, reference: usize) -> Result<Vec<BinEstimate>> {
        let k_ref = self
            .levels
            .iter()
            .position(|b| b.bin == reference)
            .ok_or_else(|| Error::Binning(format!("reference bin {reference} has no observations")))?;
        let base = self.levels[k_ref].estimate;
        Ok(self
            .levels
            .iter()
            .enumerate()
            .map(|(k, b)| BinEstimate {
                estimate: b.estimate - base,
                se: if k == k_ref { 0.0 } else { self.fit.difference_se(k, k_ref) },
                ..b.clone()
            })
            .collect())
    }
}

pub fn write_bin_csv(rows: &[BinEstimate], path: &Path) -> Result<()> {
    let mut w = csvio::writer(path)?;
    w.write_record(["bin", "low", "high", "estimate", "se", "n"])?;
    for b in rows {
        w.write_record([
            b.bin.to_string(),
            b.low.to_string(),
            b.high.to_string(),
            b.estimate.to_string(),
            b.se.to_string(),
            b.n.to_string(),
        ])?;
    }
    csvio::flush(w, path)
}

fn dummy(bins: &[usize], b: usize) -> Vec<f64> {
    bins.iter().map(|&x| if x == b { 1.0 } else { 0.0 }).collect()
}

/// Full set of bin dummies without intercept; bins without observations are
/// left out.
pub fn bin_means(data: &[DecisionRecord], binning: &PiBinning) -> Result<BinTable> {
    let data = nonempty(data, "bin means")?;
    let bins = bin_indices(data, binning)?;
    let present: Vec<usize> = binning.bins.iter().map(|b| b.index).filter(|b| bins.contains(b)).collect();
    let x = present
        .iter()
        .fold(Regressors::new(), |x, &b| x.with(format!("bin_{b}"), dummy(&bins, b)));
    let fit = ols_clustered(&responses(data), &x, &spectators(data))?;
    let levels = present
        .iter()
        .enumerate()
        .map(|(k, &b)| {
            let spec = binning.bin(b);
            BinEstimate {
                bin: b,
                low: spec.lo(),
                high: spec.hi(),
                estimate: fit.coefficients[k],
                se: fit.ses[k],
                n: bins.iter().filter(|&&x| x == b).count(),
            }
        })
        .collect();
    Ok(BinTable { levels, fit })
}

/// Stacks two arms with arm-qualified cluster ids (spectator ids are only
/// unique within an arm).
fn stack<'a>(a: &'a [DecisionRecord], b: &'a [DecisionRecord]) -> (Vec<&'a DecisionRecord>, Vec<bool>, Vec<(u8, &'a str)>) {
    let rows: Vec<&DecisionRecord> = a.iter().chain(b).collect();
    let in_a: Vec<bool> = (0..rows.len()).map(|i| i < a.len()).collect();
    let clusters = rows
        .iter()
        .zip(&in_a)
        .map(|(d, &first)| (u8::from(!first), d.spectator_id.as_str()))
        .collect();
    (rows, in_a, clusters)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub bin: usize,
    pub low: f64,
    pub high: f64,
    /// Outcomes minus opportunities.
    pub gap: f64,
    pub se: f64,
    pub n_outcomes: usize,
    pub n_opportunities: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapTable {
    pub bins: Vec<GapRow>,
    pub mean_gap: f64,
    pub mean_gap_se: f64,
}

impl GapTable {
    /// Average absolute per-bin gap.
    pub fn mean_abs_gap(&self) -> f64 {
        self.bins.iter().map(|g| g.gap.abs()).sum::<f64>() / self.bins.len() as f64
    }
}

pub fn write_gap_csv(table: &GapTable, path: &Path) -> Result<()> {
    let mut w = csvio::writer(path)?;
    w.write_record(["bin", "low", "high", "gap", "se", "n_outcomes", "n_opportunities"])?;
    for g in &table.bins {
        w.write_record([
            g.bin.to_string(),
            g.low.to_string(),
            g.high.to_string(),
            g.gap.to_string(),
            g.se.to_string(),
            g.n_outcomes.to_string(),
            g.n_opportunities.to_string(),
        ])?;
    }
    csvio::flush(w, path)
}

/// Per-bin and mean differences in redistribution between two arms, from
/// the fully interacted bin regression on the stacked data.
pub fn redistribution_gap(
    outcomes: &[DecisionRecord],
    opportunities: &[DecisionRecord],
    binning: &PiBinning,
) -> Result<GapTable> {
    nonempty(outcomes, "redistribution gap (first arm)")?;
    nonempty(opportunities, "redistribution gap (second arm)")?;
    let (rows, in_out, clusters) = stack(outcomes, opportunities);
    let y: Vec<f64> = rows.iter().map(|d| d.r).collect();
    let bins: Vec<usize> = rows.iter().map(|d| binning.assign(d.pi_true)).collect::<Result<_>>()?;
    let count = |b: usize, arm: bool| bins.iter().zip(&in_out).filter(|&(&x, &a)| x == b && a == arm).count();
    let shared: Vec<usize> = binning
        .bins
        .iter()
        .map(|b| b.index)
        .filter(|&b| count(b, true) > 0 && count(b, false) > 0)
        .collect();
    if shared.is_empty() {
        return Err(Error::Binning("the two arms share no populated bin".into()));
    }
    // Rows in bins only one arm populates would leave their dummies unmatched.
    let keep: Vec<usize> = (0..rows.len()).filter(|&i| shared.contains(&bins[i])).collect();
    let mut x = Regressors::new();
    for &b in &shared {
        for arm in [true, false] {
            let col = keep.iter().map(|&i| f64::from(u8::from(bins[i] == b && in_out[i] == arm))).collect();
            x = x.with(format!("bin_{b}_{}", if arm { "a" } else { "b" }), col);
        }
    }
    let yk: Vec<f64> = keep.iter().map(|&i| y[i]).collect();
    let ck: Vec<(u8, &str)> = keep.iter().map(|&i| clusters[i]).collect();
    let fit = ols_clustered(&yk, &x, &ck)?;
    let gaps = shared
        .iter()
        .enumerate()
        .map(|(k, &b)| {
            let spec = binning.bin(b);
            GapRow {
                bin: b,
                low: spec.lo(),
                high: spec.hi(),
                gap: fit.coefficients[2 * k] - fit.coefficients[2 * k + 1],
                se: fit.difference_se(2 * k, 2 * k + 1),
                n_outcomes: count(b, true),
                n_opportunities: count(b, false),
            }
        })
        .collect();
    let arm_a: Vec<f64> = in_out.iter().map(|&a| f64::from(u8::from(a))).collect();
    let mean = ols_clustered(&y, &Regressors::new().with_intercept(y.len()).with("first_arm", arm_a), &clusters)?;
    Ok(GapTable {
        bins: gaps,
        mean_gap: mean.coefficients[1],
        mean_gap_se: mean.ses[1],
    })
}

fn sessions(data: &[DecisionRecord]) -> Result<BTreeMap<&str, Vec<&DecisionRecord>>> {
    let mut by: BTreeMap<&str, Vec<&DecisionRecord>> = BTreeMap::new();
    for d in data {
        by.entry(d.spectator_id.as_str()).or_default().push(d);
    }
    for (id, rows) in &by {
        let mut rounds: Vec<usize> = rows.iter().map(|d| d.round).collect();
        rounds.sort_unstable();
        if rounds != (1..=ROUNDS).collect::<Vec<_>>() {
            return Err(Error::Contract(format!(
                "spectator {id} has rounds {rounds:?}, expected 1..={ROUNDS}"
            )));
        }
    }
    Ok(by)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginEstimate {
    pub share: f64,
    /// Binomial standard error (spectators are the clusters).
    pub se: f64,
    pub n_spectators: usize,
}

/// Share of spectators who redistribute nothing in every round.
pub fn extensive_margin(data: &[DecisionRecord]) -> Result<MarginEstimate> {
    let by = sessions(nonempty(data, "extensive margin")?)?;
    let n = by.len();
    let zeros = by.values().filter(|rows| rows.iter().all(|d| d.r == 0.0)).count();
    let share = zeros as f64 / n as f64;
    Ok(MarginEstimate {
        share,
        se: (share * (1.0 - share) / n as f64).sqrt(),
        n_spectators: n,
    })
}

fn redistributors(data: &[DecisionRecord]) -> Result<Vec<DecisionRecord>> {
    let by = sessions(nonempty(data, "intensive margin")?)?;
    let kept: Vec<DecisionRecord> = by
        .values()
        .filter(|rows| rows.iter().any(|d| d.r > 0.0))
        .flat_map(|rows| rows.iter().map(|d| (*d).clone()))
        .collect();
    if kept.is_empty() {
        return Err(Error::Contract("no spectator redistributed a positive amount".into()));
    }
    Ok(kept)
}

/// Elasticity among spectators who redistributed in at least one round.
pub fn intensive_margin(data: &[DecisionRecord]) -> Result<RegressionFit> {
    elasticity_fit(&redistributors(data)?, |_| true)
}

/// Mean redistribution among spectators who redistributed at least once.
pub fn intensive_mean(data: &[DecisionRecord]) -> Result<RegressionFit> {
    mean_fit(&redistributors(data)?)
}

/// Residuals of `r` on `(1 - pi)` plus the unconditional mean of `r`.
pub fn residualize_on_pi(data: &[DecisionRecord]) -> Result<Vec<f64>> {
    let data = nonempty(data, "residualize")?;
    let x = Regressors::new().with_intercept(data.len()).with("one_minus_pi", luck(data));
    let y = responses(data);
    let ls = least_squares(&y, &x.matrix(data.len())?)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    Ok(ls.residuals.iter().map(|e| e + mean).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapDecomposition {
    /// Mean redistribution, outcomes minus opportunities.
    pub total_gap: f64,
    /// `elasticity_per_encryption * mean_effort_gap_difference`
    pub accounted_by_effort_gap: f64,
    pub elasticity_per_encryption: f64,
    /// `None` when the elasticity was fixed rather than estimated.
    pub elasticity_se: Option<f64>,
    /// Mean winner-minus-loser effort, outcomes minus opportunities.
    pub mean_effort_gap_difference: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn effort_gap(d: &DecisionRecord) -> f64 {
    d.effort_w - d.effort_l
}

/// Accounting with a given elasticity of `r` to the winner-loser effort gap.
pub fn effort_gap_accounting_fixed(
    outcomes: &[DecisionRecord],
    opportunities: &[DecisionRecord],
    elasticity_per_encryption: f64,
) -> Result<GapDecomposition> {
    nonempty(outcomes, "effort-gap accounting (outcomes)")?;
    nonempty(opportunities, "effort-gap accounting (opportunities)")?;
    let gap_diff = mean(outcomes.iter().map(effort_gap)) - mean(opportunities.iter().map(effort_gap));
    Ok(GapDecomposition {
        total_gap: mean(outcomes.iter().map(|d| d.r)) - mean(opportunities.iter().map(|d| d.r)),
        accounted_by_effort_gap: elasticity_per_encryption * gap_diff,
        elasticity_per_encryption,
        elasticity_se: None,
        mean_effort_gap_difference: gap_diff,
    })
}

/// Estimates the elasticity on the pooled arms (controlling for `1 - pi` and
/// the arm) and multiplies it by the difference in mean effort gaps.
pub fn effort_gap_accounting(outcomes: &[DecisionRecord], opportunities: &[DecisionRecord]) -> Result<GapDecomposition> {
    nonempty(outcomes, "effort-gap accounting (outcomes)")?;
    nonempty(opportunities, "effort-gap accounting (opportunities)")?;
    let (rows, in_out, clusters) = stack(outcomes, opportunities);
    let n = rows.len();
    let x = Regressors::new()
        .with_intercept(n)
        .with("one_minus_pi", rows.iter().map(|d| 1.0 - d.pi_true).collect())
        .with("outcomes_arm", in_out.iter().map(|&a| f64::from(u8::from(a))).collect())
        .with("effort_gap", rows.iter().map(|d| effort_gap(d)).collect());
    let y: Vec<f64> = rows.iter().map(|d| d.r).collect();
    let fit = ols_clustered(&y, &x, &clusters)?;
    let mut out = effort_gap_accounting_fixed(outcomes, opportunities, fit.coefficients[3])?;
    out.elasticity_se = Some(fit.ses[3]);
    Ok(out)
}

/// Competing linear descriptions of opportunity-arm choices: in the
/// multiplier difference, the ratio, and both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureFits {
    pub difference: RegressionFit,
    pub ratio: RegressionFit,
    pub both: RegressionFit,
}

pub fn feature_regressions(data: &[DecisionRecord]) -> Result<FeatureFits> {
    let rows: Vec<&DecisionRecord> = data.iter().filter(|d| d.m_w.is_some() && d.m_l.is_some()).collect();
    if rows.is_empty() {
        return Err(Error::Contract("feature regressions need multiplier features".into()));
    }
    let n = rows.len();
    let diff: Vec<f64> = rows.iter().map(|d| d.m_w.unwrap() - d.m_l.unwrap()).collect();
    let ratio: Vec<f64> = rows.iter().map(|d| d.m_w.unwrap() / d.m_l.unwrap()).collect();
    let y: Vec<f64> = rows.iter().map(|d| d.r).collect();
    let c: Vec<&str> = rows.iter().map(|d| d.spectator_id.as_str()).collect();
    Ok(FeatureFits {
        difference: ols_clustered(&y, &Regressors::new().with_intercept(n).with("difference", diff.clone()), &c)?,
        ratio: ols_clustered(&y, &Regressors::new().with_intercept(n).with("ratio", ratio.clone()), &c)?,
        both: ols_clustered(
            &y,
            &Regressors::new().with_intercept(n).with("difference", diff).with("ratio", ratio),
            &c,
        )?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::EnvKind;
    use crate::meritprob::standard_bins;
    use proptest::prelude::*;

    fn rec(spectator: usize, round: usize, pi: f64, r: f64) -> DecisionRecord {
        DecisionRecord {
            spectator_id: format!("s{spectator:05}"),
            round,
            env: EnvKind::Outcomes,
            timing: None,
            informed: false,
            q: Some(2.0 * (1.0 - pi)),
            m_w: None,
            m_l: None,
            pi_true: pi,
            effort_w: 20.0,
            effort_l: 15.0,
            r,
        }
    }

    /// Twelve-round sessions with the percent targets 0.50, 0.52, 0.57, ...
    fn sessions_from(rs: &[Vec<f64>]) -> Vec<DecisionRecord> {
        let pis = [0.5, 0.52, 0.57, 0.62, 0.67, 0.72, 0.77, 0.82, 0.87, 0.92, 0.97, 1.0];
        rs.iter()
            .enumerate()
            .flat_map(|(s, row)| (0..12).map(move |k| rec(s, k + 1, pis[k], row[k])))
            .collect()
    }

    fn toy() -> (Vec<f64>, Regressors, Vec<&'static str>) {
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = vec![1.0, 3.0, 2.0, 5.0, 4.0, 6.0];
        (y, Regressors::new().with_intercept(6).with("x", x), vec!["a", "a", "b", "b", "c", "c"])
    }

    #[test]
    fn exact_fit() {
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let fit = ols_clustered(&y, &Regressors::new().with_intercept(9).with("x", x), &[1, 1, 1, 2, 2, 2, 3, 3, 3]).unwrap();
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-12);
        assert!(fit.coefficients[0].abs() < 1e-12);
        assert!(fit.residuals.iter().all(|e| e.abs() < 1e-12));
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn three_cluster_oracle() {
        let (y, x, c) = toy();
        let fit = ols_clustered(&y, &x, &c).unwrap();
        // Exact rationals: beta = (2/5, 31/35); V = [[11497/73500, -12321/343000], [., 12321/1200500]].
        assert!((fit.coefficients[0] - 0.4).abs() < 1e-10);
        assert!((fit.coefficients[1] - 31.0 / 35.0).abs() < 1e-10);
        assert!((fit.ses[0] - 0.395_501_919_979_515_4).abs() < 1e-8);
        assert!((fit.ses[1] - 0.101_307_569_592_847_6).abs() < 1e-8);
        assert!((fit.covariance[0][1] - (-12321.0 / 343000.0)).abs() < 1e-10);
        assert_eq!((fit.n_obs, fit.n_clusters), (6, 3));

        // Independent route: 2x2 normal equations and the sandwich by hand.
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let (sx, sxx): (f64, f64) = (xs.iter().sum(), xs.iter().map(|v| v * v).sum());
        let (sy, sxy): (f64, f64) = (y.iter().sum(), xs.iter().zip(&y).map(|(a, b)| a * b).sum());
        let det = 6.0 * sxx - sx * sx;
        let inv = [[sxx / det, -sx / det], [-sx / det, 6.0 / det]];
        let b0 = inv[0][0] * sy + inv[0][1] * sxy;
        let b1 = inv[1][0] * sy + inv[1][1] * sxy;
        let mut meat = [[0.0; 2]; 2];
        for g in 0..3 {
            let (mut s0, mut s1) = (0.0, 0.0);
            for i in [2 * g, 2 * g + 1] {
                let e = y[i] - b0 - b1 * xs[i];
                s0 += e;
                s1 += xs[i] * e;
            }
            let s = [s0, s1];
            for a in 0..2 {
                for b in 0..2 {
                    meat[a][b] += s[a] * s[b];
                }
            }
        }
        let scale = 1.5 * 5.0 / 4.0;
        let mut v = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                for s in 0..2 {
                    for t in 0..2 {
                        v[a][b] += scale * inv[a][s] * meat[s][t] * inv[t][b];
                    }
                }
            }
        }
        assert!((fit.coefficients[0] - b0).abs() < 1e-10 && (fit.coefficients[1] - b1).abs() < 1e-10);
        assert!((fit.ses[0] - v[0][0].sqrt()).abs() < 1e-8 && (fit.ses[1] - v[1][1].sqrt()).abs() < 1e-8);
    }

    #[test]
    fn permutation_and_duplication() {
        let (y, x, c) = toy();
        let base = ols_clustered(&y, &x, &c).unwrap();
        let perm = [4, 1, 5, 0, 3, 2];
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let cp: Vec<&str> = perm.iter().map(|&i| c[i]).collect();
        let xp = Regressors::new().with_intercept(6).with("x", perm.iter().map(|&i| xs[i]).collect());
        let fp = ols_clustered(&yp, &xp, &cp).unwrap();
        for k in 0..2 {
            assert!((fp.coefficients[k] - base.coefficients[k]).abs() < 1e-12);
            assert!((fp.ses[k] - base.ses[k]).abs() < 1e-12);
        }
        let y2: Vec<f64> = y.iter().chain(&y).copied().collect();
        let c2: Vec<&str> = c.iter().chain(&c).copied().collect();
        let x2 = Regressors::new().with_intercept(12).with("x", xs.iter().chain(&xs).copied().collect());
        let fd = ols_clustered(&y2, &x2, &c2).unwrap();
        for k in 0..2 {
            assert!((fd.coefficients[k] - base.coefficients[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn estimation_errors() {
        let (y, _, c) = toy();
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let twice: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let sing = Regressors::new().with_intercept(6).with("x", x.clone()).with("x2", twice);
        assert!(matches!(ols_clustered(&y, &sing, &c), Err(Error::SingularDesign { column: 2 })));
        let zero = Regressors::new().with_intercept(6).with("z", vec![0.0; 6]);
        assert!(matches!(ols_clustered(&y, &zero, &c), Err(Error::SingularDesign { column: 1 })));
        let ok = Regressors::new().with_intercept(6).with("x", x);
        assert!(matches!(ols_clustered(&y, &ok, &[0; 6]), Err(Error::DegreesOfFreedom(_))));
        assert!(matches!(ols_clustered(&y, &ok, &[0, 1]), Err(Error::Contract(_))));
        assert!(matches!(ols_clustered(&y, &Regressors::new(), &c), Err(Error::Contract(_))));
    }

    #[test]
    fn fit_json_and_p_values() {
        let (y, x, c) = toy();
        let fit = ols_clustered(&y, &x, &c).unwrap();
        let v = serde_json::to_value(fit.summary()).unwrap();
        for key in ["coefficients", "ses", "n_obs", "n_clusters"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let p = fit.p_values();
        // Three clusters: t with 2 degrees of freedom.
        let t = StudentsT::new(0.0, 1.0, 2.0).unwrap();
        let expected = 2.0 * (1.0 - t.cdf(fit.coefficients[1] / fit.ses[1]));
        assert!((p[1] - expected).abs() < 1e-12);
        assert_eq!(fit.stars().len(), 2);
    }

    #[test]
    fn elasticity_edge_cases() {
        let never = sessions_from(&vec![vec![0.0; 12]; 5]);
        let fit = elasticity_fit(&never, |_| true).unwrap();
        assert_eq!(fit.coefficients, vec![0.0, 0.0]);
        assert!(elasticity_fit(&never, |_| false).is_err());
        // r = 0.1 + 0.8 (1 - pi) exactly
        let lin: Vec<DecisionRecord> = sessions_from(&vec![vec![0.0; 12]; 4])
            .into_iter()
            .map(|mut d| {
                d.r = 0.1 + 0.8 * (1.0 - d.pi_true);
                d
            })
            .collect();
        let fit = elasticity_fit(&lin, |_| true).unwrap();
        assert!((fit.coef("one_minus_pi").unwrap() - 0.8).abs() < 1e-12);
        assert!((fit.coef("const").unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn bin_mean_properties() {
        let binning = standard_bins();
        let one_bin: Vec<DecisionRecord> = (0..6).map(|s| rec(s, 1, 0.57, 0.1 * s as f64)).collect();
        let t = bin_means(&one_bin, &binning).unwrap();
        assert_eq!(t.levels.len(), 1);
        assert_eq!(t.levels[0].bin, 3);
        assert!((t.levels[0].estimate - 0.25).abs() < 1e-12);

        let constant = sessions_from(&vec![vec![0.3; 12]; 5]);
        let t = bin_means(&constant, &binning).unwrap();
        assert_eq!(t.levels.len(), 12);
        assert!(t.levels.iter().all(|b| (b.estimate - 0.3).abs() < 1e-12));
        assert_eq!(t.levels.iter().map(|b| b.n).sum::<usize>(), t.fit.n_obs);
        let rel = t.relative_to(1).unwrap();
        assert!(rel.iter().all(|b| b.estimate.abs() < 1e-12));

        let bad = vec![rec(0, 1, 0.3, 0.0), rec(1, 1, 0.6, 0.0)];
        assert!(matches!(bin_means(&bad, &binning), Err(Error::Binning(_))));
    }

    fn varied(seed: u64, n: usize) -> Vec<DecisionRecord> {
        let mut state = seed;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) % 6) as f64 / 10.0
        };
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..12).map(|_| next()).collect()).collect();
        sessions_from(&rows)
    }

    #[test]
    fn gap_properties() {
        let binning = standard_bins();
        let a = varied(1, 20);
        let b = varied(2, 25);
        let same = redistribution_gap(&a, &a, &binning).unwrap();
        assert!(same.bins.iter().all(|g| g.gap.abs() < 1e-12));
        assert!(same.mean_gap.abs() < 1e-12);
        let ab = redistribution_gap(&a, &b, &binning).unwrap();
        let ba = redistribution_gap(&b, &a, &binning).unwrap();
        for (x, y) in ab.bins.iter().zip(&ba.bins) {
            assert!((x.gap + y.gap).abs() < 1e-12);
            assert!((x.se - y.se).abs() < 1e-12);
        }
        assert!((ab.mean_gap + ba.mean_gap).abs() < 1e-12);
        let la = bin_means(&a, &binning).unwrap();
        let lb = bin_means(&b, &binning).unwrap();
        for (k, g) in ab.bins.iter().enumerate() {
            assert!((g.gap - (la.levels[k].estimate - lb.levels[k].estimate)).abs() < 1e-12);
        }
        let mean_a = a.iter().map(|d| d.r).sum::<f64>() / a.len() as f64;
        let mean_b = b.iter().map(|d| d.r).sum::<f64>() / b.len() as f64;
        assert!((ab.mean_gap - (mean_a - mean_b)).abs() < 1e-12);
    }

    #[test]
    fn margins() {
        let mut rows = vec![vec![0.0; 12]; 3];
        rows.extend(vec![vec![0.2; 12]; 7]);
        let data = sessions_from(&rows);
        let m = extensive_margin(&data).unwrap();
        assert!((m.share - 0.3).abs() < 1e-15);
        assert!((m.se - (0.3f64 * 0.7 / 10.0).sqrt()).abs() < 1e-15);
        assert_eq!(extensive_margin(&sessions_from(&vec![vec![0.0; 12]; 4])).unwrap().share, 1.0);
        assert_eq!(extensive_margin(&varied(3, 10).into_iter().map(|mut d| {
            d.r += 0.1;
            d
        }).collect::<Vec<_>>()).unwrap().share, 0.0);
        let mut partial = data.clone();
        partial.pop();
        assert!(matches!(extensive_margin(&partial), Err(Error::Contract(_))));

        let int_mean = intensive_mean(&data).unwrap();
        assert!((int_mean.coefficients[0] - 0.2).abs() < 1e-12);
        assert!(matches!(intensive_margin(&sessions_from(&vec![vec![0.0; 12]; 4])), Err(Error::Contract(_))));
        let positive: Vec<DecisionRecord> = varied(4, 12).into_iter().map(|mut d| {
            d.r += 0.1;
            d
        }).collect();
        assert_eq!(intensive_margin(&positive).unwrap(), elasticity_fit(&positive, |_| true).unwrap());
    }

    #[test]
    fn residualization() {
        let data = varied(5, 15);
        let res = residualize_on_pi(&data).unwrap();
        assert_eq!(res.len(), data.len());
        let mean_r = data.iter().map(|d| d.r).sum::<f64>() / data.len() as f64;
        let mean_res = res.iter().sum::<f64>() / res.len() as f64;
        assert!((mean_r - mean_res).abs() < 1e-12);
        let mut back = data.clone();
        for (d, e) in back.iter_mut().zip(&res) {
            d.r = *e;
        }
        let fit = elasticity_fit(&back, |_| true).unwrap();
        assert!(fit.coefficients[1].abs() < 1e-10);
        let lin: Vec<DecisionRecord> = data
            .iter()
            .cloned()
            .map(|mut d| {
                d.r = 0.5 - 0.4 * (d.pi_true - 0.5);
                d
            })
            .collect();
        let flat = residualize_on_pi(&lin).unwrap();
        assert!(flat.iter().all(|v| (v - flat[0]).abs() < 1e-12));
    }

    #[test]
    fn effort_gap_components() {
        let a = varied(6, 10);
        let fixed = effort_gap_accounting_fixed(&a, &a, -0.003).unwrap();
        assert_eq!(fixed.accounted_by_effort_gap, 0.0);
        let mut b = varied(7, 10);
        for d in &mut b {
            d.effort_l += 0.7;
        }
        let dec = effort_gap_accounting_fixed(&a, &b, -0.003).unwrap();
        assert!((dec.mean_effort_gap_difference - 0.7).abs() < 1e-12);
        assert!((dec.accounted_by_effort_gap - (-0.0021)).abs() < 1e-12);
        assert_eq!(dec.accounted_by_effort_gap, dec.elasticity_per_encryption * dec.mean_effort_gap_difference);
        let mut spread = varied(8, 10);
        for (k, d) in spread.iter_mut().enumerate() {
            d.effort_w += (k % 5) as f64;
        }
        let est = effort_gap_accounting(&spread, &b).unwrap();
        assert!(est.elasticity_se.is_some());
        let max_gap = spread.iter().chain(&b).map(|d| (d.effort_w - d.effort_l).abs()).fold(0.0, f64::max);
        assert!(est.accounted_by_effort_gap.abs() <= est.elasticity_per_encryption.abs() * max_gap + 1e-12);
    }

    #[test]
    fn feature_fits() {
        let mut data = varied(9, 10);
        for (k, d) in data.iter_mut().enumerate() {
            let ml = 1.0 + (k % 7) as f64 * 0.3;
            let mw = ml + (k % 4) as f64 * 0.5;
            d.m_w = Some(mw);
            d.m_l = Some(ml);
            d.r = 0.2 + 0.05 * (mw - ml);
        }
        let f = feature_regressions(&data).unwrap();
        assert!((f.difference.coef("difference").unwrap() - 0.05).abs() < 1e-12);
        assert!(f.both.coef("ratio").unwrap().abs() < 1e-10);
        assert!(feature_regressions(&varied(1, 3)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn covariance_is_symmetric_psd(
            ys in proptest::collection::vec(-1.0..1.0f64, 12),
            xs in proptest::collection::vec(-3.0..3.0f64, 12),
        ) {
            let spread = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - xs.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 0.1);
            let c: Vec<usize> = (0..12).map(|i| i / 3).collect();
            let fit = ols_clustered(&ys, &Regressors::new().with_intercept(12).with("x", xs), &c).unwrap();
            let v = DMatrix::from_fn(2, 2, |i, j| fit.covariance[i][j]);
            prop_assert!((v[(0, 1)] - v[(1, 0)]).abs() < 1e-15);
            let eig = v.symmetric_eigenvalues();
            prop_assert!(eig.iter().all(|&l| l >= -1e-12 * v.norm().max(1.0)));
            prop_assert!(fit.n_clusters <= fit.n_obs);
        }
    }
}
