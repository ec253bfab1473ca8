//! Subcommand implementations. Each writes its artifacts under the
//! configured output directory and removes them again on failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use meritluck::econometrics::{
    bin_means, effort_gap_accounting, effort_gap_accounting_fixed, elasticity_fit, extensive_margin,
    feature_regressions, intensive_margin, intensive_mean, mean_fit, redistribution_gap, write_bin_csv, FitSummary,
    GapDecomposition, RegressionFit,
};
use meritluck::effort::{sample_population, WorkerPopulation};
use meritluck::environments::EnvKind;
use meritluck::experiment::{export_dataset, generate_design, import_dataset, run_study, DecisionRecord, SessionDesign};
use meritluck::meritprob::{
    check_convexity, check_logconcavity, headstart_grid, multiplier_ratio_grid, pi_curve, standard_bins,
    AdvantageKind, PiCurve, CONVEXITY_TOLERANCE,
};
use meritluck::agents::sample_spectator_population;
use meritluck::rng;
use serde::Serialize;

use crate::config::{ArmConfig, Provenance, RunConfig};
use crate::output::{num, sha256_file, tracked, Outputs};

/// Elasticity of redistribution to the winner-loser effort gap used for the
/// fixed-elasticity accounting.
pub const FIXED_EFFORT_ELASTICITY: f64 = -0.003;

const STAGE_POPULATION: u64 = 0x101;
const STAGE_STUDY: u64 = 0x102;

fn name_key(name: &str) -> u64 {
    // FNV-1a: stable across platforms and releases, unlike std's hasher.
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

pub fn population_seed(cfg: &RunConfig) -> u64 {
    rng::derive(cfg.seed, STAGE_POPULATION, 0)
}

/// Study seed of an arm; keyed by name so filtering arms changes nothing.
pub fn study_seed(cfg: &RunConfig, arm: &ArmConfig) -> u64 {
    rng::derive(cfg.seed, STAGE_STUDY, name_key(&arm.name))
}

pub fn load_population(cfg: &RunConfig) -> Result<WorkerPopulation> {
    match &cfg.population_csv {
        Some(p) => Ok(WorkerPopulation::read_csv(p, "configured")?),
        None => Ok(sample_population(&cfg.effort, cfg.n_workers, population_seed(cfg))?),
    }
}

fn grid(kind: AdvantageKind) -> Vec<f64> {
    match kind {
        AdvantageKind::Multiplicative => multiplier_ratio_grid(),
        AdvantageKind::Additive => headstart_grid(),
    }
}

pub fn curve(cfg: &RunConfig, pop: &WorkerPopulation, kind: AdvantageKind) -> Result<PiCurve> {
    Ok(pi_curve(pop, kind, &grid(kind), &cfg.pi_options())?)
}

fn curve_file(kind: AdvantageKind, stem: &str, ext: &str) -> String {
    match kind {
        AdvantageKind::Multiplicative => format!("{stem}.{ext}"),
        AdvantageKind::Additive => format!("{stem}_additive.{ext}"),
    }
}

fn write_curve(cfg: &RunConfig, out: &mut Outputs, curve: &PiCurve) -> Result<()> {
    out.write_with(curve_file(curve.kind, "pi_curve", "csv"), |p| curve.write_csv(p))?;
    let report = check_convexity(curve, CONVEXITY_TOLERANCE)?;
    out.write_json(curve_file(curve.kind, "convexity_report", "json"), &report)?;
    if curve.kind == AdvantageKind::Multiplicative && cfg.effort.is_continuous() && cfg.population_csv.is_none() {
        let report = check_logconcavity(&cfg.effort, &multiplier_ratio_grid())?;
        out.write_json("logconcavity_report.json", &report)?;
    }
    Ok(())
}

/// `pi_curve.csv` and `convexity_report.json` for the configured advantage kind.
pub fn cmd_pi_curve(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    tracked(&cfg.out, |out| {
        let pop = load_population(cfg)?;
        let c = curve(cfg, &pop, cfg.advantage_kind)?;
        write_curve(cfg, out, &c)?;
        Ok(out.files())
    })
}

struct Curves {
    multiplicative: Option<PiCurve>,
    additive: Option<PiCurve>,
}

impl Curves {
    fn build(cfg: &RunConfig, pop: &WorkerPopulation, arms: &[ArmConfig]) -> Result<Self> {
        let need = |k| arms.iter().any(|a| a.curve_kind() == Some(k));
        Ok(Curves {
            multiplicative: if need(AdvantageKind::Multiplicative) {
                Some(curve(cfg, pop, AdvantageKind::Multiplicative)?)
            } else {
                None
            },
            additive: if need(AdvantageKind::Additive) {
                Some(curve(cfg, pop, AdvantageKind::Additive)?)
            } else {
                None
            },
        })
    }

    fn for_arm(&self, arm: &ArmConfig) -> Option<&PiCurve> {
        match arm.curve_kind()? {
            AdvantageKind::Multiplicative => self.multiplicative.as_ref(),
            AdvantageKind::Additive => self.additive.as_ref(),
        }
    }
}

/// The per-spectator designs `run-study` would use, as JSON per arm.
pub fn cmd_design(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    tracked(&cfg.out, |out| {
        let pop = load_population(cfg)?;
        let curves = Curves::build(cfg, &pop, &cfg.arms)?;
        for arm in &cfg.arms {
            let seed = study_seed(cfg, arm);
            let env = arm.environment(cfg);
            let roster = sample_spectator_population(&arm.mixture(cfg), cfg.n_spectators, seed)?;
            let designs = roster
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let s = rng::derive(seed, rng::tag::SESSION_SEED, i as u64);
                    generate_design(&env, &pop, curves.for_arm(arm), &m.id, s)
                })
                .collect::<meritluck::Result<Vec<SessionDesign>>>()
                .with_context(|| format!("arm `{}`", arm.name))?;
            out.write_json(Path::new(&arm.name).join("designs.json"), &designs)?;
            out.write_json(Path::new(&arm.name).join("spectators.json"), &roster)?;
        }
        Ok(out.files())
    })
}

fn studies(cfg: &RunConfig, pop: &WorkerPopulation, curves: &Curves, out: &mut Outputs) -> Result<Vec<ArmData>> {
    cfg.arms
        .iter()
        .map(|arm| {
            let records = run_study(
                &arm.mixture(cfg),
                &arm.environment(cfg),
                pop,
                curves.for_arm(arm),
                cfg.n_spectators,
                study_seed(cfg, arm),
            )
            .with_context(|| format!("arm `{}`", arm.name))?;
            out.write_with(Path::new(&arm.name).join("decisions.csv"), |p| export_dataset(&records, p))?;
            ArmData::new(&arm.name, records)
        })
        .collect()
}

/// `<arm>/decisions.csv` for every configured arm.
pub fn cmd_run_study(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    tracked(&cfg.out, |out| {
        let pop = load_population(cfg)?;
        let curves = Curves::build(cfg, &pop, &cfg.arms)?;
        studies(cfg, &pop, &curves, out)?;
        Ok(out.files())
    })
}

/// A decision dataset with the arm attributes the analysis groups on.
pub struct ArmData {
    pub name: String,
    pub env: EnvKind,
    pub informed: bool,
    pub records: Vec<DecisionRecord>,
}

impl ArmData {
    pub fn new(name: &str, records: Vec<DecisionRecord>) -> Result<Self> {
        let first = records.first().with_context(|| format!("arm `{name}` has no decisions"))?;
        let (env, informed) = (first.env, first.informed);
        ensure!(
            records.iter().all(|d| d.env == env && d.informed == informed),
            "arm `{name}` mixes environments or information conditions"
        );
        Ok(ArmData {
            name: name.to_string(),
            env,
            informed,
            records,
        })
    }
}

/// Pairs whose gap is reported: same information condition, and either the
/// first arm has outcome luck or both share an environment.
fn comparisons(arms: &[ArmData]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..arms.len() {
        for j in i + 1..arms.len() {
            let (a, b) = (&arms[i], &arms[j]);
            if a.informed == b.informed && (a.env == EnvKind::Outcomes || a.env == b.env) {
                out.push((i, j));
            }
        }
    }
    out
}

#[derive(Serialize)]
struct Decomposition {
    estimated: GapDecomposition,
    fixed_elasticity: GapDecomposition,
}

fn fit_row(arm: &ArmData, fit: &RegressionFit) -> Vec<String> {
    let mut row = vec![arm.name.clone(), arm.env.label().to_string(), arm.informed.to_string()];
    for k in 0..fit.coefficients.len() {
        row.push(num(fit.coefficients[k]));
        row.push(num(fit.ses[k]));
    }
    row.extend([fit.n_obs.to_string(), fit.n_clusters.to_string(), num(fit.r_squared)]);
    row
}

fn analysis(arms: &[ArmData], out: &mut Outputs) -> Result<()> {
    let dir = Path::new("analysis");
    let binning = standard_bins();
    let mut panel_a = Vec::new();
    let mut panel_b = Vec::new();
    let mut panel_c = Vec::new();
    let mut margins = Vec::new();
    let mut feature_rows = Vec::new();
    let mut fits: BTreeMap<String, FitSummary> = BTreeMap::new();
    for arm in arms {
        let ctx = || format!("arm `{}`", arm.name);
        let mean = mean_fit(&arm.records).with_context(ctx)?;
        panel_a.push(fit_row(arm, &mean));
        let el = elasticity_fit(&arm.records, |_| true).with_context(ctx)?;
        panel_b.push(fit_row(arm, &el));
        fits.insert(arm.name.clone(), el.summary());
        let bins = bin_means(&arm.records, &binning).with_context(ctx)?;
        out.write_with(dir.join(format!("bins_{}.csv", arm.name)), |p| write_bin_csv(&bins.levels, p))?;
        let rel = bins.relative_to(bins.levels[0].bin)?;
        for (scale, rows) in [("level", &bins.levels), ("difference_from_first_bin", &rel)] {
            for b in rows {
                panel_c.push(vec![
                    arm.name.clone(),
                    scale.to_string(),
                    b.bin.to_string(),
                    num(b.low),
                    num(b.high),
                    num(b.estimate),
                    num(b.se),
                    b.n.to_string(),
                ]);
            }
        }
        let ext = extensive_margin(&arm.records).with_context(ctx)?;
        let mut row = vec![arm.name.clone(), num(ext.share), num(ext.se), ext.n_spectators.to_string()];
        match (intensive_mean(&arm.records), intensive_margin(&arm.records)) {
            (Ok(m), Ok(f)) => row.extend([num(m.coefficients[0]), num(m.ses[0]), num(f.coefficients[1]), num(f.ses[1])]),
            _ => row.extend(vec![String::new(); 4]),
        }
        margins.push(row);
        if arm.env != EnvKind::Outcomes {
            let ff = feature_regressions(&arm.records).with_context(ctx)?;
            for (model, fit) in [("difference", &ff.difference), ("ratio", &ff.ratio), ("both", &ff.both)] {
                for (k, term) in fit.names.iter().enumerate() {
                    feature_rows.push(vec![
                        arm.name.clone(),
                        model.to_string(),
                        term.clone(),
                        num(fit.coefficients[k]),
                        num(fit.ses[k]),
                    ]);
                }
            }
        }
    }
    let head = ["arm", "env", "informed"];
    let tail = ["n_obs", "n_clusters", "r_squared"];
    let cols = |mid: &[&'static str]| -> Vec<&'static str> { head.iter().chain(mid).chain(&tail).copied().collect() };
    out.write_table(dir.join("table2_panelA.csv"), &cols(&["mean_r", "mean_r_se"]), &panel_a)?;
    out.write_table(dir.join("table2_panelB.csv"), &cols(&["alpha", "alpha_se", "beta", "beta_se"]), &panel_b)?;
    out.write_table(
        dir.join("table2_panelC.csv"),
        &["arm", "scale", "bin", "low", "high", "estimate", "se", "n"],
        &panel_c,
    )?;
    out.write_table(
        dir.join("margins.csv"),
        &[
            "arm",
            "extensive_share",
            "extensive_se",
            "n_spectators",
            "intensive_mean",
            "intensive_mean_se",
            "intensive_beta",
            "intensive_beta_se",
        ],
        &margins,
    )?;
    if !feature_rows.is_empty() {
        out.write_table(dir.join("feature_fits.csv"), &["arm", "model", "term", "estimate", "se"], &feature_rows)?;
    }
    out.write_json(dir.join("fits.json"), &fits)?;

    let mut gap_rows = Vec::new();
    let mut gap_means = Vec::new();
    let mut decomposition: BTreeMap<String, Decomposition> = BTreeMap::new();
    for (i, j) in comparisons(arms) {
        let (a, b) = (&arms[i], &arms[j]);
        let label = format!("{}-vs-{}", a.name, b.name);
        let gap = redistribution_gap(&a.records, &b.records, &binning).with_context(|| label.clone())?;
        for g in &gap.bins {
            gap_rows.push(vec![
                label.clone(),
                g.bin.to_string(),
                num(g.low),
                num(g.high),
                num(g.gap),
                num(g.se),
                g.n_outcomes.to_string(),
                g.n_opportunities.to_string(),
            ]);
        }
        gap_means.push(vec![label.clone(), num(gap.mean_gap), num(gap.mean_gap_se), num(gap.mean_abs_gap())]);
        decomposition.insert(
            label,
            Decomposition {
                estimated: effort_gap_accounting(&a.records, &b.records)?,
                fixed_elasticity: effort_gap_accounting_fixed(&a.records, &b.records, FIXED_EFFORT_ELASTICITY)?,
            },
        );
    }
    out.write_table(
        dir.join("gap_by_bin.csv"),
        &["comparison", "bin", "low", "high", "gap", "se", "n_first", "n_second"],
        &gap_rows,
    )?;
    out.write_table(dir.join("gap_means.csv"), &["comparison", "mean_gap", "se", "mean_abs_bin_gap"], &gap_means)?;
    out.write_json(dir.join("decomposition.json"), &decomposition)?;
    Ok(())
}

/// Reads `inputs` (or every configured arm's `decisions.csv` under the output
/// directory) and writes the analysis tables to `analysis/`.
pub fn cmd_analyze(cfg: &RunConfig, inputs: &[(String, PathBuf)]) -> Result<Vec<PathBuf>> {
    let sources: Vec<(String, PathBuf)> = if inputs.is_empty() {
        cfg.arms
            .iter()
            .map(|a| (a.name.clone(), cfg.out.join(&a.name).join("decisions.csv")))
            .filter(|(_, p)| p.is_file())
            .collect()
    } else {
        inputs.to_vec()
    };
    if sources.is_empty() {
        bail!("no decision datasets found under {}", cfg.out.display());
    }
    let arms = sources
        .iter()
        .map(|(name, path)| {
            let records = import_dataset(path).with_context(|| format!("reading {}", path.display()))?;
            ArmData::new(name, records)
        })
        .collect::<Result<Vec<_>>>()?;
    tracked(&cfg.out, |out| {
        analysis(&arms, out)?;
        Ok(out.files())
    })
}

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    sha256: String,
    bytes: u64,
}

#[derive(Serialize)]
struct StageSeed {
    stage: String,
    seed: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    seed: u64,
    stages: Vec<&'static str>,
    stage_seeds: Vec<StageSeed>,
    provenance: &'a Provenance,
    config: &'a RunConfig,
    outputs: Vec<ManifestEntry>,
}

fn stage<T>(name: &'static str, run: impl FnOnce() -> Result<T>) -> Result<T> {
    run().with_context(|| format!("stage `{name}` failed"))
}

pub const STAGES: [&str; 5] = ["population", "pi_curves", "studies", "analysis", "manifest"];

/// Population, curves, studies and analysis in one pass, plus
/// `manifest.json` listing every artifact with its SHA-256.
pub fn cmd_reproduce(cfg: &RunConfig, provenance: &Provenance) -> Result<Vec<PathBuf>> {
    tracked(&cfg.out, |out| {
        let pop = stage("population", || {
            let pop = load_population(cfg)?;
            out.write_with("population.csv", |p| pop.write_csv(p))?;
            Ok(pop)
        })?;
        let curves = stage("pi_curves", || {
            let all = Curves {
                multiplicative: Some(curve(cfg, &pop, AdvantageKind::Multiplicative)?),
                additive: Some(curve(cfg, &pop, AdvantageKind::Additive)?),
            };
            for c in [&all.multiplicative, &all.additive].into_iter().flatten() {
                write_curve(cfg, out, c)?;
            }
            Ok(all)
        })?;
        let arms = stage("studies", || studies(cfg, &pop, &curves, out))?;
        stage("analysis", || analysis(&arms, out))?;
        stage("manifest", || {
            let outputs = out
                .files()
                .into_iter()
                .map(|rel| {
                    let abs = out.root().join(&rel);
                    Ok(ManifestEntry {
                        path: rel.to_string_lossy().replace('\\', "/"),
                        sha256: sha256_file(&abs)?,
                        bytes: std::fs::metadata(&abs)?.len(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut stage_seeds = vec![StageSeed {
                stage: "population".into(),
                seed: population_seed(cfg),
            }];
            stage_seeds.extend(cfg.arms.iter().map(|a| StageSeed {
                stage: format!("study:{}", a.name),
                seed: study_seed(cfg, a),
            }));
            let manifest = Manifest {
                tool: "meritluck",
                version: env!("CARGO_PKG_VERSION"),
                seed: cfg.seed,
                stages: STAGES.to_vec(),
                stage_seeds,
                provenance,
                config: cfg,
                outputs,
            };
            out.write_json("manifest.json", &manifest)?;
            Ok(())
        })?;
        Ok(out.files())
    })
}
