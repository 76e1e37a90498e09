//! Command-line driver: argument parsing, settings resolution, manifests and
//! exit codes. The binary only forwards `std::env::args` to [`run`].

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{default_design, expand_features, load_csv, Dataset, DesignMatrix, ExpansionSpec};
use crate::effects::{
    ci_mu, ci_tau, dose_response, effects_on_treated, outer_product_variance_mu, outer_product_variance_tau,
    trim_overlap, Contrast, ContrastKind, NuisanceEstimates,
};
use crate::error::{Error, Result};
use crate::penalty::LambdaMode;
use crate::pipeline::{fit_nuisances, resolve_forced, PipelineConfig};
use crate::report::{
    file_digest, fit_reports, to_json_bytes, ArtifactSet, ContrastResult, DataSummary, EffectKind, EffectReport,
    FloorSummary, InputDigest, RunManifest, TrimSummary, COVERAGE_CSV_SCHEMA, DATA_CSV_SCHEMA,
    EFFECT_REPORT_SCHEMA, FIT_REPORT_SCHEMA, MANIFEST_SCHEMA, REPLICATION_CSV_SCHEMA,
};
use crate::simulate::{coverage_study, gen_dgp, CoverageReport, DgpConfig, SimSettings};
use crate::solver::LogisticGroupLassoFit;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_USAGE: i32 = 64;

/// Environment variable read for the default `--threads`.
pub const THREADS_ENV: &str = "GRPLASSO_TE_THREADS";

pub const PROPENSITY_REPORT: &str = "fit_propensity.json";
pub const OUTCOME_REPORT: &str = "fit_outcome.json";
pub const EFFECT_REPORT: &str = "effects.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const COVERAGE_CSV: &str = "coverage.csv";
pub const REPLICATION_CSV: &str = "replications.csv";
pub const DATA_CSV: &str = "data.csv";
pub const TRUTH_JSON: &str = "truth.json";

#[derive(Parser, Debug)]
#[command(
    name = "grplasso-te",
    version,
    about = "Doubly-robust multivalued treatment effects after group-lasso selection",
    after_help = "Exit codes: 0 ok, 2 data or configuration error, 3 numerical warning \
                  (reports are still written), 64 usage error."
)]
pub struct Cli {
    /// Rerun the command recorded in a manifest, or in a report that embeds one.
    #[arg(long, global = true, value_name = "PATH")]
    pub from_manifest: Option<PathBuf>,

    /// Output directory [default: grplasso-te-out, or the manifest's directory
    /// with --from-manifest].
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = THREADS_ENV, value_name = "N")]
    pub threads: Option<usize>,

    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit both nuisance models and write propensity and outcome fit reports.
    Fit(FitArgs),
    /// Dose-response means and average treatment effect contrasts.
    Ate(EffectArgs),
    /// Effects on the treated relative to the baseline level.
    Att(EffectArgs),
    /// Run a simulation grid and write one CSV row per replication.
    Simulate(StudyArgs),
    /// Run a simulation grid and write one CSV row per cell.
    Coverage(StudyArgs),
    /// Draw one dataset from the simulation design.
    Draw(DrawArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long, value_name = "CSV")]
    pub data: PathBuf,
    /// Outcome column name.
    #[arg(long)]
    pub outcome: String,
    /// Treatment column name (nonnegative integer labels).
    #[arg(long)]
    pub treatment: String,
    /// Feature expansion: a spec file, or inline rules separated by `;`
    /// (e.g. "indicators=re74;interactions=true").
    #[arg(long, value_name = "SPEC")]
    pub expand: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Formula,
    Iterative,
    Cv,
}

impl From<ModeArg> for LambdaMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Formula => LambdaMode::Formula,
            ModeArg::Iterative => LambdaMode::Iterative,
            ModeArg::Cv => LambdaMode::CrossValidation,
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct PenaltyArgs {
    /// TOML file with pipeline settings; flags override it.
    #[arg(long, value_name = "TOML")]
    pub config: Option<PathBuf>,
    /// How λ_D and λ_Y are chosen [default: iterative].
    #[arg(long, value_enum)]
    pub lambda_mode: Option<ModeArg>,
    /// Exponent slack δ in λ_D [default: 4.5].
    #[arg(long)]
    pub delta_d: Option<f64>,
    /// Exponent slack δ in λ_Y [default: 5].
    #[arg(long)]
    pub delta_y: Option<f64>,
    /// Noise scale in λ_Y for formula mode; estimated from a ridge pilot when absent.
    #[arg(long)]
    pub u_max: Option<f64>,
    /// Cross-validation folds [default: 10].
    #[arg(long)]
    pub cv_folds: Option<usize>,
    /// Decreasing λ grid, comma separated. Selects cross-validation unless
    /// --lambda-mode is given.
    #[arg(long, value_delimiter = ',', value_name = "L1,L2,...")]
    pub cv_grid: Option<Vec<f64>>,
    /// Automatic grid size [default: 20].
    #[arg(long)]
    pub cv_grid_size: Option<usize>,
    /// Noise-scale iterations [default: 10].
    #[arg(long)]
    pub iter_max: Option<usize>,
    /// Solver iteration cap [default: 10000].
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Relative objective tolerance [default: 1e-8].
    #[arg(long)]
    pub tol: Option<f64>,
    /// Propensity floor [default: 0.001].
    #[arg(long)]
    pub floor: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct RefitArgs {
    /// Design columns forced into both refits (repeatable or comma separated).
    #[arg(long, value_delimiter = ',', value_name = "COLUMN")]
    pub force: Vec<String>,
    /// Refit each model on the union of both selections.
    #[arg(long)]
    pub union: bool,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub penalty: PenaltyArgs,
    #[command(flatten)]
    pub refit: RefitArgs,
    /// Seed for cross-validation folds.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EffectArgs {
    /// Input CSV with a header row.
    #[arg(long, value_name = "CSV", required_unless_present = "fit")]
    pub data: Option<PathBuf>,
    /// Outcome column name.
    #[arg(long, required_unless_present = "fit")]
    pub outcome: Option<String>,
    /// Treatment column name (nonnegative integer labels).
    #[arg(long, required_unless_present = "fit")]
    pub treatment: Option<String>,
    /// Feature expansion spec file or inline rules separated by `;`.
    #[arg(long, value_name = "SPEC")]
    pub expand: Option<String>,
    /// Directory holding fit reports from `fit`; skips refitting.
    #[arg(long, value_name = "DIR", conflicts_with_all = ["data", "outcome", "treatment", "expand"])]
    pub fit: Option<PathBuf>,
    #[command(flatten)]
    pub penalty: PenaltyArgs,
    #[command(flatten)]
    pub refit: RefitArgs,
    /// Seed for cross-validation folds.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Linear contrast such as mu1-mu0 or tau2-tau1 (repeatable)
    /// [default: mu1-mu0 for ate, tau1 for att].
    #[arg(long, value_name = "EXPR")]
    pub contrast: Vec<String>,
    /// Drop comparison units outside the treated units' propensity range.
    #[arg(long)]
    pub trim: bool,
    /// Treatment level whose propensity range defines trimming.
    #[arg(long, default_value_t = 1)]
    pub treated_level: usize,
    /// One minus the confidence level.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Also report the outer product of influence values.
    #[arg(long)]
    pub outer_product: bool,
}

#[derive(Args, Debug)]
pub struct StudyArgs {
    /// TOML grid file.
    #[arg(long, value_name = "TOML")]
    pub grid: PathBuf,
    /// Replications per cell (overrides the grid file).
    #[arg(long)]
    pub reps: Option<usize>,
    /// Base seed (overrides the grid file).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use the true nuisance functions instead of fitting them.
    #[arg(long)]
    pub oracle: bool,
    #[command(flatten)]
    pub penalty: PenaltyArgs,
}

#[derive(Args, Debug)]
pub struct DrawArgs {
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    /// Design width including the intercept.
    #[arg(long, default_value_t = 200)]
    pub p: usize,
    /// Signal scale of both nuisance functions.
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    /// Coefficient decay of both nuisance functions.
    #[arg(long, default_value_t = 2.0)]
    pub alpha: f64,
    #[arg(long)]
    pub rho_gamma: Option<f64>,
    #[arg(long)]
    pub alpha_gamma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// resolved settings, as recorded in manifests

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpandSource {
    Inline(String),
    File(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    pub data: String,
    pub outcome: String,
    pub treatment: String,
    pub expand: Option<ExpandSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSettings {
    pub data: DataSettings,
    pub pipeline: PipelineConfig,
    pub force: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitSource {
    Estimate(FitSettings),
    Reports { dir: String, floor: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectSettings {
    pub source: FitSource,
    pub contrasts: Vec<String>,
    pub trim: bool,
    pub treated_level: usize,
    pub alpha: f64,
    pub outer_product: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySettings {
    pub grid_file: String,
    pub cells: Vec<DgpConfig>,
    pub reps: usize,
    pub seed: u64,
    pub sim: SimSettings,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Resolved {
    Fit(FitSettings),
    Effects(EffectKind, EffectSettings),
    Simulate(StudySettings),
    Coverage(StudySettings),
    Draw(DgpConfig),
}

impl Resolved {
    pub fn command(&self) -> &'static str {
        match self {
            Resolved::Fit(_) => "fit",
            Resolved::Effects(EffectKind::Ate, _) => "ate",
            Resolved::Effects(EffectKind::Att, _) => "att",
            Resolved::Simulate(_) => "simulate",
            Resolved::Coverage(_) => "coverage",
            Resolved::Draw(_) => "draw",
        }
    }

    fn settings_value(&self) -> Result<serde_json::Value> {
        let v = match self {
            Resolved::Fit(s) => serde_json::to_value(s),
            Resolved::Effects(_, s) => serde_json::to_value(s),
            Resolved::Simulate(s) | Resolved::Coverage(s) => serde_json::to_value(s),
            Resolved::Draw(s) => serde_json::to_value(s),
        };
        v.map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_manifest(m: &RunManifest) -> Result<Self> {
        fn de<T: serde::de::DeserializeOwned>(v: &serde_json::Value) -> Result<T> {
            serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("manifest settings: {e}")))
        }
        let s = &m.settings;
        Ok(match m.command.as_str() {
            "fit" => Resolved::Fit(de(s)?),
            "ate" => Resolved::Effects(EffectKind::Ate, de(s)?),
            "att" => Resolved::Effects(EffectKind::Att, de(s)?),
            "simulate" => Resolved::Simulate(de(s)?),
            "coverage" => Resolved::Coverage(de(s)?),
            "draw" => Resolved::Draw(de(s)?),
            other => return Err(Error::Config(format!("manifest records unknown command `{other}`"))),
        })
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn base_pipeline(args: &PenaltyArgs) -> Result<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => PipelineConfig::default(),
    };
    apply_penalty_args(&mut cfg, args);
    Ok(cfg)
}

fn apply_penalty_args(cfg: &mut PipelineConfig, args: &PenaltyArgs) {
    let pc = &mut cfg.penalty;
    if let Some(m) = args.lambda_mode {
        pc.mode = m.into();
    } else if args.cv_grid.is_some() {
        pc.mode = LambdaMode::CrossValidation;
    }
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(pc.delta_d, args.delta_d);
    set!(pc.delta_y, args.delta_y);
    set!(pc.cv_folds, args.cv_folds);
    set!(pc.cv_grid_size, args.cv_grid_size);
    set!(pc.iter_max, args.iter_max);
    set!(cfg.solver.max_iter, args.max_iter);
    set!(cfg.solver.tol, args.tol);
    set!(cfg.floor, args.floor);
    if args.u_max.is_some() {
        cfg.penalty.u_max = args.u_max;
    }
    if args.cv_grid.is_some() {
        cfg.penalty.cv_grid = args.cv_grid.clone();
    }
}

fn expand_source(spec: &Option<String>) -> Option<ExpandSource> {
    spec.as_ref().map(|s| {
        if s.contains('=') {
            ExpandSource::Inline(s.clone())
        } else {
            ExpandSource::File(s.clone())
        }
    })
}

fn fit_settings(data: DataSettings, penalty: &PenaltyArgs, refit: &RefitArgs, seed: u64) -> Result<FitSettings> {
    let mut pipeline = base_pipeline(penalty)?;
    pipeline.penalty.seed = seed;
    pipeline.use_union |= refit.union;
    pipeline.penalty.validate()?;
    pipeline.solver.validate()?;
    Ok(FitSettings {
        data,
        pipeline,
        force: refit.force.clone(),
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellSpec {
    n: usize,
    p: usize,
    rho: Option<f64>,
    rho_beta: Option<f64>,
    rho_gamma: Option<f64>,
    alpha: Option<f64>,
    alpha_beta: Option<f64>,
    alpha_gamma: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProductSpec {
    n: Vec<usize>,
    p: Vec<usize>,
    rho: Vec<f64>,
    alpha: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    reps: Option<usize>,
    seed: Option<u64>,
    alpha: Option<f64>,
    oracle: Option<bool>,
    pipeline: Option<PipelineConfig>,
    #[serde(default)]
    cell: Vec<CellSpec>,
    product: Option<ProductSpec>,
}

/// Seed offset between consecutive cells that do not set their own.
const CELL_SEED_STRIDE: u64 = 1_000_000;

fn parse_grid(text: &str, base_seed: u64) -> Result<(Vec<DgpConfig>, GridFile)> {
    let grid: GridFile = toml::from_str(text).map_err(|e| Error::Config(format!("grid: {e}")))?;
    let mut cells = Vec::new();
    let mut push = |n: usize, p: usize, rb: f64, rg: f64, ab: f64, ag: f64, seed: Option<u64>| {
        let idx = cells.len() as u64;
        cells.push(DgpConfig {
            n,
            p,
            rho_beta: rb,
            rho_gamma: rg,
            alpha_beta: ab,
            alpha_gamma: ag,
            seed: seed.unwrap_or(base_seed.wrapping_add(idx * CELL_SEED_STRIDE)),
        });
    };
    for (k, c) in grid.cell.iter().enumerate() {
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| Error::Config(format!("grid cell {}: set `{name}` or its per-model variant", k + 1)))
        };
        let rb = need(c.rho_beta.or(c.rho), "rho")?;
        let rg = need(c.rho_gamma.or(c.rho), "rho")?;
        let ab = need(c.alpha_beta.or(c.alpha), "alpha")?;
        let ag = need(c.alpha_gamma.or(c.alpha), "alpha")?;
        push(c.n, c.p, rb, rg, ab, ag, c.seed);
    }
    if let Some(pr) = &grid.product {
        for &n in &pr.n {
            for &p in &pr.p {
                for &rho in &pr.rho {
                    for &alpha in &pr.alpha {
                        push(n, p, rho, rho, alpha, alpha, None);
                    }
                }
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::Config("grid defines no cells".into()));
    }
    for (k, c) in cells.iter().enumerate() {
        c.validate().map_err(|e| Error::Config(format!("grid cell {}: {e}", k + 1)))?;
    }
    Ok((cells, grid))
}

fn study_settings(args: &StudyArgs) -> Result<StudySettings> {
    let text = read_text(&args.grid)?;
    let peek: GridFile = toml::from_str(&text).map_err(|e| Error::Config(format!("grid: {e}")))?;
    let seed = args.seed.or(peek.seed).unwrap_or(0);
    let (cells, grid) = parse_grid(&text, seed)?;
    let mut pipeline = match (&args.penalty.config, grid.pipeline) {
        (Some(_), _) => base_pipeline(&args.penalty)?,
        (None, Some(p)) => {
            let mut p = p;
            apply_penalty_args(&mut p, &args.penalty);
            p
        }
        (None, None) => base_pipeline(&args.penalty)?,
    };
    pipeline.penalty.validate()?;
    pipeline.solver.validate()?;
    pipeline.forced.clear();
    let reps = args.reps.or(grid.reps).unwrap_or(100);
    if reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    let alpha = grid.alpha.unwrap_or(0.05);
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(StudySettings {
        grid_file: args.grid.display().to_string(),
        cells,
        reps,
        seed,
        sim: SimSettings {
            pipeline,
            oracle: args.oracle || grid.oracle.unwrap_or(false),
            alpha,
            record_timing: false,
        },
    })
}

fn resolve_command(cmd: &Command) -> Result<Resolved> {
    Ok(match cmd {
        Command::Fit(a) => {
            let data = DataSettings {
                data: a.data.data.display().to_string(),
                outcome: a.data.outcome.clone(),
                treatment: a.data.treatment.clone(),
                expand: expand_source(&a.data.expand),
            };
            Resolved::Fit(fit_settings(data, &a.penalty, &a.refit, a.seed)?)
        }
        Command::Ate(a) | Command::Att(a) => {
            let kind = if matches!(cmd, Command::Ate(_)) { EffectKind::Ate } else { EffectKind::Att };
            let source = match &a.fit {
                Some(dir) => FitSource::Reports {
                    dir: dir.display().to_string(),
                    floor: a.penalty.floor,
                },
                None => {
                    let missing = |what: &str| Error::Config(format!("--{what} is required"));
                    let data = DataSettings {
                        data: a.data.as_ref().ok_or_else(|| missing("data"))?.display().to_string(),
                        outcome: a.outcome.clone().ok_or_else(|| missing("outcome"))?,
                        treatment: a.treatment.clone().ok_or_else(|| missing("treatment"))?,
                        expand: expand_source(&a.expand),
                    };
                    FitSource::Estimate(fit_settings(data, &a.penalty, &a.refit, a.seed)?)
                }
            };
            let contrasts = if a.contrast.is_empty() {
                vec![match kind {
                    EffectKind::Ate => "mu1-mu0".to_string(),
                    EffectKind::Att => "tau1".to_string(),
                }]
            } else {
                a.contrast.clone()
            };
            if !(a.alpha > 0.0 && a.alpha < 1.0) {
                return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", a.alpha)));
            }
            Resolved::Effects(
                kind,
                EffectSettings {
                    source,
                    contrasts,
                    trim: a.trim,
                    treated_level: a.treated_level,
                    alpha: a.alpha,
                    outer_product: a.outer_product,
                },
            )
        }
        Command::Simulate(a) => Resolved::Simulate(study_settings(a)?),
        Command::Coverage(a) => Resolved::Coverage(study_settings(a)?),
        Command::Draw(a) => {
            let cfg = DgpConfig {
                n: a.n,
                p: a.p,
                rho_beta: a.rho,
                rho_gamma: a.rho_gamma.unwrap_or(a.rho),
                alpha_beta: a.alpha,
                alpha_gamma: a.alpha_gamma.unwrap_or(a.alpha),
                seed: a.seed,
            };
            cfg.validate()?;
            Resolved::Draw(cfg)
        }
    })
}

// ---------------------------------------------------------------------------
// execution

/// Staged output of one command.
pub struct Output {
    pub artifacts: ArtifactSet,
    /// Artifacts echoed on standard output.
    pub primary: Vec<String>,
    pub numerical_warning: bool,
}

fn load_inputs(s: &DataSettings, inputs: &mut Vec<InputDigest>) -> Result<(Dataset, DesignMatrix)> {
    inputs.push(file_digest(&s.data)?);
    let ds = load_csv(&s.data, &s.outcome, &s.treatment)?;
    let dm = match &s.expand {
        None => default_design(&ds)?,
        Some(ExpandSource::Inline(text)) => expand_features(&ds, &ExpansionSpec::parse(&text.replace(';', "\n"))?)?,
        Some(ExpandSource::File(path)) => {
            inputs.push(file_digest(path)?);
            expand_features(&ds, &ExpansionSpec::from_file(path)?)?
        }
    };
    for w in dm.warnings() {
        log::warn!("{w}");
    }
    Ok((ds, dm))
}

fn manifest_for(resolved: &Resolved, inputs: Vec<InputDigest>, seed: u64, files: &[(&str, &str)]) -> Result<RunManifest> {
    let mut m = RunManifest::new(resolved.command(), &resolved.settings_value()?, inputs, seed)?;
    for (name, schema) in files {
        m.add_artifact(name, schema);
    }
    m.add_artifact(MANIFEST_FILE, MANIFEST_SCHEMA);
    Ok(m)
}

fn run_fit(resolved: &Resolved, s: &FitSettings) -> Result<Output> {
    let mut inputs = Vec::new();
    let (ds, dm) = load_inputs(&s.data, &mut inputs)?;
    let mut cfg = s.pipeline.clone();
    cfg.forced.extend(resolve_forced(&dm, &s.force)?);
    log::info!("fitting nuisances: n = {}, p = {}, levels = {}", ds.n(), dm.p(), ds.n_levels());
    let fit = fit_nuisances(&ds, &dm, &cfg)?;
    let manifest = manifest_for(
        resolved,
        inputs,
        cfg.penalty.seed,
        &[(PROPENSITY_REPORT, FIT_REPORT_SCHEMA), (OUTCOME_REPORT, FIT_REPORT_SCHEMA)],
    )?;
    let (prop, out) = fit_reports(&fit, &ds, &dm, &manifest)?;
    let mut artifacts = ArtifactSet::default();
    artifacts.push(PROPENSITY_REPORT, to_json_bytes(&prop)?);
    artifacts.push(OUTCOME_REPORT, to_json_bytes(&out)?);
    artifacts.push(MANIFEST_FILE, to_json_bytes(&manifest)?);
    Ok(Output {
        artifacts,
        primary: vec![PROPENSITY_REPORT.into(), OUTCOME_REPORT.into()],
        numerical_warning: !fit.converged(),
    })
}

/// Fitted nuisances plus the fit metadata quoted in effect reports.
struct FittedNuisances {
    ds: Dataset,
    dm: DesignMatrix,
    nuis: NuisanceEstimates,
    lambda_d: f64,
    lambda_y: f64,
    selected_d: Vec<String>,
    selected_y: Vec<String>,
    converged: bool,
    warnings: Vec<String>,
}

fn estimate_nuisances(s: &FitSettings, inputs: &mut Vec<InputDigest>) -> Result<FittedNuisances> {
    let (ds, dm) = load_inputs(&s.data, inputs)?;
    let mut cfg = s.pipeline.clone();
    cfg.forced.extend(resolve_forced(&dm, &s.force)?);
    log::info!("fitting nuisances: n = {}, p = {}, levels = {}", ds.n(), dm.p(), ds.n_levels());
    let fit = fit_nuisances(&ds, &dm, &cfg)?;
    let names = |cols: &[usize]| cols.iter().map(|&j| dm.names()[j].clone()).collect();
    Ok(FittedNuisances {
        lambda_d: fit.penalty.lambda_d,
        lambda_y: fit.penalty.lambda_y,
        selected_d: names(&fit.logistic.selected),
        selected_y: names(&fit.linear.selected),
        converged: fit.converged(),
        warnings: fit.warnings.clone(),
        nuis: fit.nuisances,
        ds,
        dm,
    })
}

fn json_field<'a>(v: &'a serde_json::Value, path: &[&str], file: &Path) -> Result<&'a serde_json::Value> {
    let mut cur = v;
    for key in path {
        cur = cur
            .get(*key)
            .ok_or_else(|| Error::Config(format!("{}: missing `{}`", file.display(), path.join("."))))?;
    }
    Ok(cur)
}

fn json_as<T: serde::de::DeserializeOwned>(v: &serde_json::Value, path: &[&str], file: &Path) -> Result<T> {
    serde_json::from_value(json_field(v, path, file)?.clone())
        .map_err(|e| Error::Config(format!("{}: `{}`: {e}", file.display(), path.join("."))))
}

/// Rebuild nuisances from the refit coefficients stored in fit reports.
fn nuisances_from_reports(dir: &Path, floor: Option<f64>, inputs: &mut Vec<InputDigest>) -> Result<FittedNuisances> {
    let read = |name: &str| -> Result<(PathBuf, serde_json::Value)> {
        let path = dir.join(name);
        let text = read_text(&path)?;
        let v = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok((path, v))
    };
    let (pp, prop) = read(PROPENSITY_REPORT)?;
    let (op, out) = read(OUTCOME_REPORT)?;
    inputs.push(file_digest(&pp)?);
    inputs.push(file_digest(&op)?);
    let manifest: RunManifest = json_as(&prop, &["manifest"], &pp)?;
    let other: RunManifest = json_as(&out, &["manifest"], &op)?;
    if manifest != other {
        return Err(Error::Config(format!("{} and {} come from different runs", pp.display(), op.display())));
    }
    let fs: FitSettings = match Resolved::from_manifest(&manifest)? {
        Resolved::Fit(fs) => fs,
        _ => return Err(Error::Config(format!("{} is not a fit report", pp.display()))),
    };
    let mut fit_inputs = Vec::new();
    let (ds, dm) = load_inputs(&fs.data, &mut fit_inputs)?;
    for (now, then) in fit_inputs.iter().zip(&manifest.inputs) {
        if now != then {
            return Err(Error::InvalidData(format!("{} changed since the fit reports were written", now.path)));
        }
    }
    inputs.extend(fit_inputs);
    let gamma = json_as::<crate::report::CoefficientTable>(&prop, &["refit", "coefficients"], &pp)?
        .standardized_matrix(dm.p())?;
    let beta = json_as::<crate::report::CoefficientTable>(&out, &["refit", "coefficients"], &op)?
        .standardized_matrix(dm.p())?;
    if gamma.ncols() + 1 != ds.n_levels() || beta.ncols() != ds.n_levels() {
        return Err(Error::Dimension("fit report coefficients do not match the treatment levels".into()));
    }
    let logistic = LogisticGroupLassoFit {
        gamma,
        lambda_d: 0.0,
        selected: Vec::new(),
        objective: 0.0,
        iterations: 0,
        converged: true,
        kkt_max_violation: 0.0,
        trace: Vec::new(),
    };
    let phat = logistic.probabilities(&dm);
    let muhat = dm.x_star().dot(&beta);
    let floor = floor.unwrap_or(fs.pipeline.floor);
    let nuis = NuisanceEstimates::new(phat, muhat, ds.d(), floor)?;
    let converged = json_as::<bool>(&prop, &["penalized", "converged"], &pp)?
        && json_as::<bool>(&out, &["penalized", "converged"], &op)?
        && json_as::<bool>(&prop, &["refit", "converged"], &pp)?;
    Ok(FittedNuisances {
        lambda_d: json_as(&prop, &["penalized", "lambda"], &pp)?,
        lambda_y: json_as(&out, &["penalized", "lambda"], &op)?,
        selected_d: json_as(&prop, &["penalized", "selected"], &pp)?,
        selected_y: json_as(&out, &["penalized", "selected"], &op)?,
        converged,
        warnings: json_as(&prop, &["warnings"], &pp)?,
        nuis,
        ds,
        dm,
    })
}

fn run_effects(resolved: &Resolved, kind: EffectKind, s: &EffectSettings) -> Result<Output> {
    let contrasts: Vec<Contrast> = s.contrasts.iter().map(|c| Contrast::parse(c)).collect::<Result<_>>()?;
    let want = match kind {
        EffectKind::Ate => ContrastKind::Mu,
        EffectKind::Att => ContrastKind::Tau,
    };
    if let Some(c) = contrasts.iter().find(|c| c.kind != want) {
        return Err(Error::Contrast(format!("{} does not match the {} estimand", c.text, resolved.command())));
    }
    let mut inputs = Vec::new();
    let (fitted, seed) = match &s.source {
        FitSource::Estimate(fs) => (estimate_nuisances(fs, &mut inputs)?, fs.pipeline.penalty.seed),
        FitSource::Reports { dir, floor } => (nuisances_from_reports(Path::new(dir), *floor, &mut inputs)?, 0),
    };
    let FittedNuisances { ds, dm, nuis, .. } = &fitted;
    // absent levels are data errors; check before any estimation
    let len = match kind {
        EffectKind::Ate => ds.n_levels(),
        EffectKind::Att => ds.n_treatments(),
    };
    for c in &contrasts {
        c.gradient(len)?;
    }
    let data = DataSummary::new(ds, dm);
    let mut warnings = fitted.warnings.clone();
    let (ds, nuis, trim) = if s.trim {
        let t = trim_overlap(ds, nuis, s.treated_level)?;
        log::info!("trimmed {} of {} comparison units", t.dropped.len(), t.comparisons_before);
        let summary = TrimSummary::new(&t, s.treated_level);
        (t.dataset, t.nuisances, Some(summary))
    } else {
        (ds.clone(), nuis.clone(), None)
    };
    let mut results = Vec::with_capacity(contrasts.len());
    let (dose, treated, outer) = match kind {
        EffectKind::Ate => {
            let est = dose_response(&ds, &nuis)?;
            for c in &contrasts {
                results.push(ContrastResult {
                    contrast: c.text.clone(),
                    interval: ci_mu(&est, c, s.alpha)?,
                });
            }
            let outer = if s.outer_product { Some(outer_product_variance_mu(&ds, &nuis, &est)?) } else { None };
            (Some(est), None, outer)
        }
        EffectKind::Att => {
            let tot = effects_on_treated(&ds, &nuis)?;
            for c in &contrasts {
                results.push(ContrastResult {
                    contrast: c.text.clone(),
                    interval: ci_tau(&tot, c, s.alpha)?,
                });
            }
            let outer = if s.outer_product { Some(outer_product_variance_tau(&ds, &nuis, &tot)?) } else { None };
            (None, Some(tot), outer)
        }
    };
    for r in &results {
        if r.interval.degenerate {
            warnings.push(format!("{}: zero estimated variance", r.contrast));
        }
    }
    let manifest = manifest_for(resolved, inputs, seed, &[(EFFECT_REPORT, EFFECT_REPORT_SCHEMA)])?;
    let report = EffectReport {
        schema: EFFECT_REPORT_SCHEMA.into(),
        estimand: kind,
        manifest: manifest.clone(),
        data,
        n_used: ds.n(),
        lambda_d: fitted.lambda_d,
        lambda_y: fitted.lambda_y,
        selected_propensity: fitted.selected_d.clone(),
        selected_outcome: fitted.selected_y.clone(),
        dose_response: dose,
        treated,
        outer_product_variance: outer,
        contrasts: results,
        trim,
        floor: FloorSummary::new(&nuis),
        warnings,
    };
    let mut artifacts = ArtifactSet::default();
    artifacts.push(EFFECT_REPORT, to_json_bytes(&report)?);
    artifacts.push(MANIFEST_FILE, to_json_bytes(&manifest)?);
    Ok(Output {
        artifacts,
        primary: vec![EFFECT_REPORT.into()],
        numerical_warning: !fitted.converged,
    })
}

/// Header of the per-replication CSV.
pub const REPLICATION_CSV_HEADER: &str = "cell,n,p,rho_beta,rho_gamma,alpha_beta,alpha_gamma,seed,truth,estimate,std_error,lower,upper,covered,n_comparison,lambda_d,lambda_y,u_max,selected_d,selected_y,converged_d,converged_y,max_active_gap_d,min_inactive_slack_d,max_active_gap_y,min_inactive_slack_y,floor_applied,failure";

pub fn replication_csv(report: &CoverageReport) -> Vec<u8> {
    use std::fmt::Write as _;
    let mut s = String::new();
    s.push_str(REPLICATION_CSV_HEADER);
    s.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (ci, cell) in report.cells.iter().enumerate() {
        let g = &cell.config;
        for r in &cell.records {
            let f = r.fit.as_ref();
            let failure = r.failure.as_deref().unwrap_or("").replace(['"', ',', '\n'], " ");
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                ci + 1,
                g.n,
                g.p,
                g.rho_beta,
                g.rho_gamma,
                g.alpha_beta,
                g.alpha_gamma,
                r.seed,
                r.truth,
                r.estimate,
                r.std_error,
                r.lower,
                r.upper,
                r.covered,
                r.n_comparison,
                opt(f.map(|f| f.lambda_d)),
                opt(f.map(|f| f.lambda_y)),
                opt(f.and_then(|f| f.u_max)),
                f.map(|f| f.selected_d.to_string()).unwrap_or_default(),
                f.map(|f| f.selected_y.to_string()).unwrap_or_default(),
                f.map(|f| f.converged_d.to_string()).unwrap_or_default(),
                f.map(|f| f.converged_y.to_string()).unwrap_or_default(),
                opt(f.map(|f| f.max_active_gap_d)),
                opt(f.map(|f| f.min_inactive_slack_d).filter(|v| v.is_finite())),
                opt(f.map(|f| f.max_active_gap_y)),
                opt(f.map(|f| f.min_inactive_slack_y).filter(|v| v.is_finite())),
                r.floor_applied,
                failure,
            );
        }
    }
    s.into_bytes()
}

fn run_study(resolved: &Resolved, s: &StudySettings, per_replication: bool) -> Result<Output> {
    let inputs = vec![file_digest(&s.grid_file)?];
    log::info!("{} cells x {} replications", s.cells.len(), s.reps);
    let report = coverage_study(&s.cells, s.reps, &s.sim)?;
    let (name, schema) = if per_replication {
        (REPLICATION_CSV, REPLICATION_CSV_SCHEMA)
    } else {
        (COVERAGE_CSV, COVERAGE_CSV_SCHEMA)
    };
    let bytes = if per_replication {
        replication_csv(&report)
    } else {
        let mut b = Vec::new();
        report
            .write_csv(&mut b)
            .map_err(|source| Error::Io { path: name.into(), source })?;
        b
    };
    let failures: usize = report.cells.iter().map(|c| c.failures).sum();
    if failures > 0 {
        log::warn!("{failures} replications failed");
    }
    let manifest = manifest_for(resolved, inputs, s.seed, &[(name, schema)])?;
    let mut artifacts = ArtifactSet::default();
    artifacts.push(name, bytes);
    artifacts.push(MANIFEST_FILE, to_json_bytes(&manifest)?);
    Ok(Output {
        artifacts,
        primary: vec![name.into()],
        numerical_warning: failures > 0,
    })
}

fn run_draw(resolved: &Resolved, cfg: &DgpConfig) -> Result<Output> {
    use std::fmt::Write as _;
    let (ds, truth) = gen_dgp(cfg)?;
    let mut s = String::from("y,d");
    for name in ds.column_names() {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    for i in 0..ds.n() {
        let _ = write!(s, "{},{}", ds.y()[i], ds.d()[i]);
        for v in ds.x_raw().row(i) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    let manifest = manifest_for(
        resolved,
        Vec::new(),
        cfg.seed,
        &[(DATA_CSV, DATA_CSV_SCHEMA), (TRUTH_JSON, "grplasso-te/truth/1")],
    )?;
    let mut artifacts = ArtifactSet::default();
    artifacts.push(DATA_CSV, s.into_bytes());
    artifacts.push(TRUTH_JSON, to_json_bytes(&truth)?);
    artifacts.push(MANIFEST_FILE, to_json_bytes(&manifest)?);
    Ok(Output {
        artifacts,
        primary: vec![DATA_CSV.into()],
        numerical_warning: false,
    })
}

pub fn execute(resolved: &Resolved) -> Result<Output> {
    match resolved {
        Resolved::Fit(s) => run_fit(resolved, s),
        Resolved::Effects(kind, s) => run_effects(resolved, *kind, s),
        Resolved::Simulate(s) => run_study(resolved, s, true),
        Resolved::Coverage(s) => run_study(resolved, s, false),
        Resolved::Draw(c) => run_draw(resolved, c),
    }
}

fn exit_code(e: &Error) -> i32 {
    if e.is_data_error() {
        EXIT_DATA
    } else {
        EXIT_NUMERICAL
    }
}

/// Parse arguments, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .format_timestamp(None)
        .try_init();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_USAGE;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            log::debug!("thread pool already configured: {e}");
        }
    }

    let (resolved, out_dir) = match (&cli.command, &cli.from_manifest) {
        (Some(_), Some(_)) => {
            eprintln!("error: --from-manifest cannot be combined with a subcommand");
            return EXIT_USAGE;
        }
        (None, None) => {
            eprintln!("error: a subcommand or --from-manifest is required (see --help)");
            return EXIT_USAGE;
        }
        (Some(cmd), None) => match resolve_command(cmd) {
            Ok(r) => (r, cli.out.clone().unwrap_or_else(|| PathBuf::from("grplasso-te-out"))),
            Err(e) => {
                eprintln!("error: {e}");
                return exit_code(&e);
            }
        },
        (None, Some(path)) => {
            let loaded = RunManifest::read(path).and_then(|m| {
                if m.version != env!("CARGO_PKG_VERSION") {
                    log::warn!("manifest written by version {}, running {}", m.version, env!("CARGO_PKG_VERSION"));
                }
                m.verify_inputs()?;
                Resolved::from_manifest(&m)
            });
            match loaded {
                Ok(r) => {
                    let dir = cli.out.clone().unwrap_or_else(|| {
                        path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
                    });
                    (r, dir)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    return exit_code(&e);
                }
            }
        }
    };

    let output = match execute(&resolved) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let primary = output.primary.clone();
    if let Err(e) = output.artifacts.commit(&out_dir) {
        eprintln!("error: {e}");
        return EXIT_DATA;
    }
    for name in primary {
        println!("{}", out_dir.join(name).display());
    }
    if output.numerical_warning {
        log::warn!("finished with numerical warnings; see the report");
        EXIT_NUMERICAL
    } else {
        EXIT_OK
    }
}
