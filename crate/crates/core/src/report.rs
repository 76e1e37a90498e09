//! JSON reports and the run manifest embedded in each of them.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, DesignMatrix};
use crate::effects::{EffectEstimate, Interval, NuisanceEstimates, TotEstimate, TrimResult};
use crate::error::{Error, Result};
use crate::pipeline::{NuisanceFit, PenaltyChoice, TheoryDiagnostics};
use crate::solver::{GroupKkt, KktReport};

pub const TOOL_NAME: &str = "grplasso-te";
pub const FIT_REPORT_SCHEMA: &str = "grplasso-te/fit-report/1";
pub const EFFECT_REPORT_SCHEMA: &str = "grplasso-te/effect-report/1";
pub const MANIFEST_SCHEMA: &str = "grplasso-te/manifest/1";
pub const COVERAGE_CSV_SCHEMA: &str = "grplasso-te/coverage-csv/1";
pub const REPLICATION_CSV_SCHEMA: &str = "grplasso-te/replication-csv/1";
pub const DATA_CSV_SCHEMA: &str = "grplasso-te/data-csv/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// SHA-256 of a file's bytes, lowercase hex.
pub fn file_digest(path: impl AsRef<Path>) -> Result<InputDigest> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// Everything needed to rerun a command: its resolved settings, the inputs it
/// read (with digests), the seed and the artifacts it wrote.
///
/// Artifact paths are relative to the output directory, so a rerun into a
/// different directory produces identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub tool: String,
    pub version: String,
    pub command: String,
    pub settings: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub seed: u64,
    pub artifacts: Vec<String>,
    /// Artifact name to schema identifier.
    pub schemas: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new<S: Serialize>(command: &str, settings: &S, inputs: Vec<InputDigest>, seed: u64) -> Result<Self> {
        let settings = serde_json::to_value(settings).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            schema: MANIFEST_SCHEMA.into(),
            tool: TOOL_NAME.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            settings,
            inputs,
            seed,
            artifacts: Vec::new(),
            schemas: BTreeMap::new(),
        })
    }

    pub fn add_artifact(&mut self, name: &str, schema: &str) {
        self.artifacts.push(name.into());
        self.schemas.insert(name.into(), schema.into());
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // a report file carries its manifest under "manifest"
        let value = match value.get("manifest") {
            Some(m) => m.clone(),
            None => value,
        };
        serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: not a manifest: {e}", path.display())))
    }

    /// Recompute every input digest and fail on the first mismatch.
    pub fn verify_inputs(&self) -> Result<()> {
        for input in &self.inputs {
            let now = file_digest(&input.path)?;
            if now.sha256 != input.sha256 {
                return Err(Error::InvalidData(format!(
                    "input {} changed since the manifest was written (sha256 {} != {})",
                    input.path, now.sha256, input.sha256
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSummary {
    pub n: usize,
    pub n_levels: usize,
    /// Original treatment value of each dense level.
    pub label_values: Vec<i64>,
    pub group_sizes: Vec<usize>,
    pub covariates: usize,
    pub design_columns: usize,
    pub design_warnings: Vec<String>,
}

impl DataSummary {
    pub fn new(ds: &Dataset, dm: &DesignMatrix) -> Self {
        Self {
            n: ds.n(),
            n_levels: ds.n_levels(),
            label_values: ds.label_values().to_vec(),
            group_sizes: ds.group_sizes(),
            covariates: ds.column_names().len(),
            design_columns: dm.p(),
            design_warnings: dm.warnings().to_vec(),
        }
    }
}

/// Coefficients by design column; `raw` is on the unstandardized column scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientTable {
    pub columns: Vec<String>,
    /// Treatment level of each coefficient position.
    pub levels: Vec<usize>,
    pub standardized: Vec<Vec<f64>>,
    pub raw: Vec<Vec<f64>>,
}

impl CoefficientTable {
    fn new(coef: &Array2<f64>, dm: &DesignMatrix, first_level: usize) -> Self {
        let rows = |a: &Array2<f64>| a.outer_iter().map(|r| r.to_vec()).collect();
        Self {
            columns: dm.names().to_vec(),
            levels: (first_level..first_level + coef.ncols()).collect(),
            standardized: rows(coef),
            raw: rows(&dm.back_transform(coef)),
        }
    }

    /// Standardized coefficient matrix, checked against the design width.
    pub fn standardized_matrix(&self, p: usize) -> Result<Array2<f64>> {
        let k = self.levels.len();
        if self.standardized.len() != p || self.standardized.iter().any(|r| r.len() != k) {
            return Err(Error::Dimension(format!(
                "coefficient table is {}x{k}, design has {p} columns",
                self.standardized.len()
            )));
        }
        Ok(Array2::from_shape_fn((p, k), |(j, t)| self.standardized[j][t]))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KktSummary {
    pub lambda: f64,
    pub max_active_gap: f64,
    /// `None` when every group is active.
    pub min_inactive_slack: Option<f64>,
    pub intercept_gradient: f64,
    pub max_violation: f64,
    pub groups: Vec<GroupKkt>,
}

impl From<&KktReport> for KktSummary {
    fn from(k: &KktReport) -> Self {
        Self {
            lambda: k.lambda,
            max_active_gap: k.max_active_gap,
            min_inactive_slack: k.min_inactive_slack.is_finite().then_some(k.min_inactive_slack),
            intercept_gradient: k.intercept_gradient,
            max_violation: k.max_violation,
            groups: k.groups.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PenalizedSummary {
    pub lambda: f64,
    pub selected: Vec<String>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_max_violation: f64,
    pub coefficients: CoefficientTable,
    pub kkt: KktSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefitSummary {
    pub support: Vec<String>,
    pub forced: Vec<String>,
    pub union: bool,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub coefficients: CoefficientTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Propensity,
    Outcome,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub schema: String,
    pub model: ModelKind,
    pub manifest: RunManifest,
    pub data: DataSummary,
    pub penalty: PenaltyChoice,
    pub penalized: PenalizedSummary,
    pub refit: RefitSummary,
    pub theory_diagnostics: TheoryDiagnostics,
    pub warnings: Vec<String>,
}

fn names_of(dm: &DesignMatrix, cols: &[usize]) -> Vec<String> {
    cols.iter().map(|&j| dm.names()[j].clone()).collect()
}

/// Propensity and outcome reports for one nuisance fit.
pub fn fit_reports(
    fit: &NuisanceFit,
    ds: &Dataset,
    dm: &DesignMatrix,
    manifest: &RunManifest,
) -> Result<(FitReport, FitReport)> {
    let theory = fit.theory_diagnostics(ds, dm)?;
    let data = DataSummary::new(ds, dm);
    let forced = names_of(dm, &fit.forced);
    let prop = FitReport {
        schema: FIT_REPORT_SCHEMA.into(),
        model: ModelKind::Propensity,
        manifest: manifest.clone(),
        data: data.clone(),
        penalty: fit.penalty.clone(),
        penalized: PenalizedSummary {
            lambda: fit.logistic.lambda_d,
            selected: names_of(dm, &fit.logistic.selected),
            objective: fit.logistic.objective,
            iterations: fit.logistic.iterations,
            converged: fit.logistic.converged,
            kkt_max_violation: fit.logistic.kkt_max_violation,
            coefficients: CoefficientTable::new(&fit.logistic.gamma, dm, 1),
            kkt: (&fit.logistic_kkt).into(),
        },
        refit: RefitSummary {
            support: names_of(dm, &fit.logistic_refit.selected),
            forced: forced.clone(),
            union: fit.use_union,
            objective: fit.logistic_refit.objective,
            iterations: fit.logistic_refit.iterations,
            converged: fit.logistic_refit.converged,
            coefficients: CoefficientTable::new(&fit.logistic_refit.gamma, dm, 1),
        },
        theory_diagnostics: theory.clone(),
        warnings: fit.warnings.clone(),
    };
    let out = FitReport {
        schema: FIT_REPORT_SCHEMA.into(),
        model: ModelKind::Outcome,
        manifest: manifest.clone(),
        data,
        penalty: fit.penalty.clone(),
        penalized: PenalizedSummary {
            lambda: fit.linear.lambda_y,
            selected: names_of(dm, &fit.linear.selected),
            objective: fit.linear.objective,
            iterations: fit.linear.iterations,
            converged: fit.linear.converged,
            kkt_max_violation: fit.linear.kkt_max_violation,
            coefficients: CoefficientTable::new(&fit.linear.beta, dm, 0),
            kkt: (&fit.linear_kkt).into(),
        },
        refit: RefitSummary {
            support: names_of(dm, &fit.linear_refit.selected),
            forced,
            union: fit.use_union,
            objective: fit.linear_refit.objective,
            iterations: fit.linear_refit.iterations,
            converged: fit.linear_refit.converged,
            coefficients: CoefficientTable::new(&fit.linear_refit.beta, dm, 0),
        },
        theory_diagnostics: theory,
        warnings: fit.warnings.clone(),
    };
    Ok((prop, out))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContrastResult {
    pub contrast: String,
    pub interval: Interval,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrimSummary {
    pub treated_level: usize,
    pub range: (f64, f64),
    pub comparisons_before: usize,
    pub comparisons_after: usize,
    pub dropped: usize,
}

impl TrimSummary {
    pub fn new(t: &TrimResult, treated_level: usize) -> Self {
        Self {
            treated_level,
            range: t.range,
            comparisons_before: t.comparisons_before,
            comparisons_after: t.comparisons_after,
            dropped: t.dropped.len(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FloorSummary {
    pub floor: f64,
    pub applied: bool,
    /// Units at the floor, per treatment level.
    pub at_floor: Vec<usize>,
}

impl FloorSummary {
    pub fn new(nuis: &NuisanceEstimates) -> Self {
        let f = nuis.floor() * (1.0 + 1e-12);
        Self {
            floor: nuis.floor(),
            applied: nuis.floor_applied(),
            at_floor: (0..nuis.n_levels())
                .map(|t| nuis.phat().column(t).iter().filter(|&&p| p <= f).count())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    Ate,
    Att,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectReport {
    pub schema: String,
    pub estimand: EffectKind,
    pub manifest: RunManifest,
    pub data: DataSummary,
    /// Units used for estimation (after trimming).
    pub n_used: usize,
    pub lambda_d: f64,
    pub lambda_y: f64,
    pub selected_propensity: Vec<String>,
    pub selected_outcome: Vec<String>,
    pub dose_response: Option<EffectEstimate>,
    pub treated: Option<TotEstimate>,
    /// Outer product of influence values, for cross-checking `V̂`.
    pub outer_product_variance: Option<Vec<Vec<f64>>>,
    pub contrasts: Vec<ContrastResult>,
    pub trim: Option<TrimSummary>,
    pub floor: FloorSummary,
    pub warnings: Vec<String>,
}

/// Serialize as pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Files staged in memory and written together, each through a temporary
/// file and a rename, so a failed command leaves no partial output.
#[derive(Debug, Default)]
pub struct ArtifactSet {
    files: Vec<(String, Vec<u8>)>,
}

impl ArtifactSet {
    pub fn push(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn names(&self) -> Vec<String> {
        self.files.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn commit(self, dir: &Path) -> Result<Vec<PathBuf>> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| Error::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let mut staged = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            let tmp = dir.join(format!(".{name}.tmp"));
            let mut f = std::fs::File::create(&tmp).map_err(io(&tmp))?;
            f.write_all(bytes).and_then(|_| f.sync_all()).map_err(io(&tmp))?;
            staged.push((tmp, dir.join(name)));
        }
        for (tmp, dst) in &staged {
            std::fs::rename(tmp, dst).map_err(io(dst))?;
        }
        Ok(staged.into_iter().map(|(_, d)| d).collect())
    }
}
