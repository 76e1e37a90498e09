//! Approximately sparse simulation designs, full-pipeline replications and
//! coverage aggregation.

use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{default_design, Dataset};
use crate::diagnostics::{support_tracking, SupportSizes, SupportSummary};
use crate::effects::{ci_mu, dose_response, estimate_mu, influence_values, Contrast, Estimand, NuisanceEstimates};
use crate::error::{Error, Result};
use crate::pipeline::{fit_nuisances, PipelineConfig};
use crate::stats::mean;

/// AR(1) coefficient of the covariate chain; gives `Σ[j,k] = 2^{−|j−k|}`.
const AR: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    /// Design width including the intercept.
    pub p: usize,
    pub rho_beta: f64,
    pub rho_gamma: f64,
    pub alpha_beta: f64,
    pub alpha_gamma: f64,
    pub seed: u64,
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 4 {
            return Err(Error::Config(format!("p must be at least 4, got {}", self.p)));
        }
        if self.n < 2 {
            return Err(Error::Config(format!("n must be at least 2, got {}", self.n)));
        }
        for (name, v) in [
            ("rho_beta", self.rho_beta),
            ("rho_gamma", self.rho_gamma),
            ("alpha_beta", self.alpha_beta),
            ("alpha_gamma", self.alpha_gamma),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Coefficient vector `ρ·(s, −s, s, ∓2^{−α}, ±3^{−α}, …)` where the three
/// leading entries have sign pattern `lead` and the tail alternates starting
/// with `tail_start`.
fn coefficient_vector(p: usize, rho: f64, alpha: f64, lead: f64, tail_start: f64) -> Vec<f64> {
    (0..p)
        .map(|k| match k {
            0 | 2 => rho * lead,
            1 => -rho * lead,
            _ => {
                let sign = if (k - 3) % 2 == 0 { tail_start } else { -tail_start };
                rho * sign * ((k - 1) as f64).powf(-alpha)
            }
        })
        .collect()
}

/// `β⁰₀ = ρ_β(−1, 1, −1, 2^{−α}, −3^{−α}, …)`.
pub fn beta0(p: usize, rho: f64, alpha: f64) -> Vec<f64> {
    coefficient_vector(p, rho, alpha, -1.0, 1.0)
}

/// `γ⁰ = ρ_γ(1, −1, 1, −2^{−α}, 3^{−α}, …)`.
pub fn gamma0(p: usize, rho: f64, alpha: f64) -> Vec<f64> {
    coefficient_vector(p, rho, alpha, 1.0, -1.0)
}

/// Population quantities of a generated design. Position 0 of every
/// coefficient vector multiplies the intercept; covariates have mean zero,
/// so `μ_t = β⁰_{t,0}` and the true ATE is `β⁰_{1,0} − β⁰_{0,0} = 2ρ_β`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpTruth {
    pub beta0: Vec<f64>,
    pub beta1: Vec<f64>,
    pub gamma: Vec<f64>,
    pub mu: [f64; 2],
    pub ate: f64,
    /// Coefficients above 0.1 in magnitude across β⁰₀ and γ⁰, intercept excluded.
    pub design_sparsity: usize,
}

fn dot1(coef: &[f64], x: ndarray::ArrayView1<'_, f64>) -> f64 {
    coef[0] + coef[1..].iter().zip(x.iter()).map(|(c, v)| c * v).sum::<f64>()
}

impl DgpTruth {
    /// `P[D = 1 | x]` for a raw covariate row (intercept excluded).
    pub fn propensity(&self, x: ndarray::ArrayView1<'_, f64>) -> f64 {
        1.0 / (1.0 + (-dot1(&self.gamma, x)).exp())
    }

    /// `E[Y | D = t, x]`.
    pub fn regression(&self, t: usize, x: ndarray::ArrayView1<'_, f64>) -> f64 {
        dot1(if t == 0 { &self.beta0 } else { &self.beta1 }, x)
    }

    /// True `(p_t(x_i), μ_t(x_i))` matrices for every unit.
    pub fn nuisance_matrices(&self, ds: &Dataset) -> (Array2<f64>, Array2<f64>) {
        let n = ds.n();
        let mut p = Array2::zeros((n, 2));
        let mut m = Array2::zeros((n, 2));
        for (i, row) in ds.x_raw().outer_iter().enumerate() {
            let p1 = self.propensity(row);
            p[[i, 0]] = 1.0 - p1;
            p[[i, 1]] = p1;
            m[[i, 0]] = self.regression(0, row);
            m[[i, 1]] = self.regression(1, row);
        }
        (p, m)
    }
}

/// Draw one sample: covariates, treatment, outcome.
pub fn gen_dgp(cfg: &DgpConfig) -> Result<(Dataset, DgpTruth)> {
    cfg.validate()?;
    let k = cfg.p - 1;
    let b0 = beta0(cfg.p, cfg.rho_beta, cfg.alpha_beta);
    let b1: Vec<f64> = b0.iter().map(|v| -v).collect();
    let g = gamma0(cfg.p, cfg.rho_gamma, cfg.alpha_gamma);
    let design_sparsity = (1..cfg.p).filter(|&j| b0[j].abs() > 0.1 || g[j].abs() > 0.1).count();
    let truth = DgpTruth {
        mu: [b0[0], b1[0]],
        ate: b1[0] - b0[0],
        beta0: b0,
        beta1: b1,
        gamma: g,
        design_sparsity,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let innovation = (1.0 - AR * AR).sqrt();
    let mut x = Array2::zeros((cfg.n, k));
    let mut d = Vec::with_capacity(cfg.n);
    let mut y = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut prev = 0.0;
        for j in 0..k {
            let z: f64 = rng.sample(StandardNormal);
            let v = if j == 0 { z } else { AR * prev + innovation * z };
            x[[i, j]] = v;
            prev = v;
        }
        let row = x.row(i);
        let di = usize::from(rng.gen::<f64>() < truth.propensity(row));
        let e: f64 = rng.sample(StandardNormal);
        y.push(truth.regression(di, row) + e);
        d.push(di);
    }
    let names = (1..=k).map(|j| format!("x{j}")).collect();
    let ds = Dataset::new(y, d, x, names)?;
    Ok((ds, truth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    pub pipeline: PipelineConfig,
    /// Inject the true nuisance functions instead of fitting them.
    pub oracle: bool,
    pub alpha: f64,
    pub record_timing: bool,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            oracle: false,
            alpha: 0.05,
            record_timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub lambda_d: f64,
    pub lambda_y: f64,
    pub u_max: Option<f64>,
    pub selected_d: usize,
    pub selected_y: usize,
    pub converged_d: bool,
    pub converged_y: bool,
    pub max_active_gap_d: f64,
    pub min_inactive_slack_d: f64,
    pub max_active_gap_y: f64,
    pub min_inactive_slack_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub seed: u64,
    pub truth: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub lower: f64,
    pub upper: f64,
    pub covered: bool,
    pub n_comparison: usize,
    pub fit: Option<FitSummary>,
    /// `(μ̂_1 − μ̂_0 − ATE) − E_n[ψ_1 − ψ_0]` at the true nuisances (oracle runs).
    pub oracle_identity_gap: Option<f64>,
    pub floor_applied: bool,
    pub failure: Option<String>,
    pub elapsed_ms: Option<f64>,
}

impl ReplicationRecord {
    fn failed(seed: u64, truth: f64, n_comparison: usize, msg: String) -> Self {
        Self {
            seed,
            truth,
            estimate: f64::NAN,
            std_error: f64::NAN,
            lower: f64::NAN,
            upper: f64::NAN,
            covered: false,
            n_comparison,
            fit: None,
            oracle_identity_gap: None,
            floor_applied: false,
            failure: Some(msg),
            elapsed_ms: None,
        }
    }
}

/// One replication of the full pipeline on a fresh draw with `rep_seed`.
pub fn run_replication(cfg: &DgpConfig, settings: &SimSettings, rep_seed: u64) -> Result<ReplicationRecord> {
    let start = Instant::now();
    let dgp = DgpConfig { seed: rep_seed, ..*cfg };
    let (ds, truth) = gen_dgp(&dgp)?;
    let n0 = ds.group_sizes()[0];
    let contrast = Contrast::parse("mu1-mu0")?;

    let outcome = (|| -> Result<(NuisanceEstimates, Option<FitSummary>, Option<f64>)> {
        if settings.oracle {
            let (p, m) = truth.nuisance_matrices(&ds);
            let nuis = NuisanceEstimates::new(p, m, ds.d(), settings.pipeline.floor)?;
            let est = estimate_mu(&ds, &nuis)?;
            let psi1 = influence_values(&ds, &nuis, Estimand::Mu(1), truth.mu[1])?;
            let psi0 = influence_values(&ds, &nuis, Estimand::Mu(0), truth.mu[0])?;
            let lhs = (est.mu_hat[1] - truth.mu[1]) - (est.mu_hat[0] - truth.mu[0]);
            let rhs = mean(psi1.iter().zip(&psi0).map(|(a, b)| a - b));
            return Ok((nuis, None, Some(lhs - rhs)));
        }
        let dm = default_design(&ds)?;
        let fit = fit_nuisances(&ds, &dm, &settings.pipeline)?;
        let summary = FitSummary {
            lambda_d: fit.penalty.lambda_d,
            lambda_y: fit.penalty.lambda_y,
            u_max: fit.penalty.u_max,
            selected_d: fit.logistic.selected.len(),
            selected_y: fit.linear.selected.len(),
            converged_d: fit.logistic.converged,
            converged_y: fit.linear.converged,
            max_active_gap_d: fit.logistic_kkt.max_active_gap,
            min_inactive_slack_d: fit.logistic_kkt.min_inactive_slack,
            max_active_gap_y: fit.linear_kkt.max_active_gap,
            min_inactive_slack_y: fit.linear_kkt.min_inactive_slack,
        };
        Ok((fit.nuisances, Some(summary), None))
    })();

    let (nuis, fit, gap) = match outcome {
        Ok(v) => v,
        Err(e) => return Ok(ReplicationRecord::failed(rep_seed, truth.ate, n0, e.to_string())),
    };
    let est = dose_response(&ds, &nuis)?;
    let ci = ci_mu(&est, &contrast, settings.alpha)?;
    Ok(ReplicationRecord {
        seed: rep_seed,
        truth: truth.ate,
        estimate: ci.estimate,
        std_error: ci.std_error,
        lower: ci.lower,
        upper: ci.upper,
        covered: ci.lower <= truth.ate && truth.ate <= ci.upper,
        n_comparison: n0,
        fit,
        oracle_identity_gap: gap,
        floor_applied: nuis.floor_applied(),
        failure: None,
        elapsed_ms: settings.record_timing.then(|| start.elapsed().as_secs_f64() * 1e3),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    pub config: DgpConfig,
    pub reps: usize,
    pub failures: usize,
    pub coverage: f64,
    pub mean_length: f64,
    pub mean_bias: f64,
    /// Monte Carlo standard deviation of the estimates.
    pub sd_estimate: f64,
    pub mean_std_error: f64,
    pub mean_comparison: f64,
    pub mean_selected_d: f64,
    pub mean_selected_y: f64,
    pub support: SupportSummary,
    pub records: Vec<ReplicationRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageReport {
    pub cells: Vec<CellSummary>,
}

pub const COVERAGE_CSV_HEADER: &str = "n,p,rho_beta,rho_gamma,alpha_beta,alpha_gamma,seed_base,reps,failures,coverage,mean_length,mean_bias,sd_estimate,mean_std_error,mean_comparison,mean_selected_d,mean_selected_y,q95_selected_d,q95_selected_y";

impl CoverageReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{COVERAGE_CSV_HEADER}")?;
        for c in &self.cells {
            let g = &c.config;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3},{:.3},{:.3},{},{}",
                g.n,
                g.p,
                g.rho_beta,
                g.rho_gamma,
                g.alpha_beta,
                g.alpha_gamma,
                g.seed,
                c.reps,
                c.failures,
                c.coverage,
                c.mean_length,
                c.mean_bias,
                c.sd_estimate,
                c.mean_std_error,
                c.mean_comparison,
                c.mean_selected_d,
                c.mean_selected_y,
                c.support.propensity.q95,
                c.support.outcome.q95,
            )?;
        }
        Ok(())
    }
}

/// Summarize replications of one cell; failed replications are counted but
/// excluded from the averages.
pub fn summarize_cell(config: DgpConfig, records: Vec<ReplicationRecord>, design_sparsity: usize) -> CellSummary {
    let ok: Vec<&ReplicationRecord> = records.iter().filter(|r| r.failure.is_none()).collect();
    let m = ok.len().max(1) as f64;
    let est_mean = ok.iter().map(|r| r.estimate).sum::<f64>() / m;
    let var = ok.iter().map(|r| (r.estimate - est_mean).powi(2)).sum::<f64>() / (ok.len().max(2) - 1) as f64;
    let sizes: Vec<SupportSizes> = ok
        .iter()
        .filter_map(|r| r.fit.as_ref())
        .map(|f| SupportSizes {
            selected_d: f.selected_d,
            selected_y: f.selected_y,
        })
        .collect();
    CellSummary {
        config,
        reps: records.len(),
        failures: records.len() - ok.len(),
        coverage: ok.iter().filter(|r| r.covered).count() as f64 / m,
        mean_length: ok.iter().map(|r| r.upper - r.lower).sum::<f64>() / m,
        mean_bias: ok.iter().map(|r| r.estimate - r.truth).sum::<f64>() / m,
        sd_estimate: var.sqrt(),
        mean_std_error: ok.iter().map(|r| r.std_error).sum::<f64>() / m,
        mean_comparison: ok.iter().map(|r| r.n_comparison as f64).sum::<f64>() / m,
        mean_selected_d: sizes.iter().map(|s| s.selected_d as f64).sum::<f64>() / sizes.len().max(1) as f64,
        mean_selected_y: sizes.iter().map(|s| s.selected_y as f64).sum::<f64>() / sizes.len().max(1) as f64,
        support: support_tracking(&sizes, design_sparsity),
        records,
    }
}

/// Run `reps` replications per cell with seeds `cell.seed + r`, in parallel
/// and reduced in replication order.
pub fn coverage_study(grid: &[DgpConfig], reps: usize, settings: &SimSettings) -> Result<CoverageReport> {
    if reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    if grid.is_empty() {
        return Err(Error::Config("coverage grid is empty".into()));
    }
    let mut cells = Vec::with_capacity(grid.len());
    for (ci, cell) in grid.iter().enumerate() {
        cell.validate()?;
        let records: Vec<ReplicationRecord> = (0..reps as u64)
            .into_par_iter()
            .map(|r| run_replication(cell, settings, cell.seed.wrapping_add(r)))
            .collect::<Result<_>>()?;
        let sparsity = {
            let b = beta0(cell.p, cell.rho_beta, cell.alpha_beta);
            let g = gamma0(cell.p, cell.rho_gamma, cell.alpha_gamma);
            (1..cell.p).filter(|&j| b[j].abs() > 0.1 || g[j].abs() > 0.1).count()
        };
        let summary = summarize_cell(*cell, records, sparsity);
        log::info!(
            "cell {}/{}: coverage {:.3}, bias {:+.4}, failures {}",
            ci + 1,
            grid.len(),
            summary.coverage,
            summary.mean_bias,
            summary.failures
        );
        cells.push(summary);
    }
    Ok(CoverageReport { cells })
}
