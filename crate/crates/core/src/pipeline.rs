//! End-to-end first stage: penalty choice, group-lasso fits, refits and the
//! resulting nuisance estimates.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DesignMatrix};
use crate::diagnostics::{eig_report, overlap_summary, EigReport, GramKind, OverlapLevel};
use crate::effects::{NuisanceEstimates, DEFAULT_FLOOR};
use crate::error::{Error, Result};
use crate::penalty::{
    concentration_probability, cv_lambda, fourth_moment_scale, iterate_noise_scale, lambda_d, lambda_y, ridge_pilot,
    CvResult, LambdaMode, NuisanceModel, PenaltyConfig,
};
use crate::refit::{refit_linear, refit_logistic, RefitConfig, RefitPlan};
use crate::solver::{
    fit_grouplasso_linear, fit_grouplasso_logistic, kkt_residuals, KktReport, LinearGroupLassoFit,
    LogisticGroupLassoFit, SolverConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub penalty: PenaltyConfig,
    pub solver: SolverConfig,
    pub refit: RefitConfig,
    /// Design columns forced into both refits.
    pub forced: Vec<usize>,
    pub use_union: bool,
    pub floor: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            penalty: PenaltyConfig::default(),
            solver: SolverConfig::default(),
            refit: RefitConfig::default(),
            forced: Vec::new(),
            use_union: false,
            floor: DEFAULT_FLOOR,
        }
    }
}

/// Resolve forced column names against the design.
pub fn resolve_forced(dm: &DesignMatrix, names: &[String]) -> Result<Vec<usize>> {
    names.iter().map(|n| dm.column_index(n)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub u_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PenaltyChoice {
    pub mode: LambdaMode,
    pub lambda_d: f64,
    pub lambda_y: f64,
    pub x_max: f64,
    pub u_max: Option<f64>,
    pub concentration_d: f64,
    pub concentration_y: f64,
    pub noise: Option<NoiseSummary>,
    pub cv_d: Option<CvResult>,
    pub cv_y: Option<CvResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryDiagnostics {
    /// Pooled Gram on the propensity refit support (with intercept).
    pub propensity_eig: EigReport,
    /// Per-treatment Grams on the outcome refit support (with intercept).
    pub outcome_eig: Vec<EigReport>,
    pub overlap: Vec<OverlapLevel>,
    /// Above 1 the concentration bound is vacuous.
    pub concentration_vacuous: bool,
}

#[derive(Debug, Clone)]
pub struct NuisanceFit {
    pub penalty: PenaltyChoice,
    pub logistic: LogisticGroupLassoFit,
    pub linear: LinearGroupLassoFit,
    pub logistic_kkt: KktReport,
    pub linear_kkt: KktReport,
    pub logistic_refit: LogisticGroupLassoFit,
    pub linear_refit: LinearGroupLassoFit,
    pub nuisances: NuisanceEstimates,
    pub forced: Vec<usize>,
    pub use_union: bool,
    pub warnings: Vec<String>,
}

impl NuisanceFit {
    /// Penalized fits and the logistic refit met the stopping rule, and the noise scale is not degenerate.
    pub fn converged(&self) -> bool {
        self.logistic.converged
            && self.linear.converged
            && self.logistic_refit.converged
            && self.penalty.noise.as_ref().map_or(true, |n| !n.degenerate)
    }

    pub fn theory_diagnostics(&self, ds: &Dataset, dm: &DesignMatrix) -> Result<TheoryDiagnostics> {
        let with_intercept = |support: &[usize]| -> Vec<usize> {
            let mut s: Vec<usize> = dm.intercept_col().into_iter().chain(support.iter().copied()).collect();
            s.sort_unstable();
            s
        };
        let sd = with_intercept(&self.logistic_refit.selected);
        let gram_d = restricted_gram(dm, None, &sd);
        let local: Vec<usize> = (0..sd.len()).collect();
        let mut propensity_eig = eig_report(&gram_d, &local, GramKind::Pooled)?;
        propensity_eig.support = sd;
        let sy = with_intercept(&self.linear_refit.selected);
        let local: Vec<usize> = (0..sy.len()).collect();
        let mut outcome_eig = Vec::with_capacity(ds.n_levels());
        for t in 0..ds.n_levels() {
            let rows: Vec<usize> = (0..ds.n()).filter(|&i| ds.d()[i] == t).collect();
            let g = restricted_gram(dm, Some(&rows), &sy);
            let mut rep = eig_report(&g, &local, GramKind::PerTreatment(t))?;
            rep.support = sy.clone();
            outcome_eig.push(rep);
        }
        Ok(TheoryDiagnostics {
            propensity_eig,
            outcome_eig,
            overlap: overlap_summary(&self.nuisances),
            concentration_vacuous: self.penalty.concentration_d > 1.0 || self.penalty.concentration_y > 1.0,
        })
    }
}

/// `E[x*_S x*_S']` over `rows` (all rows when `None`).
fn restricted_gram(dm: &DesignMatrix, rows: Option<&[usize]>, cols: &[usize]) -> Array2<f64> {
    let x = dm.x_star().select(Axis(1), cols);
    let x = match rows {
        Some(r) => x.select(Axis(0), r),
        None => x,
    };
    x.t().dot(&x) / x.nrows().max(1) as f64
}

/// Choose λ_D and λ_Y, fit both group-lasso models, refit on the selections
/// and assemble floored nuisance estimates.
pub fn fit_nuisances(ds: &Dataset, dm: &DesignMatrix, cfg: &PipelineConfig) -> Result<NuisanceFit> {
    cfg.penalty.validate()?;
    cfg.solver.validate()?;
    if ds.n() != dm.n() {
        return Err(Error::Dimension("dataset and design row counts differ".into()));
    }
    if dm.p() < 2 {
        return Err(Error::Config("design needs at least one covariate besides the intercept".into()));
    }
    let pc = &cfg.penalty;
    let x_max = dm.x_max();
    let (n, p) = (ds.n(), dm.p());
    let mut warnings = Vec::new();
    let concentration_d = concentration_probability(p, n, pc.delta_d)?;
    let concentration_y = concentration_probability(p, ds.min_group_size().max(2), pc.delta_y)?;

    let mut noise = None;
    let mut cv_d = None;
    let mut cv_y = None;
    let mut u_used = None;
    let mut linear_pre: Option<LinearGroupLassoFit> = None;

    let lam_d = match pc.mode {
        LambdaMode::CrossValidation => {
            let r = cv_lambda(ds, dm, NuisanceModel::Logistic, pc, &cfg.solver)?;
            let l = r.lambda;
            cv_d = Some(r);
            l
        }
        _ => lambda_d(n, p, ds.n_treatments(), x_max, pc.delta_d)?,
    };
    let lam_y = match pc.mode {
        LambdaMode::CrossValidation => {
            let r = cv_lambda(ds, dm, NuisanceModel::Linear, pc, &cfg.solver)?;
            let l = r.lambda;
            cv_y = Some(r);
            l
        }
        LambdaMode::Formula => {
            let u = match pc.u_max {
                Some(u) => u,
                None => {
                    let pilot = ridge_pilot(ds, dm)?;
                    fourth_moment_scale(ds, &pilot.fitted(dm))
                }
            };
            u_used = Some(u);
            lambda_y(ds.min_group_size(), p, ds.n_levels(), x_max, u, pc.delta_y)?
        }
        LambdaMode::Iterative => {
            let r = iterate_noise_scale(ds, dm, pc, &cfg.solver, &cfg.refit, &cfg.forced)?;
            if r.degenerate {
                warnings.push("noise scale estimate is zero; lambda_y collapsed to 0".into());
            } else if !r.converged {
                warnings.push(format!("noise scale iteration did not settle in {} steps", pc.iter_max));
            }
            u_used = Some(r.u_max);
            noise = Some(NoiseSummary {
                u_history: r.u_history.clone(),
                iterations: r.iterations,
                converged: r.converged,
                degenerate: r.degenerate,
            });
            linear_pre = r.fit;
            r.lambda_y
        }
    };

    let logistic = fit_grouplasso_logistic(ds, dm, lam_d, &cfg.solver)?;
    let linear = match linear_pre {
        Some(f) if f.lambda_y == lam_y => f,
        _ => fit_grouplasso_linear(ds, dm, lam_y, &cfg.solver)?,
    };
    if !logistic.converged {
        warnings.push("propensity group lasso did not converge".into());
    }
    if !linear.converged {
        warnings.push("outcome group lasso did not converge".into());
    }
    let logistic_kkt = kkt_residuals(&logistic, ds, dm)?;
    let linear_kkt = kkt_residuals(&linear, ds, dm)?;

    let mut plan_d = RefitPlan::new(&logistic.selected, &cfg.forced);
    let mut plan_y = RefitPlan::new(&linear.selected, &cfg.forced);
    if cfg.use_union {
        plan_d = plan_d.with_union(&linear.selected);
        plan_y = plan_y.with_union(&logistic.selected);
    }
    let logistic_refit = refit_logistic(ds, dm, &plan_d, &cfg.refit)?;
    let linear_refit = refit_linear(ds, dm, &plan_y, &cfg.refit)?;
    if !logistic_refit.converged {
        warnings.push("propensity refit did not reach the gradient tolerance".into());
    }
    let nuisances = NuisanceEstimates::new(logistic_refit.probabilities(dm), linear_refit.fitted(dm), ds.d(), cfg.floor)?;
    if nuisances.floor_applied() {
        warnings.push(format!("propensity floor {} applied", cfg.floor));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(NuisanceFit {
        penalty: PenaltyChoice {
            mode: pc.mode,
            lambda_d: lam_d,
            lambda_y: lam_y,
            x_max,
            u_max: u_used,
            concentration_d,
            concentration_y,
            noise,
            cv_d,
            cv_y,
        },
        logistic,
        linear,
        logistic_kkt,
        linear_kkt,
        logistic_refit,
        linear_refit,
        nuisances,
        forced: cfg.forced.clone(),
        use_union: cfg.use_union,
        warnings,
    })
}
