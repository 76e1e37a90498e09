//! Penalty levels: the closed-form λ_D and λ_Y, the iterative noise-scale
//! update, and stratified cross-validation.

use nalgebra::DMatrix;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DesignMatrix};
use crate::error::{Error, Result};
use crate::refit::{refit_linear, RefitConfig, RefitPlan};
use crate::solver::{
    fit_grouplasso_linear_from, fit_linear_raw, fit_logistic_raw, lambda_max_linear_raw, lambda_max_logistic_raw,
    LinearGroupLassoFit, SolverConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    Formula,
    Iterative,
    CrossValidation,
}

impl std::str::FromStr for LambdaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "formula" => Ok(Self::Formula),
            "iterative" => Ok(Self::Iterative),
            "cv" | "cross_validation" => Ok(Self::CrossValidation),
            other => Err(Error::Config(format!("unknown lambda mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyConfig {
    pub mode: LambdaMode,
    pub delta_d: f64,
    pub delta_y: f64,
    /// Noise scale 𝒰 for formula mode; estimated from the ridge pilot when absent.
    pub u_max: Option<f64>,
    pub cv_folds: usize,
    /// Strictly decreasing λ grid; built from λ_max when absent.
    pub cv_grid: Option<Vec<f64>>,
    pub cv_grid_size: usize,
    /// Smallest automatic grid value as a fraction of λ_max.
    pub cv_min_ratio: f64,
    pub iter_max: usize,
    pub seed: u64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            mode: LambdaMode::Iterative,
            delta_d: 4.5,
            delta_y: 5.0,
            u_max: None,
            cv_folds: 10,
            cv_grid: None,
            cv_grid_size: 20,
            cv_min_ratio: 0.01,
            iter_max: 10,
            seed: 0,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_d > 0.0) || !(self.delta_y > 0.0) {
            return Err(Error::Config("delta_d and delta_y must be positive".into()));
        }
        if self.cv_folds < 2 {
            return Err(Error::Config("cv_folds must be at least 2".into()));
        }
        if let Some(grid) = &self.cv_grid {
            if grid.is_empty() {
                return Err(Error::Config("cv_grid is empty".into()));
            }
            if grid.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
                return Err(Error::Config("cv_grid values must be positive and finite".into()));
            }
            if grid.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::Config("cv_grid must be strictly decreasing".into()));
            }
        }
        if let Some(u) = self.u_max {
            if !(u > 0.0) {
                return Err(Error::Config("u_max must be positive".into()));
            }
        }
        if self.cv_grid_size < 1 || !(self.cv_min_ratio > 0.0 && self.cv_min_ratio < 1.0) {
            return Err(Error::Config("cv_grid_size ≥ 1 and 0 < cv_min_ratio < 1 required".into()));
        }
        Ok(())
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

/// `2𝒳√T/√n · (1 + log(p∨n)^{3/2+δ}/√T)^{1/2}`.
pub fn lambda_d(n: usize, p: usize, t: usize, x_max: f64, delta: f64) -> Result<f64> {
    if n < 1 || t < 1 || p < 2 {
        return Err(Error::Config("lambda_d needs n ≥ 1, T ≥ 1, p ≥ 2".into()));
    }
    check_positive("x_max", x_max)?;
    check_positive("delta_d", delta)?;
    let tf = t as f64;
    let l = (p.max(n) as f64).ln().powf(1.5 + delta);
    Ok(2.0 * x_max * tf.sqrt() / (n as f64).sqrt() * (1.0 + l / tf.sqrt()).sqrt())
}

/// `4𝒳𝒰√T̄/√n̲ · (1 + log(p∨n̲)^{3/2+δ}/√T̄)^{1/2}`.
pub fn lambda_y(n_min: usize, p: usize, t_bar: usize, x_max: f64, u_max: f64, delta: f64) -> Result<f64> {
    if n_min < 1 || t_bar < 2 || p < 2 {
        return Err(Error::Config("lambda_y needs n_min ≥ 1, T+1 ≥ 2, p ≥ 2".into()));
    }
    check_positive("x_max", x_max)?;
    check_positive("delta_y", delta)?;
    if !(u_max >= 0.0) || !u_max.is_finite() {
        return Err(Error::Config(format!("u_max must be nonnegative, got {u_max}")));
    }
    let tb = t_bar as f64;
    let l = (p.max(n_min) as f64).ln().powf(1.5 + delta);
    Ok(4.0 * x_max * u_max * tb.sqrt() / (n_min as f64).sqrt() * (1.0 + l / tb.sqrt()).sqrt())
}

/// `4√(log(2p)(1 + 64 log(12p)²)) / log(p∨n)^{3/2+δ}`; values above 1 make the
/// probability bound vacuous.
pub fn concentration_probability(p: usize, n: usize, delta: f64) -> Result<f64> {
    if p < 1 || n < 2 {
        return Err(Error::Config("concentration_probability needs p ≥ 1, n ≥ 2".into()));
    }
    check_positive("delta", delta)?;
    let pf = p as f64;
    let num = 4.0 * ((2.0 * pf).ln() * (1.0 + 64.0 * (12.0 * pf).ln().powi(2))).sqrt();
    Ok(num / (p.max(n) as f64).ln().powf(1.5 + delta))
}

/// Per-treatment ridge regression with leave-one-out selected penalty.
#[derive(Debug, Clone)]
pub struct RidgePilot {
    /// `p × (T+1)` coefficients on the standardized design.
    pub beta: Array2<f64>,
    /// Chosen ridge penalty per treatment level.
    pub penalties: Vec<f64>,
}

impl RidgePilot {
    pub fn fitted(&self, dm: &DesignMatrix) -> Array2<f64> {
        dm.x_star().dot(&self.beta)
    }
}

/// Ridge pilot: within each treatment group, minimize
/// `Σ (y − a − x'b)² + r‖b‖²` with an unpenalized intercept, the non-intercept
/// columns centered within the group, and `r` chosen by closed-form
/// leave-one-out error over a grid scaled to the largest singular value.
pub fn ridge_pilot(ds: &Dataset, dm: &DesignMatrix) -> Result<RidgePilot> {
    let p = dm.p();
    let pen_cols: Vec<usize> = (0..p).filter(|&j| dm.is_penalized(j)).collect();
    let mut beta = Array2::zeros((p, ds.n_levels()));
    let mut penalties = Vec::with_capacity(ds.n_levels());
    for t in 0..ds.n_levels() {
        let rows: Vec<usize> = (0..ds.n()).filter(|&i| ds.d()[i] == t).collect();
        if rows.is_empty() {
            return Err(Error::EmptyGroup(t));
        }
        let nt = rows.len();
        let y: Vec<f64> = rows.iter().map(|&i| ds.y()[i]).collect();
        let ybar = y.iter().sum::<f64>() / nt as f64;
        if pen_cols.is_empty() || nt < 3 {
            if let Some(j) = dm.intercept_col() {
                beta[[j, t]] = ybar;
            }
            penalties.push(f64::INFINITY);
            continue;
        }
        let sub = dm.x_star().select(Axis(0), &rows).select(Axis(1), &pen_cols);
        let means: Vec<f64> = sub.mean_axis(Axis(0)).expect("nonempty").to_vec();
        let xc = DMatrix::from_fn(nt, pen_cols.len(), |i, j| sub[[i, j]] - means[j]);
        let yc: Vec<f64> = y.iter().map(|v| v - ybar).collect();
        let svd = xc.clone().svd(true, true);
        let u = svd.u.as_ref().expect("requested U");
        let vt = svd.v_t.as_ref().expect("requested V");
        let s = &svd.singular_values;
        let smax2 = s.iter().fold(0.0f64, |a, &b| a.max(b * b)).max(1e-300);
        let uty: Vec<f64> = (0..s.len()).map(|k| (0..nt).map(|i| u[(i, k)] * yc[i]).sum()).collect();
        let mut best = (f64::INFINITY, 0.0);
        for e in 0..=16 {
            let r = smax2 * 10f64.powf(-6.0 + 0.5 * e as f64);
            let shrink: Vec<f64> = s.iter().map(|&sk| sk * sk / (sk * sk + r)).collect();
            let mut cv = 0.0;
            for i in 0..nt {
                let mut fit = 0.0;
                let mut h = 1.0 / nt as f64;
                for k in 0..s.len() {
                    fit += u[(i, k)] * shrink[k] * uty[k];
                    h += u[(i, k)] * u[(i, k)] * shrink[k];
                }
                let resid = (yc[i] - fit) / (1.0 - h).max(1e-12);
                cv += resid * resid;
            }
            if cv < best.0 {
                best = (cv, r);
            }
        }
        let r = best.1;
        penalties.push(r);
        let mut b = vec![0.0; pen_cols.len()];
        for k in 0..s.len() {
            let w = s[k] / (s[k] * s[k] + r) * uty[k];
            for (j, bj) in b.iter_mut().enumerate() {
                *bj += vt[(k, j)] * w;
            }
        }
        let mut intercept = ybar;
        for (a, &j) in pen_cols.iter().enumerate() {
            beta[[j, t]] = b[a];
            intercept -= means[a] * b[a];
        }
        match dm.intercept_col() {
            Some(j) => beta[[j, t]] = intercept,
            None if intercept.abs() > 1e-12 => {
                log::warn!("ridge pilot without an intercept column drops a group offset of {intercept:.3e}");
            }
            None => {}
        }
    }
    Ok(RidgePilot { beta, penalties })
}

/// `E_n[(y_i − μ̂_{d_i}(x_i))⁴]^{1/4}` for an `n × (T+1)` fitted matrix.
pub fn fourth_moment_scale(ds: &Dataset, fitted: &Array2<f64>) -> f64 {
    let m = crate::stats::mean(
        ds.y()
            .iter()
            .zip(ds.d())
            .enumerate()
            .map(|(i, (&y, &t))| (y - fitted[[i, t]]).powi(4)),
    );
    m.powf(0.25)
}

#[derive(Debug, Clone)]
pub struct NoiseScaleResult {
    pub x_max: f64,
    pub u_max: f64,
    pub lambda_y: f64,
    /// 𝒰̂ after each update, starting from the ridge pilot residuals.
    pub u_history: Vec<f64>,
    pub iterations: usize,
    /// The selected set stopped changing before `iter_max`.
    pub converged: bool,
    /// 𝒰̂ = 0: the residuals vanished and λ_Y collapsed to zero.
    pub degenerate: bool,
    /// Penalized fit at the final λ_Y (absent when degenerate).
    pub fit: Option<LinearGroupLassoFit>,
    pub refit: Option<LinearGroupLassoFit>,
}

/// Alternate between 𝒰̂ from the current residuals, λ_Y(𝒰̂), a group-lasso
/// fit and a post-selection refit, starting from the ridge pilot.
pub fn iterate_noise_scale(
    ds: &Dataset,
    dm: &DesignMatrix,
    cfg: &PenaltyConfig,
    solver: &SolverConfig,
    refit_cfg: &RefitConfig,
    forced: &[usize],
) -> Result<NoiseScaleResult> {
    cfg.validate()?;
    let x_max = dm.x_max();
    let pilot = ridge_pilot(ds, dm)?;
    let mut fitted = pilot.fitted(dm);
    let mut u_history = Vec::new();
    let mut fit: Option<LinearGroupLassoFit> = None;
    let mut refit: Option<LinearGroupLassoFit> = None;
    let mut lambda = 0.0;
    let mut converged = false;
    let mut iterations = 0;
    for k in 1..=cfg.iter_max.max(1) {
        iterations = k;
        let u = fourth_moment_scale(ds, &fitted);
        u_history.push(u);
        if u == 0.0 {
            log::warn!("noise scale estimate is zero; lambda_y set to 0");
            return Ok(NoiseScaleResult {
                x_max,
                u_max: 0.0,
                lambda_y: 0.0,
                u_history,
                iterations,
                converged: false,
                degenerate: true,
                fit,
                refit,
            });
        }
        lambda = lambda_y(ds.min_group_size(), dm.p(), ds.n_levels(), x_max, u, cfg.delta_y)?;
        let warm = fit.as_ref().map(|f| f.beta.clone());
        let new_fit = fit_grouplasso_linear_from(ds, dm, lambda, solver, warm.as_ref())?;
        let same = fit.as_ref().is_some_and(|f| f.selected == new_fit.selected);
        let new_refit = refit_linear(ds, dm, &RefitPlan::new(&new_fit.selected, forced), refit_cfg)?;
        fitted = new_refit.fitted(dm);
        fit = Some(new_fit);
        refit = Some(new_refit);
        if same {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("noise scale iteration reached {} steps without a fixed selection", cfg.iter_max);
    }
    let u_max = *u_history.last().expect("at least one update");
    Ok(NoiseScaleResult {
        x_max,
        u_max,
        lambda_y: lambda,
        u_history,
        iterations,
        converged,
        degenerate: false,
        fit,
        refit,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceModel {
    Logistic,
    Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda: f64,
    pub grid: Vec<f64>,
    /// Mean out-of-fold loss per grid value.
    pub mean_loss: Vec<f64>,
    /// Fold index of every observation.
    pub folds: Vec<usize>,
    /// All-zero threshold on the full data.
    pub lambda_max: f64,
}

/// Seeded fold labels stratified by treatment; within each stratum fold sizes
/// differ by at most one.
pub fn stratified_folds(d: &[usize], n_levels: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Config("need at least 2 folds".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0usize; d.len()];
    let mut start = 0;
    for t in 0..n_levels {
        let mut idx: Vec<usize> = (0..d.len()).filter(|&i| d[i] == t).collect();
        if idx.len() < k {
            return Err(Error::FoldMissingLevel { fold: idx.len() % k, label: t });
        }
        idx.shuffle(&mut rng);
        for (pos, &i) in idx.iter().enumerate() {
            folds[i] = (start + pos) % k;
        }
        start += idx.len();
    }
    Ok(folds)
}

fn fold_loss(
    model: NuisanceModel,
    ds: &Dataset,
    dm: &DesignMatrix,
    folds: &[usize],
    fold: usize,
    grid: &[f64],
    solver: &SolverConfig,
) -> Result<Vec<f64>> {
    let train: Vec<usize> = (0..ds.n()).filter(|&i| folds[i] != fold).collect();
    let test: Vec<usize> = (0..ds.n()).filter(|&i| folds[i] == fold).collect();
    let x_train = dm.x_star().select(Axis(0), &train);
    let x_test = dm.x_star().select(Axis(0), &test);
    let d_train: Vec<usize> = train.iter().map(|&i| ds.d()[i]).collect();
    let levels = ds.n_levels();
    for t in 0..levels {
        if !d_train.contains(&t) {
            return Err(Error::FoldMissingLevel { fold, label: t });
        }
    }
    let mut losses = Vec::with_capacity(grid.len());
    match model {
        NuisanceModel::Logistic => {
            let mut warm: Option<Array2<f64>> = None;
            for &lam in grid {
                let fit = fit_logistic_raw(x_train.view(), &d_train, levels - 1, dm.intercept_col(), lam, solver, warm.as_ref())?;
                let probs = fit.probabilities_on(x_test.view());
                let dev = test
                    .iter()
                    .enumerate()
                    .map(|(r, &i)| -2.0 * probs[[r, ds.d()[i]]].max(1e-300).ln())
                    .sum::<f64>()
                    / test.len() as f64;
                losses.push(dev);
                warm = Some(fit.gamma);
            }
        }
        NuisanceModel::Linear => {
            let y_train: Vec<f64> = train.iter().map(|&i| ds.y()[i]).collect();
            let mut warm: Option<Array2<f64>> = None;
            for &lam in grid {
                let fit = fit_linear_raw(x_train.view(), &y_train, &d_train, levels, dm.intercept_col(), lam, solver, warm.as_ref())?;
                let pred = fit.fitted_on(x_test.view());
                let mut total = 0.0;
                for t in 0..levels {
                    let (mut sse, mut cnt) = (0.0, 0usize);
                    for (r, &i) in test.iter().enumerate() {
                        if ds.d()[i] == t {
                            let e = ds.y()[i] - pred[[r, t]];
                            sse += e * e;
                            cnt += 1;
                        }
                    }
                    if cnt > 0 {
                        total += sse / cnt as f64;
                    }
                }
                losses.push(total);
                warm = Some(fit.beta);
            }
        }
    }
    Ok(losses)
}

/// K-fold cross-validated penalty: out-of-fold multinomial deviance for the
/// logistic model, summed per-treatment mean squared error for the linear
/// one. Ties go to the larger λ.
pub fn cv_lambda(
    ds: &Dataset,
    dm: &DesignMatrix,
    model: NuisanceModel,
    cfg: &PenaltyConfig,
    solver: &SolverConfig,
) -> Result<CvResult> {
    cfg.validate()?;
    let lambda_max = match model {
        NuisanceModel::Logistic => lambda_max_logistic_raw(dm.x_star(), ds.d(), ds.n_treatments(), dm.intercept_col()),
        NuisanceModel::Linear => lambda_max_linear_raw(dm.x_star(), ds.y(), ds.d(), ds.n_levels(), dm.intercept_col())?,
    };
    let grid = match &cfg.cv_grid {
        Some(g) => g.clone(),
        None => auto_grid(lambda_max, cfg.cv_grid_size, cfg.cv_min_ratio),
    };
    let folds = stratified_folds(ds.d(), ds.n_levels(), cfg.cv_folds, cfg.seed)?;
    let per_fold: Vec<Vec<f64>> = (0..cfg.cv_folds)
        .into_par_iter()
        .map(|f| fold_loss(model, ds, dm, &folds, f, &grid, solver))
        .collect::<Result<_>>()?;
    let mean_loss: Vec<f64> = (0..grid.len())
        .map(|g| per_fold.iter().map(|l| l[g]).sum::<f64>() / cfg.cv_folds as f64)
        .collect();
    let mut best = 0;
    for g in 1..grid.len() {
        if mean_loss[g] < mean_loss[best] {
            best = g;
        }
    }
    Ok(CvResult {
        lambda: grid[best],
        grid,
        mean_loss,
        folds,
        lambda_max,
    })
}

/// Geometric grid from `lambda_max` down to `min_ratio · lambda_max`.
pub fn auto_grid(lambda_max: f64, size: usize, min_ratio: f64) -> Vec<f64> {
    let top = if lambda_max > 0.0 { lambda_max } else { 1.0 };
    if size == 1 {
        return vec![top];
    }
    (0..size)
        .map(|k| top * min_ratio.powf(k as f64 / (size - 1) as f64))
        .collect()
}
