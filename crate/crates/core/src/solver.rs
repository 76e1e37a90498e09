//! Group-lasso penalized multinomial logistic and grouped least-squares fits.
//!
//! Both programs minimize a smooth loss plus `λ Σ_j ‖coef_{j,·}‖₂` over the
//! non-intercept design columns, where row `j` of the coefficient matrix
//! holds column `j`'s coefficients across all treatment blocks. They are
//! solved by accelerated proximal gradient (FISTA) with backtracking and
//! function-value restart, and certified by the KKT residuals.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DesignMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Relative objective change below which KKT is checked.
    pub tol: f64,
    /// KKT violations must fall below `kkt_tol · λ` (or `kkt_tol` when λ = 0).
    pub kkt_tol: f64,
    pub max_iter: usize,
    /// Lipschitz estimate multiplier on a failed sufficient-decrease test.
    pub backtrack: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            kkt_tol: 1e-5,
            max_iter: 10_000,
            backtrack: 2.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !(self.kkt_tol > 0.0) {
            return Err(Error::Config("solver tolerances must be positive".into()));
        }
        if self.max_iter < 1 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if !(self.backtrack > 1.0) {
            return Err(Error::Config("backtracking factor must exceed 1".into()));
        }
        Ok(())
    }
}

/// Multinomial logit probabilities `(p_0, …, p_T)` for non-baseline indices
/// `m = (m_1, …, m_T)`; the baseline index is fixed at zero.
pub fn mlogit_probs(m: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.len() + 1];
    mlogit_into(m, &mut out);
    out
}

fn mlogit_into(m: &[f64], out: &mut [f64]) {
    let mx = m.iter().fold(0.0f64, |a, &b| a.max(b));
    out[0] = (-mx).exp();
    for (o, &v) in out[1..].iter_mut().zip(m) {
        *o = (v - mx).exp();
    }
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|o| *o /= s);
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|o| *o /= s);
}

/// `log(1 + Σ_t exp(m_t))`.
fn log_normalizer(m: &[f64]) -> f64 {
    let mx = m.iter().fold(0.0f64, |a, &b| a.max(b));
    let s = (-mx).exp() + m.iter().map(|&v| (v - mx).exp()).sum::<f64>();
    mx + s.ln()
}

/// Proximal map of `threshold · ‖·‖₂`: `max(0, 1 − threshold/‖v‖₂) · v`.
pub fn group_prox(v: &[f64], threshold: f64) -> Vec<f64> {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm <= threshold {
        return vec![0.0; v.len()];
    }
    let scale = 1.0 - threshold / norm;
    v.iter().map(|a| a * scale).collect()
}

fn prox_rows(coef: &mut Array2<f64>, penalized: &[bool], threshold: f64) {
    for (mut row, &pen) in coef.axis_iter_mut(Axis(0)).zip(penalized) {
        if !pen {
            continue;
        }
        let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm <= threshold {
            row.fill(0.0);
        } else {
            row *= 1.0 - threshold / norm;
        }
    }
}

fn group_norm_sum(coef: &Array2<f64>, penalized: &[bool]) -> f64 {
    coef.axis_iter(Axis(0))
        .zip(penalized)
        .filter(|(_, &p)| p)
        .map(|(row, _)| row.iter().map(|a| a * a).sum::<f64>().sqrt())
        .sum()
}

fn row_norm(row: ndarray::ArrayView1<'_, f64>) -> f64 {
    row.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// A smooth loss of the form `h(A·coef)`; predictions are linear in `coef`,
/// which lets the solver extrapolate them alongside the momentum step.
pub(crate) trait SmoothLoss {
    fn predict(&self, coef: &Array2<f64>) -> Array2<f64>;
    fn value(&self, pred: &Array2<f64>) -> f64;
    fn value_grad(&self, pred: &Array2<f64>) -> (f64, Array2<f64>);
}

/// Negative multinomial log-likelihood, `−E_n[Σ_t d_t log p̂_t]`.
pub(crate) struct LogisticLoss<'a, 'b> {
    x: ArrayView2<'a, f64>,
    d: &'b [usize],
    n_treat: usize,
}

impl<'a, 'b> LogisticLoss<'a, 'b> {
    pub(crate) fn new(x: ArrayView2<'a, f64>, d: &'b [usize], n_treat: usize) -> Self {
        Self { x, d, n_treat }
    }
}

impl SmoothLoss for LogisticLoss<'_, '_> {
    fn predict(&self, coef: &Array2<f64>) -> Array2<f64> {
        self.x.dot(coef)
    }

    fn value(&self, pred: &Array2<f64>) -> f64 {
        let n = self.d.len() as f64;
        let mut total = 0.0;
        for (row, &di) in pred.axis_iter(Axis(0)).zip(self.d) {
            let m = row.as_slice().expect("contiguous predictions");
            let own = if di == 0 { 0.0 } else { m[di - 1] };
            total += log_normalizer(m) - own;
        }
        total / n
    }

    fn value_grad(&self, pred: &Array2<f64>) -> (f64, Array2<f64>) {
        let n = self.d.len();
        let mut resid = Array2::zeros((n, self.n_treat));
        let mut probs = vec![0.0; self.n_treat + 1];
        let mut total = 0.0;
        for ((row, mut r), &di) in pred.axis_iter(Axis(0)).zip(resid.axis_iter_mut(Axis(0))).zip(self.d) {
            let m = row.as_slice().expect("contiguous predictions");
            let own = if di == 0 { 0.0 } else { m[di - 1] };
            total += log_normalizer(m) - own;
            mlogit_into(m, &mut probs);
            for t in 0..self.n_treat {
                r[t] = probs[t + 1] - if di == t + 1 { 1.0 } else { 0.0 };
            }
        }
        let grad = self.x.t().dot(&resid) / n as f64;
        (total / n as f64, grad)
    }
}

/// `Σ_t E_{n,t}[(y_i − x_i'β_t)²]`; rows are regrouped by treatment so each
/// block is contiguous.
pub(crate) struct LinearLoss {
    blocks: Vec<(Array2<f64>, Vec<f64>)>,
    offsets: Vec<usize>,
    n: usize,
}

impl LinearLoss {
    pub(crate) fn new(x: ArrayView2<'_, f64>, y: &[f64], d: &[usize], n_levels: usize) -> Result<Self> {
        let mut blocks = Vec::with_capacity(n_levels);
        let mut offsets = Vec::with_capacity(n_levels + 1);
        offsets.push(0);
        for t in 0..n_levels {
            let rows: Vec<usize> = (0..d.len()).filter(|&i| d[i] == t).collect();
            if rows.is_empty() {
                return Err(Error::EmptyGroup(t));
            }
            let yt = rows.iter().map(|&i| y[i]).collect();
            blocks.push((x.select(Axis(0), &rows), yt));
            offsets.push(offsets.last().unwrap() + rows.len());
        }
        Ok(Self {
            blocks,
            offsets,
            n: d.len(),
        })
    }

    fn block_lipschitz(&self) -> f64 {
        self.blocks
            .iter()
            .map(|(xt, _)| 2.0 * max_eig_gram(xt.view()))
            .fold(0.0, f64::max)
    }
}

impl SmoothLoss for LinearLoss {
    fn predict(&self, coef: &Array2<f64>) -> Array2<f64> {
        let mut pred = Array2::zeros((self.n, 1));
        for (t, (xt, _)) in self.blocks.iter().enumerate() {
            let part = xt.dot(&coef.column(t));
            pred.slice_mut(ndarray::s![self.offsets[t]..self.offsets[t + 1], 0]).assign(&part);
        }
        pred
    }

    fn value(&self, pred: &Array2<f64>) -> f64 {
        let mut total = 0.0;
        for (t, (_, yt)) in self.blocks.iter().enumerate() {
            let pt = pred.slice(ndarray::s![self.offsets[t]..self.offsets[t + 1], 0]);
            let sse: f64 = pt.iter().zip(yt).map(|(p, y)| (y - p) * (y - p)).sum();
            total += sse / yt.len() as f64;
        }
        total
    }

    fn value_grad(&self, pred: &Array2<f64>) -> (f64, Array2<f64>) {
        let p = self.blocks[0].0.ncols();
        let mut grad = Array2::zeros((p, self.blocks.len()));
        let mut total = 0.0;
        for (t, (xt, yt)) in self.blocks.iter().enumerate() {
            let pt = pred.slice(ndarray::s![self.offsets[t]..self.offsets[t + 1], 0]);
            let nt = yt.len() as f64;
            let resid = ndarray::Array1::from_iter(pt.iter().zip(yt).map(|(p, y)| y - p));
            total += resid.dot(&resid) / nt;
            let g = xt.t().dot(&resid) * (-2.0 / nt);
            grad.column_mut(t).assign(&g);
        }
        (total, grad)
    }
}

/// Largest eigenvalue of `X'X / n` by power iteration.
pub(crate) fn max_eig_gram(x: ArrayView2<'_, f64>) -> f64 {
    let (n, p) = x.dim();
    if n == 0 || p == 0 {
        return 0.0;
    }
    let mut v = ndarray::Array1::from_elem(p, 1.0 / (p as f64).sqrt());
    let mut est = 0.0;
    for _ in 0..100 {
        let w = x.t().dot(&x.dot(&v)) / n as f64;
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        if (norm - est).abs() <= 1e-6 * norm {
            est = norm;
            break;
        }
        est = norm;
    }
    est
}

/// Largest KKT violation of `coef` at gradient `grad` for penalty `lambda`.
fn kkt_violation(coef: &Array2<f64>, grad: &Array2<f64>, lambda: f64, penalized: &[bool]) -> f64 {
    let mut worst = 0.0f64;
    for ((c, g), &pen) in coef.axis_iter(Axis(0)).zip(grad.axis_iter(Axis(0))).zip(penalized) {
        let gn = row_norm(g);
        let v = if !pen {
            gn
        } else {
            let cn = row_norm(c);
            if cn > 0.0 {
                g.iter()
                    .zip(c.iter())
                    .map(|(gi, ci)| {
                        let e = gi + lambda * ci / cn;
                        e * e
                    })
                    .sum::<f64>()
                    .sqrt()
            } else {
                (gn - lambda).max(0.0)
            }
        };
        worst = worst.max(v);
    }
    worst
}

pub(crate) struct FistaOutcome {
    pub coef: Array2<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_max_violation: f64,
    pub trace: Vec<f64>,
}

pub(crate) fn fista<L: SmoothLoss>(
    loss: &L,
    init: Array2<f64>,
    lambda: f64,
    penalized: &[bool],
    lipschitz: f64,
    cfg: &SolverConfig,
) -> FistaOutcome {
    let threshold = cfg.kkt_tol * if lambda > 0.0 { lambda } else { 1.0 };
    let pen = |c: &Array2<f64>| lambda * group_norm_sum(c, penalized);
    let mut lip = if lipschitz > 0.0 { lipschitz } else { 1.0 };

    let mut x = init;
    let mut px = loss.predict(&x);
    let (fx0, gx) = loss.value_grad(&px);
    let mut fx = fx0 + pen(&x);
    let mut trace = vec![fx];
    let mut viol = kkt_violation(&x, &gx, lambda, penalized);
    if viol <= threshold {
        return FistaOutcome {
            coef: x,
            objective: fx,
            iterations: 0,
            converged: true,
            kkt_max_violation: viol,
            trace,
        };
    }

    let mut y = x.clone();
    let mut py = px.clone();
    let mut t = 1.0f64;
    let mut at_restart = true;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.max_iter {
        iterations = it;
        let (fy, gy) = loss.value_grad(&py);
        let (z, pz, fz) = loop {
            let mut z = &y - &(&gy / lip);
            prox_rows(&mut z, penalized, lambda / lip);
            let pz = loss.predict(&z);
            let fz = loss.value(&pz);
            let diff = &z - &y;
            let lin: f64 = Zip::from(&gy).and(&diff).fold(0.0, |acc, g, d| acc + g * d);
            let sq: f64 = diff.iter().map(|v| v * v).sum();
            let bound = fy + lin + 0.5 * lip * sq;
            if fz <= bound + 1e-12 * fy.abs().max(1.0) || !fz.is_finite() && lip > 1e300 {
                break (z, pz, fz);
            }
            lip *= cfg.backtrack;
        };
        let fz_total = fz + pen(&z);
        if fz_total > fx {
            if at_restart {
                // a plain proximal step no longer decreases: numerical floor
                let (_, gx) = loss.value_grad(&px);
                viol = kkt_violation(&x, &gx, lambda, penalized);
                converged = viol <= threshold;
                break;
            }
            t = 1.0;
            y = x.clone();
            py = px.clone();
            at_restart = true;
            continue;
        }
        at_restart = false;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        y = &z + &((&z - &x) * beta);
        py = &pz + &((&pz - &px) * beta);
        let rel = (fx - fz_total) / fz_total.abs().max(1.0);
        x = z;
        px = pz;
        fx = fz_total;
        t = t_next;
        trace.push(fx);
        if it % 200 == 0 {
            // limit drift of the extrapolated predictions
            px = loss.predict(&x);
            py = loss.predict(&y);
        }
        if rel < cfg.tol {
            let (_, gx) = loss.value_grad(&px);
            viol = kkt_violation(&x, &gx, lambda, penalized);
            if viol <= threshold {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        let (_, gx) = loss.value_grad(&px);
        viol = kkt_violation(&x, &gx, lambda, penalized);
    }
    let (f_final, _) = loss.value_grad(&loss.predict(&x));
    FistaOutcome {
        objective: f_final + pen(&x),
        coef: x,
        iterations,
        converged,
        kkt_max_violation: viol,
        trace,
    }
}

fn penalized_mask(p: usize, intercept: Option<usize>) -> Vec<bool> {
    (0..p).map(|j| Some(j) != intercept).collect()
}

fn selected_rows(coef: &Array2<f64>, intercept: Option<usize>) -> Vec<usize> {
    coef.axis_iter(Axis(0))
        .enumerate()
        .filter(|(j, row)| Some(*j) != intercept && row.iter().any(|&v| v != 0.0))
        .map(|(j, _)| j)
        .collect()
}

/// Group-lasso multinomial logistic fit for the propensity scores.
#[derive(Debug, Clone)]
pub struct LogisticGroupLassoFit {
    /// `p × T` coefficients; the baseline treatment is normalized to zero.
    pub gamma: Array2<f64>,
    pub lambda_d: f64,
    /// Non-intercept columns with a nonzero coefficient block.
    pub selected: Vec<usize>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_max_violation: f64,
    /// Penalized objective after every accepted iterate.
    pub trace: Vec<f64>,
}

impl LogisticGroupLassoFit {
    /// `n × (T+1)` fitted probabilities on `x`.
    pub fn probabilities_on(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let eta = x.dot(&self.gamma);
        let t = self.gamma.ncols();
        let mut out = Array2::zeros((x.nrows(), t + 1));
        for (row, mut o) in eta.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            let probs = mlogit_probs(row.as_slice().expect("contiguous"));
            o.assign(&ndarray::Array1::from(probs));
        }
        out
    }

    pub fn probabilities(&self, dm: &DesignMatrix) -> Array2<f64> {
        self.probabilities_on(dm.x_star())
    }
}

/// Group-lasso least-squares fit for the outcome regressions.
#[derive(Debug, Clone)]
pub struct LinearGroupLassoFit {
    /// `p × (T+1)` coefficients, one column per treatment level.
    pub beta: Array2<f64>,
    pub lambda_y: f64,
    pub selected: Vec<usize>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_max_violation: f64,
    pub trace: Vec<f64>,
}

impl LinearGroupLassoFit {
    /// `n × (T+1)` matrix of `μ̂_t(x_i)` for every unit and level.
    pub fn fitted_on(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.beta)
    }

    pub fn fitted(&self, dm: &DesignMatrix) -> Array2<f64> {
        self.fitted_on(dm.x_star())
    }
}

/// Loss value and `p × T` gradient of the multinomial loss at `gamma`.
pub fn logistic_objective(gamma: &Array2<f64>, dm: &DesignMatrix, ds: &Dataset) -> Result<(f64, Array2<f64>)> {
    if gamma.dim() != (dm.p(), ds.n_treatments()) || dm.n() != ds.n() {
        return Err(Error::Dimension("gamma must be p × T on a matching design".into()));
    }
    let loss = LogisticLoss::new(dm.x_star(), ds.d(), ds.n_treatments());
    Ok(loss.value_grad(&loss.predict(gamma)))
}

/// Loss value and `p × (T+1)` gradient of the grouped least-squares loss.
pub fn linear_objective(beta: &Array2<f64>, dm: &DesignMatrix, ds: &Dataset) -> Result<(f64, Array2<f64>)> {
    if beta.dim() != (dm.p(), ds.n_levels()) || dm.n() != ds.n() {
        return Err(Error::Dimension("beta must be p × (T+1) on a matching design".into()));
    }
    let loss = LinearLoss::new(dm.x_star(), ds.y(), ds.d(), ds.n_levels())?;
    Ok(loss.value_grad(&loss.predict(beta)))
}

/// Intercept-only optimum of the multinomial loss: log odds of the shares.
fn logistic_intercept_start(p: usize, d: &[usize], n_treat: usize, intercept: Option<usize>) -> Array2<f64> {
    let mut g = Array2::zeros((p, n_treat));
    if let Some(j) = intercept {
        let mut counts = vec![0usize; n_treat + 1];
        d.iter().for_each(|&t| counts[t] += 1);
        for t in 0..n_treat {
            g[[j, t]] = (counts[t + 1] as f64 / counts[0] as f64).ln();
        }
    }
    g
}

fn linear_intercept_start(p: usize, y: &[f64], d: &[usize], n_levels: usize, intercept: Option<usize>) -> Array2<f64> {
    let mut b = Array2::zeros((p, n_levels));
    if let Some(j) = intercept {
        let mut sums = vec![0.0; n_levels];
        let mut counts = vec![0usize; n_levels];
        for (&yi, &t) in y.iter().zip(d) {
            sums[t] += yi;
            counts[t] += 1;
        }
        for t in 0..n_levels {
            b[[j, t]] = sums[t] / counts[t].max(1) as f64;
        }
    }
    b
}

pub(crate) fn fit_logistic_raw(
    x: ArrayView2<'_, f64>,
    d: &[usize],
    n_treat: usize,
    intercept: Option<usize>,
    lambda: f64,
    cfg: &SolverConfig,
    init: Option<&Array2<f64>>,
) -> Result<LogisticGroupLassoFit> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda_d must be nonnegative, got {lambda}")));
    }
    let p = x.ncols();
    let mut counts = vec![0usize; n_treat + 1];
    d.iter().for_each(|&t| counts[t] += 1);
    if let Some(t) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyGroup(t));
    }
    let loss = LogisticLoss::new(x, d, n_treat);
    let penalized = penalized_mask(p, intercept);
    let start = match init {
        Some(g) => g.clone(),
        None => logistic_intercept_start(p, d, n_treat, intercept),
    };
    let curvature = if n_treat == 1 { 0.25 } else { 0.5 };
    let lip = curvature * max_eig_gram(x);
    let out = fista(&loss, start, lambda, &penalized, lip, cfg);
    if !out.converged {
        log::warn!(
            "logistic group lasso did not converge in {} iterations (KKT violation {:.3e})",
            out.iterations,
            out.kkt_max_violation
        );
    }
    Ok(LogisticGroupLassoFit {
        selected: selected_rows(&out.coef, intercept),
        gamma: out.coef,
        lambda_d: lambda,
        objective: out.objective,
        iterations: out.iterations,
        converged: out.converged,
        kkt_max_violation: out.kkt_max_violation,
        trace: out.trace,
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn fit_linear_raw(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    d: &[usize],
    n_levels: usize,
    intercept: Option<usize>,
    lambda: f64,
    cfg: &SolverConfig,
    init: Option<&Array2<f64>>,
) -> Result<LinearGroupLassoFit> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda_y must be nonnegative, got {lambda}")));
    }
    let p = x.ncols();
    let loss = LinearLoss::new(x, y, d, n_levels)?;
    let penalized = penalized_mask(p, intercept);
    let start = match init {
        Some(b) => b.clone(),
        None => linear_intercept_start(p, y, d, n_levels, intercept),
    };
    let lip = loss.block_lipschitz();
    let out = fista(&loss, start, lambda, &penalized, lip, cfg);
    if !out.converged {
        log::warn!(
            "linear group lasso did not converge in {} iterations (KKT violation {:.3e})",
            out.iterations,
            out.kkt_max_violation
        );
    }
    Ok(LinearGroupLassoFit {
        selected: selected_rows(&out.coef, intercept),
        beta: out.coef,
        lambda_y: lambda,
        objective: out.objective,
        iterations: out.iterations,
        converged: out.converged,
        kkt_max_violation: out.kkt_max_violation,
        trace: out.trace,
    })
}

/// Minimize `ℳ(γ) + λ_D Σ_j ‖γ_{j,·}‖₂` over non-intercept columns.
pub fn fit_grouplasso_logistic(
    ds: &Dataset,
    dm: &DesignMatrix,
    lambda_d: f64,
    cfg: &SolverConfig,
) -> Result<LogisticGroupLassoFit> {
    fit_grouplasso_logistic_from(ds, dm, lambda_d, cfg, None)
}

/// As [`fit_grouplasso_logistic`], warm-started from `init` when given.
pub fn fit_grouplasso_logistic_from(
    ds: &Dataset,
    dm: &DesignMatrix,
    lambda_d: f64,
    cfg: &SolverConfig,
    init: Option<&Array2<f64>>,
) -> Result<LogisticGroupLassoFit> {
    cfg.validate()?;
    check_rows(ds, dm)?;
    fit_logistic_raw(dm.x_star(), ds.d(), ds.n_treatments(), dm.intercept_col(), lambda_d, cfg, init)
}

/// Minimize `Σ_t E_{n,t}[(y − x'β_t)²] + λ_Y Σ_j ‖β_{j,·}‖₂`.
pub fn fit_grouplasso_linear(
    ds: &Dataset,
    dm: &DesignMatrix,
    lambda_y: f64,
    cfg: &SolverConfig,
) -> Result<LinearGroupLassoFit> {
    fit_grouplasso_linear_from(ds, dm, lambda_y, cfg, None)
}

pub fn fit_grouplasso_linear_from(
    ds: &Dataset,
    dm: &DesignMatrix,
    lambda_y: f64,
    cfg: &SolverConfig,
    init: Option<&Array2<f64>>,
) -> Result<LinearGroupLassoFit> {
    cfg.validate()?;
    check_rows(ds, dm)?;
    fit_linear_raw(
        dm.x_star(),
        ds.y(),
        ds.d(),
        ds.n_levels(),
        dm.intercept_col(),
        lambda_y,
        cfg,
        init,
    )
}

fn check_rows(ds: &Dataset, dm: &DesignMatrix) -> Result<()> {
    if ds.n() != dm.n() {
        return Err(Error::Dimension(format!("dataset has {} rows, design has {}", ds.n(), dm.n())));
    }
    Ok(())
}

/// Smallest penalty that zeros every non-intercept group of the logistic fit.
pub(crate) fn lambda_max_logistic_raw(x: ArrayView2<'_, f64>, d: &[usize], n_treat: usize, intercept: Option<usize>) -> f64 {
    let start = logistic_intercept_start(x.ncols(), d, n_treat, intercept);
    let loss = LogisticLoss::new(x, d, n_treat);
    let (_, grad) = loss.value_grad(&loss.predict(&start));
    max_penalized_norm(&grad, intercept)
}

pub(crate) fn lambda_max_linear_raw(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    d: &[usize],
    n_levels: usize,
    intercept: Option<usize>,
) -> Result<f64> {
    let start = linear_intercept_start(x.ncols(), y, d, n_levels, intercept);
    let loss = LinearLoss::new(x, y, d, n_levels)?;
    let (_, grad) = loss.value_grad(&loss.predict(&start));
    Ok(max_penalized_norm(&grad, intercept))
}

fn max_penalized_norm(grad: &Array2<f64>, intercept: Option<usize>) -> f64 {
    grad.axis_iter(Axis(0))
        .enumerate()
        .filter(|(j, _)| Some(*j) != intercept)
        .map(|(_, g)| row_norm(g))
        .fold(0.0, f64::max)
}

/// All-zero threshold `max_j ‖E_n[x*_j (p̄_t − d_t)]‖₂` at the intercept-only optimum.
pub fn lambda_max_logistic(ds: &Dataset, dm: &DesignMatrix) -> f64 {
    lambda_max_logistic_raw(dm.x_star(), ds.d(), ds.n_treatments(), dm.intercept_col())
}

/// All-zero threshold `max_j ‖(2 E_{n,t}[x*_j (y − ȳ_t)])_t‖₂`.
pub fn lambda_max_linear(ds: &Dataset, dm: &DesignMatrix) -> Result<f64> {
    lambda_max_linear_raw(dm.x_star(), ds.y(), ds.d(), ds.n_levels(), dm.intercept_col())
}

/// KKT status of one design column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupKkt {
    pub column: usize,
    pub active: bool,
    /// `‖score_j‖₂`, where the score is the negative loss gradient.
    pub score_norm: f64,
    /// Active groups: `|‖score_j‖₂ − λ|`.
    pub norm_gap: Option<f64>,
    /// Active groups: `‖score_j − λ coef_j/‖coef_j‖₂‖₂`.
    pub direction_error: Option<f64>,
    /// Inactive groups: `λ − ‖score_j‖₂` (nonnegative at an optimum).
    pub slack: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KktReport {
    pub lambda: f64,
    pub groups: Vec<GroupKkt>,
    /// Norm of the unpenalized intercept's gradient block.
    pub intercept_gradient: f64,
    /// Largest stationarity gap over active groups (0 when none are active).
    pub max_active_gap: f64,
    /// Smallest slack over inactive groups (+∞ when none are inactive).
    pub min_inactive_slack: f64,
    pub max_violation: f64,
}

/// Coefficients whose KKT conditions [`kkt_residuals`] can evaluate.
pub trait KktFit {
    fn coefficients(&self) -> &Array2<f64>;
    fn lambda(&self) -> f64;
    fn gradient(&self, ds: &Dataset, dm: &DesignMatrix) -> Result<Array2<f64>>;
}

impl KktFit for LogisticGroupLassoFit {
    fn coefficients(&self) -> &Array2<f64> {
        &self.gamma
    }
    fn lambda(&self) -> f64 {
        self.lambda_d
    }
    fn gradient(&self, ds: &Dataset, dm: &DesignMatrix) -> Result<Array2<f64>> {
        logistic_objective(&self.gamma, dm, ds).map(|(_, g)| g)
    }
}

impl KktFit for LinearGroupLassoFit {
    fn coefficients(&self) -> &Array2<f64> {
        &self.beta
    }
    fn lambda(&self) -> f64 {
        self.lambda_y
    }
    fn gradient(&self, ds: &Dataset, dm: &DesignMatrix) -> Result<Array2<f64>> {
        linear_objective(&self.beta, dm, ds).map(|(_, g)| g)
    }
}

/// Per-group KKT residuals of a fit on the data it was fitted to.
///
/// For the logistic fit the score is `E_n[x*_j (d_t − p̂_t)]`; for the linear
/// fit it is `2 E_{n,t}[x*_j (y − x*'β_t)]`. Both are compared against λ.
pub fn kkt_residuals<F: KktFit>(fit: &F, ds: &Dataset, dm: &DesignMatrix) -> Result<KktReport> {
    let coef = fit.coefficients();
    let lambda = fit.lambda();
    let grad = fit.gradient(ds, dm)?;
    let mut groups = Vec::with_capacity(dm.p());
    let mut intercept_gradient = 0.0;
    let mut max_active_gap = 0.0f64;
    let mut min_inactive_slack = f64::INFINITY;
    let mut max_violation = 0.0f64;
    for (j, (c, g)) in coef.axis_iter(Axis(0)).zip(grad.axis_iter(Axis(0))).enumerate() {
        let score_norm = row_norm(g);
        if !dm.is_penalized(j) {
            intercept_gradient = score_norm;
            max_violation = max_violation.max(score_norm);
            continue;
        }
        let cn = row_norm(c);
        if cn > 0.0 {
            let dir: f64 = g
                .iter()
                .zip(c.iter())
                .map(|(gi, ci)| {
                    let e = -gi - lambda * ci / cn;
                    e * e
                })
                .sum::<f64>()
                .sqrt();
            max_active_gap = max_active_gap.max(dir);
            max_violation = max_violation.max(dir);
            groups.push(GroupKkt {
                column: j,
                active: true,
                score_norm,
                norm_gap: Some((score_norm - lambda).abs()),
                direction_error: Some(dir),
                slack: None,
            });
        } else {
            let slack = lambda - score_norm;
            min_inactive_slack = min_inactive_slack.min(slack);
            max_violation = max_violation.max((-slack).max(0.0));
            groups.push(GroupKkt {
                column: j,
                active: false,
                score_norm,
                norm_gap: None,
                direction_error: None,
                slack: Some(slack),
            });
        }
    }
    Ok(KktReport {
        lambda,
        groups,
        intercept_gradient,
        max_active_gap,
        min_inactive_slack,
        max_violation,
    })
}
