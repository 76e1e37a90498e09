//! Unpenalized refits on a selected support.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DesignMatrix};
use crate::error::{Error, Result};
use crate::solver::{mlogit_probs, LinearGroupLassoFit, LogisticGroupLassoFit};

/// Columns to refit on. The intercept is always added.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefitPlan {
    pub base_selected: Vec<usize>,
    pub forced: Vec<usize>,
    /// Merge `other_selected` (the other nuisance model's selection) in.
    pub use_union: bool,
    pub other_selected: Vec<usize>,
}

impl RefitPlan {
    pub fn new(base_selected: &[usize], forced: &[usize]) -> Self {
        Self {
            base_selected: base_selected.to_vec(),
            forced: forced.to_vec(),
            use_union: false,
            other_selected: Vec::new(),
        }
    }

    pub fn with_union(mut self, other_selected: &[usize]) -> Self {
        self.use_union = true;
        self.other_selected = other_selected.to_vec();
        self
    }

    /// Sorted refit support excluding the intercept.
    pub fn support(&self, dm: &DesignMatrix) -> Result<Vec<usize>> {
        let mut cols: Vec<usize> = self.base_selected.iter().chain(&self.forced).copied().collect();
        if self.use_union {
            cols.extend(&self.other_selected);
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= dm.p()) {
            return Err(Error::Config(format!("refit column {bad} out of range (p = {})", dm.p())));
        }
        cols.retain(|&j| dm.is_penalized(j));
        cols.sort_unstable();
        cols.dedup();
        if cols.len() + 1 > dm.n().saturating_sub(1) {
            return Err(Error::TooLarge(cols.len()));
        }
        Ok(cols)
    }

    fn columns(&self, dm: &DesignMatrix) -> Result<(Vec<usize>, Vec<usize>)> {
        let support = self.support(dm)?;
        let mut all: Vec<usize> = dm.intercept_col().into_iter().chain(support.iter().copied()).collect();
        all.sort_unstable();
        Ok((support, all))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefitConfig {
    /// Smallest admissible eigenvalue of the support Gram matrix.
    pub min_eigenvalue: f64,
    /// Abort when any standardized logistic coefficient exceeds this.
    pub separation_bound: f64,
    pub max_newton: usize,
    pub gradient_tol: f64,
}

impl Default for RefitConfig {
    fn default() -> Self {
        Self {
            min_eigenvalue: 1e-10,
            separation_bound: 30.0,
            max_newton: 100,
            gradient_tol: 1e-10,
        }
    }
}

fn to_nalgebra(x: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[[i, j]])
}

/// Errors naming the columns loading on a near-null Gram direction.
fn check_rank(xs: &DMatrix<f64>, cols: &[usize], dm: &DesignMatrix, min_eig: f64) -> Result<()> {
    let n = xs.nrows().max(1) as f64;
    let gram = xs.transpose() * xs / n;
    let eig = gram.symmetric_eigen();
    let (k, &lo) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty support");
    if lo > min_eig {
        return Ok(());
    }
    let v = eig.eigenvectors.column(k);
    let mut names: Vec<String> = cols
        .iter()
        .zip(v.iter())
        .filter(|(_, c)| c.abs() > 1e-3)
        .map(|(&j, _)| dm.names()[j].clone())
        .collect();
    if names.is_empty() {
        names = cols.iter().map(|&j| dm.names()[j].clone()).collect();
    }
    Err(Error::RankDeficient(names))
}

/// Unpenalized multinomial logistic MLE on `plan`'s support plus intercept,
/// by damped Newton iterations.
pub fn refit_logistic(ds: &Dataset, dm: &DesignMatrix, plan: &RefitPlan, cfg: &RefitConfig) -> Result<LogisticGroupLassoFit> {
    if ds.n() != dm.n() {
        return Err(Error::Dimension("dataset and design row counts differ".into()));
    }
    let (support, cols) = plan.columns(dm)?;
    let n_treat = ds.n_treatments();
    let k = cols.len();
    let n = ds.n();
    let xs = to_nalgebra(dm.x_star().select(Axis(1), &cols).view());
    check_rank(&xs, &cols, dm, cfg.min_eigenvalue)?;

    let d = ds.d();
    let mut coef = DMatrix::<f64>::zeros(k, n_treat);
    if let Some(pos) = dm.intercept_col().and_then(|j| cols.iter().position(|&c| c == j)) {
        let sizes = ds.group_sizes();
        for t in 0..n_treat {
            coef[(pos, t)] = (sizes[t + 1] as f64 / sizes[0] as f64).ln();
        }
    }

    let eval = |coef: &DMatrix<f64>| -> (f64, DMatrix<f64>) {
        let eta = &xs * coef;
        let mut loss = 0.0;
        let mut probs = DMatrix::zeros(n, n_treat + 1);
        for i in 0..n {
            let m: Vec<f64> = (0..n_treat).map(|t| eta[(i, t)]).collect();
            let pr = mlogit_probs(&m);
            loss -= pr[d[i]].max(1e-300).ln();
            for (t, &v) in pr.iter().enumerate() {
                probs[(i, t)] = v;
            }
        }
        (loss / n as f64, probs)
    };

    let (mut loss, mut probs) = eval(&coef);
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    for it in 1..=cfg.max_newton {
        iterations = it;
        // gradient and Hessian of the mean negative log-likelihood
        let mut grad = DVector::zeros(k * n_treat);
        let mut hess = DMatrix::zeros(k * n_treat, k * n_treat);
        for i in 0..n {
            let xi = xs.row(i);
            for t in 0..n_treat {
                let r = probs[(i, t + 1)] - if d[i] == t + 1 { 1.0 } else { 0.0 };
                for a in 0..k {
                    grad[t * k + a] += r * xi[a];
                }
                for s in 0..n_treat {
                    let w = probs[(i, t + 1)] * (if s == t { 1.0 } else { 0.0 } - probs[(i, s + 1)]);
                    if w == 0.0 {
                        continue;
                    }
                    for a in 0..k {
                        let wa = w * xi[a];
                        for b in 0..k {
                            hess[(t * k + a, s * k + b)] += wa * xi[b];
                        }
                    }
                }
            }
        }
        grad /= n as f64;
        hess /= n as f64;
        grad_norm = grad.norm();
        if grad_norm <= cfg.gradient_tol {
            converged = true;
            break;
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                // nearly singular curvature: fall back to a ridge-damped step
                let damp = DMatrix::identity(k * n_treat, k * n_treat) * 1e-8;
                match (hess + damp).cholesky() {
                    Some(ch) => ch.solve(&grad),
                    None => grad.clone(),
                }
            }
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let mut trial = coef.clone();
            for t in 0..n_treat {
                for a in 0..k {
                    trial[(a, t)] -= scale * step[t * k + a];
                }
            }
            let (l, pr) = eval(&trial);
            if l <= loss {
                coef = trial;
                loss = l;
                probs = pr;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        let biggest = coef.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if biggest > cfg.separation_bound {
            let (a, _) = (0..k * n_treat)
                .map(|idx| (idx % k, coef[(idx % k, idx / k)].abs()))
                .max_by(|x, y| x.1.total_cmp(&y.1))
                .expect("nonempty");
            return Err(Error::Separation {
                column: dm.names()[cols[a]].clone(),
                value: biggest,
            });
        }
        if !accepted {
            // no decrease possible along the Newton direction
            converged = grad_norm <= 1e-7;
            break;
        }
    }

    let mut gamma = Array2::zeros((dm.p(), n_treat));
    for (a, &j) in cols.iter().enumerate() {
        for t in 0..n_treat {
            gamma[[j, t]] = coef[(a, t)];
        }
    }
    if !converged {
        log::warn!("logistic refit stopped after {iterations} Newton steps (gradient norm {grad_norm:.3e})");
    }
    Ok(LogisticGroupLassoFit {
        gamma,
        lambda_d: 0.0,
        selected: support,
        objective: loss,
        iterations,
        converged,
        kkt_max_violation: grad_norm,
        trace: Vec::new(),
    })
}

/// Per-treatment least squares on `plan`'s support plus intercept.
pub fn refit_linear(ds: &Dataset, dm: &DesignMatrix, plan: &RefitPlan, cfg: &RefitConfig) -> Result<LinearGroupLassoFit> {
    if ds.n() != dm.n() {
        return Err(Error::Dimension("dataset and design row counts differ".into()));
    }
    let (support, cols) = plan.columns(dm)?;
    let levels = ds.n_levels();
    let mut beta = Array2::zeros((dm.p(), levels));
    let mut objective = 0.0;
    let mut worst_grad = 0.0f64;
    for t in 0..levels {
        let rows: Vec<usize> = (0..ds.n()).filter(|&i| ds.d()[i] == t).collect();
        if rows.is_empty() {
            return Err(Error::EmptyGroup(t));
        }
        if cols.len() > rows.len() {
            return Err(Error::RankDeficient(cols.iter().map(|&j| dm.names()[j].clone()).collect()));
        }
        let sub = dm.x_star().select(Axis(0), &rows);
        let xt = to_nalgebra(sub.select(Axis(1), &cols).view());
        check_rank(&xt, &cols, dm, cfg.min_eigenvalue)?;
        let yt = DVector::from_iterator(rows.len(), rows.iter().map(|&i| ds.y()[i]));
        let xty = xt.transpose() * &yt;
        let coef = (xt.transpose() * &xt)
            .cholesky()
            .ok_or_else(|| Error::RankDeficient(cols.iter().map(|&j| dm.names()[j].clone()).collect()))?
            .solve(&xty);
        // one step of iterative refinement
        let resid = &yt - &xt * &coef;
        let correction = (xt.transpose() * &xt).cholesky().expect("factored above").solve(&(xt.transpose() * &resid));
        let coef = coef + correction;
        let resid = &yt - &xt * &coef;
        let nt = rows.len() as f64;
        objective += resid.norm_squared() / nt;
        let g = xt.transpose() * &resid * (2.0 / nt);
        worst_grad = worst_grad.max(g.amax());
        for (a, &j) in cols.iter().enumerate() {
            beta[[j, t]] = coef[a];
        }
    }
    Ok(LinearGroupLassoFit {
        beta,
        lambda_y: 0.0,
        selected: support,
        objective,
        iterations: 1,
        converged: true,
        kkt_max_violation: worst_grad,
        trace: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::default_design;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem(n: usize, k: usize, seed: u64) -> (Dataset, DesignMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Array2<f64> = Array2::from_shape_fn((n, k), |_| rng.gen_range(-1.0..1.0));
        let d: Vec<usize> = (0..n)
            .map(|i| {
                let p = 1.0 / (1.0 + (-x[[i, 0]]).exp());
                usize::from(rng.gen::<f64>() < p)
            })
            .collect();
        let y = (0..n).map(|i| x[[i, 1]] + d[i] as f64 + rng.gen_range(-0.5..0.5)).collect();
        let ds = Dataset::new(y, d, x, (0..k).map(|j| format!("x{j}")).collect()).unwrap();
        let dm = default_design(&ds).unwrap();
        (ds, dm)
    }

    #[test]
    fn empty_plan_gives_sample_shares() {
        let (ds, dm) = problem(50, 3, 1);
        let fit = refit_logistic(&ds, &dm, &RefitPlan::default(), &RefitConfig::default()).unwrap();
        let share = ds.group_sizes()[1] as f64 / 50.0;
        fit.probabilities(&dm).column(1).iter().for_each(|&p| assert_abs_diff_eq!(p, share, epsilon = 1e-12));
        assert!(fit.selected.is_empty());
    }

    #[test]
    fn linear_residuals_orthogonal() {
        let (ds, dm) = problem(80, 4, 2);
        let plan = RefitPlan::new(&[1, 2], &[3]);
        let fit = refit_linear(&ds, &dm, &plan, &RefitConfig::default()).unwrap();
        assert_eq!(fit.selected, vec![1, 2, 3]);
        let fitted = fit.fitted(&dm);
        for t in 0..2 {
            for &j in &[0, 1, 2, 3] {
                let s: f64 = (0..80)
                    .filter(|&i| ds.d()[i] == t)
                    .map(|i| dm.x_star()[[i, j]] * (ds.y()[i] - fitted[[i, t]]))
                    .sum();
                assert!(s.abs() < 1e-8, "t={t} j={j} s={s}");
            }
            assert_eq!(fit.beta[[4, t]], 0.0);
        }
    }

    #[test]
    fn logistic_refit_beats_zero_on_support() {
        let (ds, dm) = problem(200, 3, 3);
        let plan = RefitPlan::new(&[1], &[]);
        let fit = refit_logistic(&ds, &dm, &plan, &RefitConfig::default()).unwrap();
        assert!(fit.converged);
        let (zero_loss, _) = crate::solver::logistic_objective(&Array2::zeros((dm.p(), 1)), &dm, &ds).unwrap();
        assert!(fit.objective <= zero_loss);
        assert!(fit.gamma[[2, 0]] == 0.0 && fit.gamma[[3, 0]] == 0.0);
        let again = refit_logistic(&ds, &dm, &plan, &RefitConfig::default()).unwrap();
        assert_eq!(fit.gamma, again.gamma);
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let n = 30;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { a[i] } else { 2.0 * a[i] });
        let d = (0..n).map(|i| i % 2).collect();
        let ds = Dataset::new(vec![0.0; n], d, x, vec!["a".into(), "b".into()]).unwrap();
        let dm = default_design(&ds).unwrap();
        let err = refit_linear(&ds, &dm, &RefitPlan::new(&[1, 2], &[]), &RefitConfig::default()).unwrap_err();
        match err {
            Error::RankDeficient(names) => assert!(names.contains(&"a".to_string()) && names.contains(&"b".to_string())),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn separated_data_is_refused() {
        let n = 40;
        let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64 - 19.5);
        let d = (0..n).map(|i| usize::from(i >= 20)).collect();
        let ds = Dataset::new(vec![0.0; n], d, x, vec!["a".into()]).unwrap();
        let dm = default_design(&ds).unwrap();
        let err = refit_logistic(&ds, &dm, &RefitPlan::new(&[1], &[]), &RefitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Separation { .. }));
    }
}
