//! Randomized invariant checks. Each returns the worst deviation found on the
//! instance drawn from `seed`, so callers choose the tolerance.

use grplasso_te::data::{default_design, Dataset};
use grplasso_te::effects::{dose_response, effects_on_treated, NuisanceEstimates};
use grplasso_te::solver::{group_prox, linear_objective, logistic_objective, mlogit_probs};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{fd_gradient, min_eigenvalue};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` units, `k` covariates on wildly different scales, labels `0..levels`
/// with every level present.
pub fn random_dataset(seed: u64, n: usize, k: usize, levels: usize) -> Dataset {
    let mut r = rng(seed);
    let scales: Vec<f64> = (0..k).map(|_| 10f64.powf(r.gen_range(-3.0..3.0))).collect();
    let x = Array2::from_shape_fn((n, k), |(_, j)| scales[j] * (r.sample::<f64, _>(StandardNormal) + 0.3));
    let d: Vec<usize> = (0..n).map(|i| if i < levels { i } else { r.gen_range(0..levels) }).collect();
    let y = (0..n).map(|i| d[i] as f64 + r.sample::<f64, _>(StandardNormal)).collect();
    let names = (0..k).map(|j| format!("c{j}")).collect();
    Dataset::new(y, d, x, names).unwrap()
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Analytic multinomial-loss gradient against central differences.
pub fn logistic_gradient_error(seed: u64, levels: usize) -> f64 {
    let ds = random_dataset(seed, 40, 3, levels);
    let dm = default_design(&ds).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let t = levels - 1;
    let gamma = Array2::from_shape_fn((dm.p(), t), |_| r.gen_range(-1.0..1.0));
    let (_, grad) = logistic_objective(&gamma, &dm, &ds).unwrap();
    let f = |v: &[f64]| {
        let g = Array2::from_shape_vec((dm.p(), t), v.to_vec()).unwrap();
        logistic_objective(&g, &dm, &ds).unwrap().0
    };
    let fd = fd_gradient(&f, gamma.as_slice().unwrap(), 1e-5);
    rel_error(grad.as_slice().unwrap(), &fd)
}

/// Analytic least-squares gradient against central differences.
pub fn linear_gradient_error(seed: u64, levels: usize) -> f64 {
    let ds = random_dataset(seed, 40, 3, levels);
    let dm = default_design(&ds).unwrap();
    let mut r = rng(seed ^ 0x11ea);
    let beta = Array2::from_shape_fn((dm.p(), levels), |_| r.gen_range(-2.0..2.0));
    let (_, grad) = linear_objective(&beta, &dm, &ds).unwrap();
    let f = |v: &[f64]| {
        let b = Array2::from_shape_vec((dm.p(), levels), v.to_vec()).unwrap();
        linear_objective(&b, &dm, &ds).unwrap().0
    };
    let fd = fd_gradient(&f, beta.as_slice().unwrap(), 1e-4);
    rel_error(grad.as_slice().unwrap(), &fd)
}

/// Optimality residual of `group_prox(v, t)` for `min ½‖u − v‖² + t‖u‖`:
/// `‖v‖ − t` when the output is zero (must be ≤ 0), otherwise
/// `‖v − u − t u/‖u‖‖∞`.
pub fn prox_residual(seed: u64) -> f64 {
    let mut r = rng(seed);
    let len = r.gen_range(1..6);
    let v: Vec<f64> = (0..len).map(|_| r.gen_range(-3.0..3.0)).collect();
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let t = norm * r.gen_range(0.0..2.0);
    let u = group_prox(&v, t);
    let un = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    if un == 0.0 {
        return (norm - t).max(0.0);
    }
    v.iter().zip(&u).map(|(a, b)| (a - b - t * b / un).abs()).fold(0.0, f64::max)
}

/// `|Σ_t p_t − 1|` for logit indices drawn up to ±`span`.
pub fn mlogit_normalization_error(seed: u64, span: f64) -> f64 {
    let mut r = rng(seed);
    let len = r.gen_range(1..8);
    let m: Vec<f64> = (0..len).map(|_| r.gen_range(-span..span)).collect();
    let p = mlogit_probs(&m);
    assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    (p.iter().sum::<f64>() - 1.0).abs()
}

/// Random nuisances for `ds`, propensity rows bounded away from zero.
pub fn random_nuisances(seed: u64, ds: &Dataset) -> NuisanceEstimates {
    let mut r = rng(seed);
    let levels = ds.n_levels();
    let p = Array2::from_shape_fn((ds.n(), levels), |_| r.gen_range(0.05..1.0));
    let m = Array2::from_shape_fn((ds.n(), levels), |_| r.gen_range(-2.0..2.0));
    NuisanceEstimates::new(p, m, ds.d(), 1e-3).unwrap()
}

/// Smallest eigenvalue over the assembled dose-response and treated-effect
/// variance matrices.
pub fn variance_min_eigenvalue(seed: u64, levels: usize) -> f64 {
    let ds = random_dataset(seed, 60, 2, levels);
    let nuis = random_nuisances(seed ^ 0xfeed, &ds);
    let est = dose_response(&ds, &nuis).unwrap();
    let tot = effects_on_treated(&ds, &nuis).unwrap();
    min_eigenvalue(&est.v).min(min_eigenvalue(&tot.v_tau))
}

/// Worst `|E_n[x*_j²] − 1|` over penalized columns.
pub fn standardization_error(seed: u64) -> f64 {
    let ds = random_dataset(seed, 50, 5, 2);
    let dm = default_design(&ds).unwrap();
    let x = dm.x_star();
    (0..dm.p())
        .filter(|&j| dm.is_penalized(j))
        .map(|j| (x.column(j).iter().map(|v| v * v).sum::<f64>() / dm.n() as f64 - 1.0).abs())
        .fold(0.0, f64::max)
}
