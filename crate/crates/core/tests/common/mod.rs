//! Independent oracles shared by the integration tests and the acceptance
//! harness. Nothing here calls the solver.

#![allow(dead_code)]

use grplasso_te::data::{default_design, Dataset, DesignMatrix};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Two covariates, binary treatment, `n` units.
pub fn small_instance(seed: u64, n: usize) -> (Dataset, DesignMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut x = Array2::zeros((n, 2));
        let mut d = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = 0.5 * a + 0.8 * rng.sample::<f64, _>(StandardNormal);
            x[[i, 0]] = a;
            x[[i, 1]] = b;
            let p = 1.0 / (1.0 + (-(0.3 + 0.8 * a - 0.5 * b)).exp());
            let t = usize::from(rng.gen::<f64>() < p);
            let e: f64 = rng.sample(StandardNormal);
            y.push(1.0 + a - 0.7 * b + t as f64 * (0.5 + 0.4 * b) + 0.5 * e);
            d.push(t);
        }
        // both arms need at least three units for the per-arm fits
        let n1 = d.iter().sum::<usize>();
        if n1 >= 3 && n - n1 >= 3 {
            let ds = Dataset::new(y, d, x, vec!["a".into(), "b".into()]).unwrap();
            let dm = default_design(&ds).unwrap();
            return (ds, dm);
        }
    }
}

/// Covariate columns of `X*` (intercept dropped), standardized here to unit
/// second moment independently of the data module.
pub fn own_standardized(ds: &Dataset) -> Vec<Vec<f64>> {
    let n = ds.n() as f64;
    (0..ds.x_raw().ncols())
        .map(|j| {
            let col: Vec<f64> = ds.x_raw().column(j).to_vec();
            let s = (col.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
            col.iter().map(|v| v / s).collect()
        })
        .collect()
}

fn log1pexp(m: f64) -> f64 {
    if m > 0.0 {
        m + (-m).exp().ln_1p()
    } else {
        m.exp().ln_1p()
    }
}

/// Binary logistic loss `E_n[log(1 + e^m) − d m]` with `m = a + η`, the
/// intercept `a` profiled out by Newton from `start`.
fn profile_logistic(eta: &[f64], d: &[usize], start: f64) -> (f64, f64) {
    let n = eta.len() as f64;
    let mut a = start;
    for _ in 0..50 {
        let (mut g, mut h) = (0.0, 0.0);
        for (e, &di) in eta.iter().zip(d) {
            let p = 1.0 / (1.0 + (-(a + e)).exp());
            g += p - di as f64;
            h += p * (1.0 - p);
        }
        let step = g / h.max(1e-300);
        a -= step;
        if step.abs() < 1e-14 * (1.0 + a.abs()) {
            break;
        }
    }
    let v = eta
        .iter()
        .zip(d)
        .map(|(e, &di)| log1pexp(a + e) - di as f64 * (a + e))
        .sum::<f64>()
        / n;
    (v, a)
}

/// Penalized logistic objective at covariate coefficients `g`, intercept profiled.
pub fn logistic_penalized(z: &[Vec<f64>], d: &[usize], lambda: f64, g: &[f64; 2], start: f64) -> (f64, f64) {
    let eta: Vec<f64> = (0..d.len()).map(|i| g[0] * z[0][i] + g[1] * z[1][i]).collect();
    let (v, a) = profile_logistic(&eta, d, start);
    (v + lambda * (g[0].abs() + g[1].abs()), a)
}

pub struct GridResult {
    pub value: f64,
    pub argmin: Vec<f64>,
    pub evaluations: usize,
}

/// Grid minimum of the penalized binary logistic objective over the box
/// `[−3, 3]²` at step 1e−3, followed by successive local grids down to
/// step 1e−7 around the incumbent.
///
/// On the box grid `e^{η_i}` factors into per-axis tables, so each point
/// costs one `ln_1p` per unit plus a profiled-intercept Newton solve.
pub fn grid_min_logistic(z: &[Vec<f64>], d: &[usize], lambda: f64) -> GridResult {
    let half: f64 = 3.0;
    let step = 1e-3;
    let m = (2.0 * half / step).round() as usize;
    let n = d.len();
    let nf = n as f64;
    let axis = |k: usize| -half + k as f64 * step;
    let table = |col: &[f64]| -> Vec<Vec<f64>> {
        (0..=m).map(|k| col.iter().map(|v| (axis(k) * v).exp()).collect()).collect()
    };
    let (e0, e1) = (table(&z[0]), table(&z[1]));
    let dbar = d.iter().sum::<usize>() as f64 / nf;
    let dz = |j: usize| (0..n).map(|i| d[i] as f64 * z[j][i]).sum::<f64>() / nf;
    let (dz0, dz1) = (dz(0), dz(1));

    let mut best = (f64::INFINITY, [0.0, 0.0]);
    let mut evaluations = 0;
    let mut w = vec![0.0; n];
    let mut a_row = 0.0f64;
    for i in 0..=m {
        let mut a = a_row;
        for k in 0..=m {
            for o in 0..n {
                w[o] = e0[i][o] * e1[k][o];
            }
            // Newton on the intercept: E_n[σ(a + η)] = mean(d)
            for _ in 0..50 {
                let ea = a.exp();
                let (mut g, mut h) = (0.0, 0.0);
                for &wo in &w {
                    let p = ea * wo / (1.0 + ea * wo);
                    g += p;
                    h += p * (1.0 - p);
                }
                let s = (g / nf - dbar) / (h / nf).max(1e-300);
                a -= s;
                if s.abs() < 1e-14 * (1.0 + a.abs()) {
                    break;
                }
            }
            let ea = a.exp();
            let lse = w.iter().map(|&wo| (ea * wo).ln_1p()).sum::<f64>() / nf;
            let (g0, g1) = (axis(i), axis(k));
            let v = lse - (a * dbar + g0 * dz0 + g1 * dz1) + lambda * (g0.abs() + g1.abs());
            evaluations += 1;
            if k == 0 {
                a_row = a;
            }
            if v < best.0 {
                best = (v, [g0, g1]);
            }
        }
    }
    let mut h = step;
    while h > 1.5e-7 {
        let centre = best.1;
        let fine = h / 10.0;
        for i in -10..=10 {
            for k in -10..=10 {
                let g = [centre[0] + i as f64 * fine, centre[1] + k as f64 * fine];
                let (v, _) = logistic_penalized(z, d, lambda, &g, 0.0);
                evaluations += 1;
                if v < best.0 {
                    best = (v, g);
                }
            }
        }
        h = fine;
    }
    GridResult {
        value: best.0,
        argmin: best.1.to_vec(),
        evaluations,
    }
}

/// Per-arm sufficient statistics of the centered least-squares loss:
/// `E_{n,t}[(y − a − b'z)²]` minimized over `a` equals `v − 2b'c + b'Sb`.
pub struct ArmStats {
    pub v: f64,
    pub c: [f64; 2],
    pub s: [[f64; 2]; 2],
}

pub fn arm_stats(z: &[Vec<f64>], y: &[f64], d: &[usize], t: usize) -> ArmStats {
    let rows: Vec<usize> = (0..y.len()).filter(|&i| d[i] == t).collect();
    let nt = rows.len() as f64;
    let mean = |f: &dyn Fn(usize) -> f64| rows.iter().map(|&i| f(i)).sum::<f64>() / nt;
    let my = mean(&|i| y[i]);
    let mz = [mean(&|i| z[0][i]), mean(&|i| z[1][i])];
    let v = mean(&|i| (y[i] - my).powi(2));
    let c = [mean(&|i| (z[0][i] - mz[0]) * (y[i] - my)), mean(&|i| (z[1][i] - mz[1]) * (y[i] - my))];
    let mut s = [[0.0; 2]; 2];
    for (a, row) in s.iter_mut().enumerate() {
        for (b, cell) in row.iter_mut().enumerate() {
            *cell = mean(&|i| (z[a][i] - mz[a]) * (z[b][i] - mz[b]));
        }
    }
    ArmStats { v, c, s }
}

/// Penalized two-arm least-squares objective with intercepts profiled;
/// `b = [b_{0,1}, b_{0,2}, b_{1,1}, b_{1,2}]` (arm-major).
pub fn linear_penalized(stats: &[ArmStats; 2], lambda: f64, b: &[f64; 4]) -> f64 {
    let mut loss = 0.0;
    for (t, st) in stats.iter().enumerate() {
        let (u, w) = (b[2 * t], b[2 * t + 1]);
        loss += st.v - 2.0 * (u * st.c[0] + w * st.c[1])
            + u * u * st.s[0][0]
            + 2.0 * u * w * st.s[0][1]
            + w * w * st.s[1][1];
    }
    loss + lambda * ((b[0] * b[0] + b[2] * b[2]).sqrt() + (b[1] * b[1] + b[3] * b[3]).sqrt())
}

/// Coarse-to-fine grid search of the four-coefficient linear objective over
/// `[−3, 3]⁴`: step 0.1 over the whole box, then windows of ±20 steps at
/// steps 1e−2, 1e−3, …, 1e−7 around the incumbent. A full box grid at 1e−3
/// has 3.6e15 points; the objective is convex, so the nested windows contain
/// the minimizer once the coarse level brackets it.
pub fn grid_min_linear(stats: &[ArmStats; 2], lambda: f64) -> GridResult {
    let mut evaluations = 0;
    let mut best = (f64::INFINITY, [0.0; 4]);
    let coarse: f64 = 0.1;
    let m = (6.0 / coarse).round() as i64;
    let axis = |k: i64| -3.0 + k as f64 * coarse;
    for i in 0..=m {
        for j in 0..=m {
            for k in 0..=m {
                for l in 0..=m {
                    let b = [axis(i), axis(j), axis(k), axis(l)];
                    let v = linear_penalized(stats, lambda, &b);
                    evaluations += 1;
                    if v < best.0 {
                        best = (v, b);
                    }
                }
            }
        }
    }
    let mut h = coarse;
    while h > 1.5e-7 {
        let fine = h / 10.0;
        let c = best.1;
        let r = 20i64;
        for i in -r..=r {
            for j in -r..=r {
                for k in -r..=r {
                    for l in -r..=r {
                        let b = [
                            c[0] + i as f64 * fine,
                            c[1] + j as f64 * fine,
                            c[2] + k as f64 * fine,
                            c[3] + l as f64 * fine,
                        ];
                        let v = linear_penalized(stats, lambda, &b);
                        evaluations += 1;
                        if v < best.0 {
                            best = (v, b);
                        }
                    }
                }
            }
        }
        h = fine;
    }
    GridResult {
        value: best.0,
        argmin: best.1.to_vec(),
        evaluations,
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        let orig = xp[k];
        xp[k] = orig + h;
        let fp = f(&xp);
        xp[k] = orig - h;
        let fm = f(&xp);
        xp[k] = orig;
        g[k] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Smallest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
pub fn min_eigenvalue(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).fold(f64::INFINITY, f64::min)
}
pub mod checks;
