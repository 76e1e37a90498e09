//! Doubly-robust point estimates, plug-in variances, influence functions,
//! confidence intervals and propensity trimming.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::stats::{mean, normal_quantile};

pub const DEFAULT_FLOOR: f64 = 1e-3;

/// Fitted nuisance functions at every unit and treatment level.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceEstimates {
    phat: Array2<f64>,
    muhat: Array2<f64>,
    phat_marginal: Vec<f64>,
    floor: f64,
    floor_applied: bool,
}

/// Raise entries below `floor` to it and rescale the rest so the row still
/// sums to one; repeats until no rescaled entry falls below the floor.
fn floor_row(row: &mut [f64], floor: f64) -> bool {
    let mut pinned = vec![false; row.len()];
    let mut touched = false;
    loop {
        let mut changed = false;
        for (v, pin) in row.iter_mut().zip(pinned.iter_mut()) {
            if !*pin && *v < floor {
                *v = floor;
                *pin = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        touched = true;
        let n_pinned = pinned.iter().filter(|&&p| p).count();
        let free_mass: f64 = row.iter().zip(&pinned).filter(|(_, &p)| !p).map(|(v, _)| v).sum();
        let target = 1.0 - floor * n_pinned as f64;
        if free_mass > 0.0 {
            for (v, &pin) in row.iter_mut().zip(&pinned) {
                if !pin {
                    *v *= target / free_mass;
                }
            }
        }
    }
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= s);
    touched
}

impl NuisanceEstimates {
    /// Builds the nuisances from `n × (T+1)` propensities and regressions,
    /// renormalizing propensity rows and flooring them at `floor`.
    pub fn new(phat: Array2<f64>, muhat: Array2<f64>, d: &[usize], floor: f64) -> Result<Self> {
        let (n, levels) = phat.dim();
        if muhat.dim() != (n, levels) || d.len() != n {
            return Err(Error::Dimension("phat, muhat and d must share n × (T+1) shape".into()));
        }
        if levels < 2 {
            return Err(Error::Dimension("need at least two treatment levels".into()));
        }
        if !(floor > 0.0) || floor * levels as f64 >= 1.0 {
            return Err(Error::Config(format!("propensity floor {floor} must lie in (0, 1/(T+1))")));
        }
        if phat.iter().chain(muhat.iter()).any(|v| !v.is_finite()) || phat.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidData("nuisance estimates must be finite with nonnegative propensities".into()));
        }
        let mut phat = phat;
        let mut floor_applied = false;
        for mut row in phat.axis_iter_mut(Axis(0)) {
            let s: f64 = row.sum();
            if !(s > 0.0) {
                return Err(Error::InvalidData("propensity row sums to zero".into()));
            }
            row /= s;
            floor_applied |= floor_row(row.as_slice_mut().expect("standard layout"), floor);
        }
        let mut counts = vec![0usize; levels];
        for &t in d {
            if t >= levels {
                return Err(Error::InvalidData(format!("treatment label {t} out of range")));
            }
            counts[t] += 1;
        }
        if let Some(t) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyGroup(t));
        }
        let phat_marginal = counts.iter().map(|&c| c as f64 / n as f64).collect();
        Ok(Self {
            phat,
            muhat,
            phat_marginal,
            floor,
            floor_applied,
        })
    }

    pub fn phat(&self) -> &Array2<f64> {
        &self.phat
    }

    pub fn muhat(&self) -> &Array2<f64> {
        &self.muhat
    }

    /// `n_t / n`.
    pub fn phat_marginal(&self) -> &[f64] {
        &self.phat_marginal
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn floor_applied(&self) -> bool {
        self.floor_applied
    }

    pub fn n(&self) -> usize {
        self.phat.nrows()
    }

    pub fn n_levels(&self) -> usize {
        self.phat.ncols()
    }

    /// Restrict to `rows`, with `d` the labels of the kept rows.
    pub fn subset(&self, rows: &[usize], d: &[usize]) -> Result<Self> {
        let mut out = Self::new(
            self.phat.select(Axis(0), rows),
            self.muhat.select(Axis(0), rows),
            d,
            self.floor,
        )?;
        out.floor_applied |= self.floor_applied;
        Ok(out)
    }

    fn check(&self, ds: &Dataset) -> Result<()> {
        if ds.n() != self.n() || ds.n_levels() != self.n_levels() {
            return Err(Error::Dimension("nuisances do not match the dataset".into()));
        }
        Ok(())
    }
}

/// Dose-response estimate with `V[t,t'] = 1{t=t'}·V^W(t) + V^B(t,t')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub mu_hat: Vec<f64>,
    pub v: Vec<Vec<f64>>,
    pub v_within: Vec<f64>,
    pub v_between: Vec<Vec<f64>>,
    pub n: usize,
}

/// Effects on the treated `τ_t = μ_{t,t} − μ_{0,t}`, `t = 1..T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TotEstimate {
    pub tau_hat: Vec<f64>,
    pub v_tau: Vec<Vec<f64>>,
    pub v_within: Vec<f64>,
    pub v_between: Vec<Vec<f64>>,
    /// `μ̂_{t,t}` for `t = 1..T`.
    pub mu_treated: Vec<f64>,
    /// `μ̂_{0,t}` for `t = 1..T`.
    pub mu_counterfactual: Vec<f64>,
    pub n: usize,
}

fn indicator(d: usize, t: usize) -> f64 {
    if d == t {
        1.0
    } else {
        0.0
    }
}

/// `μ̂_t = E_n[d_t(y − μ̂_t(x))/p̂_t(x) + μ̂_t(x)]` for every level; variances
/// are left at zero until [`variance_mu`].
pub fn estimate_mu(ds: &Dataset, nuis: &NuisanceEstimates) -> Result<EffectEstimate> {
    nuis.check(ds)?;
    let levels = ds.n_levels();
    let (p, m) = (nuis.phat(), nuis.muhat());
    let mu_hat = (0..levels)
        .map(|t| {
            mean((0..ds.n()).map(|i| {
                indicator(ds.d()[i], t) * (ds.y()[i] - m[[i, t]]) / p[[i, t]] + m[[i, t]]
            }))
        })
        .collect();
    Ok(EffectEstimate {
        mu_hat,
        v: vec![vec![0.0; levels]; levels],
        v_within: vec![0.0; levels],
        v_between: vec![vec![0.0; levels]; levels],
        n: ds.n(),
    })
}

/// `μ̂_{t,t'}`; the plain group mean of `y` when `t = t'`.
pub fn estimate_mu_cond(ds: &Dataset, nuis: &NuisanceEstimates, t: usize, t_prime: usize) -> Result<f64> {
    nuis.check(ds)?;
    let levels = ds.n_levels();
    if t >= levels || t_prime >= levels {
        return Err(Error::Contrast(format!("treatment level out of range 0..={}", levels - 1)));
    }
    let d = ds.d();
    let y = ds.y();
    if t == t_prime {
        let ys = (0..ds.n()).filter(|&i| d[i] == t).map(|i| y[i]);
        let out = mean(ys);
        if out.is_nan() {
            return Err(Error::EmptyGroup(t));
        }
        return Ok(out);
    }
    let share = nuis.phat_marginal()[t_prime];
    let (p, m) = (nuis.phat(), nuis.muhat());
    Ok(mean((0..ds.n()).map(|i| {
        indicator(d[i], t_prime) * m[[i, t]] / share
            + p[[i, t_prime]] / share * indicator(d[i], t) * (y[i] - m[[i, t]]) / p[[i, t]]
    })))
}

/// Fill `V̂^W_μ(t) = E_n[d_t(y − μ̂_t(x))²/p̂_t(x)²]` and
/// `V̂^B_μ(t,t') = E_n[(μ̂_t(x) − μ̂_t)(μ̂_{t'}(x) − μ̂_{t'})]`.
pub fn variance_mu(ds: &Dataset, nuis: &NuisanceEstimates, est: &EffectEstimate) -> Result<EffectEstimate> {
    nuis.check(ds)?;
    let levels = ds.n_levels();
    let (p, m, d, y) = (nuis.phat(), nuis.muhat(), ds.d(), ds.y());
    let v_within: Vec<f64> = (0..levels)
        .map(|t| {
            mean((0..ds.n()).map(|i| {
                let r = y[i] - m[[i, t]];
                indicator(d[i], t) * r * r / (p[[i, t]] * p[[i, t]])
            }))
        })
        .collect();
    let mut v_between = vec![vec![0.0; levels]; levels];
    for t in 0..levels {
        for s in t..levels {
            let c = mean((0..ds.n()).map(|i| (m[[i, t]] - est.mu_hat[t]) * (m[[i, s]] - est.mu_hat[s])));
            v_between[t][s] = c;
            v_between[s][t] = c;
        }
    }
    let v = (0..levels)
        .map(|t| (0..levels).map(|s| v_between[t][s] + if t == s { v_within[t] } else { 0.0 }).collect())
        .collect();
    Ok(EffectEstimate {
        mu_hat: est.mu_hat.clone(),
        v,
        v_within,
        v_between,
        n: ds.n(),
    })
}

/// Point estimates and the W/B variance in one call.
pub fn dose_response(ds: &Dataset, nuis: &NuisanceEstimates) -> Result<EffectEstimate> {
    let est = estimate_mu(ds, nuis)?;
    variance_mu(ds, nuis, &est)
}

/// `τ̂_t = μ̂_{t,t} − μ̂_{0,t}`; variances left at zero until [`variance_tau`].
pub fn estimate_tot(ds: &Dataset, nuis: &NuisanceEstimates) -> Result<TotEstimate> {
    let t_count = ds.n_treatments();
    let mut mu_treated = Vec::with_capacity(t_count);
    let mut mu_counterfactual = Vec::with_capacity(t_count);
    for t in 1..=t_count {
        mu_treated.push(estimate_mu_cond(ds, nuis, t, t)?);
        mu_counterfactual.push(estimate_mu_cond(ds, nuis, 0, t)?);
    }
    let tau_hat = mu_treated.iter().zip(&mu_counterfactual).map(|(a, b)| a - b).collect();
    Ok(TotEstimate {
        tau_hat,
        v_tau: vec![vec![0.0; t_count]; t_count],
        v_within: vec![0.0; t_count],
        v_between: vec![vec![0.0; t_count]; t_count],
        mu_treated,
        mu_counterfactual,
        n: ds.n(),
    })
}

/// Fill `V̂^W_τ(t) = E_n[d_t/p̂_t² (y − μ̂₀(x) − μ̂_{t,t} + μ̂_{0,t})²]` and
/// `V̂^B_τ(t,t') = E_n[p̂_t(x)p̂_{t'}(x)/(p̂_t p̂_{t'} p̂₀(x)²) d_0 (y − μ̂₀(x))²]`.
pub fn variance_tau(ds: &Dataset, nuis: &NuisanceEstimates, tot: &TotEstimate) -> Result<TotEstimate> {
    nuis.check(ds)?;
    let t_count = ds.n_treatments();
    let (p, m, d, y) = (nuis.phat(), nuis.muhat(), ds.d(), ds.y());
    let share = nuis.phat_marginal();
    let v_within: Vec<f64> = (1..=t_count)
        .map(|t| {
            let shift = tot.mu_treated[t - 1] - tot.mu_counterfactual[t - 1];
            mean((0..ds.n()).map(|i| {
                let r = y[i] - m[[i, 0]] - shift;
                indicator(d[i], t) / (share[t] * share[t]) * r * r
            }))
        })
        .collect();
    let mut v_between = vec![vec![0.0; t_count]; t_count];
    for t in 1..=t_count {
        for s in t..=t_count {
            let c = mean((0..ds.n()).map(|i| {
                let r = y[i] - m[[i, 0]];
                p[[i, t]] * p[[i, s]] / (share[t] * share[s] * p[[i, 0]] * p[[i, 0]]) * indicator(d[i], 0) * r * r
            }));
            v_between[t - 1][s - 1] = c;
            v_between[s - 1][t - 1] = c;
        }
    }
    let v_tau = (0..t_count)
        .map(|a| (0..t_count).map(|b| v_between[a][b] + if a == b { v_within[a] } else { 0.0 }).collect())
        .collect();
    Ok(TotEstimate {
        tau_hat: tot.tau_hat.clone(),
        v_tau,
        v_within,
        v_between,
        mu_treated: tot.mu_treated.clone(),
        mu_counterfactual: tot.mu_counterfactual.clone(),
        n: ds.n(),
    })
}

pub fn effects_on_treated(ds: &Dataset, nuis: &NuisanceEstimates) -> Result<TotEstimate> {
    let tot = estimate_tot(ds, nuis)?;
    variance_tau(ds, nuis, &tot)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimand {
    /// `μ_t`.
    Mu(usize),
    /// `μ_{t,t'}`: mean potential outcome under `t` for the group receiving `t'`.
    MuCond(usize, usize),
}

/// Per-observation moment function evaluated at `point`.
///
/// `ψ_t = d_t y/p_t(x) + μ_t(x) − d_t μ_t(x)/p_t(x) − μ_t` and
/// `ψ_{t,t'} = d_{t'} μ_t(x)/p_{t'} + (p_{t'}(x)/p_{t'}) d_t (y − μ_t(x))/p_t(x) − μ_{t,t'}`.
pub fn influence_values(ds: &Dataset, nuis: &NuisanceEstimates, estimand: Estimand, point: f64) -> Result<Vec<f64>> {
    nuis.check(ds)?;
    let levels = ds.n_levels();
    let (p, m, d, y) = (nuis.phat(), nuis.muhat(), ds.d(), ds.y());
    match estimand {
        Estimand::Mu(t) => {
            if t >= levels {
                return Err(Error::Contrast(format!("level {t} out of range")));
            }
            Ok((0..ds.n())
                .map(|i| {
                    let dt = indicator(d[i], t);
                    dt * y[i] / p[[i, t]] + m[[i, t]] - dt * m[[i, t]] / p[[i, t]] - point
                })
                .collect())
        }
        Estimand::MuCond(t, s) => {
            if t >= levels || s >= levels {
                return Err(Error::Contrast("level out of range".into()));
            }
            let share = nuis.phat_marginal()[s];
            Ok((0..ds.n())
                .map(|i| {
                    if t == s {
                        // the propensity ratio cancels for the own-group mean
                        indicator(d[i], t) * y[i] / share - point
                    } else {
                        indicator(d[i], s) * m[[i, t]] / share
                            + p[[i, s]] / share * indicator(d[i], t) * (y[i] - m[[i, t]]) / p[[i, t]]
                            - point
                    }
                })
                .collect())
        }
    }
}

/// `E_n[ψψ']` over the given estimands, the outer-product alternative to the
/// W/B decomposition.
pub fn outer_product_variance(
    ds: &Dataset,
    nuis: &NuisanceEstimates,
    estimands: &[(Estimand, f64)],
) -> Result<Vec<Vec<f64>>> {
    let psi: Vec<Vec<f64>> = estimands
        .iter()
        .map(|&(e, pt)| influence_values(ds, nuis, e, pt))
        .collect::<Result<_>>()?;
    let k = psi.len();
    let mut v = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in a..k {
            let c = mean(psi[a].iter().zip(&psi[b]).map(|(x, y)| x * y));
            v[a][b] = c;
            v[b][a] = c;
        }
    }
    Ok(v)
}

/// Outer-product variance of the dose-response vector.
pub fn outer_product_variance_mu(ds: &Dataset, nuis: &NuisanceEstimates, est: &EffectEstimate) -> Result<Vec<Vec<f64>>> {
    let estimands: Vec<(Estimand, f64)> = est.mu_hat.iter().enumerate().map(|(t, &m)| (Estimand::Mu(t), m)).collect();
    outer_product_variance(ds, nuis, &estimands)
}

/// Outer-product variance of `τ`, from `ψ_{t,t} − ψ_{0,t}`.
pub fn outer_product_variance_tau(ds: &Dataset, nuis: &NuisanceEstimates, tot: &TotEstimate) -> Result<Vec<Vec<f64>>> {
    let t_count = tot.tau_hat.len();
    let psi: Vec<Vec<f64>> = (1..=t_count)
        .map(|t| {
            let a = influence_values(ds, nuis, Estimand::MuCond(t, t), tot.mu_treated[t - 1])?;
            let b = influence_values(ds, nuis, Estimand::MuCond(0, t), tot.mu_counterfactual[t - 1])?;
            Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
        })
        .collect::<Result<_>>()?;
    let mut v = vec![vec![0.0; t_count]; t_count];
    for a in 0..t_count {
        for b in a..t_count {
            let c = mean(psi[a].iter().zip(&psi[b]).map(|(x, y)| x * y));
            v[a][b] = c;
            v[b][a] = c;
        }
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastKind {
    Mu,
    Tau,
}

/// Linear contrast `Σ_k w_k θ_k` over μ (indices `0..=T`) or τ (indices `1..=T`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub kind: ContrastKind,
    pub text: String,
    /// `(level, weight)` pairs.
    pub terms: Vec<(usize, f64)>,
}

impl Contrast {
    /// Parse `±mu<t>` or `±tau<t>` terms, e.g. `mu1-mu0`, `tau2`, `mu2-2*mu0`.
    pub fn parse(text: &str) -> Result<Self> {
        let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
        if compact.is_empty() {
            return Err(Error::Contrast("empty contrast".into()));
        }
        let mut terms: Vec<(usize, f64)> = Vec::new();
        let mut kind: Option<ContrastKind> = None;
        let bytes = compact.as_bytes();
        let mut pos = 0;
        while pos < bytes.len() {
            let mut sign = 1.0;
            if bytes[pos] == b'+' || bytes[pos] == b'-' {
                if bytes[pos] == b'-' {
                    sign = -1.0;
                }
                pos += 1;
            } else if pos > 0 {
                return Err(Error::Contrast(format!("expected + or - at offset {pos} in {text:?}")));
            }
            let rest = &compact[pos..];
            let end = rest.find(['+', '-']).unwrap_or(rest.len());
            let term = &rest[..end];
            pos += end;
            let (weight, name) = match term.split_once('*') {
                Some((w, n)) => (
                    w.parse::<f64>().map_err(|_| Error::Contrast(format!("bad weight {w:?}")))?,
                    n,
                ),
                None => (1.0, term),
            };
            let (this_kind, digits) = if let Some(d) = name.strip_prefix("tau") {
                (ContrastKind::Tau, d)
            } else if let Some(d) = name.strip_prefix("mu") {
                (ContrastKind::Mu, d)
            } else {
                return Err(Error::Contrast(format!("unknown term {term:?}; use mu<t> or tau<t>")));
            };
            let level: usize = digits
                .parse()
                .map_err(|_| Error::Contrast(format!("bad treatment index in {term:?}")))?;
            if this_kind == ContrastKind::Tau && level == 0 {
                return Err(Error::Contrast("tau0 is not defined; tau indices start at 1".into()));
            }
            if kind.is_some_and(|k| k != this_kind) {
                return Err(Error::Contrast("cannot mix mu and tau terms".into()));
            }
            kind = Some(this_kind);
            match terms.iter_mut().find(|(l, _)| *l == level) {
                Some(entry) => entry.1 += sign * weight,
                None => terms.push((level, sign * weight)),
            }
        }
        Ok(Self {
            kind: kind.expect("at least one term"),
            text: text.to_string(),
            terms,
        })
    }

    /// Gradient over a parameter vector of length `len`; τ levels are shifted
    /// down by one.
    pub fn gradient(&self, len: usize) -> Result<Vec<f64>> {
        let mut g = vec![0.0; len];
        for &(level, w) in &self.terms {
            let idx = match self.kind {
                ContrastKind::Mu => level,
                ContrastKind::Tau => level - 1,
            };
            if idx >= len {
                return Err(Error::Contrast(format!("contrast {:?} references an absent treatment level {level}", self.text)));
            }
            g[idx] += w;
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub std_error: f64,
    pub lower: f64,
    pub upper: f64,
    pub alpha: f64,
    /// `∇G'V̂∇G = 0`: the interval has zero width.
    pub degenerate: bool,
}

/// `G(θ̂) ± c_α √(∇G'V̂∇G/n)` with `c_α = Φ⁻¹(1 − α/2)`.
pub fn ci_functional(value: f64, gradient: &[f64], v: &[Vec<f64>], n: usize, alpha: f64) -> Result<Interval> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if v.len() != gradient.len() || v.iter().any(|r| r.len() != gradient.len()) {
        return Err(Error::Dimension("gradient and variance shapes differ".into()));
    }
    let mut q = 0.0;
    for (a, ga) in gradient.iter().enumerate() {
        for (b, gb) in gradient.iter().enumerate() {
            q += ga * v[a][b] * gb;
        }
    }
    if q < 0.0 {
        if q < -1e-12 * v.iter().flatten().map(|x| x.abs()).fold(0.0, f64::max).max(1.0) {
            return Err(Error::InvalidData(format!("negative quadratic form {q:.3e} in variance")));
        }
        q = 0.0;
    }
    let se = (q / n as f64).sqrt();
    let c = normal_quantile(1.0 - alpha / 2.0);
    Ok(Interval {
        estimate: value,
        std_error: se,
        lower: value - c * se,
        upper: value + c * se,
        alpha,
        degenerate: q == 0.0,
    })
}

pub fn ci_mu(est: &EffectEstimate, contrast: &Contrast, alpha: f64) -> Result<Interval> {
    if contrast.kind != ContrastKind::Mu {
        return Err(Error::Contrast("tau contrast given for a dose-response estimate".into()));
    }
    let g = contrast.gradient(est.mu_hat.len())?;
    let value = g.iter().zip(&est.mu_hat).map(|(a, b)| a * b).sum();
    ci_functional(value, &g, &est.v, est.n, alpha)
}

pub fn ci_tau(est: &TotEstimate, contrast: &Contrast, alpha: f64) -> Result<Interval> {
    if contrast.kind != ContrastKind::Tau {
        return Err(Error::Contrast("mu contrast given for a treated-effects estimate".into()));
    }
    let g = contrast.gradient(est.tau_hat.len())?;
    let value = g.iter().zip(&est.tau_hat).map(|(a, b)| a * b).sum();
    ci_functional(value, &g, &est.v_tau, est.n, alpha)
}

#[derive(Debug, Clone)]
pub struct TrimResult {
    pub dataset: Dataset,
    pub nuisances: NuisanceEstimates,
    /// Original row indices kept, ascending.
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
    /// `[min, max]` of `p̂_treated(x)` over treated units.
    pub range: (f64, f64),
    pub comparisons_before: usize,
    pub comparisons_after: usize,
}

/// Drop non-treated units whose `p̂_{treated}(x)` falls outside the range
/// spanned by the treated units. Nuisances are carried over, not refitted.
pub fn trim_overlap(ds: &Dataset, nuis: &NuisanceEstimates, treated_label: usize) -> Result<TrimResult> {
    nuis.check(ds)?;
    if treated_label >= ds.n_levels() {
        return Err(Error::Config(format!("treated label {treated_label} not present")));
    }
    let d = ds.d();
    let p = nuis.phat();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in (0..ds.n()).filter(|&i| d[i] == treated_label) {
        lo = lo.min(p[[i, treated_label]]);
        hi = hi.max(p[[i, treated_label]]);
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for i in 0..ds.n() {
        let v = p[[i, treated_label]];
        if d[i] == treated_label || (v >= lo && v <= hi) {
            kept.push(i);
        } else {
            dropped.push(i);
        }
    }
    let comparisons_before = (0..ds.n()).filter(|&i| d[i] != treated_label).count();
    let comparisons_after = kept.iter().filter(|&&i| d[i] != treated_label).count();
    if comparisons_after == 0 {
        return Err(Error::AllTrimmed);
    }
    let dataset = ds.subset(&kept)?;
    let nuisances = nuis.subset(&kept, dataset.d())?;
    Ok(TrimResult {
        dataset,
        nuisances,
        kept,
        dropped,
        range: (lo, hi),
        comparisons_before,
        comparisons_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn six() -> (Dataset, NuisanceEstimates) {
        let y = vec![1.0, 2.0, 0.5, 3.0, 4.0, 1.5];
        let d = vec![0, 1, 0, 1, 0, 1];
        let x = Array2::from_shape_fn((6, 1), |(i, _)| i as f64);
        let ds = Dataset::new(y, d.clone(), x, vec!["x".into()]).unwrap();
        let p1 = [0.2, 0.6, 0.4, 0.7, 0.5, 0.3];
        let phat = Array2::from_shape_fn((6, 2), |(i, t)| if t == 1 { p1[i] } else { 1.0 - p1[i] });
        let muhat = array![[1.2, 2.5], [0.8, 2.2], [0.4, 2.9], [1.1, 3.3], [3.0, 3.5], [1.0, 1.0]];
        let nuis = NuisanceEstimates::new(phat, muhat, &d, DEFAULT_FLOOR).unwrap();
        (ds, nuis)
    }

    #[test]
    fn six_observation_hand_values() {
        let (ds, nuis) = six();
        let est = dose_response(&ds, &nuis).unwrap();
        // independent arithmetic, term by term
        let mu1 = ((2.5) + (2.0 - 2.2) / 0.6 + 2.2 + (2.9) + (3.0 - 3.3) / 0.7 + 3.3 + 3.5 + (1.5 - 1.0) / 0.3 + 1.0) / 6.0;
        let mu0 = ((1.0 - 1.2) / 0.8 + 1.2 + 0.8 + (0.5 - 0.4) / 0.6 + 0.4 + 1.1 + (4.0 - 3.0) / 0.5 + 3.0 + 1.0) / 6.0;
        assert_abs_diff_eq!(est.mu_hat[1], mu1, epsilon = 1e-14);
        assert_abs_diff_eq!(est.mu_hat[0], mu0, epsilon = 1e-14);
        let vw1 = ((2.0f64 - 2.2).powi(2) / 0.36 + (3.0f64 - 3.3).powi(2) / 0.49 + (0.5f64).powi(2) / 0.09) / 6.0;
        assert_abs_diff_eq!(est.v_within[1], vw1, epsilon = 1e-14);

        // μ̂_{0,1} with p̂_1 = 1/2
        let m01 = ((0.8 + 1.1 + 1.0) / 0.5
            + (0.2 / 0.5) * (1.0 - 1.2) / 0.8
            + (0.4 / 0.5) * (0.5 - 0.4) / 0.6
            + (0.5 / 0.5) * (4.0 - 3.0) / 0.5)
            / 6.0;
        assert_abs_diff_eq!(estimate_mu_cond(&ds, &nuis, 0, 1).unwrap(), m01, epsilon = 1e-14);
        assert_abs_diff_eq!(estimate_mu_cond(&ds, &nuis, 1, 1).unwrap(), 6.5 / 3.0, epsilon = 1e-15);

        let tot = effects_on_treated(&ds, &nuis).unwrap();
        let tau = 6.5 / 3.0 - m01;
        assert_abs_diff_eq!(tot.tau_hat[0], tau, epsilon = 1e-14);
        let vw = ((2.0 - 0.8 - tau).powi(2) + (3.0 - 1.1 - tau).powi(2) + (1.5 - 1.0 - tau).powi(2)) / 0.25 / 6.0;
        assert_abs_diff_eq!(tot.v_within[0], vw, epsilon = 1e-13);
        let vb = ((0.2f64 / 0.8).powi(2) * 0.04 + (0.4f64 / 0.6).powi(2) * 0.01 + (0.5f64 / 0.5).powi(2) * 1.0) / 0.25 / 6.0;
        assert_abs_diff_eq!(tot.v_between[0][0], vb, epsilon = 1e-13);
        assert_abs_diff_eq!(tot.v_tau[0][0], vw + vb, epsilon = 1e-13);
    }

    #[test]
    fn influence_means_vanish() {
        let (ds, nuis) = six();
        let est = estimate_mu(&ds, &nuis).unwrap();
        for t in 0..2 {
            let psi = influence_values(&ds, &nuis, Estimand::Mu(t), est.mu_hat[t]).unwrap();
            assert!(mean(psi).abs() < 1e-12);
            for s in 0..2 {
                let m = estimate_mu_cond(&ds, &nuis, t, s).unwrap();
                let psi = influence_values(&ds, &nuis, Estimand::MuCond(t, s), m).unwrap();
                assert!(mean(psi).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn collapsing_cases() {
        let n = 5;
        let y = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let d = vec![1, 1, 1, 1, 0];
        let ds = Dataset::new(y.clone(), d.clone(), Array2::zeros((n, 1)) + 1.0, vec!["c".into()]);
        // a constant covariate is fine in Dataset; only the design rejects it
        let ds = ds.unwrap();
        let muhat = Array2::from_shape_fn((n, 2), |(i, t)| if d[i] == t { y[i] } else { 7.0 });
        let phat = Array2::from_elem((n, 2), 0.5);
        let nuis = NuisanceEstimates::new(phat, muhat.clone(), &d, DEFAULT_FLOOR).unwrap();
        let est = dose_response(&ds, &nuis).unwrap();
        assert_abs_diff_eq!(est.mu_hat[1], mean(muhat.column(1).iter().copied()), epsilon = 1e-15);
        assert!(est.v_within.iter().all(|&v| v == 0.0));

        let flat = Array2::from_elem((n, 2), 2.5);
        let nuis = NuisanceEstimates::new(Array2::from_elem((n, 2), 0.5), flat, &d, DEFAULT_FLOOR).unwrap();
        let est = estimate_mu(&ds, &nuis).unwrap();
        let mut shifted = est.clone();
        shifted.mu_hat = vec![2.5, 2.5];
        let v = variance_mu(&ds, &nuis, &shifted).unwrap();
        assert!(v.v_between.iter().flatten().all(|&b| b == 0.0));
    }

    #[test]
    fn floor_water_fills() {
        let phat = array![[0.0001, 0.9999], [0.3, 0.7]];
        let nuis = NuisanceEstimates::new(phat, Array2::zeros((2, 2)), &[0, 1], 0.01).unwrap();
        assert!(nuis.floor_applied());
        assert_abs_diff_eq!(nuis.phat()[[0, 0]], 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(nuis.phat()[[0, 1]], 0.99, epsilon = 1e-15);
        assert_eq!(nuis.phat()[[1, 0]], 0.3);
        let three = array![[0.0, 0.0, 1.0]];
        let nuis = NuisanceEstimates::new(three, Array2::zeros((1, 3)), &[2], 0.1);
        assert!(matches!(nuis, Err(Error::EmptyGroup(0))));
        let mut row = [0.0, 0.02, 0.98];
        floor_row(&mut row, 0.1);
        assert_abs_diff_eq!(row[0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(row[1], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(row[2], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn contrast_parsing() {
        let c = Contrast::parse("mu1-mu0").unwrap();
        assert_eq!(c.gradient(2).unwrap(), vec![-1.0, 1.0]);
        let c = Contrast::parse("tau2").unwrap();
        assert_eq!(c.gradient(2).unwrap(), vec![0.0, 1.0]);
        assert!(Contrast::parse("mu3-mu0").unwrap().gradient(2).is_err());
        assert!(Contrast::parse("mu1-tau1").is_err());
        assert!(Contrast::parse("beta1").is_err());
        let c = Contrast::parse("0.5*mu1 + 0.5*mu2 - mu0").unwrap();
        assert_eq!(c.gradient(3).unwrap(), vec![-1.0, 0.5, 0.5]);
    }

    #[test]
    fn ci_half_width() {
        let est = EffectEstimate {
            mu_hat: vec![0.0, 1.0],
            v: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            v_within: vec![1.0, 1.0],
            v_between: vec![vec![0.0; 2]; 2],
            n: 100,
        };
        let ci = ci_mu(&est, &Contrast::parse("mu1-mu0").unwrap(), 0.05).unwrap();
        assert_abs_diff_eq!(ci.upper - ci.estimate, 1.959963984540054 * (0.02f64).sqrt(), epsilon = 1e-12);
        let zero = ci_functional(1.0, &[1.0], &[vec![0.0]], 10, 0.05).unwrap();
        assert!(zero.degenerate);
    }

    #[test]
    fn trimming_rule() {
        let d = vec![1, 1, 0, 0, 0];
        let ds = Dataset::new(vec![0.0; 5], d.clone(), Array2::from_shape_fn((5, 1), |(i, _)| i as f64), vec!["x".into()]).unwrap();
        let p1 = [0.2, 0.9, 0.95, 0.5, 0.1];
        let phat = Array2::from_shape_fn((5, 2), |(i, t)| if t == 1 { p1[i] } else { 1.0 - p1[i] });
        let nuis = NuisanceEstimates::new(phat, Array2::zeros((5, 2)), &d, DEFAULT_FLOOR).unwrap();
        let tr = trim_overlap(&ds, &nuis, 1).unwrap();
        assert_eq!(tr.kept, vec![0, 1, 3]);
        assert_eq!(tr.dropped, vec![2, 4]);
        assert_eq!((tr.comparisons_before, tr.comparisons_after), (3, 1));
        assert_eq!(tr.dataset.n(), 3);
    }
}
