//! Computable stand-ins for the first-stage conditions: sparse and
//! restricted eigenvalues of Gram matrices, overlap summaries and selected
//! support sizes.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::effects::NuisanceEstimates;
use crate::error::{Error, Result};
use crate::stats::quantile;

/// Largest design width accepted by [`restricted_eig_estimate`].
pub const RE_MAX_P: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramKind {
    /// `Q = E_n[x* x*']`.
    Pooled,
    /// `Q_t = E_{n,t}[x* x*']`.
    PerTreatment(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigReport {
    pub gram_kind: GramKind,
    pub support: Vec<usize>,
    /// Smallest eigenvalue of the support-restricted Gram matrix.
    pub phi_min: f64,
    pub phi_max: f64,
    pub kappa_estimate: Option<ReEstimate>,
}

fn submatrix(gram: &Array2<f64>, support: &[usize]) -> Result<DMatrix<f64>> {
    let p = gram.nrows();
    if gram.ncols() != p {
        return Err(Error::Dimension("gram matrix must be square".into()));
    }
    if support.is_empty() {
        return Err(Error::Config("sparse eigenvalues need a nonempty support".into()));
    }
    if let Some(&j) = support.iter().find(|&&j| j >= p) {
        return Err(Error::Config(format!("support index {j} out of range (p = {p})")));
    }
    Ok(DMatrix::from_fn(support.len(), support.len(), |a, b| gram[[support[a], support[b]]]))
}

/// Extreme eigenvalues `(φ̲², φ̄²)` of the Gram matrix restricted to `support`.
pub fn sparse_eig(gram: &Array2<f64>, support: &[usize]) -> Result<(f64, f64)> {
    let sub = submatrix(gram, support)?;
    let eig = SymmetricEigen::new(sub);
    let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // round-off may push a PSD matrix's smallest eigenvalue slightly negative
    Ok((lo.max(0.0), hi.max(0.0)))
}

pub fn eig_report(gram: &Array2<f64>, support: &[usize], kind: GramKind) -> Result<EigReport> {
    let (phi_min, phi_max) = sparse_eig(gram, support)?;
    Ok(EigReport {
        gram_kind: kind,
        support: support.to_vec(),
        phi_min,
        phi_max,
        kappa_estimate: None,
    })
}

/// A sampled upper bound on the restricted eigenvalue κ²; not a certificate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReEstimate {
    pub value: f64,
    pub cone_multiplier: f64,
    pub samples: usize,
    pub seed: u64,
    pub descent_steps: usize,
    /// Whether the smallest ratio came from a direction using off-support columns.
    pub off_support_direction: bool,
}

struct Cone<'a> {
    grams: &'a [Array2<f64>],
    in_support: Vec<bool>,
    support: &'a [usize],
    m: f64,
}

impl Cone<'_> {
    fn ratio(&self, delta: &Array2<f64>) -> f64 {
        let num: f64 = self
            .grams
            .iter()
            .enumerate()
            .map(|(b, q)| {
                let col = delta.column(b);
                col.dot(&q.dot(&col))
            })
            .sum();
        let den: f64 = self.support.iter().map(|&j| delta.row(j).iter().map(|v| v * v).sum::<f64>()).sum();
        num / den
    }

    fn norms(&self, delta: &Array2<f64>) -> (f64, f64) {
        let mut on = 0.0;
        let mut off = 0.0;
        for (j, row) in delta.axis_iter(Axis(0)).enumerate() {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if self.in_support[j] {
                on += nrm;
            } else {
                off += nrm;
            }
        }
        (on, off)
    }

    /// Shrink the off-support rows until the cone constraint holds.
    fn retract(&self, delta: &mut Array2<f64>) {
        let (on, off) = self.norms(delta);
        if off > self.m * on && off > 0.0 {
            let scale = self.m * on / off;
            for (j, mut row) in delta.axis_iter_mut(Axis(0)).enumerate() {
                if !self.in_support[j] {
                    row *= scale;
                }
            }
        }
    }

    fn gradient(&self, delta: &Array2<f64>, f: f64) -> Array2<f64> {
        let den: f64 = self.support.iter().map(|&j| delta.row(j).iter().map(|v| v * v).sum::<f64>()).sum();
        let mut g = Array2::zeros(delta.raw_dim());
        for (b, q) in self.grams.iter().enumerate() {
            let qd = q.dot(&delta.column(b));
            g.column_mut(b).assign(&(qd * 2.0));
        }
        for &j in self.support {
            let row = delta.row(j).to_owned();
            let mut gr = g.row_mut(j);
            gr.scaled_add(-2.0 * f, &row);
        }
        g / den
    }

    fn descend(&self, mut delta: Array2<f64>, steps: usize) -> (Array2<f64>, f64) {
        let mut f = self.ratio(&delta);
        let mut step = 0.1;
        for _ in 0..steps {
            let g = self.gradient(&delta, f);
            let mut improved = false;
            while step > 1e-12 {
                let mut trial = &delta - &(&g * step);
                self.retract(&mut trial);
                let ft = self.ratio(&trial);
                if ft.is_finite() && ft < f {
                    delta = trial;
                    f = ft;
                    step *= 2.0;
                    improved = true;
                    break;
                }
                step *= 0.5;
            }
            if !improved {
                break;
            }
        }
        (delta, f)
    }
}

/// Randomized search for the restricted eigenvalue over the single-block
/// cone `‖δ_{Sᶜ}‖₁ ≤ m‖δ_S‖₁`.
pub fn restricted_eig_estimate(
    gram: &Array2<f64>,
    support: &[usize],
    cone_multiplier: f64,
    samples: usize,
    seed: u64,
) -> Result<ReEstimate> {
    restricted_eig_estimate_blocks(std::slice::from_ref(gram), support, cone_multiplier, samples, seed)
}

/// Block version: `δ` is `p × B`, the numerator is `Σ_b δ_b' Q_b δ_b`, the
/// denominator `‖δ_{S,·}‖²`, and the cone uses the row-wise ℓ2/ℓ1 norm.
/// Pass `Q` repeated `T` times for the propensity model and `Q_0, …, Q_T`
/// for the outcome model.
pub fn restricted_eig_estimate_blocks(
    grams: &[Array2<f64>],
    support: &[usize],
    cone_multiplier: f64,
    samples: usize,
    seed: u64,
) -> Result<ReEstimate> {
    let first = grams.first().ok_or_else(|| Error::Config("need at least one Gram block".into()))?;
    let p = first.nrows();
    if p > RE_MAX_P {
        return Err(Error::TooLarge(p));
    }
    if grams.iter().any(|q| q.dim() != (p, p)) {
        return Err(Error::Dimension("Gram blocks must all be p × p".into()));
    }
    if !(cone_multiplier > 0.0) {
        return Err(Error::Config("cone multiplier must be positive".into()));
    }
    let mut support_sorted = support.to_vec();
    support_sorted.sort_unstable();
    support_sorted.dedup();
    for q in grams {
        submatrix(q, &support_sorted)?;
    }
    let mut in_support = vec![false; p];
    support_sorted.iter().for_each(|&j| in_support[j] = true);
    let off: Vec<usize> = (0..p).filter(|&j| !in_support[j]).collect();
    let cone = Cone {
        grams,
        in_support,
        support: &support_sorted,
        m: cone_multiplier,
    };
    let blocks = grams.len();
    let s = support_sorted.len();

    // support-only candidate: the minimizing sparse eigenvector in its best block
    let mut candidates: Vec<(f64, Array2<f64>, bool)> = Vec::new();
    for (b, q) in grams.iter().enumerate() {
        let eig = SymmetricEigen::new(submatrix(q, &support_sorted)?);
        let (k, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.total_cmp(y.1))
            .expect("nonempty");
        let mut delta = Array2::zeros((p, blocks));
        for (a, &j) in support_sorted.iter().enumerate() {
            delta[[j, b]] = eig.eigenvectors[(a, k)];
        }
        candidates.push((cone.ratio(&delta), delta, false));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 5;
    let mut sampled: Vec<(f64, Array2<f64>)> = Vec::new();
    for _ in 0..samples {
        let mut delta = Array2::zeros((p, blocks));
        for &j in &support_sorted {
            for b in 0..blocks {
                delta[[j, b]] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        if !off.is_empty() {
            let dense = rng.gen_bool(0.5);
            let k = if dense { off.len() } else { rng.gen_range(1..=off.len().min(2 * s + 1)) };
            let chosen: Vec<usize> = rand::seq::index::sample(&mut rng, off.len(), k).into_iter().map(|i| off[i]).collect();
            for &j in &chosen {
                for b in 0..blocks {
                    delta[[j, b]] = rng.sample::<f64, _>(StandardNormal);
                }
            }
            let (on, offn) = cone.norms(&delta);
            let target = rng.gen::<f64>() * cone_multiplier * on;
            if offn > 0.0 {
                for &j in &chosen {
                    let mut row = delta.row_mut(j);
                    row *= target / offn;
                }
            }
        }
        let f = cone.ratio(&delta);
        if sampled.len() < keep {
            sampled.push((f, delta));
            sampled.sort_by(|a, b| a.0.total_cmp(&b.0));
        } else if f < sampled[keep - 1].0 {
            sampled[keep - 1] = (f, delta);
            sampled.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
    }
    candidates.extend(sampled.into_iter().map(|(f, d)| (f, d, true)));

    let steps = 200;
    let mut best = (f64::INFINITY, false);
    for (_, delta, _) in candidates {
        let (d, f) = cone.descend(delta, steps);
        let uses_off = off.iter().any(|&j| d.row(j).iter().any(|&v| v != 0.0));
        if f < best.0 {
            best = (f, uses_off);
        }
    }
    Ok(ReEstimate {
        value: best.0.max(0.0),
        cone_multiplier,
        samples,
        seed,
        descent_steps: steps,
        off_support_direction: best.1,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapLevel {
    pub level: usize,
    pub min: f64,
    pub q05: f64,
    pub median: f64,
    pub q95: f64,
    pub max: f64,
    /// Units whose propensity for this level sits at the floor.
    pub at_floor: usize,
}

/// Distribution of fitted propensities per treatment level.
pub fn overlap_summary(nuis: &NuisanceEstimates) -> Vec<OverlapLevel> {
    let floor = nuis.floor();
    (0..nuis.n_levels())
        .map(|t| {
            let mut v: Vec<f64> = nuis.phat().column(t).to_vec();
            v.sort_by(f64::total_cmp);
            OverlapLevel {
                level: t,
                min: v[0],
                q05: quantile(&v, 0.05),
                median: quantile(&v, 0.5),
                q95: quantile(&v, 0.95),
                max: v[v.len() - 1],
                at_floor: v.iter().filter(|&&p| p <= floor * (1.0 + 1e-12)).count(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportSizes {
    pub selected_d: usize,
    pub selected_y: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeQuantiles {
    pub min: f64,
    pub median: f64,
    pub q95: f64,
    pub max: f64,
    pub mean: f64,
}

impl SizeQuantiles {
    fn from_sizes(sizes: impl Iterator<Item = usize>) -> Self {
        let mut v: Vec<f64> = sizes.map(|s| s as f64).collect();
        if v.is_empty() {
            return Self {
                min: f64::NAN,
                median: f64::NAN,
                q95: f64::NAN,
                max: f64::NAN,
                mean: f64::NAN,
            };
        }
        v.sort_by(f64::total_cmp);
        Self {
            min: v[0],
            median: quantile(&v, 0.5),
            q95: quantile(&v, 0.95),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportSummary {
    /// The design's reference sparsity `s`.
    pub design_sparsity: usize,
    pub propensity: SizeQuantiles,
    pub outcome: SizeQuantiles,
    pub per_replication: Vec<SupportSizes>,
}

/// Selected-set sizes across replications against the design sparsity.
pub fn support_tracking(sizes: &[SupportSizes], design_sparsity: usize) -> SupportSummary {
    SupportSummary {
        design_sparsity,
        propensity: SizeQuantiles::from_sizes(sizes.iter().map(|s| s.selected_d)),
        outcome: SizeQuantiles::from_sizes(sizes.iter().map(|s| s.selected_y)),
        per_replication: sizes.to_vec(),
    }
}
