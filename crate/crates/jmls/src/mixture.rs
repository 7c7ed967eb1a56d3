//! Moment-form Gaussian mixture algebra: moment-matched merging, the
//! Kullback–Leibler merge bound, greedy mixture reduction and the
//! differential-entropy diagnostic.
//!
//! Weights are stored as log-weights throughout; totals are combined with
//! log-sum-exp so reduction preserves mass exactly.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_spd, gaussian_log_density, ln_det_from_cholesky, symmetrize};
use crate::math::{adaptive_simpson, log_sum_exp, log_sum_exp_pair};

/// One weighted Gaussian `w · N(x | mean, cov)` with `w` kept in log domain.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    pub log_weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianComponent {
    /// Builds a component, symmetrizing the covariance.
    pub fn new(log_weight: f64, mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        debug_assert_eq!(mean.len(), cov.nrows());
        debug_assert_eq!(cov.nrows(), cov.ncols());
        Self {
            log_weight,
            mean,
            cov: symmetrize(&cov),
        }
    }

    /// Builds a component from a linear-domain weight.
    pub fn from_weight(weight: f64, mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self::new(weight.ln(), mean, cov)
    }

    pub fn weight(&self) -> f64 {
        self.log_weight.exp()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `ln [w · N(x | mean, cov)]`.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let ch = cholesky_spd(&self.cov, "component covariance")?;
        Ok(self.log_weight + gaussian_log_density(x, &self.mean, &ch))
    }
}

/// A Gaussian mixture indexed by discrete mode: one component list per mode.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    modes: Vec<Vec<GaussianComponent>>,
}

impl GaussianMixture {
    pub fn new(modes: Vec<Vec<GaussianComponent>>) -> Self {
        Self { modes }
    }

    pub fn empty(mode_count: usize) -> Self {
        Self {
            modes: vec![Vec::new(); mode_count],
        }
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    pub fn components(&self, mode: usize) -> &[GaussianComponent] {
        &self.modes[mode]
    }

    pub fn components_mut(&mut self, mode: usize) -> &mut Vec<GaussianComponent> {
        &mut self.modes[mode]
    }

    pub fn modes(&self) -> &[Vec<GaussianComponent>] {
        &self.modes
    }

    pub fn push(&mut self, mode: usize, component: GaussianComponent) {
        self.modes[mode].push(component);
    }

    /// Total number of components across modes.
    pub fn component_count(&self) -> usize {
        self.modes.iter().map(Vec::len).sum()
    }

    /// State dimension, or `None` for an all-empty mixture.
    pub fn state_dim(&self) -> Option<usize> {
        self.modes
            .iter()
            .flat_map(|c| c.iter())
            .map(GaussianComponent::dim)
            .next()
    }

    /// `ln Σ w` over every component of every mode.
    pub fn total_log_weight(&self) -> f64 {
        let logs: Vec<f64> = self
            .modes
            .iter()
            .flat_map(|c| c.iter().map(|g| g.log_weight))
            .collect();
        log_sum_exp(&logs)
    }

    /// Rescales all weights so they sum to one; returns the log of the
    /// normalization constant that was removed.
    pub fn normalize(&mut self) -> Result<f64> {
        let total = self.total_log_weight();
        if total == f64::NEG_INFINITY {
            return Err(Error::WeightUnderflow {
                max_log_likelihood: f64::NEG_INFINITY,
            });
        }
        for comps in &mut self.modes {
            for c in comps.iter_mut() {
                c.log_weight -= total;
            }
        }
        Ok(total)
    }

    /// Per-mode marginal probabilities (summed weights).
    pub fn mode_marginals(&self) -> Vec<f64> {
        self.modes
            .iter()
            .map(|comps| {
                let logs: Vec<f64> = comps.iter().map(|c| c.log_weight).collect();
                log_sum_exp(&logs).exp()
            })
            .collect()
    }

    /// Mixture density at `x`, marginalized over modes.
    pub fn density(&self, x: &DVector<f64>) -> Result<f64> {
        let mut logs = Vec::with_capacity(self.component_count());
        for comps in &self.modes {
            for c in comps {
                if c.log_weight > f64::NEG_INFINITY {
                    logs.push(c.log_density(x)?);
                }
            }
        }
        Ok(log_sum_exp(&logs).exp())
    }

    /// Global mean and covariance of the mixture over all modes.
    pub fn mean_and_cov(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let dim = self.state_dim().ok_or(Error::Empty("mixture"))?;
        let total = self.total_log_weight();
        let mut mean = DVector::zeros(dim);
        let mut second = DMatrix::zeros(dim, dim);
        for comps in &self.modes {
            for c in comps {
                let w = (c.log_weight - total).exp();
                mean += w * &c.mean;
                second += w * (&c.cov + &c.mean * c.mean.transpose());
            }
        }
        let cov = symmetrize(&(second - &mean * mean.transpose()));
        Ok((mean, cov))
    }
}

/// Moment-matched merge of two weighted Gaussians: preserves the pair's
/// zeroth, first and second moments.
pub fn moment_match_merge(
    a: &GaussianComponent,
    b: &GaussianComponent,
) -> Result<GaussianComponent> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "merge of {}-dim and {}-dim components",
            a.dim(),
            b.dim()
        )));
    }
    let log_w = log_sum_exp_pair(a.log_weight, b.log_weight);
    if log_w == f64::NEG_INFINITY {
        return Err(Error::InvalidArgument(
            "cannot merge two zero-weight components".into(),
        ));
    }
    let va = (a.log_weight - log_w).exp();
    let vb = (b.log_weight - log_w).exp();
    let mean = va * &a.mean + vb * &b.mean;
    let diff = &a.mean - &b.mean;
    let cov = va * &a.cov + vb * &b.cov + (va * vb) * &diff * diff.transpose();
    Ok(GaussianComponent::new(log_w, mean, cov))
}

/// Upper bound `B(i,j) = ½(w_ij ln|P_ij| − w_i ln|P_i| − w_j ln|P_j|)` on the
/// mixture KL divergence incurred by merging the pair. Symmetric in its
/// arguments and zero for identical components.
pub fn kl_merge_bound(a: &GaussianComponent, b: &GaussianComponent) -> Result<f64> {
    let merged = moment_match_merge(a, b)?;
    let ln_det = |c: &GaussianComponent, label: &str| -> Result<f64> {
        let ch = cholesky_spd(&c.cov, label)?;
        Ok(ln_det_from_cholesky(&ch))
    };
    let mut bound = merged.weight() * ln_det(&merged, "merged covariance")?;
    if a.log_weight > f64::NEG_INFINITY {
        bound -= a.weight() * ln_det(a, "first covariance")?;
    }
    if b.log_weight > f64::NEG_INFINITY {
        bound -= b.weight() * ln_det(b, "second covariance")?;
    }
    Ok(0.5 * bound)
}

/// Greedy pairwise reduction driver shared by the moment-form and
/// range-space reductions.
///
/// Slots keep the stable input order; a merge writes into the smaller slot
/// and only bounds touching that slot are recomputed. Ties pick the lowest
/// `(i, j)` pair in slot order.
pub(crate) fn greedy_pair_reduce<T, B, M>(
    mut items: Vec<T>,
    cap: usize,
    bound: B,
    merge: M,
) -> Result<Vec<T>>
where
    B: Fn(&T, &T) -> Result<f64>,
    M: Fn(&T, &T) -> Result<T>,
{
    if cap == 0 {
        return Err(Error::InvalidArgument("component cap must be >= 1".into()));
    }
    if items.len() <= cap {
        return Ok(items);
    }
    let n = items.len();
    let mut alive = vec![true; n];
    let mut bounds = vec![f64::INFINITY; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            bounds[i * n + j] = bound(&items[i], &items[j])?;
        }
    }
    let mut remaining = n;
    while remaining > cap {
        let mut best = (usize::MAX, usize::MAX);
        let mut best_val = f64::INFINITY;
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            for j in (i + 1)..n {
                if !alive[j] {
                    continue;
                }
                let v = bounds[i * n + j];
                if v < best_val {
                    best_val = v;
                    best = (i, j);
                }
            }
        }
        let (i, j) = best;
        if i == usize::MAX {
            return Err(Error::Numerical(
                "no finite merge bound among remaining pairs".into(),
            ));
        }
        items[i] = merge(&items[i], &items[j])?;
        alive[j] = false;
        remaining -= 1;
        for k in 0..n {
            if k == i || !alive[k] {
                continue;
            }
            let (lo, hi) = if k < i { (k, i) } else { (i, k) };
            bounds[lo * n + hi] = bound(&items[lo], &items[hi])?;
        }
    }
    Ok(items
        .into_iter()
        .zip(alive)
        .filter_map(|(item, keep)| keep.then_some(item))
        .collect())
}

/// Kullback–Leibler reduction: repeatedly merges the pair with the smallest
/// `B(i,j)` until at most `cap` components remain.
///
/// Zero-weight components are dropped up front. Total weight is preserved
/// exactly; the mixture's global mean and covariance are preserved to
/// rounding because every merge is moment-matched.
pub fn reduce_mixture(
    components: &[GaussianComponent],
    cap: usize,
) -> Result<Vec<GaussianComponent>> {
    if components.is_empty() {
        return Err(Error::Empty("mixture reduction input"));
    }
    let live: Vec<GaussianComponent> = components
        .iter()
        .filter(|c| c.log_weight > f64::NEG_INFINITY)
        .cloned()
        .collect();
    if live.is_empty() {
        return Err(Error::Empty("mixture reduction input (all weights zero)"));
    }
    // Bounds are computed on weights rescaled by the mixture maximum; a
    // common positive factor cannot change which pair attains the minimum.
    let scale = live
        .iter()
        .map(|c| c.log_weight)
        .fold(f64::NEG_INFINITY, f64::max);
    let bound = |a: &GaussianComponent, b: &GaussianComponent| {
        let a2 = GaussianComponent::new(a.log_weight - scale, a.mean.clone(), a.cov.clone());
        let b2 = GaussianComponent::new(b.log_weight - scale, b.mean.clone(), b.cov.clone());
        kl_merge_bound(&a2, &b2)
    };
    greedy_pair_reduce(live, cap, bound, moment_match_merge)
}

/// Differential entropy change `Δh(p, q) = ∫ p ln p − q ln q dx` for scalar
/// mixtures, by adaptive quadrature over ±10 combined standard deviations.
///
/// Both mixtures must be normalized. Negative values are legitimate: merging
/// can sharpen a mixture.
pub fn differential_entropy_delta(p: &GaussianMixture, q: &GaussianMixture) -> Result<f64> {
    for (name, m) in [("p", p), ("q", q)] {
        if m.state_dim() != Some(1) {
            return Err(Error::Unsupported(format!(
                "entropy delta is defined for scalar mixtures; {name} is not scalar"
            )));
        }
        if m.total_log_weight().abs() > 1e-8 {
            return Err(Error::InvalidArgument(format!(
                "mixture {name} is not normalized (total weight {})",
                m.total_log_weight().exp()
            )));
        }
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for m in [p, q] {
        let (mean, cov) = m.mean_and_cov()?;
        let sd = cov[(0, 0)].max(0.0).sqrt();
        lo = lo.min(mean[0] - 10.0 * sd);
        hi = hi.max(mean[0] + 10.0 * sd);
    }
    let plogp = |v: f64| if v > 0.0 { v * v.ln() } else { 0.0 };
    let f = |x: f64| {
        let xv = DVector::from_vec(vec![x]);
        let pv = p.density(&xv).unwrap_or(0.0);
        let qv = q.density(&xv).unwrap_or(0.0);
        plogp(pv) - plogp(qv)
    };
    Ok(adaptive_simpson(&f, lo, hi, 1e-9))
}
