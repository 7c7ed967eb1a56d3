//! Two-filter combination: forward filtered mixtures joined with backward
//! propagated likelihoods into the smoothed hybrid mixture, and the
//! end-to-end smoother loop.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::backward::{run_backward, ReductionTols};
use crate::error::{Error, Result};
use crate::forward::{run_forward, UNCAPPED};
use crate::likelihood::{LikelihoodComponent, LikelihoodMixture};
use crate::linalg::{cholesky_spd, ln_det_from_cholesky, symmetrize};
use crate::mixture::{reduce_mixture, GaussianComponent, GaussianMixture};
use crate::model::{Dataset, JmlsModel};

/// Smoothed hybrid distribution at one step.
#[derive(Debug, Clone)]
pub struct SmoothedState {
    pub mixture: GaussianMixture,
    /// Per-mode probability (summed weights).
    pub mode_marginal: Vec<f64>,
    /// Zero-based step index.
    pub step: usize,
}

/// Component caps of the three reduction sites. `usize::MAX`
/// ([`crate::forward::UNCAPPED`]) disables a site.
#[derive(Debug, Clone, Copy)]
pub struct Caps {
    pub forward: usize,
    pub backward: usize,
    /// Optional final reduction of each smoothed mixture; off by default so
    /// metrics see the raw combination.
    pub smoothed: Option<usize>,
}

impl Default for Caps {
    fn default() -> Self {
        Self {
            forward: UNCAPPED,
            backward: UNCAPPED,
            smoothed: None,
        }
    }
}

impl Caps {
    pub fn exact() -> Self {
        Self::default()
    }

    pub fn new(forward: usize, backward: usize) -> Self {
        Self {
            forward,
            backward,
            smoothed: None,
        }
    }
}

/// Options of [`run_smoother`].
#[derive(Debug, Clone, Copy, Default)]
pub struct SmootherOptions {
    pub caps: Caps,
    pub tols: ReductionTols,
}

/// Product of one filtered Gaussian with one likelihood component:
///
/// `P̄ = (P⁻¹ + L)⁻¹`, `μ̄ = P̄ (P⁻¹ μ − s)`, and the unnormalized
/// log-weight gains `½ ln|P̄| − ½ ln|P| + ½ β` with
/// `β = μ̄ᵀ P̄⁻¹ μ̄ − μᵀ P⁻¹ μ − r`, all evaluated in log domain.
pub fn combine_component(
    filtered: &GaussianComponent,
    bif: &LikelihoodComponent,
) -> Result<GaussianComponent> {
    let ch_p = cholesky_spd(&filtered.cov, "filtered covariance")?;
    let n = filtered.dim();
    let p_inv = ch_p.solve(&DMatrix::<f64>::identity(n, n));
    let info = symmetrize(&(&p_inv + &bif.l));
    let ch_info = cholesky_spd(&info, "combined information matrix")?;
    let p_inv_mu = &p_inv * &filtered.mean;
    let mean = ch_info.solve(&(&p_inv_mu - &bif.s));
    let cov = symmetrize(&ch_info.inverse());

    let beta = mean.dot(&(&info * &mean)) - filtered.mean.dot(&p_inv_mu) - bif.r;
    // ln|P̄| = −ln|P⁻¹ + L|.
    let ln_det_pbar = -ln_det_from_cholesky(&ch_info);
    let ln_det_p = ln_det_from_cholesky(&ch_p);
    let log_weight = filtered.log_weight + 0.5 * (ln_det_pbar - ln_det_p) + 0.5 * beta;
    Ok(GaussianComponent::new(log_weight, mean, cov))
}

/// Combines the filtered mixture at step k with the *propagated* backward
/// likelihood `p(y_{k+1:N} | x_k, z_k)` at the same step: all (filtered i,
/// backward ℓ) cross products per mode, backward index major, then global
/// normalization over modes and components.
pub fn smooth_step(
    filtered: &GaussianMixture,
    propagated: &LikelihoodMixture,
    step: usize,
) -> Result<SmoothedState> {
    if filtered.mode_count() != propagated.mode_count() {
        return Err(Error::DimensionMismatch(format!(
            "filtered has {} modes, backward has {}",
            filtered.mode_count(),
            propagated.mode_count()
        )));
    }
    let mut max_log_weight = f64::NEG_INFINITY;
    let mut mixture = GaussianMixture::empty(filtered.mode_count());
    for (z, fwd_comps) in filtered.modes().iter().enumerate() {
        let pairs: Vec<(usize, usize)> = (0..propagated.components(z).len())
            .flat_map(|l| (0..fwd_comps.len()).map(move |i| (l, i)))
            .collect();
        let combined: Vec<GaussianComponent> = pairs
            .par_iter()
            .map(|&(l, i)| combine_component(&fwd_comps[i], &propagated.components(z)[l]))
            .collect::<Result<_>>()?;
        for c in combined {
            max_log_weight = max_log_weight.max(c.log_weight);
            mixture.push(z, c);
        }
    }
    mixture.normalize().map_err(|_| Error::WeightUnderflow {
        max_log_likelihood: max_log_weight,
    })?;
    let mode_marginal = mixture.mode_marginals();
    Ok(SmoothedState {
        mixture,
        mode_marginal,
        step,
    })
}

/// Combines completed forward and backward passes step by step, with an
/// optional final per-mode reduction of each smoothed mixture.
pub fn combine_passes(
    forward: &[crate::forward::ForwardState],
    backward: &[crate::backward::BackwardState],
    smoothed_cap: Option<usize>,
) -> Result<Vec<SmoothedState>> {
    let mut out = Vec::with_capacity(forward.len());
    for (fwd, bwd) in forward.iter().zip(backward) {
        let mut state = smooth_step(&fwd.filtered, &bwd.propagated, fwd.step)?;
        if let Some(cap) = smoothed_cap {
            for z in 0..state.mixture.mode_count() {
                let comps = state.mixture.components(z);
                if comps.len() > cap {
                    let reduced = reduce_mixture(comps, cap)?;
                    *state.mixture.components_mut(z) = reduced;
                }
            }
            state.mixture.normalize()?;
            state.mode_marginal = state.mixture.mode_marginals();
        }
        out.push(state);
    }
    Ok(out)
}

/// The two-filter smoother end to end: forward pass, backward pass, then the
/// per-step combination. At the terminal step the backward likelihood is
/// uninformative, so the smoothed state equals the filtered one there. With
/// both caps at [`UNCAPPED`] the result is the exact smoothed distribution.
pub fn run_smoother(
    model: &JmlsModel,
    prior: &GaussianMixture,
    dataset: &Dataset,
    options: &SmootherOptions,
) -> Result<Vec<SmoothedState>> {
    let forward = run_forward(model, prior, dataset, options.caps.forward)?;
    let backward = run_backward(model, dataset, options.caps.backward, options.tols)?;
    debug_assert_eq!(forward.len(), backward.len());
    combine_passes(&forward, &backward, options.caps.smoothed)
}
