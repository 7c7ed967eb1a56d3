//! Backward information filter over likelihood mixtures, with range-space
//! likelihood reduction between the propagation and correction of each step.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::forward::UNCAPPED;
use crate::likelihood::{
    apply_transition_constant, backward_propagate, init_terminal, measurement_correct,
    reduce_likelihoods, LikelihoodMixture,
};
use crate::model::{Dataset, JmlsModel, ModeParams, Timing};

/// Tolerances of the range-space reduction. The defaults match
/// double-precision SVD accuracy: `rank_tol` is relative to the largest
/// eigenvalue, `angle_tol` is in radians.
#[derive(Debug, Clone, Copy)]
pub struct ReductionTols {
    pub rank_tol: f64,
    pub angle_tol: f64,
}

impl Default for ReductionTols {
    fn default() -> Self {
        Self {
            rank_tol: 1e-9,
            angle_tol: 1e-7,
        }
    }
}

/// Backward filter state at one step: the propagated likelihood
/// `p(y_{k+1:N} | x_k, z_k)` (after reduction) and the corrected likelihood
/// `p(y_{k:N} | x_k, z_k)`.
#[derive(Debug, Clone)]
pub struct BackwardState {
    pub propagated: LikelihoodMixture,
    pub corrected: LikelihoodMixture,
    /// Zero-based step index.
    pub step: usize,
}

/// One backward propagation: every (destination-of-time mode ℓ at k+1,
/// component i, source mode z_k) branch with `T(ℓ | z_k) > 0` produces one
/// component of `p(y_{k+1:N} | x_k, z_k)`, laid out ℓ-major.
///
/// Under `SwitchAfterPrediction` the source mode's dynamics apply and `u` is
/// the step-k input; under `SwitchBeforePrediction` the branch mode ℓ's
/// dynamics apply and `u` must be the step-k+1 input.
pub fn propagate_step(
    corrected_next: &LikelihoodMixture,
    model: &JmlsModel,
    u: &DVector<f64>,
) -> Result<LikelihoodMixture> {
    let m = model.mode_count();
    let mut out = LikelihoodMixture::empty(m);
    for src in 0..m {
        for branch in 0..m {
            let t = model.transition_prob(branch, src);
            if t <= 0.0 {
                continue;
            }
            let dyn_mode = match model.timing {
                Timing::SwitchAfterPrediction => &model.modes[src],
                Timing::SwitchBeforePrediction => &model.modes[branch],
            };
            let b = &dyn_mode.b * u;
            for comp in corrected_next.components(branch) {
                let propagated = backward_propagate(comp, &dyn_mode.a, &b, &dyn_mode.q)?;
                out.push(src, apply_transition_constant(&propagated, t)?);
            }
        }
    }
    Ok(out)
}

/// Componentwise measurement correction; the component count is unchanged.
pub fn correct_step(
    propagated: &LikelihoodMixture,
    modes: &[ModeParams],
    u: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<LikelihoodMixture> {
    let mut out = LikelihoodMixture::empty(propagated.mode_count());
    for (z, comps) in propagated.modes().iter().enumerate() {
        let mode = &modes[z];
        let d = &mode.d * u;
        for comp in comps {
            out.push(z, measurement_correct(comp, &mode.c, &d, &mode.r, y)?);
        }
    }
    Ok(out)
}

fn reduce_propagated(
    mut propagated: LikelihoodMixture,
    cap: usize,
    tols: ReductionTols,
) -> Result<LikelihoodMixture> {
    if cap == UNCAPPED {
        return Ok(propagated);
    }
    for z in 0..propagated.mode_count() {
        let comps = propagated.components(z);
        if comps.len() <= cap {
            continue;
        }
        let reduced = reduce_likelihoods(comps, cap, tols.rank_tol, tols.angle_tol)?;
        *propagated.components_mut(z) = reduced;
    }
    Ok(propagated)
}

/// Runs the backward pass: terminal initialization at `k = N`, then
/// propagate → reduce per mode and range-space group → correct for
/// `k = N−1, …, 1`. Returned states are in ascending step order; at the
/// terminal step the propagated mixture is the uninformative component per
/// mode, so the two-filter combination degenerates to the forward filter
/// there. With `cap = UNCAPPED` the recursion is exact.
pub fn run_backward(
    model: &JmlsModel,
    dataset: &Dataset,
    cap: usize,
    tols: ReductionTols,
) -> Result<Vec<BackwardState>> {
    if cap == 0 {
        return Err(Error::InvalidArgument("backward cap must be >= 1".into()));
    }
    let n = dataset.len();
    if n == 0 {
        return Err(Error::Empty("dataset"));
    }
    let m = model.mode_count();

    let mut terminal = LikelihoodMixture::empty(m);
    for z in 0..m {
        terminal.push(
            z,
            init_terminal(
                &model.modes[z],
                &dataset.inputs[n - 1],
                &dataset.outputs[n - 1],
            )?,
        );
    }

    let mut states: Vec<BackwardState> = Vec::with_capacity(n);
    states.push(BackwardState {
        propagated: LikelihoodMixture::null(m, model.state_dim()),
        corrected: terminal,
        step: n - 1,
    });

    for k in (0..n - 1).rev() {
        let corrected_next = &states.last().unwrap().corrected;
        let u_prop = match model.timing {
            Timing::SwitchAfterPrediction => &dataset.inputs[k],
            Timing::SwitchBeforePrediction => &dataset.inputs[k + 1],
        };
        let propagated_raw = propagate_step(corrected_next, model, u_prop)?;
        let propagated = reduce_propagated(propagated_raw, cap, tols)?;
        let corrected = correct_step(&propagated, &model.modes, &dataset.inputs[k], &dataset.outputs[k])?;
        states.push(BackwardState {
            propagated,
            corrected,
            step: k,
        });
    }
    states.reverse();
    Ok(states)
}
