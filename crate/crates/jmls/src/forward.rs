//! Forward hybrid filter: per-component Kalman correction, mode-coupled
//! prediction, and per-mode KL reduction between steps.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_spd, gaussian_log_density, symmetrize};
use crate::mixture::{reduce_mixture, GaussianComponent, GaussianMixture};
use crate::model::{Dataset, JmlsModel, ModeParams, Timing};

/// Use this cap to disable reduction entirely (exact, exponentially growing
/// recursion).
pub const UNCAPPED: usize = usize::MAX;

/// Components whose log-weight trails the per-step maximum by more than this
/// are dropped before reduction when a finite cap is in force.
pub const LOG_WEIGHT_DROP: f64 = 700.0;

/// Filter state at one step: the predicted mixture that entered the
/// correction and the filtered mixture that left it.
#[derive(Debug, Clone)]
pub struct ForwardState {
    pub predicted: GaussianMixture,
    pub filtered: GaussianMixture,
    /// Zero-based step index.
    pub step: usize,
}

/// Innovation quantities of one component update.
#[derive(Debug, Clone)]
pub struct Innovation {
    /// Predicted output `η = C μ + D u`.
    pub predicted_output: DVector<f64>,
    /// Innovation covariance `Σ = C P Cᵀ + R`.
    pub cov: DMatrix<f64>,
    /// Kalman gain `K = P Cᵀ Σ⁻¹`.
    pub gain: DMatrix<f64>,
}

/// Innovation of a single predicted component under one mode's output map.
pub fn innovation(
    comp: &GaussianComponent,
    mode: &ModeParams,
    u: &DVector<f64>,
) -> Result<Innovation> {
    let eta = &mode.c * &comp.mean + &mode.d * u;
    let cp = &mode.c * &comp.cov;
    let cov = symmetrize(&(&cp * mode.c.transpose() + &mode.r));
    let ch = cholesky_spd(&cov, "innovation covariance")?;
    let gain = ch.solve(&cp).transpose();
    Ok(Innovation {
        predicted_output: eta,
        cov,
        gain,
    })
}

/// Measurement correction of the predicted mixture (Kalman update per
/// component, weight times the Gaussian predictive likelihood of `y`,
/// global normalization across modes and components).
///
/// The covariance update uses the Joseph form for positive semi-definite
/// safety; it agrees with the `P − K C P` form to rounding.
pub fn correct(
    predicted: &GaussianMixture,
    modes: &[ModeParams],
    u: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<GaussianMixture> {
    if predicted.component_count() == 0 {
        return Err(Error::Empty("predicted mixture"));
    }
    let mut out = GaussianMixture::empty(predicted.mode_count());
    let mut max_log_lik = f64::NEG_INFINITY;
    for (z, comps) in predicted.modes().iter().enumerate() {
        let mode = &modes[z];
        let n = mode.state_dim();
        let eye = DMatrix::<f64>::identity(n, n);
        for comp in comps {
            let inn = innovation(comp, mode, u)?;
            let ch = cholesky_spd(&inn.cov, "innovation covariance")?;
            let log_lik = gaussian_log_density(y, &inn.predicted_output, &ch);
            max_log_lik = max_log_lik.max(log_lik);
            let resid = y - &inn.predicted_output;
            let mean = &comp.mean + &inn.gain * resid;
            let ikc = &eye - &inn.gain * &mode.c;
            let cov = &ikc * &comp.cov * ikc.transpose()
                + &inn.gain * &mode.r * inn.gain.transpose();
            out.push(
                z,
                GaussianComponent::new(comp.log_weight + log_lik, mean, symmetrize(&cov)),
            );
        }
    }
    out.normalize().map_err(|_| Error::WeightUnderflow {
        max_log_likelihood: max_log_lik,
    })?;
    Ok(out)
}

/// Mode-coupled prediction: every (source mode, component, destination mode)
/// branch with nonzero transition probability produces one destination
/// component, laid out destination-major with source mode outer and
/// component index inner.
///
/// Under `SwitchAfterPrediction` the dynamics of the source mode apply and
/// `u` is the current input; under `SwitchBeforePrediction` the destination
/// mode's dynamics apply and `u` must be the next step's input.
pub fn predict(filtered: &GaussianMixture, model: &JmlsModel, u: &DVector<f64>) -> GaussianMixture {
    let m = model.mode_count();
    let mut out = GaussianMixture::empty(m);
    for dest in 0..m {
        for (src, comps) in filtered.modes().iter().enumerate() {
            let t = model.transition_prob(dest, src);
            if t <= 0.0 {
                continue;
            }
            let dyn_mode = match model.timing {
                Timing::SwitchAfterPrediction => &model.modes[src],
                Timing::SwitchBeforePrediction => &model.modes[dest],
            };
            for comp in comps {
                if comp.log_weight == f64::NEG_INFINITY {
                    continue;
                }
                let mean = &dyn_mode.a * &comp.mean + &dyn_mode.b * u;
                let cov = &dyn_mode.a * &comp.cov * dyn_mode.a.transpose() + &dyn_mode.q;
                out.push(
                    dest,
                    GaussianComponent::new(comp.log_weight + t.ln(), mean, symmetrize(&cov)),
                );
            }
        }
    }
    out
}

fn reduce_filtered(mut filtered: GaussianMixture, cap: usize) -> Result<GaussianMixture> {
    if cap == UNCAPPED {
        return Ok(filtered);
    }
    for z in 0..filtered.mode_count() {
        let comps = filtered.components(z);
        if comps.is_empty() {
            continue;
        }
        let max_lw = comps
            .iter()
            .map(|c| c.log_weight)
            .fold(f64::NEG_INFINITY, f64::max);
        let kept: Vec<GaussianComponent> = comps
            .iter()
            .filter(|c| c.log_weight > max_lw - LOG_WEIGHT_DROP)
            .cloned()
            .collect();
        let reduced = if kept.len() > cap {
            reduce_mixture(&kept, cap)?
        } else {
            kept
        };
        *filtered.components_mut(z) = reduced;
    }
    filtered.normalize()?;
    Ok(filtered)
}

/// Runs the forward pass over the whole dataset: correct, reduce per mode,
/// predict. With `cap = UNCAPPED` the recursion is exact.
pub fn run_forward(
    model: &JmlsModel,
    prior: &GaussianMixture,
    dataset: &Dataset,
    cap: usize,
) -> Result<Vec<ForwardState>> {
    if cap == 0 {
        return Err(Error::InvalidArgument("forward cap must be >= 1".into()));
    }
    let n = dataset.len();
    if n == 0 {
        return Err(Error::Empty("dataset"));
    }
    let mut predicted = prior.clone();
    predicted.normalize()?;
    let mut states = Vec::with_capacity(n);
    for k in 0..n {
        let filtered_raw = correct(&predicted, &model.modes, &dataset.inputs[k], &dataset.outputs[k])?;
        let filtered = reduce_filtered(filtered_raw, cap)?;
        let next = (k + 1 < n).then(|| {
            let u_pred = match model.timing {
                Timing::SwitchAfterPrediction => &dataset.inputs[k],
                Timing::SwitchBeforePrediction => &dataset.inputs[k + 1],
            };
            predict(&filtered, model, u_pred)
        });
        states.push(ForwardState {
            predicted,
            filtered,
            step: k,
        });
        match next {
            Some(p) => predicted = p,
            None => break,
        }
    }
    Ok(states)
}
