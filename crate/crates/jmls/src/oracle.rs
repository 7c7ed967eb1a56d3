//! Independent ground-truth machinery: the exact sequence-enumeration
//! smoother, a classical RTS smoother, tabulated density grids with L1/KL
//! metrics, and a quadrature oracle for the backward likelihood recursion.
//!
//! Everything here deliberately avoids the mixture/likelihood kernels used
//! by the production filters so that agreement between the two paths is
//! evidence, not tautology.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::likelihood::LikelihoodMixture;
use crate::math::{adaptive_simpson, log_sum_exp};
use crate::mixture::{GaussianComponent, GaussianMixture};
use crate::model::{Dataset, JmlsModel, ModeParams, Timing};
use crate::smoother::SmoothedState;

/// Hard limit on `modes^N · prior components` for the enumeration oracle.
pub const ENUMERATION_GUARD: f64 = 1e6;

/// One axis of a uniform evaluation grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Axis {
    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.count as f64 - 1.0)
    }

    pub fn point(&self, i: usize) -> f64 {
        self.min + self.spacing() * i as f64
    }
}

/// Grid specification: one axis per state dimension (at most two).
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub axes: Vec<Axis>,
}

impl GridSpec {
    pub fn one_dim(min: f64, max: f64, count: usize) -> Self {
        Self {
            axes: vec![Axis { min, max, count }],
        }
    }

    pub fn cell_count(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(Axis::spacing).product()
    }
}

/// Tabulated per-mode density values over a grid.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    pub spec: GridSpec,
    /// `values[mode][cell]`, cells in row-major order.
    pub values: Vec<Vec<f64>>,
    pub cell_volume: f64,
}

impl DensityGrid {
    pub fn mode_count(&self) -> usize {
        self.values.len()
    }

    /// Density marginalized over modes.
    pub fn marginal_values(&self) -> Vec<f64> {
        let cells = self.spec.cell_count();
        let mut out = vec![0.0; cells];
        for mode in &self.values {
            for (o, v) in out.iter_mut().zip(mode) {
                *o += v;
            }
        }
        out
    }

    /// Riemann mass `Σ values · cell_volume` over all modes.
    pub fn total_mass(&self) -> f64 {
        self.marginal_values().iter().sum::<f64>() * self.cell_volume
    }
}

/// Builds a grid covering every supplied mixture to ±8 combined standard
/// deviations per axis.
pub fn default_grid_for(mixtures: &[&GaussianMixture], count: usize) -> Result<GridSpec> {
    let dim = mixtures
        .iter()
        .find_map(|m| m.state_dim())
        .ok_or(Error::Empty("grid construction input"))?;
    if dim > 2 {
        return Err(Error::Unsupported(format!(
            "grids are limited to 2 dimensions, state has {dim}"
        )));
    }
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for m in mixtures {
        if m.component_count() == 0 {
            continue;
        }
        let (mean, cov) = m.mean_and_cov()?;
        for a in 0..dim {
            let sd = cov[(a, a)].max(0.0).sqrt();
            lo[a] = lo[a].min(mean[a] - 8.0 * sd);
            hi[a] = hi[a].max(mean[a] + 8.0 * sd);
        }
    }
    Ok(GridSpec {
        axes: (0..dim)
            .map(|a| Axis {
                min: lo[a],
                max: hi[a],
                count,
            })
            .collect(),
    })
}

/// Restart interval of the blocked scalar-Gaussian recurrence.
const EVAL_BLOCK: usize = 32;

/// Accumulates `w · N(x | mu, var)` over a uniform 1-D grid.
///
/// Points on a uniform grid satisfy a two-term geometric recurrence in the
/// exponent, which replaces one `exp` per point with two multiplies; the
/// recurrence restarts from an exact evaluation every `EVAL_BLOCK` points to
/// bound drift, and falls back to direct evaluation for components narrower
/// than a few grid cells.
fn accumulate_gaussian_1d(out: &mut [f64], axis: &Axis, weight: f64, mu: f64, var: f64) {
    let h = axis.spacing();
    let sd = var.sqrt();
    let norm = weight / (sd * (2.0 * std::f64::consts::PI).sqrt());
    // Window beyond which the density underflows relative to any mass of
    // interest.
    let lo_x = mu - 45.0 * sd;
    let hi_x = mu + 45.0 * sd;
    let lo = ((lo_x - axis.min) / h).floor().max(0.0) as usize;
    let hi = (((hi_x - axis.min) / h).ceil() as usize).min(axis.count - 1);
    if lo > hi {
        return;
    }
    let half_inv_var = 0.5 / var;
    if var < 16.0 * h * h {
        for i in lo..=hi {
            let d = axis.point(i) - mu;
            out[i] += norm * (-d * d * half_inv_var).exp();
        }
        return;
    }
    let c_half = (-h * h * half_inv_var).exp(); // exp(-h²/2σ²)
    let c_full = c_half * c_half; // exp(-h²/σ²)
    let mut i = lo;
    while i <= hi {
        let block_end = (i + EVAL_BLOCK - 1).min(hi);
        let d = axis.point(i) - mu;
        let mut g = (-d * d * half_inv_var).exp();
        let mut t = (-d * h * 2.0 * half_inv_var).exp(); // exp(-d·h/σ²)
        out[i] += norm * g;
        for j in (i + 1)..=block_end {
            g *= t * c_half;
            t *= c_full;
            out[j] += norm * g;
        }
        i = block_end + 1;
    }
}

/// Tabulates the per-mode density of a mixture over a grid (1-D or 2-D).
pub fn evaluate_grid(mixture: &GaussianMixture, spec: &GridSpec) -> Result<DensityGrid> {
    let dim = spec.axes.len();
    if dim == 0 || dim > 2 {
        return Err(Error::Unsupported(format!(
            "grids are limited to 1 or 2 dimensions, got {dim}"
        )));
    }
    if let Some(d) = mixture.state_dim() {
        if d != dim {
            return Err(Error::DimensionMismatch(format!(
                "mixture dimension {d} vs grid dimension {dim}"
            )));
        }
    }
    for a in &spec.axes {
        if a.count < 2 || a.max <= a.min {
            return Err(Error::InvalidArgument("grid axes need count >= 2 and max > min".into()));
        }
    }
    let cells = spec.cell_count();
    let values: Vec<Vec<f64>> = mixture
        .modes()
        .par_iter()
        .map(|comps| {
            let mut mode_vals = vec![0.0f64; cells];
            for c in comps {
                let w = c.log_weight.exp();
                if w == 0.0 {
                    continue;
                }
                if dim == 1 {
                    accumulate_gaussian_1d(&mut mode_vals, &spec.axes[0], w, c.mean[0], c.cov[(0, 0)]);
                } else {
                    accumulate_gaussian_2d(&mut mode_vals, spec, w, &c.mean, &c.cov);
                }
            }
            mode_vals
        })
        .collect();
    Ok(DensityGrid {
        spec: spec.clone(),
        values,
        cell_volume: spec.cell_volume(),
    })
}

fn accumulate_gaussian_2d(
    out: &mut [f64],
    spec: &GridSpec,
    weight: f64,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) {
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    let norm = weight / (2.0 * std::f64::consts::PI * det.sqrt());
    let inv00 = cov[(1, 1)] / det;
    let inv11 = cov[(0, 0)] / det;
    let inv01 = -cov[(0, 1)] / det;
    let (ax, ay) = (&spec.axes[0], &spec.axes[1]);
    let sd0 = cov[(0, 0)].sqrt();
    let sd1 = cov[(1, 1)].sqrt();
    let xlo = (((mean[0] - 45.0 * sd0 - ax.min) / ax.spacing()).floor().max(0.0)) as usize;
    let xhi = ((((mean[0] + 45.0 * sd0 - ax.min) / ax.spacing()).ceil()) as usize).min(ax.count - 1);
    let ylo = (((mean[1] - 45.0 * sd1 - ay.min) / ay.spacing()).floor().max(0.0)) as usize;
    let yhi = ((((mean[1] + 45.0 * sd1 - ay.min) / ay.spacing()).ceil()) as usize).min(ay.count - 1);
    for ix in xlo..=xhi {
        let dx = ax.point(ix) - mean[0];
        let row = ix * ay.count;
        for iy in ylo..=yhi {
            let dy = ay.point(iy) - mean[1];
            let q = inv00 * dx * dx + 2.0 * inv01 * dx * dy + inv11 * dy * dy;
            if q < 2000.0 {
                out[row + iy] += norm * (-0.5 * q).exp();
            }
        }
    }
}

fn check_axes(p: &DensityGrid, q: &DensityGrid) -> Result<()> {
    if p.spec != q.spec || p.mode_count() != q.mode_count() {
        return Err(Error::DimensionMismatch(
            "density grids have different axes or mode counts".into(),
        ));
    }
    Ok(())
}

/// Hybrid grid KL divergence `Σ p ln(p / max(q, floor)) · cell_volume`,
/// summed over modes and cells. Zero-density cells of `p` contribute zero.
pub fn grid_kl(p: &DensityGrid, q: &DensityGrid, floor: f64) -> Result<f64> {
    if floor <= 0.0 {
        return Err(Error::InvalidArgument("KL floor must be positive".into()));
    }
    check_axes(p, q)?;
    let mut total = 0.0;
    for (pm, qm) in p.values.iter().zip(&q.values) {
        for (&pv, &qv) in pm.iter().zip(qm) {
            if pv > 0.0 {
                total += pv * (pv / qv.max(floor)).ln();
            }
        }
    }
    Ok(total * p.cell_volume)
}

/// Grid L1 distance `Σ |p − q| · cell_volume` over modes and cells.
pub fn grid_l1(p: &DensityGrid, q: &DensityGrid) -> Result<f64> {
    check_axes(p, q)?;
    let mut total = 0.0;
    for (pm, qm) in p.values.iter().zip(&q.values) {
        for (&pv, &qv) in pm.iter().zip(qm) {
            total += (pv - qv).abs();
        }
    }
    Ok(total * p.cell_volume)
}

/// Largest pointwise density difference over modes and cells.
pub fn grid_max_abs_diff(p: &DensityGrid, q: &DensityGrid) -> Result<f64> {
    check_axes(p, q)?;
    let mut worst = 0.0f64;
    for (pm, qm) in p.values.iter().zip(&q.values) {
        for (&pv, &qv) in pm.iter().zip(qm) {
            worst = worst.max((pv - qv).abs());
        }
    }
    Ok(worst)
}

/// One step of the classical single-model pass: filtered and smoothed
/// statistics.
#[derive(Debug, Clone)]
pub struct RtsStep {
    pub predicted_mean: DVector<f64>,
    pub predicted_cov: DMatrix<f64>,
    pub filtered_mean: DVector<f64>,
    pub filtered_cov: DMatrix<f64>,
    pub smoothed_mean: DVector<f64>,
    pub smoothed_cov: DMatrix<f64>,
}

fn kalman_correct(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    mode: &ModeParams,
    u: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    let eta = &mode.c * mean + &mode.d * u;
    let sigma = &mode.c * cov * mode.c.transpose() + &mode.r;
    let ch = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("innovation covariance".into()))?;
    let resid = y - &eta;
    let gain = ch.solve(&(&mode.c * cov)).transpose();
    let mean_f = mean + &gain * &resid;
    let cov_f = cov - &gain * &mode.c * cov;
    let qdim = y.len() as f64;
    let ln_det: f64 = 2.0 * (0..sigma.nrows()).map(|i| ch.l_dirty()[(i, i)].ln()).sum::<f64>();
    let log_lik = -0.5
        * (qdim * (2.0 * std::f64::consts::PI).ln() + ln_det + resid.dot(&ch.solve(&resid)));
    Ok((mean_f, cov_f, log_lik))
}

/// Kalman filter + RTS backward pass along one fixed mode sequence.
/// Returns the per-step statistics and the accumulated measurement
/// log-likelihood.
fn sequence_kalman_rts(
    model: &JmlsModel,
    sequence: &[usize],
    prior: &GaussianComponent,
    dataset: &Dataset,
) -> Result<(Vec<RtsStep>, f64)> {
    let n = dataset.len();
    let mut log_lik = 0.0;
    let mut pred_mean = prior.mean.clone();
    let mut pred_cov = prior.cov.clone();
    let mut steps: Vec<(DVector<f64>, DMatrix<f64>, DVector<f64>, DMatrix<f64>)> =
        Vec::with_capacity(n);
    let mut dyn_modes: Vec<usize> = Vec::with_capacity(n);
    for k in 0..n {
        let (mf, pf, ll) = kalman_correct(
            &pred_mean,
            &pred_cov,
            &model.modes[sequence[k]],
            &dataset.inputs[k],
            &dataset.outputs[k],
        )?;
        log_lik += ll;
        steps.push((pred_mean.clone(), pred_cov.clone(), mf.clone(), pf.clone()));
        if k + 1 < n {
            let (dyn_idx, u) = match model.timing {
                Timing::SwitchAfterPrediction => (sequence[k], &dataset.inputs[k]),
                Timing::SwitchBeforePrediction => (sequence[k + 1], &dataset.inputs[k + 1]),
            };
            let dm = &model.modes[dyn_idx];
            pred_mean = &dm.a * &mf + &dm.b * u;
            pred_cov = &dm.a * pf * dm.a.transpose() + &dm.q;
            dyn_modes.push(dyn_idx);
        }
    }

    let mut out: Vec<RtsStep> = steps
        .iter()
        .map(|(pm, pc, fm, fc)| RtsStep {
            predicted_mean: pm.clone(),
            predicted_cov: pc.clone(),
            filtered_mean: fm.clone(),
            filtered_cov: fc.clone(),
            smoothed_mean: fm.clone(),
            smoothed_cov: fc.clone(),
        })
        .collect();
    for k in (0..n.saturating_sub(1)).rev() {
        let dm = &model.modes[dyn_modes[k]];
        let pred_next_inv = out[k + 1]
            .predicted_cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("predicted covariance".into()))?;
        let gain = pred_next_inv
            .solve(&(&dm.a * &out[k].filtered_cov))
            .transpose();
        let mean = &out[k].filtered_mean
            + &gain * (&out[k + 1].smoothed_mean - &out[k + 1].predicted_mean);
        let cov = &out[k].filtered_cov
            + &gain
                * (&out[k + 1].smoothed_cov - &out[k + 1].predicted_cov)
                * gain.transpose();
        out[k].smoothed_mean = mean;
        out[k].smoothed_cov = crate::linalg::symmetrize(&cov);
    }
    Ok((out, log_lik))
}

/// Classical Kalman filter + Rauch–Tung–Striebel smoother for a single mode.
pub fn rts_smoother(
    mode: &ModeParams,
    prior: &GaussianComponent,
    dataset: &Dataset,
) -> Result<Vec<RtsStep>> {
    let model = JmlsModel::new(
        vec![mode.clone()],
        DMatrix::from_vec(1, 1, vec![1.0]),
        Timing::SwitchAfterPrediction,
    )?;
    let seq = vec![0usize; dataset.len()];
    sequence_kalman_rts(&model, &seq, prior, dataset).map(|(steps, _)| steps)
}

fn enumeration_sequences(model: &JmlsModel, n: usize) -> Vec<Vec<usize>> {
    let m = model.mode_count();
    let mut seqs = Vec::new();
    let mut seq = vec![0usize; n];
    loop {
        // Skip sequences containing a forbidden transition.
        let feasible = seq
            .windows(2)
            .all(|w| model.transition_prob(w[1], w[0]) > 0.0);
        if feasible {
            seqs.push(seq.clone());
        }
        // Odometer increment, most-significant at index 0 for stable order.
        let mut pos = n;
        loop {
            if pos == 0 {
                return seqs;
            }
            pos -= 1;
            seq[pos] += 1;
            if seq[pos] < m {
                break;
            }
            seq[pos] = 0;
        }
    }
}

fn guard_enumeration(model: &JmlsModel, prior: &GaussianMixture, n: usize) -> Result<()> {
    let requested =
        (model.mode_count() as f64).powi(n as i32) * prior.component_count().max(1) as f64;
    if requested > ENUMERATION_GUARD {
        return Err(Error::GuardExceeded {
            requested,
            limit: ENUMERATION_GUARD,
        });
    }
    Ok(())
}

/// Exact smoothed hybrid distribution by enumerating every mode sequence:
/// each feasible `z_{1:N}` (and prior component) contributes one
/// time-varying Kalman + RTS pass, weighted by its posterior probability.
pub fn enumerate_smoother(
    model: &JmlsModel,
    prior: &GaussianMixture,
    dataset: &Dataset,
) -> Result<Vec<SmoothedState>> {
    let n = dataset.len();
    guard_enumeration(model, prior, n)?;
    let sequences = enumeration_sequences(model, n);

    struct SeqResult {
        sequence: Vec<usize>,
        log_weight: f64,
        steps: Vec<RtsStep>,
    }

    let mut jobs: Vec<(Vec<usize>, GaussianComponent, f64)> = Vec::new();
    for seq in &sequences {
        for comp in prior.components(seq[0]) {
            if comp.log_weight == f64::NEG_INFINITY {
                continue;
            }
            let log_prior: f64 = comp.log_weight
                + seq
                    .windows(2)
                    .map(|w| model.transition_prob(w[1], w[0]).ln())
                    .sum::<f64>();
            jobs.push((seq.clone(), comp.clone(), log_prior));
        }
    }
    if jobs.is_empty() {
        return Err(Error::Empty("no feasible mode sequence under the prior"));
    }

    let results: Vec<SeqResult> = jobs
        .par_iter()
        .map(|(seq, comp, log_prior)| {
            let (steps, log_lik) = sequence_kalman_rts(model, seq, comp, dataset)?;
            Ok(SeqResult {
                sequence: seq.clone(),
                log_weight: log_prior + log_lik,
                steps,
            })
        })
        .collect::<Result<_>>()?;

    let total = log_sum_exp(&results.iter().map(|r| r.log_weight).collect::<Vec<_>>());
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut mixture = GaussianMixture::empty(model.mode_count());
        for r in &results {
            mixture.push(
                r.sequence[k],
                GaussianComponent::new(
                    r.log_weight - total,
                    r.steps[k].smoothed_mean.clone(),
                    r.steps[k].smoothed_cov.clone(),
                ),
            );
        }
        let mode_marginal = mixture.mode_marginals();
        out.push(SmoothedState {
            mixture,
            mode_marginal,
            step: k,
        });
    }
    Ok(out)
}

/// Exact filtered marginals by prefix enumeration, as a byproduct check of
/// the forward filter.
pub fn enumerate_filtered(
    model: &JmlsModel,
    prior: &GaussianMixture,
    dataset: &Dataset,
) -> Result<Vec<GaussianMixture>> {
    let n = dataset.len();
    guard_enumeration(model, prior, n)?;

    struct Branch {
        mode: usize,
        log_weight: f64,
        mean: DVector<f64>,
        cov: DMatrix<f64>,
    }

    let mut branches: Vec<Branch> = Vec::new();
    for (z, comps) in prior.modes().iter().enumerate() {
        for comp in comps {
            if comp.log_weight == f64::NEG_INFINITY {
                continue;
            }
            let (mf, pf, ll) = kalman_correct(
                &comp.mean,
                &comp.cov,
                &model.modes[z],
                &dataset.inputs[0],
                &dataset.outputs[0],
            )?;
            branches.push(Branch {
                mode: z,
                log_weight: comp.log_weight + ll,
                mean: mf,
                cov: pf,
            });
        }
    }

    let mut out = Vec::with_capacity(n);
    let snapshot = |branches: &[Branch]| -> GaussianMixture {
        let total = log_sum_exp(&branches.iter().map(|b| b.log_weight).collect::<Vec<_>>());
        let mut mix = GaussianMixture::empty(model.mode_count());
        for b in branches {
            mix.push(
                b.mode,
                GaussianComponent::new(b.log_weight - total, b.mean.clone(), b.cov.clone()),
            );
        }
        mix
    };
    out.push(snapshot(&branches));

    for k in 1..n {
        let mut next = Vec::with_capacity(branches.len() * model.mode_count());
        for b in &branches {
            for dest in 0..model.mode_count() {
                let t = model.transition_prob(dest, b.mode);
                if t <= 0.0 {
                    continue;
                }
                let (dyn_idx, u) = match model.timing {
                    Timing::SwitchAfterPrediction => (b.mode, &dataset.inputs[k - 1]),
                    Timing::SwitchBeforePrediction => (dest, &dataset.inputs[k]),
                };
                let dm = &model.modes[dyn_idx];
                let pred_mean = &dm.a * &b.mean + &dm.b * u;
                let pred_cov = &dm.a * &b.cov * dm.a.transpose() + &dm.q;
                let (mf, pf, ll) = kalman_correct(
                    &pred_mean,
                    &pred_cov,
                    &model.modes[dest],
                    &dataset.inputs[k],
                    &dataset.outputs[k],
                )?;
                next.push(Branch {
                    mode: dest,
                    log_weight: b.log_weight + t.ln() + ll,
                    mean: mf,
                    cov: pf,
                });
            }
        }
        branches = next;
        out.push(snapshot(&branches));
    }
    Ok(out)
}

/// Quadrature + mode-sum oracle for one backward recursion step of a scalar
/// model: evaluates
///
/// `Σ_ℓ T(ℓ | z) ∫ N(x⁺ | a x + b, q) · N(y⁺ | C x⁺ + D u⁺, R) · prop_{k+1}(x⁺, ℓ) dx⁺`
///
/// numerically, where `prop_{k+1}` is the propagated likelihood mixture at
/// the next step (`p(y_{k+2:N} | x_{k+1}, z_{k+1})`; the uninformative
/// mixture at the terminal step) and the measurement factor for `y_{k+1}`
/// is formed directly from the model — the correction kernel is not
/// involved. The result is `p(y_{k+1:N} | x_k = x, z_k = mode)`.
///
/// The integration window is panelized at the transition kernel's, the
/// measurement's and each component's own scale so narrow factors cannot
/// slip between quadrature nodes.
pub fn quadrature_backward_value(
    model: &JmlsModel,
    next_propagated: &LikelihoodMixture,
    u_meas: &DVector<f64>,
    y_meas: &DVector<f64>,
    u_prop: &DVector<f64>,
    x: f64,
    mode: usize,
) -> Result<f64> {
    if model.state_dim() != 1 {
        return Err(Error::Unsupported(
            "the quadrature oracle handles scalar models only".into(),
        ));
    }
    let offsets = [
        -14.0, -8.0, -5.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 5.0, 8.0, 14.0,
    ];
    let mut total = 0.0;
    for branch in 0..model.mode_count() {
        let t = model.transition_prob(branch, mode);
        if t <= 0.0 {
            continue;
        }
        let dyn_mode = match model.timing {
            Timing::SwitchAfterPrediction => &model.modes[mode],
            Timing::SwitchBeforePrediction => &model.modes[branch],
        };
        let mean = dyn_mode.a[(0, 0)] * x + dyn_mode.b[(0, 0)] * u_prop[0];
        let q = dyn_mode.q[(0, 0)];
        let sd_q = q.sqrt();
        // The transition kernel envelopes the integrand: beyond ±14σ the
        // contribution is below 1e-42 of the peak.
        let (lo, hi) = (mean - 14.0 * sd_q, mean + 14.0 * sd_q);

        let bm = &model.modes[branch];
        let (c_out, d_out, r_out) = (bm.c[(0, 0)], bm.d[(0, 0)], bm.r[(0, 0)]);
        let meas = |xp: f64| {
            let resid = y_meas[0] - (c_out * xp + d_out * u_meas[0]);
            (-0.5 * resid * resid / r_out).exp() / (2.0 * std::f64::consts::PI * r_out).sqrt()
        };

        for comp in next_propagated.components(branch) {
            let integrand = |xp: f64| {
                let trans = (-0.5 * (xp - mean) * (xp - mean) / q).exp()
                    / (2.0 * std::f64::consts::PI * q).sqrt();
                trans * meas(xp) * comp.log_value(&DVector::from_vec(vec![xp])).exp()
            };
            // Panel boundaries at every characteristic scale in play.
            let mut cuts: Vec<f64> = Vec::new();
            for o in offsets {
                cuts.push(mean + o * sd_q);
            }
            if c_out.abs() > 1e-9 {
                let center = (y_meas[0] - d_out * u_meas[0]) / c_out;
                let sd_m = r_out.sqrt() / c_out.abs();
                for o in offsets {
                    let c = center + o * sd_m;
                    if c > lo && c < hi {
                        cuts.push(c);
                    }
                }
            }
            let l = comp.l[(0, 0)];
            if l > 1e-12 {
                let center = -comp.s[0] / l;
                let sd_c = (1.0 / l).sqrt();
                for o in offsets {
                    let c = center + o * sd_c;
                    if c > lo && c < hi {
                        cuts.push(c);
                    }
                }
            }
            cuts.push(lo);
            cuts.push(hi);
            cuts.sort_by(f64::total_cmp);
            cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-13);

            // Scale the absolute tolerance to the integrand's magnitude.
            let peak = cuts
                .windows(2)
                .map(|w| integrand(0.5 * (w[0] + w[1])))
                .fold(0.0f64, f64::max)
                .max(1e-290);
            let tol = peak * (hi - lo) * 1e-11 / cuts.len() as f64;
            let mut acc = 0.0;
            for w in cuts.windows(2) {
                acc += adaptive_simpson(&integrand, w[0], w[1], tol);
            }
            total += t * acc;
        }
    }
    Ok(total)
}
