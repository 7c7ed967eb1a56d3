//! Information-form likelihood algebra for the backward filter.
//!
//! A likelihood component is the exponential-quadratic
//! `L(x | r, s, L) = exp(−½ (r + 2 xᵀ s + xᵀ L x))`. The information matrix
//! `L` may be singular, which is exactly what lets the backward filter carry
//! non-integrable likelihoods. This module provides the backward-propagation
//! and measurement-correction kernels, the transition-constant absorption,
//! and the range-space reduction that merges components sharing a common
//! `range(L)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{
    cholesky_spd, inv_quad_form, ln_det_from_cholesky, max_principal_angle, sign_ln_det,
    symmetrize,
};
use crate::math::{log_sum_exp, log_sum_exp_pair};
use crate::mixture::greedy_pair_reduce;
use crate::model::ModeParams;

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// One information-form likelihood component `(r, s, L)`.
#[derive(Debug, Clone)]
pub struct LikelihoodComponent {
    pub r: f64,
    pub s: DVector<f64>,
    pub l: DMatrix<f64>,
}

impl LikelihoodComponent {
    /// Builds a component, symmetrizing the information matrix.
    pub fn new(r: f64, s: DVector<f64>, l: DMatrix<f64>) -> Self {
        debug_assert_eq!(s.len(), l.nrows());
        Self {
            r,
            s,
            l: symmetrize(&l),
        }
    }

    /// The uninformative component `L(x | 0, 0, 0) = 1`.
    pub fn null(dim: usize) -> Self {
        Self {
            r: 0.0,
            s: DVector::zeros(dim),
            l: DMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.s.len()
    }

    /// `ln L(x | r, s, L)`.
    pub fn log_value(&self, x: &DVector<f64>) -> f64 {
        -0.5 * (self.r + 2.0 * self.s.dot(x) + (&self.l * x).dot(x))
    }
}

/// Per-mode lists of likelihood components, mirroring `GaussianMixture`.
#[derive(Debug, Clone)]
pub struct LikelihoodMixture {
    modes: Vec<Vec<LikelihoodComponent>>,
}

impl LikelihoodMixture {
    pub fn new(modes: Vec<Vec<LikelihoodComponent>>) -> Self {
        Self { modes }
    }

    pub fn empty(mode_count: usize) -> Self {
        Self {
            modes: vec![Vec::new(); mode_count],
        }
    }

    /// One uninformative component per mode: the terminal state of the
    /// backward recursion before any measurement has been applied.
    pub fn null(mode_count: usize, dim: usize) -> Self {
        Self {
            modes: vec![vec![LikelihoodComponent::null(dim)]; mode_count],
        }
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    pub fn components(&self, mode: usize) -> &[LikelihoodComponent] {
        &self.modes[mode]
    }

    pub fn components_mut(&mut self, mode: usize) -> &mut Vec<LikelihoodComponent> {
        &mut self.modes[mode]
    }

    pub fn modes(&self) -> &[Vec<LikelihoodComponent>] {
        &self.modes
    }

    pub fn push(&mut self, mode: usize, component: LikelihoodComponent) {
        self.modes[mode].push(component);
    }

    pub fn component_count(&self) -> usize {
        self.modes.iter().map(Vec::len).sum()
    }

    /// `ln Σ_j L_j(x)` over the components of one mode.
    pub fn log_value(&self, mode: usize, x: &DVector<f64>) -> f64 {
        let logs: Vec<f64> = self.modes[mode]
            .iter()
            .map(|c| c.log_value(x))
            .collect();
        log_sum_exp(&logs)
    }
}

/// The three matrices of the backward-propagation kernel.
#[derive(Debug, Clone)]
pub struct BackpropKernel {
    pub phi: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub psi: DMatrix<f64>,
}

impl BackpropKernel {
    /// `Φ = (I + L̄ Q)⁻¹ L̄`, `Β = I − Q Φ`, `Ψ = Q Φ Q − Q`.
    ///
    /// `Β` is not necessarily symmetric; `Φ` and `Ψ` are symmetrized.
    pub fn compute(l_bar: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<Self> {
        let n = l_bar.nrows();
        let lhs = DMatrix::<f64>::identity(n, n) + l_bar * q;
        let lu = lhs.lu();
        let phi = lu
            .solve(l_bar)
            .ok_or_else(|| Error::Singular("I + L̄Q in backward propagation".into()))?;
        let phi = symmetrize(&phi);
        let beta = DMatrix::<f64>::identity(n, n) - q * &phi;
        let psi = symmetrize(&(q * &phi * q - q));
        Ok(Self { phi, beta, psi })
    }
}

/// Backward propagation of a likelihood component through the affine
/// dynamics `x⁺ = A x + b` with process covariance `Q` (transition constant
/// not included):
///
/// `L(x | r, s, L) = ∫ N(x⁺ | A x + b, Q) · L(x⁺ | r̄, s̄, L̄) dx⁺`.
pub fn backward_propagate(
    comp: &LikelihoodComponent,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    q: &DMatrix<f64>,
) -> Result<LikelihoodComponent> {
    cholesky_spd(q, "process covariance Q")?;
    let kernel = BackpropKernel::compute(&comp.l, q)?;
    let (sign, ln_abs_det_beta) = sign_ln_det(&kernel.beta);
    if sign <= 0.0 {
        return Err(Error::Numerical(format!(
            "det Β = {sign}·exp({ln_abs_det_beta}) is not positive; backward propagation broke down"
        )));
    }
    let l = symmetrize(&(a.transpose() * &kernel.phi * a));
    let s = a.transpose() * (&kernel.phi * b + kernel.beta.transpose() * &comp.s);
    let quad = comp.s.dot(&(&kernel.psi * &comp.s))
        + 2.0 * comp.s.dot(&(&kernel.beta * b))
        + b.dot(&(&kernel.phi * b));
    let r = comp.r - ln_abs_det_beta + quad;
    Ok(LikelihoodComponent::new(r, s, l))
}

/// Absorbs a mode-transition probability into the information scalar:
/// `r ← r − 2 ln T`. Zero-probability branches must be dropped by the
/// caller, never propagated.
pub fn apply_transition_constant(
    comp: &LikelihoodComponent,
    t: f64,
) -> Result<LikelihoodComponent> {
    if t <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "transition probability must be positive, got {t}"
        )));
    }
    Ok(LikelihoodComponent {
        r: comp.r - 2.0 * t.ln(),
        s: comp.s.clone(),
        l: comp.l.clone(),
    })
}

/// Multiplies the component by the measurement likelihood
/// `N(y | C x + d, R)`:
///
/// `L̄ = L + CᵀR⁻¹C`, `s̄ = s + CᵀR⁻¹ζ`, `r̄ = r + ζᵀR⁻¹ζ + ln|2πR|`
/// with `ζ = d − y`.
pub fn measurement_correct(
    comp: &LikelihoodComponent,
    c: &DMatrix<f64>,
    d: &DVector<f64>,
    r_cov: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<LikelihoodComponent> {
    let ch = cholesky_spd(r_cov, "measurement covariance R")?;
    let zeta = d - y;
    let rinv_c = ch.solve(c);
    let l = symmetrize(&(&comp.l + c.transpose() * &rinv_c));
    let s = &comp.s + c.transpose() * ch.solve(&zeta);
    let q_dim = r_cov.nrows() as f64;
    let r = comp.r + inv_quad_form(&ch, &zeta) + q_dim * LN_2PI + ln_det_from_cholesky(&ch);
    Ok(LikelihoodComponent::new(r, s, l))
}

/// Terminal likelihood `p(y_N | x_N, z_N)` for one mode: the measurement
/// correction applied to the uninformative component.
pub fn init_terminal(
    mode: &ModeParams,
    u: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<LikelihoodComponent> {
    let null = LikelihoodComponent::null(mode.state_dim());
    measurement_correct(&null, &mode.c, &(&mode.d * u), &mode.r, y)
}

/// A likelihood component re-expressed on an orthonormal basis of
/// `range(L)`: `L = U Σ Uᵀ`, `s = U η`, with the scale factor
/// `α = exp(−½ (r − ηᵀΣ⁻¹η − ln|2πΣ⁻¹|))` kept in log form.
#[derive(Debug, Clone)]
pub struct RangeSpaceForm {
    pub basis: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub eta: DVector<f64>,
    pub log_alpha: f64,
    pub r: f64,
}

impl RangeSpaceForm {
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// Back-transform to the original state space.
    pub fn to_component(&self) -> LikelihoodComponent {
        let l = symmetrize(&(&self.basis * &self.sigma * self.basis.transpose()));
        let s = &self.basis * &self.eta;
        LikelihoodComponent::new(self.r, s, l)
    }
}

fn log_alpha_of(r: f64, eta: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let ch = cholesky_spd(sigma, "reduced information matrix Σ")?;
    let d = sigma.nrows() as f64;
    Ok(-0.5 * (r - inv_quad_form(&ch, eta) - d * LN_2PI + ln_det_from_cholesky(&ch)))
}

/// Factorizes a component over the range-space of its information matrix.
///
/// `rank_tol` is relative to the largest eigenvalue; components whose `s`
/// leaves `range(L)` (beyond `rank_tol · ‖s‖`) or whose `L` vanishes are
/// rejected with [`Error::RangeSpace`] — they cannot enter a range-space
/// merge and pass through reduction untouched.
pub fn range_space_factorize(
    comp: &LikelihoodComponent,
    rank_tol: f64,
) -> Result<RangeSpaceForm> {
    let n = comp.dim();
    let eigen = comp.l.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]));
    let lambda_max = eigen.eigenvalues[order[0]].max(0.0);
    if lambda_max <= 0.0 {
        return Err(Error::RangeSpace(
            "information matrix is zero; no range-space to reduce over".into(),
        ));
    }
    let d = order
        .iter()
        .take_while(|&&i| eigen.eigenvalues[i] > rank_tol * lambda_max)
        .count();
    let mut basis = DMatrix::<f64>::zeros(n, d);
    for (col, &src) in order.iter().take(d).enumerate() {
        basis.set_column(col, &eigen.eigenvectors.column(src));
    }
    let eta = basis.transpose() * &comp.s;
    let residual = (&comp.s - &basis * &eta).norm();
    let s_norm = comp.s.norm();
    if s_norm > 0.0 && residual > rank_tol.max(1e-12) * s_norm {
        return Err(Error::RangeSpace(format!(
            "s lies outside range(L): relative residual {:.3e}",
            residual / s_norm
        )));
    }
    let sigma = symmetrize(&(basis.transpose() * &comp.l * &basis));
    let log_alpha = log_alpha_of(comp.r, &eta, &sigma)?;
    Ok(RangeSpaceForm {
        basis,
        sigma,
        eta,
        log_alpha,
        r: comp.r,
    })
}

/// True iff the two factorizations span the same subspace: equal ranks and
/// every principal angle within `angle_tol` radians.
pub fn same_range_space(a: &RangeSpaceForm, b: &RangeSpaceForm, angle_tol: f64) -> bool {
    a.rank() == b.rank() && max_principal_angle(&a.basis, &b.basis) <= angle_tol
}

/// A group member expressed on the group's common basis.
#[derive(Debug, Clone)]
struct ReducedMember {
    log_alpha: f64,
    eta: DVector<f64>,
    sigma: DMatrix<f64>,
    r: f64,
}

fn merge_members(a: &ReducedMember, b: &ReducedMember) -> Result<ReducedMember> {
    let log_alpha = log_sum_exp_pair(a.log_alpha, b.log_alpha);
    if log_alpha == f64::NEG_INFINITY {
        return Err(Error::Numerical("merging two zero-scale likelihoods".into()));
    }
    let va = (a.log_alpha - log_alpha).exp();
    let vb = (b.log_alpha - log_alpha).exp();
    let ch_a = cholesky_spd(&a.sigma, "Σ_i")?;
    let ch_b = cholesky_spd(&b.sigma, "Σ_j")?;
    let mu_a = ch_a.solve(&a.eta);
    let mu_b = ch_b.solve(&b.eta);
    let d = &mu_a - &mu_b;
    let dim = a.sigma.nrows();
    let sigma_inv = symmetrize(
        &(va * ch_a.inverse() + vb * ch_b.inverse() + (va * vb) * &d * d.transpose()),
    );
    let ch_inv = cholesky_spd(&sigma_inv, "merged Σ⁻¹")?;
    let sigma = symmetrize(&ch_inv.inverse());
    let eta = &sigma * (va * &mu_a + vb * &mu_b);
    let quad = eta.dot(&(&sigma_inv * &eta));
    let ln_det_sigma = -ln_det_from_cholesky(&ch_inv);
    let r = quad - 2.0 * log_alpha + dim as f64 * LN_2PI - ln_det_sigma;
    Ok(ReducedMember {
        log_alpha,
        eta,
        sigma,
        r,
    })
}

/// `B̄(i,j)` with both scales rescaled by a common factor; only the ordering
/// of bounds matters to the greedy loop, and a positive common factor
/// preserves it.
fn merge_bound(a: &ReducedMember, b: &ReducedMember, scale: f64) -> Result<f64> {
    let aa = (a.log_alpha - scale).exp();
    let ab = (b.log_alpha - scale).exp();
    let log_alpha = log_sum_exp_pair(a.log_alpha, b.log_alpha);
    let va = (a.log_alpha - log_alpha).exp();
    let vb = (b.log_alpha - log_alpha).exp();
    let ch_a = cholesky_spd(&a.sigma, "Σ_i")?;
    let ch_b = cholesky_spd(&b.sigma, "Σ_j")?;
    let mu_a = ch_a.solve(&a.eta);
    let mu_b = ch_b.solve(&b.eta);
    let d = &mu_a - &mu_b;
    let sigma_inv = symmetrize(
        &(va * ch_a.inverse() + vb * ch_b.inverse() + (va * vb) * &d * d.transpose()),
    );
    let ch_inv = cholesky_spd(&sigma_inv, "candidate merged Σ⁻¹")?;
    Ok((aa + ab) * ln_det_from_cholesky(&ch_inv)
        + aa * ln_det_from_cholesky(&ch_a)
        + ab * ln_det_from_cholesky(&ch_b))
}

/// Range-space likelihood reduction.
///
/// Components are factorized over their range-spaces and grouped by
/// [`same_range_space`]; members of a group are re-expressed on the first
/// member's basis and greedily merged (lowest `B̄` first) until each group
/// holds at most `cap` components, then mapped back to the full state
/// space. The cap applies per range-space group. Components that cannot be
/// factorized (zero `L`, or `s` outside `range(L)`) pass through untouched,
/// as do groups already within the cap, so reduction never invents
/// information in a direction the inputs did not constrain.
pub fn reduce_likelihoods(
    comps: &[LikelihoodComponent],
    cap: usize,
    rank_tol: f64,
    angle_tol: f64,
) -> Result<Vec<LikelihoodComponent>> {
    if comps.is_empty() {
        return Err(Error::Empty("likelihood reduction input"));
    }
    if cap == 0 {
        return Err(Error::InvalidArgument("component cap must be >= 1".into()));
    }

    struct Group {
        first_index: usize,
        reference: RangeSpaceForm,
        members: Vec<(usize, RangeSpaceForm)>,
    }

    let mut groups: Vec<Group> = Vec::new();
    let mut passthrough: Vec<(usize, LikelihoodComponent)> = Vec::new();
    for (idx, comp) in comps.iter().enumerate() {
        match range_space_factorize(comp, rank_tol) {
            Ok(form) => {
                match groups
                    .iter_mut()
                    .find(|g| same_range_space(&g.reference, &form, angle_tol))
                {
                    Some(g) => g.members.push((idx, form)),
                    None => groups.push(Group {
                        first_index: idx,
                        reference: form.clone(),
                        members: vec![(idx, form)],
                    }),
                }
            }
            Err(Error::RangeSpace(_)) => passthrough.push((idx, comp.clone())),
            Err(e) => return Err(e),
        }
    }

    let mut out: Vec<(usize, Vec<LikelihoodComponent>)> = passthrough
        .into_iter()
        .map(|(i, c)| (i, vec![c]))
        .collect();

    for group in groups {
        if group.members.len() <= cap {
            // Nothing to merge: emit the original components untouched.
            out.push((
                group.first_index,
                group
                    .members
                    .iter()
                    .map(|(i, _)| comps[*i].clone())
                    .collect(),
            ));
            continue;
        }
        let basis = group.reference.basis.clone();
        let members: Vec<ReducedMember> = group
            .members
            .iter()
            .map(|(i, _)| {
                let comp = &comps[*i];
                let eta = basis.transpose() * &comp.s;
                let sigma = symmetrize(&(basis.transpose() * &comp.l * &basis));
                let log_alpha = log_alpha_of(comp.r, &eta, &sigma)?;
                Ok(ReducedMember {
                    log_alpha,
                    eta,
                    sigma,
                    r: comp.r,
                })
            })
            .collect::<Result<_>>()?;
        let scale = members
            .iter()
            .map(|m| m.log_alpha)
            .fold(f64::NEG_INFINITY, f64::max);
        if scale == f64::NEG_INFINITY {
            return Err(Error::Numerical(
                "all scale factors vanish within a range-space group".into(),
            ));
        }
        let reduced = greedy_pair_reduce(
            members,
            cap,
            |a, b| merge_bound(a, b, scale),
            merge_members,
        )?;
        let back: Vec<LikelihoodComponent> = reduced
            .into_iter()
            .map(|m| {
                RangeSpaceForm {
                    basis: basis.clone(),
                    sigma: m.sigma,
                    eta: m.eta,
                    log_alpha: m.log_alpha,
                    r: m.r,
                }
                .to_component()
            })
            .collect();
        out.push((group.first_index, back));
    }

    out.sort_by_key(|(i, _)| *i);
    Ok(out.into_iter().flat_map(|(_, v)| v).collect())
}
