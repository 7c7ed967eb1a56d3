//! Reference-experiment reproductions: the entropy counter-example, the
//! unimodal validation, the two-mode benchmark and the mass-spring-damper
//! fault model, each run with pinned seeds and checked against its expected
//! figures. Exit code 3 signals a mismatch.

use anyhow::Result;
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use jmls::backward::{run_backward, ReductionTols};
use jmls::forward::UNCAPPED;
use jmls::mixture::{
    differential_entropy_delta, kl_merge_bound, moment_match_merge, reduce_mixture,
    GaussianComponent, GaussianMixture,
};
use jmls::model::{discretize_msd, simulate, JmlsModel, ModeParams, Timing};
use jmls::oracle::{
    default_grid_for, enumerate_smoother, evaluate_grid, grid_kl, grid_l1, grid_max_abs_diff,
    rts_smoother,
};
use jmls::smoother::{run_smoother, Caps, SmootherOptions};

use crate::commands::check_line;

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_vec(v.to_vec())
}

fn dm1(v: f64) -> DMatrix<f64> {
    DMatrix::from_vec(1, 1, vec![v])
}

fn scalar_comp(w: f64, mu: f64, p: f64) -> GaussianComponent {
    GaussianComponent::from_weight(w, dv(&[mu]), dm1(p))
}

/// The two-mode benchmark system: `u_k = 1`, mode switch before the
/// prediction step.
pub fn example2_model() -> (JmlsModel, GaussianMixture) {
    let model = JmlsModel::new(
        vec![
            ModeParams::scalar(0.9, 0.1, 0.9, 0.05, 0.45, 0.5),
            ModeParams::scalar(0.9, 0.12, 0.85, 0.05, 0.01, 1.5),
        ],
        DMatrix::from_row_slice(2, 2, &[0.6, 0.4, 0.4, 0.6]),
        Timing::SwitchBeforePrediction,
    )
    .unwrap();
    let prior = GaussianMixture::new(vec![
        vec![scalar_comp(0.5, 0.0, 1.0)],
        vec![scalar_comp(0.5, 0.0, 1.0)],
    ]);
    (model, prior)
}

/// Mass-spring-damper fault model at 100 Hz: healthy spring/damper versus a
/// detached (double-integrator) mode, position sensing, 1% permanent
/// failure chance.
pub fn example3_model() -> (JmlsModel, GaussianMixture) {
    let (a1, b1) = discretize_msd(8.0, 12.0, 10.0, 0.01).unwrap();
    let (a2, b2) = discretize_msd(8.0, 0.0, 0.0, 0.01).unwrap();
    let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let d = DMatrix::zeros(1, 1);
    let q = DMatrix::from_diagonal(&dv(&[1e-6, 1e-4]));
    let r = dm1(1e-4);
    let model = JmlsModel::new(
        vec![
            ModeParams::new(a1, b1, c.clone(), d.clone(), q.clone(), r.clone()),
            ModeParams::new(a2, b2, c, d, q, r),
        ],
        DMatrix::from_row_slice(2, 2, &[0.99, 0.0, 0.01, 1.0]),
        Timing::SwitchAfterPrediction,
    )
    .unwrap();
    let prior = GaussianMixture::new(vec![
        vec![GaussianComponent::from_weight(
            1.0,
            dv(&[0.0, 0.0]),
            DMatrix::identity(2, 2),
        )],
        vec![],
    ]);
    (model, prior)
}

/// Reduction of the three-component mixture whose entropy **decreases**:
/// bounds, merged statistics and the entropy change.
pub fn entropy_counterexample() -> Result<i32> {
    let comps = vec![
        scalar_comp(0.25, -0.9, 1.0),
        scalar_comp(0.25, 0.9, 1.0),
        scalar_comp(0.5, 0.0, 0.1),
    ];
    let b12 = kl_merge_bound(&comps[0], &comps[1])?;
    let b13 = kl_merge_bound(&comps[0], &comps[2])?;
    let b23 = kl_merge_bound(&comps[1], &comps[2])?;
    let merged = moment_match_merge(&comps[0], &comps[1])?;
    let reduced = reduce_mixture(&comps, 2)?;
    let dh = differential_entropy_delta(
        &GaussianMixture::new(vec![comps.clone()]),
        &GaussianMixture::new(vec![reduced]),
    )?;

    let tol = 5e-4;
    let mut ok = true;
    ok &= check_line("B(1,2)", (b12 - 0.1483).abs() <= tol, &format!("{b12:.4} (expected 0.1483)"));
    ok &= check_line("B(1,3)", (b13 - 0.3714).abs() <= tol, &format!("{b13:.4} (expected 0.3714)"));
    ok &= check_line("B(2,3)", (b23 - 0.3714).abs() <= tol, &format!("{b23:.4} (expected 0.3714)"));
    ok &= check_line(
        "merged component",
        (merged.weight() - 0.5).abs() <= tol
            && merged.mean[0].abs() <= tol
            && (merged.cov[(0, 0)] - 1.81).abs() <= tol,
        &format!(
            "w={:.4}, mu={:.4}, P={:.4} (expected 0.5, 0, 1.81)",
            merged.weight(),
            merged.mean[0],
            merged.cov[(0, 0)]
        ),
    );
    ok &= check_line(
        "entropy change",
        (dh + 0.0177).abs() <= tol,
        &format!("{dh:.4} (expected -0.0177; negative: the merge sharpened the mixture)"),
    );
    Ok(if ok { 0 } else { 3 })
}

/// Unimodal validation: the two-filter smoother against the classical RTS
/// smoother on a single-mode system, 13 steps.
pub fn example1() -> Result<i32> {
    let model = JmlsModel::new(
        vec![ModeParams::scalar(0.9, 0.1, 0.9, 0.05, 0.45, 0.5)],
        dm1(1.0),
        Timing::SwitchAfterPrediction,
    )?;
    let prior_comp = scalar_comp(1.0, 0.0, 1.0);
    let prior = GaussianMixture::new(vec![vec![prior_comp.clone()]]);
    let mut rng = ChaCha12Rng::seed_from_u64(101);
    let inputs: Vec<DVector<f64>> = (0..13)
        .map(|_| dv(&[rng.sample::<f64, _>(rand_distr::StandardNormal)]))
        .collect();
    let data = simulate(&model, &prior, &inputs, 202)?;

    let smoothed = run_smoother(&model, &prior, &data, &SmootherOptions::default())?;
    let rts = rts_smoother(&model.modes[0], &prior_comp, &data)?;
    let mut worst = 0.0f64;
    for k in 0..13 {
        let rts_mix = GaussianMixture::new(vec![vec![GaussianComponent::from_weight(
            1.0,
            rts[k].smoothed_mean.clone(),
            rts[k].smoothed_cov.clone(),
        )]]);
        let spec = default_grid_for(&[&smoothed[k].mixture, &rts_mix], 2001)?;
        let a = evaluate_grid(&smoothed[k].mixture, &spec)?;
        let b = evaluate_grid(&rts_mix, &spec)?;
        worst = worst.max(grid_max_abs_diff(&a, &b)?);
    }
    let ok = check_line(
        "smoothed density equals the RTS density",
        worst <= 1e-8,
        &format!("worst max-abs grid difference {worst:.3e} over 13 steps (bound 1e-8)"),
    );
    Ok(if ok { 0 } else { 3 })
}

/// Two-mode benchmark, 15 steps: the exact enumeration stands in as ground
/// truth, and the capped smoother is compared against this crate's own
/// single-component-per-mode configuration as the weak baseline.
pub fn example2() -> Result<i32> {
    let (model, prior) = example2_model();
    let inputs: Vec<DVector<f64>> = (0..15).map(|_| dv(&[1.0])).collect();
    let data = simulate(&model, &prior, &inputs, 1000)?;
    let oracle = enumerate_smoother(&model, &prior, &data)?;

    let run = |caps: Caps| -> Result<Vec<jmls::smoother::SmoothedState>> {
        Ok(run_smoother(
            &model,
            &prior,
            &data,
            &SmootherOptions {
                caps,
                ..Default::default()
            },
        )?)
    };
    let exact = run(Caps::default())?;
    let capped = run(Caps::new(4, 4))?;
    let baseline = run(Caps::new(1, 1))?;

    let mean_kl = |est: &[jmls::smoother::SmoothedState]| -> Result<f64> {
        let mut total = 0.0;
        for k in 0..15 {
            let spec = default_grid_for(&[&oracle[k].mixture], 501)?;
            let t = evaluate_grid(&oracle[k].mixture, &spec)?;
            let e = evaluate_grid(&est[k].mixture, &spec)?;
            total += grid_kl(&t, &e, 1e-300)?;
        }
        Ok(total / 15.0)
    };
    let kl_exact = mean_kl(&exact)?;
    let kl_capped = mean_kl(&capped)?;
    let kl_baseline = mean_kl(&baseline)?;

    println!("mean KL to the enumeration ground truth over 15 steps:");
    println!("  caps=inf,inf : {kl_exact:.6e}");
    println!("  caps=4,4     : {kl_capped:.6e}");
    println!("  caps=1,1     : {kl_baseline:.6e}  (this crate's own single-component baseline,");
    println!("                 standing in for external competitor smoothers)");
    let mut ok = true;
    ok &= check_line(
        "exact configuration reproduces the ground truth",
        kl_exact <= 1e-8,
        &format!("mean KL {kl_exact:.3e} (bound 1e-8)"),
    );
    ok &= check_line(
        "capped run beats the single-component baseline",
        kl_capped <= kl_baseline,
        &format!("{kl_capped:.3e} <= {kl_baseline:.3e}"),
    );
    Ok(if ok { 0 } else { 3 })
}

/// Mass-spring-damper fault model, 10 steps at 100 Hz with
/// `F[k] = 2000 sin(k/(20π))`: rank-deficient backward components must be
/// carried, and the smoothed output must match the enumeration oracle.
pub fn example3() -> Result<i32> {
    const N: usize = 10;
    let (model, prior) = example3_model();
    let rate = 1.0 / (20.0 * std::f64::consts::PI);
    let inputs: Vec<DVector<f64>> = (1..=N)
        .map(|k| dv(&[2000.0 * (k as f64 * rate).sin()]))
        .collect();
    let data = simulate(&model, &prior, &inputs, 777)?;

    let backward = run_backward(&model, &data, UNCAPPED, ReductionTols::default())?;
    let mut max_rank = 0usize;
    for z in 0..2 {
        for comp in backward[N - 2].propagated.components(z) {
            let eig = comp.l.clone().symmetric_eigen();
            let lam_max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
            let rank = eig
                .eigenvalues
                .iter()
                .filter(|&&v| v > 1e-9 * lam_max.max(1e-300))
                .count();
            max_rank = max_rank.max(rank);
        }
    }

    let smoothed = run_smoother(&model, &prior, &data, &SmootherOptions::default())?;
    let mut worst_norm = 0.0f64;
    for st in &smoothed {
        worst_norm = worst_norm.max((st.mode_marginal.iter().sum::<f64>() - 1.0).abs());
    }

    let oracle = enumerate_smoother(&model, &prior, &data)?;
    let mut worst_l1 = 0.0f64;
    for k in 0..N {
        let spec = default_grid_for(&[&oracle[k].mixture], 101)?;
        let a = evaluate_grid(&smoothed[k].mixture, &spec)?;
        let b = evaluate_grid(&oracle[k].mixture, &spec)?;
        worst_l1 = worst_l1.max(grid_l1(&a, &b)?);
    }

    println!(
        "final fault probability p(z_10 = 2 | y_1:10) = {:.4}",
        smoothed[N - 1].mode_marginal[1]
    );
    let mut ok = true;
    ok &= check_line(
        "first backward step is rank deficient",
        max_rank <= 1,
        &format!("max rank {max_rank} (position-only sensing leaves velocity unobserved)"),
    );
    ok &= check_line(
        "smoothed marginals normalized at every step",
        worst_norm <= 1e-9,
        &format!("worst |sum - 1| = {worst_norm:.3e}"),
    );
    ok &= check_line(
        "matches the 2^10-sequence enumeration",
        worst_l1 <= 1e-6,
        &format!("worst grid L1 {worst_l1:.3e} (bound 1e-6)"),
    );
    Ok(if ok { 0 } else { 3 })
}

pub fn run(example: &str) -> Result<i32> {
    match example {
        "entropy-counterexample" => entropy_counterexample(),
        "example1" => example1(),
        "example2" => example2(),
        "example3" => example3(),
        other => anyhow::bail!(
            "unknown example {other:?}; choose entropy-counterexample | example1 | example2 | example3"
        ),
    }
}
