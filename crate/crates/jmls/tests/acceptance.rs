//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured figures (run with `--nocapture` to see them).
//!
//! The criteria are serialized through a global lock so the wall-clock
//! measurements of the performance criterion are not polluted by concurrent
//! tests.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use jmls::backward::{run_backward, ReductionTols};
use jmls::forward::UNCAPPED;
use jmls::likelihood::reduce_likelihoods;
use jmls::mixture::{
    differential_entropy_delta, kl_merge_bound, moment_match_merge, reduce_mixture,
    GaussianComponent, GaussianMixture,
};
use jmls::model::{discretize_msd, simulate, JmlsModel, ModeParams, Timing};
use jmls::oracle::{
    default_grid_for, enumerate_smoother, evaluate_grid, grid_kl, grid_l1, grid_max_abs_diff,
    quadrature_backward_value, rts_smoother,
};
use jmls::smoother::{run_smoother, Caps, SmootherOptions};

static GATE: Mutex<()> = Mutex::new(());

fn locked() -> std::sync::MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_vec(v.to_vec())
}

fn dm1(v: f64) -> DMatrix<f64> {
    DMatrix::from_vec(1, 1, vec![v])
}

fn scalar_comp(w: f64, mu: f64, p: f64) -> GaussianComponent {
    GaussianComponent::from_weight(w, dv(&[mu]), dm1(p))
}

fn example1_model() -> JmlsModel {
    JmlsModel::new(
        vec![ModeParams::scalar(0.9, 0.1, 0.9, 0.05, 0.45, 0.5)],
        dm1(1.0),
        Timing::SwitchAfterPrediction,
    )
    .unwrap()
}

fn example2_model() -> JmlsModel {
    JmlsModel::new(
        vec![
            ModeParams::scalar(0.9, 0.1, 0.9, 0.05, 0.45, 0.5),
            ModeParams::scalar(0.9, 0.12, 0.85, 0.05, 0.01, 1.5),
        ],
        DMatrix::from_row_slice(2, 2, &[0.6, 0.4, 0.4, 0.6]),
        Timing::SwitchBeforePrediction,
    )
    .unwrap()
}

fn even_two_mode_prior() -> GaussianMixture {
    GaussianMixture::new(vec![
        vec![scalar_comp(0.5, 0.0, 1.0)],
        vec![scalar_comp(0.5, 0.0, 1.0)],
    ])
}

/// Random stable-ish scalar two-mode model for the equivalence criteria.
fn random_scalar_model(rng: &mut ChaCha12Rng, timing: Timing) -> (JmlsModel, GaussianMixture) {
    let mode = |rng: &mut ChaCha12Rng| {
        let sign = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
        ModeParams::scalar(
            rng.random::<f64>() * 1.9 - 0.95,
            rng.random::<f64>() * 2.0 - 1.0,
            sign * (0.3 + 1.2 * rng.random::<f64>()),
            rng.random::<f64>() - 0.5,
            0.1 + 0.9 * rng.random::<f64>(),
            0.1 + 1.4 * rng.random::<f64>(),
        )
    };
    let (t0, t1) = (
        0.15 + 0.7 * rng.random::<f64>(),
        0.15 + 0.7 * rng.random::<f64>(),
    );
    let transition = DMatrix::from_row_slice(2, 2, &[t0, t1, 1.0 - t0, 1.0 - t1]);
    let model = JmlsModel::new(vec![mode(rng), mode(rng)], transition, timing).unwrap();
    let prior = GaussianMixture::new(vec![
        vec![scalar_comp(
            0.5,
            rng.random::<f64>() * 2.0 - 1.0,
            0.3 + 0.7 * rng.random::<f64>(),
        )],
        vec![scalar_comp(
            0.5,
            rng.random::<f64>() * 2.0 - 1.0,
            0.3 + 0.7 * rng.random::<f64>(),
        )],
    ]);
    (model, prior)
}

fn gaussian_inputs(rng: &mut ChaCha12Rng, n: usize) -> Vec<DVector<f64>> {
    (0..n)
        .map(|_| dv(&[rng.sample::<f64, _>(rand_distr::StandardNormal)]))
        .collect()
}

#[test]
fn criterion_1_entropy_counterexample() {
    let _g = locked();
    let start = Instant::now();

    let comps = vec![
        scalar_comp(0.25, -0.9, 1.0),
        scalar_comp(0.25, 0.9, 1.0),
        scalar_comp(0.5, 0.0, 0.1),
    ];
    let b12 = kl_merge_bound(&comps[0], &comps[1]).unwrap();
    let b13 = kl_merge_bound(&comps[0], &comps[2]).unwrap();
    let b23 = kl_merge_bound(&comps[1], &comps[2]).unwrap();
    assert!((b12 - 0.1483).abs() <= 5e-4, "B(1,2) = {b12}");
    assert!((b13 - 0.3714).abs() <= 5e-4, "B(1,3) = {b13}");
    assert!((b23 - 0.3714).abs() <= 5e-4, "B(2,3) = {b23}");

    let merged = moment_match_merge(&comps[0], &comps[1]).unwrap();
    assert!((merged.weight() - 0.5).abs() <= 5e-4);
    assert!(merged.mean[0].abs() <= 5e-4);
    assert!((merged.cov[(0, 0)] - 1.81).abs() <= 5e-4);

    let reduced = reduce_mixture(&comps, 2).unwrap();
    assert!((reduced[0].cov[(0, 0)] - 1.81).abs() <= 5e-4);

    let p = GaussianMixture::new(vec![comps.clone()]);
    let q = GaussianMixture::new(vec![reduced]);
    let dh = differential_entropy_delta(&p, &q).unwrap();
    assert!((dh + 0.0177).abs() <= 5e-4, "Δh = {dh}");

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    println!(
        "criterion 1 (entropy counter-example): PASS — B(1,2)={b12:.4}, B(1,3)={b13:.4}, \
         B(2,3)={b23:.4}, merged covariance {:.4}, Δh={dh:.4}, {elapsed:?}",
        merged.cov[(0, 0)]
    );
}

#[test]
fn criterion_2_unimodal_rts_equivalence() {
    let _g = locked();
    let start = Instant::now();

    let model = example1_model();
    let prior_comp = scalar_comp(1.0, 0.0, 1.0);
    let prior = GaussianMixture::new(vec![vec![prior_comp.clone()]]);
    let mut rng = ChaCha12Rng::seed_from_u64(101);
    let inputs = gaussian_inputs(&mut rng, 13);
    let data = simulate(&model, &prior, &inputs, 202).unwrap();

    let smoothed = run_smoother(&model, &prior, &data, &SmootherOptions::default()).unwrap();
    let rts = rts_smoother(&model.modes[0], &prior_comp, &data).unwrap();

    let mut worst = 0.0f64;
    for k in 0..13 {
        let rts_mix = GaussianMixture::new(vec![vec![GaussianComponent::from_weight(
            1.0,
            rts[k].smoothed_mean.clone(),
            rts[k].smoothed_cov.clone(),
        )]]);
        let spec = default_grid_for(&[&smoothed[k].mixture, &rts_mix], 2001).unwrap();
        let a = evaluate_grid(&smoothed[k].mixture, &spec).unwrap();
        let b = evaluate_grid(&rts_mix, &spec).unwrap();
        let diff = grid_max_abs_diff(&a, &b).unwrap();
        worst = worst.max(diff);
        assert!(diff <= 1e-8, "k={k}: max-abs density diff {diff}");
    }

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    println!(
        "criterion 2 (unimodal RTS equivalence): PASS — worst max-abs grid diff {worst:.3e} \
         over 13 steps, {elapsed:?}"
    );
}

#[test]
fn criterion_3_exact_solution_equivalence() {
    let _g = locked();
    let start = Instant::now();

    let mut worst_l1 = 0.0f64;
    let mut worst_marg = 0.0f64;
    for trial in 0..20 {
        let timing = if trial % 2 == 0 {
            Timing::SwitchAfterPrediction
        } else {
            Timing::SwitchBeforePrediction
        };
        let mut rng = ChaCha12Rng::seed_from_u64(300 + trial);
        let (model, prior) = random_scalar_model(&mut rng, timing);
        let inputs = gaussian_inputs(&mut rng, 6);
        let data = simulate(&model, &prior, &inputs, 400 + trial).unwrap();

        let exact = run_smoother(&model, &prior, &data, &SmootherOptions::default()).unwrap();
        let oracle = enumerate_smoother(&model, &prior, &data).unwrap();
        for k in 0..6 {
            let spec = default_grid_for(&[&oracle[k].mixture], 501).unwrap();
            let a = evaluate_grid(&exact[k].mixture, &spec).unwrap();
            let b = evaluate_grid(&oracle[k].mixture, &spec).unwrap();
            let l1 = grid_l1(&a, &b).unwrap();
            worst_l1 = worst_l1.max(l1);
            assert!(l1 <= 1e-9, "trial {trial} k={k}: L1 = {l1}");
            for z in 0..2 {
                let diff = (exact[k].mode_marginal[z] - oracle[k].mode_marginal[z]).abs();
                worst_marg = worst_marg.max(diff);
                assert!(diff <= 1e-10, "trial {trial} k={k} z={z}: marginal diff {diff}");
            }
        }
    }

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    println!(
        "criterion 3 (exact-solution equivalence, 20 random models): PASS — worst grid L1 \
         {worst_l1:.3e}, worst mode-marginal diff {worst_marg:.3e}, {elapsed:?}"
    );
}

#[test]
fn criterion_4_quadrature_certification_of_bif() {
    let _g = locked();
    let start = Instant::now();

    let mut worst_rel = 0.0f64;
    for trial in 0..10 {
        let timing = if trial % 2 == 0 {
            Timing::SwitchAfterPrediction
        } else {
            Timing::SwitchBeforePrediction
        };
        let mut rng = ChaCha12Rng::seed_from_u64(500 + trial);
        let (model, prior) = random_scalar_model(&mut rng, timing);
        let inputs = gaussian_inputs(&mut rng, 8);
        let data = simulate(&model, &prior, &inputs, 600 + trial).unwrap();
        let states = run_backward(&model, &data, UNCAPPED, ReductionTols::default()).unwrap();

        for k in 0..7 {
            let u_prop = match model.timing {
                Timing::SwitchAfterPrediction => &data.inputs[k],
                Timing::SwitchBeforePrediction => &data.inputs[k + 1],
            };
            for z in 0..2 {
                for x in [-2.0f64, -1.0, 0.0, 1.0, 2.0] {
                    let oracle = quadrature_backward_value(
                        &model,
                        &states[k + 1].propagated,
                        &data.inputs[k + 1],
                        &data.outputs[k + 1],
                        u_prop,
                        x,
                        z,
                    )
                    .unwrap();
                    let got = states[k].propagated.log_value(z, &dv(&[x])).exp();
                    let rel = (got - oracle).abs() / oracle.abs().max(1e-300);
                    worst_rel = worst_rel.max(rel);
                    assert!(
                        rel <= 1e-7,
                        "trial {trial} k={k} z={z} x={x}: {got} vs {oracle} (rel {rel:.2e})"
                    );
                }
            }
        }
    }

    let elapsed = start.elapsed();
    println!(
        "criterion 4 (quadrature certification of the BIF, 10 random models): PASS — worst \
         relative error {worst_rel:.3e}, {elapsed:?}"
    );
}

#[test]
fn criterion_5_reduction_accuracy_ordering() {
    let _g = locked();
    let start = Instant::now();

    const DATASETS: usize = 50;
    const N: usize = 15;
    const GRID_POINTS: usize = 501;
    const KL_FLOOR: f64 = 1e-300;

    let model = example2_model();
    let prior = even_two_mode_prior();

    struct Outcome {
        kl_order_holds: bool,
        mean_kl_exact: f64,
        mean_kl_44: f64,
        mean_kl_11: f64,
    }

    let outcomes: Vec<Outcome> = (0..DATASETS as u64)
        .into_par_iter()
        .map(|i| {
            let inputs: Vec<DVector<f64>> = (0..N).map(|_| dv(&[1.0])).collect();
            let data = simulate(&model, &prior, &inputs, 1000 + i).unwrap();
            let oracle = enumerate_smoother(&model, &prior, &data).unwrap();

            let run = |caps: Caps| {
                let opts = SmootherOptions {
                    caps,
                    ..Default::default()
                };
                run_smoother(&model, &prior, &data, &opts).unwrap()
            };
            let exact = run(Caps::default());
            let capped_44 = run(Caps::new(4, 4));
            let capped_11 = run(Caps::new(1, 1));

            let mut sums = [0.0f64; 3];
            for k in 0..N {
                let spec = default_grid_for(&[&oracle[k].mixture], GRID_POINTS).unwrap();
                let truth = evaluate_grid(&oracle[k].mixture, &spec).unwrap();
                for (j, run) in [&exact, &capped_44, &capped_11].into_iter().enumerate() {
                    let est = evaluate_grid(&run[k].mixture, &spec).unwrap();
                    sums[j] += grid_kl(&truth, &est, KL_FLOOR).unwrap();
                }
            }
            let n = N as f64;
            Outcome {
                kl_order_holds: sums[1] / n <= sums[2] / n,
                mean_kl_exact: sums[0] / n,
                mean_kl_44: sums[1] / n,
                mean_kl_11: sums[2] / n,
            }
        })
        .collect();

    let holds = outcomes.iter().filter(|o| o.kl_order_holds).count();
    let mean_exact: f64 =
        outcomes.iter().map(|o| o.mean_kl_exact).sum::<f64>() / DATASETS as f64;
    let mean_44: f64 = outcomes.iter().map(|o| o.mean_kl_44).sum::<f64>() / DATASETS as f64;
    let mean_11: f64 = outcomes.iter().map(|o| o.mean_kl_11).sum::<f64>() / DATASETS as f64;

    assert!(
        holds * 100 >= 95 * DATASETS,
        "caps=(4,4) beat caps=(1,1) on only {holds}/{DATASETS} datasets"
    );
    assert!(
        mean_exact <= 1e-8,
        "exact run mean KL {mean_exact:.3e} exceeds 1e-8"
    );

    let elapsed = start.elapsed();
    println!(
        "criterion 5 (reduction accuracy ordering, {DATASETS} datasets): PASS — ordering held \
         on {holds}/{DATASETS}, mean KL exact {mean_exact:.3e}, caps=(4,4) {mean_44:.3e}, \
         caps=(1,1) {mean_11:.3e}, {elapsed:?}"
    );
}

#[test]
fn criterion_6_msd_rank_deficient_robustness() {
    let _g = locked();
    let start = Instant::now();

    const N: usize = 10;
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
    let inputs: Vec<DVector<f64>> = (1..=N)
        .map(|k| dv(&[2000.0 * (k as f64 / (20.0 * std::f64::consts::PI)).sin()]))
        .collect();
    let data = simulate(&model, &prior, &inputs, 777).unwrap();

    // Rank deficiency at the first backward step.
    let backward = run_backward(&model, &data, UNCAPPED, ReductionTols::default()).unwrap();
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
    assert!(max_rank <= 1, "first backward step has rank {max_rank} components");

    // Full smoother completes with normalized marginals.
    let smoothed = run_smoother(&model, &prior, &data, &SmootherOptions::default()).unwrap();
    for st in &smoothed {
        let total: f64 = st.mode_marginal.iter().sum();
        assert!((total - 1.0).abs() <= 1e-9, "step {}: marginal sum {total}", st.step);
    }

    // Agreement with the enumeration oracle on a 2-D grid.
    let oracle = enumerate_smoother(&model, &prior, &data).unwrap();
    let mut worst_l1 = 0.0f64;
    for k in 0..N {
        let spec = default_grid_for(&[&oracle[k].mixture], 101).unwrap();
        let a = evaluate_grid(&smoothed[k].mixture, &spec).unwrap();
        let b = evaluate_grid(&oracle[k].mixture, &spec).unwrap();
        let l1 = grid_l1(&a, &b).unwrap();
        worst_l1 = worst_l1.max(l1);
        assert!(l1 <= 1e-6, "k={k}: L1 = {l1}");
    }

    let elapsed = start.elapsed();
    println!(
        "criterion 6 (mass-spring-damper robustness): PASS — rank ≤ 1 at first backward \
         step, marginals normalized, worst grid L1 {worst_l1:.3e}, {elapsed:?}"
    );
}

#[test]
fn criterion_7_performance_scaling() {
    let _g = locked();

    let model = example2_model();
    let prior = even_two_mode_prior();
    let inputs: Vec<DVector<f64>> = (0..1000).map(|_| dv(&[1.0])).collect();
    let data_full = simulate(&model, &prior, &inputs, 4321).unwrap();

    let opts = SmootherOptions {
        caps: Caps::new(8, 8),
        ..Default::default()
    };
    let time_prefix = |n: usize, reps: usize| -> Duration {
        let data = jmls::model::Dataset::new(
            data_full.inputs[..n].to_vec(),
            data_full.outputs[..n].to_vec(),
            None,
        )
        .unwrap();
        (0..reps)
            .map(|_| {
                let t = Instant::now();
                let out = run_smoother(&model, &prior, &data, &opts).unwrap();
                assert_eq!(out.len(), n);
                t.elapsed()
            })
            .min()
            .unwrap()
    };

    // Warm-up, then best-of-3 per length.
    let _ = time_prefix(250, 1);
    let t250 = time_prefix(250, 3);
    let t500 = time_prefix(500, 3);
    let t1000 = time_prefix(1000, 3);

    assert!(t1000 < Duration::from_secs(5), "N=1000 took {t1000:?}");
    let r1 = t500.as_secs_f64() / t250.as_secs_f64();
    let r2 = t1000.as_secs_f64() / t500.as_secs_f64();
    assert!(r1 <= 2.6, "250→500 grew {r1:.2}x (limit 2.6x)");
    assert!(r2 <= 2.6, "500→1000 grew {r2:.2}x (limit 2.6x)");

    println!(
        "criterion 7 (performance scaling): PASS — N=250 {t250:?}, N=500 {t500:?}, N=1000 \
         {t1000:?} (growth {r1:.2}x / {r2:.2}x, bound 2.6x; budget 5 s)"
    );
}

#[test]
fn criterion_8_property_suites() {
    let _g = locked();
    let start = Instant::now();
    const CASES: usize = 1000;

    // Moment preservation under reduction.
    let mut rng = ChaCha12Rng::seed_from_u64(8001);
    for case in 0..CASES {
        let count = 3 + (case % 5);
        let comps: Vec<GaussianComponent> = (0..count)
            .map(|_| {
                scalar_comp(
                    0.05 + rng.random::<f64>(),
                    rng.random::<f64>() * 6.0 - 3.0,
                    0.05 + rng.random::<f64>(),
                )
            })
            .collect();
        let cap = 1 + (case % count.saturating_sub(1)).min(count - 1);
        let before = GaussianMixture::new(vec![comps.clone()]);
        let (m0, c0) = before.mean_and_cov().unwrap();
        let reduced = reduce_mixture(&comps, cap).unwrap();
        assert!(reduced.len() == cap.min(count));
        let after = GaussianMixture::new(vec![reduced]);
        let (m1, c1) = after.mean_and_cov().unwrap();
        assert!((after.total_log_weight() - before.total_log_weight()).abs() < 1e-12);
        assert!((m1[0] - m0[0]).abs() <= 1e-9 * m0[0].abs().max(1.0), "case {case}");
        assert!((c1[(0, 0)] - c0[(0, 0)]).abs() <= 1e-9 * c0[(0, 0)], "case {case}");
    }

    // Weight normalization of the forward correction.
    let mut rng = ChaCha12Rng::seed_from_u64(8002);
    for _ in 0..CASES {
        let predicted = GaussianMixture::new(vec![
            vec![
                scalar_comp(0.1 + rng.random::<f64>(), rng.random::<f64>() * 4.0 - 2.0, 0.4),
                scalar_comp(0.1 + rng.random::<f64>(), rng.random::<f64>() * 4.0 - 2.0, 0.9),
            ],
            vec![scalar_comp(0.1 + rng.random::<f64>(), rng.random::<f64>() * 4.0 - 2.0, 0.6)],
        ]);
        let modes = example2_model().modes;
        let filtered = jmls::forward::correct(
            &predicted,
            &modes,
            &dv(&[1.0]),
            &dv(&[rng.random::<f64>() * 6.0 - 3.0]),
        )
        .unwrap();
        assert!(filtered.total_log_weight().abs() <= 1e-9);
    }

    // PSD invariants through predict/correct and backward propagation.
    let mut rng = ChaCha12Rng::seed_from_u64(8003);
    for _ in 0..CASES {
        let model = example2_model();
        let filtered = GaussianMixture::new(vec![
            vec![scalar_comp(0.5, rng.random::<f64>(), 0.05 + rng.random::<f64>())],
            vec![scalar_comp(0.5, rng.random::<f64>(), 0.05 + rng.random::<f64>())],
        ]);
        let predicted = jmls::forward::predict(&filtered, &model, &dv(&[1.0]));
        for z in 0..2 {
            for c in predicted.components(z) {
                assert!(c.cov[(0, 0)] > 0.0);
            }
        }
        let corrected = jmls::forward::correct(
            &predicted,
            &model.modes,
            &dv(&[1.0]),
            &dv(&[rng.random::<f64>() * 2.0]),
        )
        .unwrap();
        for z in 0..2 {
            for c in corrected.components(z) {
                assert!(c.cov[(0, 0)] > 0.0);
            }
        }
        let comp = jmls::likelihood::LikelihoodComponent::new(
            rng.random::<f64>(),
            dv(&[rng.random::<f64>() - 0.5]),
            dm1(rng.random::<f64>() * 2.0),
        );
        let out = jmls::likelihood::backward_propagate(
            &comp,
            &dm1(rng.random::<f64>() * 2.0 - 1.0),
            &dv(&[rng.random::<f64>()]),
            &dm1(0.1 + rng.random::<f64>()),
        )
        .unwrap();
        assert!(out.l[(0, 0)] >= -1e-12);
    }

    // Range-space preservation under likelihood reduction.
    let mut rng = ChaCha12Rng::seed_from_u64(8004);
    for case in 0..CASES {
        // Two groups with distinct rank-1 ranges in 2-D, random memberships.
        let theta = rng.random::<f64>() * std::f64::consts::PI;
        let v1 = dv(&[theta.cos(), theta.sin()]);
        let v2 = dv(&[-theta.sin(), theta.cos()]);
        let mut comps = Vec::new();
        let n1 = 2 + case % 3;
        let n2 = 2 + (case / 3) % 3;
        for _ in 0..n1 {
            comps.push(jmls::likelihood::LikelihoodComponent::new(
                rng.random::<f64>(),
                &v1 * (rng.random::<f64>() - 0.5),
                (0.5 + rng.random::<f64>()) * &v1 * v1.transpose(),
            ));
        }
        for _ in 0..n2 {
            comps.push(jmls::likelihood::LikelihoodComponent::new(
                rng.random::<f64>(),
                &v2 * (rng.random::<f64>() - 0.5),
                (0.5 + rng.random::<f64>()) * &v2 * v2.transpose(),
            ));
        }
        let reduced = reduce_likelihoods(&comps, 1, 1e-9, 1e-7).unwrap();
        assert_eq!(reduced.len(), 2, "case {case}: distinct range-spaces must survive");
        for out in &reduced {
            let eig = out.l.clone().symmetric_eigen();
            let lam_max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
            let rank = eig
                .eigenvalues
                .iter()
                .filter(|&&v| v > 1e-9 * lam_max)
                .count();
            assert_eq!(rank, 1, "case {case}: rank grew");
            // The output range must coincide with one of the input ranges.
            let dir = eig
                .eigenvectors
                .column(
                    (0..2)
                        .max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]))
                        .unwrap(),
                )
                .into_owned();
            let a1 = dir.dot(&v1).abs();
            let a2 = dir.dot(&v2).abs();
            assert!(a1.max(a2) > 1.0 - 1e-9, "case {case}: range rotated");
        }
    }

    // Merge-bound symmetry.
    let mut rng = ChaCha12Rng::seed_from_u64(8005);
    for _ in 0..CASES {
        let dim = 1 + (rng.random::<u32>() % 3) as usize;
        let mk = |rng: &mut ChaCha12Rng| {
            let mean = DVector::from_fn(dim, |_, _| rng.random::<f64>() * 4.0 - 2.0);
            let half = DMatrix::from_fn(dim, dim, |_, _| rng.random::<f64>() - 0.5);
            let cov = &half * half.transpose() + DMatrix::<f64>::identity(dim, dim) * 0.1;
            GaussianComponent::from_weight(0.05 + rng.random::<f64>(), mean, cov)
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let ab = kl_merge_bound(&a, &b).unwrap();
        let ba = kl_merge_bound(&b, &a).unwrap();
        assert!((ab - ba).abs() <= 1e-12 * ab.abs().max(1.0));
        assert!(ab >= -1e-12);
    }

    let elapsed = start.elapsed();
    println!(
        "criterion 8 (property suites, {CASES} cases each): PASS — moment preservation, \
         weight normalization, PSD invariants, range-space preservation, bound symmetry, \
         {elapsed:?}"
    );
}
