//! Subcommand implementations: validate, simulate, smooth, compare.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use nalgebra::DVector;

use jmls::backward::{run_backward, ReductionTols};
use jmls::forward::{run_forward, UNCAPPED};
use jmls::mixture::GaussianMixture;
use jmls::model::{simulate, validate_model, Dataset, JmlsModel};
use jmls::oracle::{
    default_grid_for, enumerate_smoother, evaluate_grid, grid_kl, grid_l1, grid_max_abs_diff,
    rts_smoother, GridSpec,
};
use jmls::smoother::{combine_passes, run_smoother, Caps, SmootherOptions};

use crate::io;

/// Parses a cap: a positive integer or `inf`.
pub fn parse_cap(s: &str) -> Result<usize> {
    if s.eq_ignore_ascii_case("inf") {
        return Ok(UNCAPPED);
    }
    let v: usize = s.parse().with_context(|| format!("bad cap {s:?}"))?;
    if v == 0 {
        bail!("caps must be >= 1 (or \"inf\")");
    }
    Ok(v)
}

/// Parses `F,B` or `F,B,S` into smoother caps.
pub fn parse_caps(s: &str) -> Result<Caps> {
    let parts: Vec<&str> = s.split(',').collect();
    match parts.as_slice() {
        [f, b] => Ok(Caps::new(parse_cap(f)?, parse_cap(b)?)),
        [f, b, sm] => Ok(Caps {
            forward: parse_cap(f)?,
            backward: parse_cap(b)?,
            smoothed: Some(parse_cap(sm)?),
        }),
        _ => bail!("caps must be \"F,B\" or \"F,B,S\", got {s:?}"),
    }
}

/// Input generators for simulation.
#[derive(Debug, Clone)]
pub enum InputSpec {
    /// Independent standard-normal draws.
    GaussianIid,
    /// A constant level on every channel.
    Constant(f64),
    /// `amplitude · sin(k · rate)` with `k` starting at 1.
    Sinusoid { amplitude: f64, rate: f64 },
}

impl InputSpec {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "gaussian" {
            return Ok(Self::GaussianIid);
        }
        if let Some(v) = s.strip_prefix("constant:") {
            return Ok(Self::Constant(v.parse().context("bad constant input level")?));
        }
        if let Some(rest) = s.strip_prefix("sinusoid:") {
            let (a, r) = rest
                .split_once(',')
                .context("sinusoid needs amplitude,rate")?;
            return Ok(Self::Sinusoid {
                amplitude: a.parse().context("bad sinusoid amplitude")?,
                rate: r.parse().context("bad sinusoid angular rate")?,
            });
        }
        bail!("unknown input spec {s:?}; use gaussian | constant:<v> | sinusoid:<amp>,<rate>")
    }

    /// Generates the input sequence. Gaussian inputs are drawn from a
    /// dedicated stream so the process-noise draws stay aligned across
    /// input choices.
    pub fn generate(&self, steps: usize, dim: usize, seed: u64) -> Vec<DVector<f64>> {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed ^ 0x75f4_a1c3_9e0b_d642);
        (1..=steps)
            .map(|k| match self {
                Self::GaussianIid => DVector::from_fn(dim, |_, _| {
                    rng.sample::<f64, _>(rand_distr::StandardNormal)
                }),
                Self::Constant(v) => DVector::from_element(dim, *v),
                Self::Sinusoid { amplitude, rate } => {
                    DVector::from_element(dim, amplitude * (k as f64 * rate).sin())
                }
            })
            .collect()
    }
}

pub fn cmd_validate(model_path: &Path) -> Result<i32> {
    let (model, prior) = io::read_model(model_path)?;
    let report = validate_model(&model);
    let prior_total = prior.total_log_weight().exp();
    if report.is_valid() && (prior_total - 1.0).abs() <= 1e-10 {
        println!(
            "model ok: {} mode(s), n={}, p={}, q={}, timing={}",
            model.mode_count(),
            model.state_dim(),
            model.input_dim(),
            model.output_dim(),
            io::timing_to_str(model.timing)
        );
        return Ok(0);
    }
    for v in &report.violations {
        println!("violation: {v}");
    }
    if (prior_total - 1.0).abs() > 1e-10 {
        println!("violation: prior weights sum to {prior_total}, expected 1");
    }
    Ok(2)
}

pub fn cmd_simulate(
    model_path: &Path,
    steps: usize,
    seed: u64,
    input: &InputSpec,
    out: &Path,
) -> Result<i32> {
    if steps == 0 {
        bail!("--steps must be at least 1");
    }
    let (model, prior) = io::read_model(model_path)?;
    let inputs = input.generate(steps, model.input_dim(), seed);
    let data = simulate(&model, &prior, &inputs, seed)?;
    io::write_dataset(out, &data)?;
    println!(
        "wrote {} ({} steps, seed {seed}, {} truth columns)",
        out.display(),
        steps,
        model.state_dim() + 1
    );
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_smooth(
    model_path: &Path,
    data_path: &Path,
    caps: Caps,
    tols: ReductionTols,
    grid_points: Option<usize>,
    out_dir: &Path,
) -> Result<i32> {
    let (model, prior) = io::read_model(model_path)?;
    let data = io::read_dataset(data_path, model.input_dim(), model.output_dim())?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;

    let t0 = Instant::now();
    let forward = run_forward(&model, &prior, &data, caps.forward)?;
    let t_forward = t0.elapsed();
    let t0 = Instant::now();
    let backward = run_backward(&model, &data, caps.backward, tols)?;
    let t_backward = t0.elapsed();
    let t0 = Instant::now();
    let smoothed = combine_passes(&forward, &backward, caps.smoothed)?;
    let t_combine = t0.elapsed();

    io::write_mixtures(
        &out_dir.join("smoothed.csv"),
        &smoothed,
        model.state_dim(),
        model.mode_count(),
    )?;
    io::write_marginals(&out_dir.join("marginals.csv"), &smoothed)?;

    if let Some(points) = grid_points {
        for st in &smoothed {
            let spec = default_grid_for(&[&st.mixture], points)?;
            let grid = evaluate_grid(&st.mixture, &spec)?;
            io::write_grid(&out_dir.join(format!("grid_{:04}.csv", st.step + 1)), &grid)?;
        }
    }

    let fwd_counts: usize = forward.iter().map(|s| s.filtered.component_count()).sum();
    let bwd_counts: usize = backward.iter().map(|s| s.propagated.component_count()).sum();
    let smo_counts: usize = smoothed.iter().map(|s| s.mixture.component_count()).sum();
    let summary = format!(
        "steps: {}\nforward components (filtered, total over steps): {fwd_counts}\n\
         backward components (propagated, total over steps): {bwd_counts}\n\
         smoothed components (total over steps): {smo_counts}\n\
         forward pass: {t_forward:?}\nbackward pass: {t_backward:?}\ncombination: {t_combine:?}\n",
        data.len()
    );
    std::fs::write(out_dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    println!("wrote {}", out_dir.join("smoothed.csv").display());
    Ok(0)
}

/// A density source for `compare`: an oracle, a fresh smoother run, or a
/// mixture-parameter file produced by `smooth`.
#[derive(Debug, Clone)]
pub enum Source {
    Enumeration,
    Rts,
    Smoother(Caps),
    File(PathBuf),
}

impl Source {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "enum" => Ok(Self::Enumeration),
            "rts" => Ok(Self::Rts),
            _ => {
                if let Some(caps) = s.strip_prefix("smooth:") {
                    Ok(Self::Smoother(parse_caps(caps)?))
                } else {
                    Ok(Self::File(PathBuf::from(s)))
                }
            }
        }
    }

    fn mixtures(
        &self,
        model: &JmlsModel,
        prior: &GaussianMixture,
        data: &Dataset,
        tols: ReductionTols,
    ) -> Result<Vec<GaussianMixture>> {
        match self {
            Self::Enumeration => Ok(enumerate_smoother(model, prior, data)?
                .into_iter()
                .map(|s| s.mixture)
                .collect()),
            Self::Rts => {
                if model.mode_count() != 1 {
                    bail!("the rts source needs a single-mode model");
                }
                let comps = prior.components(0);
                if comps.len() != 1 {
                    bail!("the rts source needs a single prior component");
                }
                let steps = rts_smoother(&model.modes[0], &comps[0], data)?;
                Ok(steps
                    .into_iter()
                    .map(|s| {
                        let mut mix = GaussianMixture::empty(1);
                        mix.push(
                            0,
                            jmls::mixture::GaussianComponent::from_weight(
                                1.0,
                                s.smoothed_mean,
                                s.smoothed_cov,
                            ),
                        );
                        mix
                    })
                    .collect())
            }
            Self::Smoother(caps) => {
                let opts = SmootherOptions { caps: *caps, tols };
                Ok(run_smoother(model, prior, data, &opts)?
                    .into_iter()
                    .map(|s| s.mixture)
                    .collect())
            }
            Self::File(path) => io::read_mixtures(path),
        }
    }
}

pub fn cmd_compare(
    model_path: &Path,
    data_path: &Path,
    truth: &Source,
    estimate: &Source,
    grid_points: usize,
    floor: f64,
    out: Option<&Path>,
) -> Result<i32> {
    let (model, prior) = io::read_model(model_path)?;
    let data = io::read_dataset(data_path, model.input_dim(), model.output_dim())?;
    let tols = ReductionTols::default();
    let truth_mix = truth.mixtures(&model, &prior, &data, tols)?;
    let est_mix = estimate.mixtures(&model, &prior, &data, tols)?;
    if truth_mix.len() != est_mix.len() {
        bail!(
            "sources cover different step counts: {} vs {}",
            truth_mix.len(),
            est_mix.len()
        );
    }

    let mut rows = Vec::new();
    let mut mean_kl = 0.0;
    let mut worst_abs = 0.0f64;
    for (k, (t, e)) in truth_mix.iter().zip(&est_mix).enumerate() {
        let spec: GridSpec = default_grid_for(&[t, e], grid_points)?;
        let tg = evaluate_grid(t, &spec)?;
        let eg = evaluate_grid(e, &spec)?;
        let kl = grid_kl(&tg, &eg, floor)?;
        let l1 = grid_l1(&tg, &eg)?;
        let max_abs = grid_max_abs_diff(&tg, &eg)?;
        mean_kl += kl;
        worst_abs = worst_abs.max(max_abs);
        rows.push((k + 1, kl, l1, max_abs));
    }
    mean_kl /= truth_mix.len() as f64;

    if let Some(path) = out {
        let mut w = csv::Writer::from_path(path)
            .with_context(|| format!("writing report {}", path.display()))?;
        w.write_record(["k", "kl", "l1", "max_abs_diff"])?;
        for (k, kl, l1, max_abs) in &rows {
            w.write_record([
                k.to_string(),
                kl.to_string(),
                l1.to_string(),
                max_abs.to_string(),
            ])?;
        }
        w.flush()?;
    }
    for (k, kl, l1, max_abs) in &rows {
        println!("k={k}: KL={kl:.6e} L1={l1:.6e} max-abs={max_abs:.6e}");
    }
    println!("mean KL over {} steps: {mean_kl:.6e}", truth_mix.len());
    println!("worst max-abs density difference: {worst_abs:.6e}");
    Ok(0)
}

/// Shared by `paper` reproductions: a readable pass/fail line.
pub fn check_line(name: &str, ok: bool, detail: &str) -> bool {
    println!("{}: {name} — {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}
