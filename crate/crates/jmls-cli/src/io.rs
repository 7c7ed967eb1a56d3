//! File formats: the JSON model schema, dataset CSV, smoothed-mixture
//! parameter files, mode-marginal tables and density-grid tables.
//!
//! Mode indices are 1-based in every file (matching the usual convention for
//! model indices) and 0-based inside the library.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use jmls::mixture::{GaussianComponent, GaussianMixture};
use jmls::model::{Dataset, JmlsModel, ModeParams, Timing, Truth};
use jmls::oracle::DensityGrid;
use jmls::smoother::SmoothedState;

/// One mode's matrices, row-major nested arrays.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModeFile {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
}

/// One prior component: linear-domain weight, mean, row-major covariance.
#[derive(Debug, Serialize, Deserialize)]
pub struct PriorComponentFile {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

/// The on-disk model schema.
///
/// `transition` is column-major by source mode: `transition[j][i]` is
/// `T(i+1 | j+1)`, the probability of landing in mode `i+1` from mode `j+1`,
/// so each inner array sums to one. `timing` is `"switch-after-prediction"`
/// or `"switch-before-prediction"`. `prior` holds one component list per
/// mode.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub m: usize,
    pub timing: String,
    pub modes: Vec<ModeFile>,
    pub transition: Vec<Vec<f64>>,
    pub prior: Vec<Vec<PriorComponentFile>>,
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        bail!("matrix {what} has no rows");
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        bail!("matrix {what} has ragged or empty rows");
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        ncols,
        rows.iter().flat_map(|r| r.iter().cloned()),
    ))
}

fn rows_from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn timing_from_str(s: &str) -> Result<Timing> {
    match s {
        "switch-after-prediction" => Ok(Timing::SwitchAfterPrediction),
        "switch-before-prediction" => Ok(Timing::SwitchBeforePrediction),
        other => bail!(
            "unknown timing {other:?}; expected \"switch-after-prediction\" or \
             \"switch-before-prediction\""
        ),
    }
}

pub fn timing_to_str(t: Timing) -> &'static str {
    match t {
        Timing::SwitchAfterPrediction => "switch-after-prediction",
        Timing::SwitchBeforePrediction => "switch-before-prediction",
    }
}

/// Reads a model file and builds the model plus its prior.
pub fn read_model(path: &Path) -> Result<(JmlsModel, GaussianMixture)> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading model file {}", path.display()))?;
    let file: ModelFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing model file {}", path.display()))?;
    model_from_file(&file)
}

pub fn model_from_file(file: &ModelFile) -> Result<(JmlsModel, GaussianMixture)> {
    if file.modes.len() != file.m {
        bail!("model declares m={} but has {} modes", file.m, file.modes.len());
    }
    let mut modes = Vec::with_capacity(file.m);
    for (i, mf) in file.modes.iter().enumerate() {
        let tag = |name: &str| format!("{name} of mode {}", i + 1);
        modes.push(ModeParams::new(
            matrix_from_rows(&mf.a, &tag("A"))?,
            matrix_from_rows(&mf.b, &tag("B"))?,
            matrix_from_rows(&mf.c, &tag("C"))?,
            matrix_from_rows(&mf.d, &tag("D"))?,
            matrix_from_rows(&mf.q, &tag("Q"))?,
            matrix_from_rows(&mf.r, &tag("R"))?,
        ));
    }
    if file.transition.len() != file.m || file.transition.iter().any(|c| c.len() != file.m) {
        bail!("transition must be {0} columns of {0} entries", file.m);
    }
    let mut transition = DMatrix::<f64>::zeros(file.m, file.m);
    for (j, col) in file.transition.iter().enumerate() {
        for (i, &t) in col.iter().enumerate() {
            transition[(i, j)] = t;
        }
    }
    let timing = timing_from_str(&file.timing)?;
    let model = JmlsModel::new(modes, transition, timing)?;

    if file.prior.len() != file.m {
        bail!("prior must list components for each of the {} modes", file.m);
    }
    let mut prior_modes = Vec::with_capacity(file.m);
    for (z, comps) in file.prior.iter().enumerate() {
        let mut list = Vec::with_capacity(comps.len());
        for (ci, c) in comps.iter().enumerate() {
            if c.mean.len() != file.n {
                bail!("prior component {} of mode {} has a {}-dim mean, expected {}",
                    ci + 1, z + 1, c.mean.len(), file.n);
            }
            list.push(GaussianComponent::from_weight(
                c.weight,
                DVector::from_vec(c.mean.clone()),
                matrix_from_rows(&c.cov, &format!("prior covariance (mode {})", z + 1))?,
            ));
        }
        prior_modes.push(list);
    }
    Ok((model, GaussianMixture::new(prior_modes)))
}

/// Serializes a model plus prior into the file schema.
pub fn model_to_file(model: &JmlsModel, prior: &GaussianMixture) -> ModelFile {
    let m = model.mode_count();
    ModelFile {
        n: model.state_dim(),
        p: model.input_dim(),
        q: model.output_dim(),
        m,
        timing: timing_to_str(model.timing).to_string(),
        modes: model
            .modes
            .iter()
            .map(|mp| ModeFile {
                a: rows_from_matrix(&mp.a),
                b: rows_from_matrix(&mp.b),
                c: rows_from_matrix(&mp.c),
                d: rows_from_matrix(&mp.d),
                q: rows_from_matrix(&mp.q),
                r: rows_from_matrix(&mp.r),
            })
            .collect(),
        transition: (0..m)
            .map(|j| (0..m).map(|i| model.transition[(i, j)]).collect())
            .collect(),
        prior: prior
            .modes()
            .iter()
            .map(|comps| {
                comps
                    .iter()
                    .map(|c| PriorComponentFile {
                        weight: c.weight(),
                        mean: c.mean.iter().cloned().collect(),
                        cov: rows_from_matrix(&c.cov),
                    })
                    .collect()
            })
            .collect(),
    }
}

pub fn write_model(path: &Path, model: &JmlsModel, prior: &GaussianMixture) -> Result<()> {
    let file = model_to_file(model, prior);
    fs::write(path, serde_json::to_string_pretty(&file)?)
        .with_context(|| format!("writing model file {}", path.display()))?;
    Ok(())
}

/// Writes a dataset as CSV: `t, u_1..u_p, y_1..y_q[, x_1..x_n, z]` with `t`
/// running from 1.
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("writing dataset {}", path.display()))?;
    let p = dataset.inputs[0].len();
    let q = dataset.outputs[0].len();
    let mut header = vec!["t".to_string()];
    header.extend((1..=p).map(|i| format!("u_{i}")));
    header.extend((1..=q).map(|i| format!("y_{i}")));
    if let Some(truth) = &dataset.truth {
        let n = truth.states[0].len();
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.push("z".to_string());
    }
    w.write_record(&header)?;
    for k in 0..dataset.len() {
        let mut rec: Vec<String> = vec![(k + 1).to_string()];
        rec.extend(dataset.inputs[k].iter().map(|v| v.to_string()));
        rec.extend(dataset.outputs[k].iter().map(|v| v.to_string()));
        if let Some(truth) = &dataset.truth {
            rec.extend(truth.states[k].iter().map(|v| v.to_string()));
            rec.push((truth.modes[k] + 1).to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset CSV; truth columns are restored when present.
pub fn read_dataset(path: &Path, p: usize, q: usize) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path)
        .with_context(|| format!("reading dataset {}", path.display()))?;
    let header = r.headers()?.clone();
    let expected_min = 1 + p + q;
    if header.len() < expected_min {
        bail!(
            "dataset {} has {} columns, expected at least {expected_min} (t, u_1..u_{p}, y_1..y_{q})",
            path.display(),
            header.len()
        );
    }
    let has_truth = header.len() > expected_min;
    let n_states = if has_truth {
        header.len() - expected_min - 1
    } else {
        0
    };
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    let mut states = Vec::new();
    let mut modes = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .with_context(|| format!("missing column {i}"))?
                .trim()
                .parse::<f64>()
                .with_context(|| format!("parsing column {i}"))
        };
        inputs.push(DVector::from_fn(p, |i, _| num(1 + i).unwrap_or(f64::NAN)));
        outputs.push(DVector::from_fn(q, |i, _| num(1 + p + i).unwrap_or(f64::NAN)));
        if has_truth {
            states.push(DVector::from_fn(n_states, |i, _| {
                num(1 + p + q + i).unwrap_or(f64::NAN)
            }));
            modes.push(num(1 + p + q + n_states)? as usize - 1);
        }
    }
    if inputs.iter().chain(outputs.iter()).any(|v| v.iter().any(|x| x.is_nan())) {
        bail!("dataset {} contains unparsable numeric fields", path.display());
    }
    let truth = has_truth.then_some(Truth { states, modes });
    Ok(Dataset::new(inputs, outputs, truth)?)
}

/// Writes smoothed mixtures as one record per (k, mode, component):
/// log-weight, mean entries, row-major covariance entries. The leading
/// comment line carries the dimensions.
pub fn write_mixtures(path: &Path, states: &[SmoothedState], n: usize, m: usize) -> Result<()> {
    let mut text = String::new();
    text.push_str(&format!("# n={n} m={m} N={}\n", states.len()));
    let mut header = vec!["k".to_string(), "mode".to_string(), "log_weight".to_string()];
    header.extend((1..=n).map(|i| format!("mean_{i}")));
    for i in 1..=n {
        for j in 1..=n {
            header.push(format!("cov_{i}_{j}"));
        }
    }
    text.push_str(&header.join(","));
    text.push('\n');
    for st in states {
        for (z, comps) in st.mixture.modes().iter().enumerate() {
            for c in comps {
                let mut rec: Vec<String> = vec![
                    (st.step + 1).to_string(),
                    (z + 1).to_string(),
                    c.log_weight.to_string(),
                ];
                rec.extend(c.mean.iter().map(|v| v.to_string()));
                for i in 0..n {
                    for j in 0..n {
                        rec.push(c.cov[(i, j)].to_string());
                    }
                }
                text.push_str(&rec.join(","));
                text.push('\n');
            }
        }
    }
    fs::write(path, text).with_context(|| format!("writing mixtures {}", path.display()))?;
    Ok(())
}

/// Reads a mixture-parameter file back into per-step mixtures.
pub fn read_mixtures(path: &Path) -> Result<Vec<GaussianMixture>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading mixtures {}", path.display()))?;
    let mut lines = text.lines();
    let meta = lines
        .next()
        .context("mixture file is empty")?
        .trim_start_matches('#')
        .trim();
    let mut n = 0usize;
    let mut m = 0usize;
    let mut total = 0usize;
    for part in meta.split_whitespace() {
        let (key, value) = part
            .split_once('=')
            .with_context(|| format!("bad metadata entry {part:?}"))?;
        match key {
            "n" => n = value.parse()?,
            "m" => m = value.parse()?,
            "N" => total = value.parse()?,
            _ => {}
        }
    }
    if n == 0 || m == 0 || total == 0 {
        bail!("mixture file {} is missing n/m/N metadata", path.display());
    }
    let _header = lines.next().context("mixture file has no header")?;
    let mut out: Vec<GaussianMixture> = (0..total).map(|_| GaussianMixture::empty(m)).collect();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let want = 3 + n + n * n;
        if fields.len() != want {
            bail!("mixture record has {} fields, expected {want}", fields.len());
        }
        let k: usize = fields[0].parse::<usize>()? - 1;
        let mode: usize = fields[1].parse::<usize>()? - 1;
        let log_weight: f64 = fields[2].parse()?;
        let mean = DVector::from_fn(n, |i, _| fields[3 + i].parse::<f64>().unwrap_or(f64::NAN));
        let cov = DMatrix::from_fn(n, n, |i, j| {
            fields[3 + n + i * n + j].parse::<f64>().unwrap_or(f64::NAN)
        });
        if k >= total || mode >= m {
            bail!("mixture record outside declared ranges (k={}, mode={})", k + 1, mode + 1);
        }
        out[k].push(mode, GaussianComponent::new(log_weight, mean, cov));
    }
    Ok(out)
}

/// Writes per-step mode marginals: `k, mode_1..mode_m`.
pub fn write_marginals(path: &Path, states: &[SmoothedState]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("writing marginals {}", path.display()))?;
    let m = states.first().map_or(0, |s| s.mode_marginal.len());
    let mut header = vec!["k".to_string()];
    header.extend((1..=m).map(|i| format!("mode_{i}")));
    w.write_record(&header)?;
    for st in states {
        let mut rec = vec![(st.step + 1).to_string()];
        rec.extend(st.mode_marginal.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a density grid: grid coordinates, then one density column per
/// mode, rows in row-major cell order.
pub fn write_grid(path: &Path, grid: &DensityGrid) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("writing grid {}", path.display()))?;
    let dim = grid.spec.axes.len();
    let m = grid.mode_count();
    let mut header: Vec<String> = (1..=dim).map(|i| format!("x_{i}")).collect();
    header.extend((1..=m).map(|i| format!("mode_{i}")));
    w.write_record(&header)?;
    let cells = grid.spec.cell_count();
    for cell in 0..cells {
        let mut rec = Vec::with_capacity(dim + m);
        if dim == 1 {
            rec.push(grid.spec.axes[0].point(cell).to_string());
        } else {
            let c1 = grid.spec.axes[1].count;
            rec.push(grid.spec.axes[0].point(cell / c1).to_string());
            rec.push(grid.spec.axes[1].point(cell % c1).to_string());
        }
        for mode in 0..m {
            rec.push(grid.values[mode][cell].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
