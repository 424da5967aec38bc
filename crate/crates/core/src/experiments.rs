//! Hyperparameter sweeps, Monte Carlo test accuracy, boundary fitting and
//! the Gaussian noise-output expectation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, make_mu, Class, SignalVector, Slot};
use crate::diagnostics::NOISE_OUTPUT_THRESHOLD;
use crate::error::{Error, Result};
use crate::model::{init_params, relu, Design, Forward, InitConfig, ModelParams};
use crate::trainer::{train, StopReason, TrainConfig};

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into one 64-bit seed, one SplitMix64 round per part.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0u64, |acc, &p| mix64(acc ^ mix64(p)))
}

/// Seed for replicate `rep` of cell `(row, col)`.
pub fn child_seed(master: u64, row: usize, col: usize, rep: usize) -> u64 {
    mix_seed(&[master, row as u64, col as u64, rep as u64])
}

/// Independent streams derived from one child seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub data: u64,
    pub init: u64,
    pub test: u64,
}

impl RunSeeds {
    pub fn from_child(child: u64) -> Self {
        RunSeeds { data: mix_seed(&[child, 1]), init: mix_seed(&[child, 2]), test: mix_seed(&[child, 3]) }
    }
}

/// Fraction of `n_test` fresh samples with `y·f(x) > 0`. A zero margin
/// counts as an error.
pub fn estimate_test_error(params: &ModelParams, mu: &SignalVector, sigma_p: f64, n_test: usize, seed: u64) -> Result<f64> {
    if n_test == 0 {
        return Err(Error::invalid("n_test must be at least 1"));
    }
    let test = generate_dataset(n_test, mu, sigma_p, seed)?;
    let design = Design::new(&test);
    let forward = Forward::new(params, &design)?;
    let correct = forward.margins(&design).iter().filter(|&&z| z > 0.0).count();
    Ok(correct as f64 / n_test as f64)
}

/// `Σ_r v_{j,r,2}·‖w_{j,r}‖·σ_p/√(2π)`: the expected noise output of logit
/// `j` on a fresh `ξ`, treating `ξ` as isotropic.
pub fn noise_output_expectation(params: &ModelParams, sigma_p: f64, j: Class) -> f64 {
    (0..params.m())
        .map(|r| {
            let w = params.filter(j, r);
            params.out(j, r, Slot::Second) * w.dot(&w).sqrt() * sigma_p / (2.0 * PI).sqrt()
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub mean: f64,
    pub std_err: f64,
    pub draws: usize,
}

/// Monte Carlo estimate of `E[Σ_r v_{j,r,2} σ(⟨w_{j,r}, ξ⟩)]` for
/// `ξ ~ N(0, σ_p² I)`.
pub fn noise_output_monte_carlo(params: &ModelParams, sigma_p: f64, j: Class, draws: usize, seed: u64) -> Result<MonteCarlo> {
    if draws < 2 {
        return Err(Error::invalid("need at least two draws"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = params.d();
    let m = params.m();
    let mut xi = ndarray::Array1::<f64>::zeros(d);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..draws {
        xi.iter_mut().for_each(|x| {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = sigma_p * z;
        });
        let y: f64 = (0..m).map(|r| params.out(j, r, Slot::Second) * relu(params.filter(j, r).dot(&xi))).sum();
        sum += y;
        sum_sq += y * y;
    }
    let k = draws as f64;
    let mean = sum / k;
    let var = (sum_sq / k - mean * mean).max(0.0) * k / (k - 1.0);
    Ok(MonteCarlo { mean, std_err: (var / k).sqrt(), draws })
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub d: usize,
    pub n: usize,
    pub m: usize,
    pub mu_norm: f64,
    pub sigma_p: f64,
    pub sigma_0: f64,
    pub v_0: f64,
    pub eta: f64,
    pub max_iters: usize,
    #[serde(default)]
    pub target_loss: f64,
    pub n_test: usize,
}

impl Default for CellConfig {
    fn default() -> Self {
        CellConfig {
            d: 1000,
            n: 100,
            m: 10,
            mu_norm: 1.0,
            sigma_p: 1.0,
            sigma_0: 0.01,
            v_0: 0.1,
            eta: 0.01,
            max_iters: 200,
            target_loss: 0.0,
            n_test: 1000,
        }
    }
}

/// A sweepable hyperparameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    D,
    N,
    M,
    MuNorm,
    InvMuNorm,
    SigmaP,
    #[serde(rename = "sigma_0")]
    Sigma0,
    #[serde(rename = "v_0")]
    V0,
    Eta,
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Param::D => "d",
            Param::N => "n",
            Param::M => "m",
            Param::MuNorm => "mu_norm",
            Param::InvMuNorm => "inv_mu_norm",
            Param::SigmaP => "sigma_p",
            Param::Sigma0 => "sigma_0",
            Param::V0 => "v_0",
            Param::Eta => "eta",
        };
        f.write_str(s)
    }
}

impl Param {
    pub fn is_count(self) -> bool {
        matches!(self, Param::D | Param::N | Param::M)
    }

    pub fn apply(self, cfg: &mut CellConfig, value: f64) -> Result<()> {
        let count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 && v < 1e9 {
                Ok(v as usize)
            } else {
                Err(Error::invalid(format!("{self} must be a positive integer, got {v}")))
            }
        };
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::invalid(format!("{self} must be positive, got {value}")));
        }
        match self {
            Param::D => cfg.d = count(value)?,
            Param::N => cfg.n = count(value)?,
            Param::M => cfg.m = count(value)?,
            Param::MuNorm => cfg.mu_norm = value,
            Param::InvMuNorm => cfg.mu_norm = 1.0 / value,
            Param::SigmaP => cfg.sigma_p = value,
            Param::Sigma0 => cfg.sigma_0 = value,
            Param::V0 => cfg.v_0 = value,
            Param::Eta => cfg.eta = value,
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    #[default]
    Linear,
    Log,
}

/// One grid axis. Either `values` or `start`/`stop`/`count` must be given.
/// Range values for `d`, `n` and `m` are rounded to the nearest integer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub param: Param,
    #[serde(default)]
    pub values: Option<Vec<f64>>,
    #[serde(default)]
    pub start: Option<f64>,
    #[serde(default)]
    pub stop: Option<f64>,
    #[serde(default)]
    pub count: Option<usize>,
    #[serde(default)]
    pub spacing: Spacing,
}

impl Axis {
    pub fn explicit(param: Param, values: Vec<f64>) -> Self {
        Axis { param, values: Some(values), start: None, stop: None, count: None, spacing: Spacing::Linear }
    }

    pub fn range(param: Param, start: f64, stop: f64, count: usize, spacing: Spacing) -> Self {
        Axis { param, values: None, start: Some(start), stop: Some(stop), count: Some(count), spacing }
    }

    pub fn grid(&self) -> Result<Vec<f64>> {
        let values = match (&self.values, self.start, self.stop, self.count) {
            (Some(v), None, None, None) => v.clone(),
            (None, Some(a), Some(b), Some(k)) => {
                if k == 0 {
                    return Err(Error::invalid(format!("axis {} has count 0", self.param)));
                }
                if k == 1 {
                    vec![a]
                } else {
                    let step = |i: usize| i as f64 / (k - 1) as f64;
                    match self.spacing {
                        Spacing::Linear => (0..k).map(|i| a + (b - a) * step(i)).collect(),
                        Spacing::Log => {
                            if !(a > 0.0 && b > 0.0) {
                                return Err(Error::invalid(format!("log axis {} needs positive bounds", self.param)));
                            }
                            (0..k).map(|i| (a.ln() + (b.ln() - a.ln()) * step(i)).exp()).collect()
                        }
                    }
                }
            }
            _ => return Err(Error::invalid(format!("axis {} needs either values or start/stop/count", self.param))),
        };
        if values.is_empty() {
            return Err(Error::invalid(format!("axis {} is empty", self.param)));
        }
        if self.values.is_none() && self.param.is_count() {
            return Ok(values.into_iter().map(f64::round).collect());
        }
        Ok(values)
    }
}

fn default_parallelism() -> usize {
    1
}

/// A two-axis grid of training runs. Columns vary `x`, rows vary `y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub name: String,
    pub x: Axis,
    pub y: Axis,
    pub fixed: CellConfig,
    /// One master seed per replicate.
    pub seeds: Vec<u64>,
    pub truncation: f64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SweepSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Toml(t) => Error::Format { path: path.to_path_buf(), message: t.to_string() },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.x.grid()?;
        self.y.grid()?;
        if self.x.param == self.y.param {
            return Err(Error::invalid("the two axes must vary different parameters"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if !(self.truncation > 0.0 && self.truncation < 1.0) {
            return Err(Error::invalid(format!("truncation must lie in (0, 1), got {}", self.truncation)));
        }
        if self.parallelism == 0 {
            return Err(Error::invalid("parallelism must be at least 1"));
        }
        if self.fixed.n_test == 0 {
            return Err(Error::invalid("n_test must be at least 1"));
        }
        Ok(())
    }

    pub fn cell_config(&self, x: f64, y: f64) -> Result<CellConfig> {
        let mut cfg = self.fixed.clone();
        self.x.param.apply(&mut cfg, x)?;
        self.y.param.apply(&mut cfg, y)?;
        Ok(cfg)
    }
}

/// Outcome of one replicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub stop: StopReason,
    pub accuracy: Option<f64>,
    pub final_loss: Option<f64>,
    pub iterations: usize,
    /// The summed noise output exceeded its first-stage threshold by the end.
    pub noise_memorized: bool,
}

/// Trains one replicate and measures test accuracy. Divergence is recorded
/// rather than returned.
pub fn run_replicate(cfg: &CellConfig, child: u64) -> Result<RunRecord> {
    let seeds = RunSeeds::from_child(child);
    let mu = make_mu(cfg.d, cfg.mu_norm)?;
    let ds = generate_dataset(cfg.n, &mu, cfg.sigma_p, seeds.data)?;
    let params = init_params(cfg.m, cfg.d, &InitConfig { sigma_0: cfg.sigma_0, v_0: cfg.v_0, seed: seeds.init })?;
    let tc = TrainConfig {
        eta: cfg.eta,
        max_iters: cfg.max_iters,
        target_loss: cfg.target_loss,
        log_every: cfg.max_iters,
        seed: child,
        track_decomposition: false,
    };
    match train(&params, &ds, &tc, ()) {
        Ok(out) => Ok(RunRecord {
            seed: child,
            stop: out.stop,
            accuracy: Some(estimate_test_error(&out.params, &mu, cfg.sigma_p, cfg.n_test, seeds.test)?),
            final_loss: Some(out.final_loss),
            iterations: out.iterations,
            noise_memorized: out.log.last().is_some_and(|e| e.noise_output_max > NOISE_OUTPUT_THRESHOLD),
        }),
        Err(Error::Diverged { iteration, .. }) => Ok(RunRecord {
            seed: child,
            stop: StopReason::Diverged,
            accuracy: None,
            final_loss: None,
            iterations: iteration,
            noise_memorized: false,
        }),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub row: usize,
    pub col: usize,
    /// Column-axis value.
    pub axis1: f64,
    /// Row-axis value.
    pub axis2: f64,
    /// Mean accuracy over replicates that did not diverge; 0 if all did.
    pub acc_mean: f64,
    pub acc_std: f64,
    pub loss_final: Option<f64>,
    pub runs: Vec<RunRecord>,
}

impl CellResult {
    pub fn diverged(&self) -> usize {
        self.runs.iter().filter(|r| r.stop == StopReason::Diverged).count()
    }

    /// Semicolon-separated markers: `diverged=k`, `converged=k`,
    /// `noise_memorized=k`, each only when `k > 0`.
    pub fn flags(&self) -> String {
        let count = |f: &dyn Fn(&RunRecord) -> bool| self.runs.iter().filter(|r| f(r)).count();
        let mut parts = Vec::new();
        for (name, k) in [
            ("diverged", self.diverged()),
            ("converged", count(&|r| r.stop == StopReason::Converged)),
            ("noise_memorized", count(&|r| r.noise_memorized)),
        ] {
            if k > 0 {
                parts.push(format!("{name}={k}"));
            }
        }
        parts.join(";")
    }

    pub fn benign(&self, truncation: f64) -> bool {
        self.acc_mean > truncation
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let k = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / k;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k;
    (mean, var.sqrt())
}

/// Runs every replicate of one cell. Replicate `k` uses master seed
/// `seeds[k]`.
pub fn run_cell(cfg: &CellConfig, seeds: &[u64], row: usize, col: usize, axis1: f64, axis2: f64) -> Result<CellResult> {
    let runs = seeds
        .iter()
        .enumerate()
        .map(|(k, &master)| run_replicate(cfg, child_seed(master, row, col, k)))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(row, col, axis1, axis2, runs))
}

fn summarize(row: usize, col: usize, axis1: f64, axis2: f64, runs: Vec<RunRecord>) -> CellResult {
    let acc: Vec<f64> = runs.iter().filter_map(|r| r.accuracy).collect();
    let loss: Vec<f64> = runs.iter().filter_map(|r| r.final_loss).collect();
    let (acc_mean, acc_std) = mean_std(&acc);
    let loss_final = (!loss.is_empty()).then(|| mean_std(&loss).0);
    CellResult { row, col, axis1, axis2, acc_mean, acc_std, loss_final, runs }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub spec: SweepSpec,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Sorted by `(row, col)`.
    pub cells: Vec<CellResult>,
}

/// Evaluates every cell on a pool of `spec.parallelism` workers. The result
/// does not depend on the worker count.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepResult> {
    spec.validate()?;
    let xs = spec.x.grid()?;
    let ys = spec.y.grid()?;
    let mut jobs = Vec::new();
    for (row, &y) in ys.iter().enumerate() {
        for (col, &x) in xs.iter().enumerate() {
            for (k, &master) in spec.seeds.iter().enumerate() {
                jobs.push((row, col, k, spec.cell_config(x, y)?, child_seed(master, row, col, k)));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.parallelism)
        .build()
        .map_err(|e| Error::invalid(format!("cannot build worker pool: {e}")))?;
    let records: Vec<((usize, usize, usize), Result<RunRecord>)> =
        pool.install(|| jobs.par_iter().map(|(row, col, k, cfg, child)| ((*row, *col, *k), run_replicate(cfg, *child))).collect());

    let mut grouped: BTreeMap<(usize, usize), Vec<(usize, RunRecord)>> = BTreeMap::new();
    for (key, rec) in records {
        grouped.entry((key.0, key.1)).or_default().push((key.2, rec?));
    }
    let cells = grouped
        .into_iter()
        .map(|((row, col), mut runs)| {
            runs.sort_by_key(|(k, _)| *k);
            summarize(row, col, xs[col], ys[row], runs.into_iter().map(|(_, r)| r).collect())
        })
        .collect();
    Ok(SweepResult { spec: spec.clone(), xs, ys, cells })
}

impl SweepResult {
    pub fn cell(&self, row: usize, col: usize) -> Option<&CellResult> {
        self.cells.get(row * self.xs.len() + col).filter(|c| c.row == row && c.col == col)
    }

    /// Writes `row,col,axis1,axis2,acc_mean,acc_std,loss_final,flags`.
    pub fn write_cells_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["row", "col", "axis1", "axis2", "acc_mean", "acc_std", "loss_final", "flags"])?;
        for c in &self.cells {
            w.write_record([
                c.row.to_string(),
                c.col.to_string(),
                c.axis1.to_string(),
                c.axis2.to_string(),
                c.acc_mean.to_string(),
                c.acc_std.to_string(),
                c.loss_final.map(|x| x.to_string()).unwrap_or_default(),
                c.flags(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the cells, the boundary crossings (empty with a header when no
    /// boundary exists) and a manifest of the spec and every derived seed.
    pub fn write_outputs(&self, dir: &Path, fit: Option<&BoundaryFit>) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.write_cells_csv(&dir.join("cells.csv"))?;
        let mut w = csv::Writer::from_path(dir.join("boundary.csv"))?;
        w.write_record(["col", "axis1", "crossing", "x", "y"])?;
        if let Some(fit) = fit {
            for p in &fit.points {
                w.write_record([p.col.to_string(), p.axis1.to_string(), p.crossing.to_string(), p.x.to_string(), p.y.to_string()])?;
            }
        }
        w.flush()?;
        let manifest = serde_json::json!({
            "spec": self.spec,
            "x_values": self.xs,
            "y_values": self.ys,
            "child_seeds": self.cells.iter().map(|c| serde_json::json!({
                "row": c.row,
                "col": c.col,
                "seeds": c.runs.iter().map(|r| r.seed).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
            "boundary": fit,
        });
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}

/// Transform applied to an axis value before line fitting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisTransform {
    #[default]
    Identity,
    Ln,
    Reciprocal,
    Pow(f64),
}

impl AxisTransform {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            AxisTransform::Identity => x,
            AxisTransform::Ln => x.ln(),
            AxisTransform::Reciprocal => 1.0 / x,
            AxisTransform::Pow(p) => x.powf(p),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPoint {
    pub col: usize,
    pub axis1: f64,
    /// Interpolated row-axis value where accuracy crosses the truncation.
    pub crossing: f64,
    /// Transformed coordinates used in the fit.
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryFit {
    pub slope: f64,
    pub intercept: f64,
    pub pearson_r: f64,
    /// Root mean square of the fit residuals.
    pub rmse: f64,
    pub points: Vec<BoundaryPoint>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundaryOptions {
    pub x: AxisTransform,
    pub y: AxisTransform,
    /// Only columns whose axis value lies in `[lo, hi]` are used.
    pub column_range: Option<(f64, f64)>,
}

/// Crossing of one column's accuracy profile across `level`, or `None`
/// when the column is single-class. `ascending` says whether benign cells
/// sit at larger row values.
fn column_crossing(profile: &[(f64, f64)], level: f64, ascending: bool) -> Option<f64> {
    let benign = |a: f64| a > level;
    let n = profile.len();
    let k_benign = profile.iter().filter(|p| benign(p.1)).count();
    if k_benign == 0 || k_benign == n {
        return None;
    }
    // Step location k splits rows into [0, k) and [k, n); choose the split
    // with fewest cells on the wrong side, ties broken by the lowest k.
    let mut best = (usize::MAX, 0);
    for k in 1..n {
        let wrong = profile
            .iter()
            .enumerate()
            .filter(|(i, p)| benign(p.1) != ((*i >= k) == ascending))
            .count();
        if wrong < best.0 {
            best = (wrong, k);
        }
    }
    let k = best.1;
    let (y0, a0) = profile[k - 1];
    let (y1, a1) = profile[k];
    let frac = if a1 != a0 { ((level - a0) / (a1 - a0)).clamp(0.0, 1.0) } else { 0.5 };
    Some(y0 + frac * (y1 - y0))
}

fn pearson(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let r = if sxx > 0.0 && syy > 0.0 { sxy / (sxx * syy).sqrt() } else { 0.0 };
    (slope, my - slope * mx, r)
}

/// Locates the benign/harmful boundary in each column of the truncated map
/// and fits a least-squares line through the crossings in transformed axes.
pub fn fit_boundary(result: &SweepResult, opts: &BoundaryOptions) -> Result<BoundaryFit> {
    let level = result.spec.truncation;
    let cols: Vec<usize> = (0..result.xs.len())
        .filter(|&c| opts.column_range.is_none_or(|(lo, hi)| (lo..=hi).contains(&result.xs[c])))
        .collect();
    let profile = |col: usize| -> Vec<(f64, f64)> {
        let mut p: Vec<(f64, f64)> =
            result.cells.iter().filter(|c| c.col == col).map(|c| (c.axis2, c.acc_mean)).collect();
        p.sort_by(|a, b| a.0.total_cmp(&b.0));
        p
    };
    // Orientation: benign cells sit at larger row values when the upper half
    // of the map is more accurate on average.
    let (mut lower, mut upper) = (0.0, 0.0);
    for &c in &cols {
        let p = profile(c);
        let h = p.len() / 2;
        lower += p[..h].iter().map(|x| x.1).sum::<f64>();
        upper += p[p.len() - h..].iter().map(|x| x.1).sum::<f64>();
    }
    let ascending = upper >= lower;

    let mut points = Vec::new();
    for &col in &cols {
        if let Some(crossing) = column_crossing(&profile(col), level, ascending) {
            let axis1 = result.xs[col];
            points.push(BoundaryPoint { col, axis1, crossing, x: opts.x.apply(axis1), y: opts.y.apply(crossing) });
        }
    }
    if points.len() < 3 {
        return Err(Error::NoBoundary(format!(
            "{} of {} columns contain both classes at truncation {level}; need 3",
            points.len(),
            cols.len()
        )));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.y).collect();
    let (slope, intercept, pearson_r) = pearson(&xs, &ys);
    let rmse = (xs.iter().zip(&ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
    Ok(BoundaryFit { slope, intercept, pearson_r, rmse, points })
}

/// Coefficient of variation (population standard deviation over mean) of
/// `f(axis1, crossing)` along the boundary.
pub fn boundary_cv(fit: &BoundaryFit, f: impl Fn(f64, f64) -> f64) -> f64 {
    let q: Vec<f64> = fit.points.iter().map(|p| f(p.axis1, p.crossing)).collect();
    let (mean, std) = mean_std(&q);
    std / mean.abs()
}
