//! Quantities measured along a training run: layer balance ratios, stage
//! boundaries, the loss-derivative window, activation-set persistence and
//! regime flags for a configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Class, DataSet, CONCENTRATION_DELTA};
use crate::error::{Error, Result};
use crate::model::{Design, Forward, ModelParams};
use crate::trainer::{StepState, TrainHook, TrajectoryLog};

/// Trailing window, in logged iterations, for plateau detection.
pub const PLATEAU_WINDOW: usize = 20;
/// Largest relative change over the window that still counts as a plateau.
pub const PLATEAU_TOL: f64 = 0.05;
/// A ratio within this relative distance of its plateau counts as balanced.
pub const BALANCED_TOL: f64 = 0.1;
/// Summed noise output that ends the first stage.
pub const NOISE_OUTPUT_THRESHOLD: f64 = 0.1;
/// Loss-derivative magnitudes bounding the first stage.
pub const LPRIME_WINDOW: (f64, f64) = (0.4, 0.6);

/// One row of the trajectory CSV, for the tracked filter index `r*`.
///
/// Noise quantities maximize over samples `i` using filter `(y_i, r*)` and
/// the output weight on the patch that holds `ξ_i`. Signal quantities
/// maximize over `j` using `⟨w_{j,r*}, jμ⟩` and the output weight on the
/// patch holding `y_i μ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub iter: usize,
    pub loss: f64,
    pub lmin: f64,
    pub lmax: f64,
    pub signal_inner_max: f64,
    pub noise_inner_max: Option<f64>,
    pub v1_max: Option<f64>,
    pub v2_max: Option<f64>,
    pub ratio_noise: Option<f64>,
    pub ratio_signal: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceSeries {
    pub r_star: Option<usize>,
    pub rows: Vec<BalanceRow>,
}

fn max_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.max(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

fn ratio(num: Option<f64>, den: Option<f64>) -> Option<f64> {
    match (num, den) {
        (Some(x), Some(y)) if y > 0.0 => Some(x / y),
        _ => None,
    }
}

/// Filter index whose final noise inner product is largest.
pub fn default_tracked_filter(log: &TrajectoryLog) -> Option<usize> {
    let last = log.last()?;
    let m = log.m;
    (0..m)
        .filter_map(|r| max_opt(last.noise_inner_max[r], last.noise_inner_max[m + r]).map(|v| (r, v)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(r, _)| r)
}

/// Per-iteration balance ratios for filter `r_star`, or the default tracked
/// filter when `None`. Ratios are absent where the output weight is not
/// positive.
pub fn balance_series(log: &TrajectoryLog, r_star: Option<usize>) -> Result<BalanceSeries> {
    let m = log.m;
    let r = match r_star {
        Some(r) if r >= m => return Err(Error::invalid(format!("tracked filter {r} out of range for m = {m}"))),
        Some(r) => Some(r),
        None => default_tracked_filter(log),
    };
    let Some(r) = r else {
        return Ok(BalanceSeries { r_star: None, rows: Vec::new() });
    };
    let rows = log
        .entries
        .iter()
        .map(|e| {
            let (p, n) = (r, m + r);
            let signal_inner_max = e.signal_inner[p].max(e.signal_inner[n]);
            let noise_inner_max = max_opt(e.noise_inner_max[p], e.noise_inner_max[n]);
            let v1_max = max_opt(e.signal_weight_max[p], e.signal_weight_max[n]);
            let v2_max = max_opt(e.noise_weight_max[p], e.noise_weight_max[n]);
            BalanceRow {
                iter: e.iter,
                loss: e.loss,
                lmin: e.lprime_min,
                lmax: e.lprime_max,
                signal_inner_max,
                noise_inner_max,
                v1_max,
                v2_max,
                ratio_noise: ratio(noise_inner_max, v2_max),
                ratio_signal: ratio(Some(signal_inner_max), v1_max),
            }
        })
        .collect();
    Ok(BalanceSeries { r_star: Some(r), rows })
}

const TRAJECTORY_HEADER: [&str; 10] =
    ["iter", "loss", "lmin", "lmax", "signal_inner_max", "noise_inner_max", "v1_max", "v2_max", "ratio_noise", "ratio_signal"];

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl BalanceSeries {
    /// Writes the trajectory CSV. Absent values are empty fields.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(TRAJECTORY_HEADER)?;
        for row in &self.rows {
            w.write_record([
                row.iter.to_string(),
                row.loss.to_string(),
                row.lmin.to_string(),
                row.lmax.to_string(),
                row.signal_inner_max.to_string(),
                fmt_opt(row.noise_inner_max),
                fmt_opt(row.v1_max),
                fmt_opt(row.v2_max),
                fmt_opt(row.ratio_noise),
                fmt_opt(row.ratio_signal),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Format { path: path.to_path_buf(), message };
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.iter().ne(TRAJECTORY_HEADER) {
            return Err(bad(format!("expected header {}", TRAJECTORY_HEADER.join(","))));
        }
        let mut rows = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let num = |k: usize| -> Result<Option<f64>> {
                let s = rec.get(k).unwrap_or("").trim();
                if s.is_empty() {
                    return Ok(None);
                }
                s.parse().map(Some).map_err(|_| bad(format!("row {}: bad number {s:?} in {}", line + 1, TRAJECTORY_HEADER[k])))
            };
            let req = |k: usize| num(k)?.ok_or_else(|| bad(format!("row {}: missing {}", line + 1, TRAJECTORY_HEADER[k])));
            let iter = rec.get(0).unwrap_or("").trim();
            let iter = iter.parse().map_err(|_| bad(format!("row {}: bad iteration {iter:?}", line + 1)))?;
            rows.push(BalanceRow {
                iter,
                loss: req(1)?,
                lmin: req(2)?,
                lmax: req(3)?,
                signal_inner_max: req(4)?,
                noise_inner_max: num(5)?,
                v1_max: num(6)?,
                v2_max: num(7)?,
                ratio_noise: num(8)?,
                ratio_signal: num(9)?,
            });
        }
        Ok(BalanceSeries { r_star: None, rows })
    }

    pub fn noise_ratios(&self) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r.ratio_noise).collect()
    }

    /// Noise ratio at the first row whose iteration is at least `iter`.
    pub fn noise_ratio_at(&self, iter: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.iter >= iter).and_then(|r| r.ratio_noise)
    }
}

/// Final value of `series` if it has settled: the trailing `window` entries
/// are present and the last differs from the one `window` steps earlier by
/// at most `tol` relative.
pub fn plateau(series: &[Option<f64>], window: usize, tol: f64) -> Option<f64> {
    if series.len() <= window {
        return None;
    }
    let tail = &series[series.len() - window - 1..];
    if tail.iter().any(Option::is_none) {
        return None;
    }
    let last = tail[window]?;
    let first = tail[0]?;
    ((last - first).abs() <= tol * last.abs()).then_some(last)
}

/// Index sets of positive noise pre-activations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationSets {
    /// `S_i`: filter indices `r` with `⟨w_{y_i,r}, ξ_i⟩ > 0`.
    pub per_sample: Vec<Vec<usize>>,
    /// `S_{j,r}` indexed by `j.index() * m + r`: samples with label `j` and
    /// `⟨w_{j,r}, ξ_i⟩ > 0`.
    pub per_filter: Vec<Vec<usize>>,
}

impl ActivationSets {
    fn from_forward(params: &ModelParams, design: &Design, forward: &Forward) -> Self {
        let m = params.m();
        let n = design.n();
        let mut per_sample = vec![Vec::new(); n];
        let mut per_filter = vec![Vec::new(); 2 * m];
        for j in Class::BOTH {
            for r in 0..m {
                let row = params.row(j, r);
                for i in (0..n).filter(|&i| design.labels[i] == j) {
                    if forward.noise_pre(design, row, i) > 0.0 {
                        per_filter[row].push(i);
                    }
                }
            }
        }
        for (i, s) in per_sample.iter_mut().enumerate() {
            let j = design.labels[i];
            s.extend((0..m).filter(|&r| per_filter[params.row(j, r)].binary_search(&i).is_ok()));
        }
        ActivationSets { per_sample, per_filter }
    }

    /// Whether every set in `self` is contained in its counterpart in
    /// `later`.
    pub fn contained_in(&self, later: &ActivationSets) -> bool {
        fn sub(a: &[usize], b: &[usize]) -> bool {
            a.iter().all(|x| b.binary_search(x).is_ok())
        }
        self.per_sample.len() == later.per_sample.len()
            && self.per_filter.len() == later.per_filter.len()
            && self.per_sample.iter().zip(&later.per_sample).all(|(a, b)| sub(a, b))
            && self.per_filter.iter().zip(&later.per_filter).all(|(a, b)| sub(a, b))
    }

    pub fn min_sample_size(&self) -> usize {
        self.per_sample.iter().map(Vec::len).min().unwrap_or(0)
    }

    pub fn min_filter_size(&self) -> usize {
        self.per_filter.iter().map(Vec::len).min().unwrap_or(0)
    }
}

pub fn activation_sets(params: &ModelParams, ds: &DataSet) -> Result<ActivationSets> {
    let design = Design::new(ds);
    let forward = Forward::new(params, &design)?;
    Ok(ActivationSets::from_forward(params, &design, &forward))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageFlags {
    /// The summed noise output never exceeded the threshold in the log.
    pub stage_not_ended: bool,
    /// The noise balance ratio did not plateau.
    pub not_balanced: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    /// First logged iteration whose noise ratio is within 10% of the final
    /// plateau value.
    pub t0_est: Option<usize>,
    /// First logged iteration at which some `|ℓ′_i|` leaves `[0.4, 0.6]`.
    pub t1_est: Option<usize>,
    /// First logged iteration with `max_k Σ_r v σ(⟨w_{y_k,r}, ξ_k⟩) > 0.1`.
    pub stage1_end: Option<usize>,
    pub plateau: Option<f64>,
    /// `(iteration, all |ℓ′_i| ∈ [0.4, 0.6])` for every logged iteration.
    pub window_ok: Vec<(usize, bool)>,
    pub flags: StageFlags,
}

fn in_window(lmin: f64, lmax: f64) -> bool {
    lmin >= LPRIME_WINDOW.0 && lmax <= LPRIME_WINDOW.1
}

fn balancing_summary(series: &BalanceSeries) -> (Option<f64>, Option<usize>) {
    let ratios = series.noise_ratios();
    let plateau = plateau(&ratios, PLATEAU_WINDOW, PLATEAU_TOL);
    let t0 = plateau.and_then(|p| {
        series
            .rows
            .iter()
            .find(|r| r.ratio_noise.is_some_and(|x| (x - p).abs() <= BALANCED_TOL * p.abs()))
            .map(|r| r.iter)
    });
    (plateau, t0)
}

/// Stage boundaries from a training log. The dataset must be the one the log
/// was recorded on.
pub fn stage_report(log: &TrajectoryLog, ds: &DataSet) -> Result<StageReport> {
    if log.n != ds.n() {
        return Err(Error::invalid(format!("log has n = {} but dataset has n = {}", log.n, ds.n())));
    }
    let series = balance_series(log, None)?;
    let (plateau, t0_est) = balancing_summary(&series);
    let window_ok: Vec<(usize, bool)> = log.entries.iter().map(|e| (e.iter, in_window(e.lprime_min, e.lprime_max))).collect();
    let t1_est = window_ok.iter().find(|(_, ok)| !ok).map(|(t, _)| *t);
    let stage1_end = log.entries.iter().find(|e| e.noise_output_max > NOISE_OUTPUT_THRESHOLD).map(|e| e.iter);
    Ok(StageReport {
        t0_est,
        t1_est,
        stage1_end,
        plateau,
        window_ok,
        flags: StageFlags { stage_not_ended: stage1_end.is_none(), not_balanced: plateau.is_none() },
    })
}

/// Stage summary recoverable from a trajectory CSV alone. The noise output
/// threshold needs per-sample data the CSV does not carry, so `stage1_end`
/// is always absent here.
pub fn stage_report_from_series(series: &BalanceSeries) -> StageReport {
    let (plateau, t0_est) = balancing_summary(series);
    let window_ok: Vec<(usize, bool)> = series.rows.iter().map(|r| (r.iter, in_window(r.lmin, r.lmax))).collect();
    let t1_est = window_ok.iter().find(|(_, ok)| !ok).map(|(t, _)| *t);
    StageReport {
        t0_est,
        t1_est,
        stage1_end: None,
        plateau,
        window_ok,
        flags: StageFlags { stage_not_ended: true, not_balanced: plateau.is_none() },
    }
}

/// Training hook checking the first-stage invariants online.
///
/// While every `|ℓ′_i|` is in `[0.4, 0.6]` it checks that each step leaves
/// `γ` and `ρ̄` nondecreasing and `ρ̲` nonincreasing (requires decomposition
/// tracking) and that the initial activation sets persist.
#[derive(Clone, Debug, Default)]
pub struct Stage1Monitor {
    pub initial: Option<ActivationSets>,
    /// Iterations checked inside the window.
    pub window_iters: usize,
    pub coeffs_monotone: bool,
    pub sets_persist: bool,
    /// First iteration at which a check failed.
    pub first_violation: Option<usize>,
    prev: Option<(ndarray::Array2<f64>, ndarray::Array3<f64>)>,
    open: bool,
}

impl Stage1Monitor {
    pub fn new() -> Self {
        Stage1Monitor { coeffs_monotone: true, sets_persist: true, open: true, ..Default::default() }
    }

    pub fn passed(&self) -> bool {
        self.coeffs_monotone && self.sets_persist
    }

    fn fail(&mut self, t: usize) {
        self.first_violation.get_or_insert(t);
    }
}

impl TrainHook for Stage1Monitor {
    fn observe(&mut self, params: &ModelParams, state: &StepState<'_>) {
        let sets = ActivationSets::from_forward(params, state.design, state.forward);
        if self.initial.is_none() {
            self.initial = Some(sets.clone());
        }
        if !self.open {
            return;
        }
        // The previous step was taken inside the window, so its effect is
        // checked here.
        if let (Some((g0, r0)), Some(c)) = (&self.prev, state.decomp) {
            let tol = 1e-15;
            let gamma_ok = c.gamma.iter().zip(g0).all(|(a, b)| *a >= *b - tol);
            let rho_ok = c.rho.iter().zip(r0).all(|(a, b)| {
                let (bar, bar0) = (a.max(0.0), b.max(0.0));
                let (under, under0) = (a.min(0.0), b.min(0.0));
                bar >= bar0 - tol && under <= under0 + tol
            });
            if !(gamma_ok && rho_ok) {
                self.coeffs_monotone = false;
                self.fail(state.t);
            }
        }
        if !self.initial.as_ref().is_some_and(|s0| s0.contained_in(&sets)) {
            self.sets_persist = false;
            self.fail(state.t);
        }
        let ok = state.ell_prime.iter().all(|g| (LPRIME_WINDOW.0..=LPRIME_WINDOW.1).contains(&g.abs()));
        if ok {
            self.window_iters += 1;
            self.prev = state.decomp.map(|c| (c.gamma.clone(), c.rho.clone()));
        } else {
            self.open = false;
            self.prev = None;
        }
    }
}

/// One inequality evaluated with all unspecified constants set to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub item: u8,
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs ≤ rhs` for upper bounds, `lhs ≥ rhs` for lower bounds.
    pub holds: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitRegime {
    SmallInit,
    LargeInit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub delta: f64,
    pub checks: Vec<ConditionCheck>,
    /// `n^{1/4} σ_p^{-1/2} d^{-1/4} m^{-1/2}`.
    pub v0_threshold: f64,
    pub regime: InitRegime,
    /// `n‖μ‖⁴/(σ_p⁴ d)`.
    pub snr_large_init: f64,
    /// `n‖μ‖²/(σ_p² d)`.
    pub snr_ratio: f64,
}

impl ConditionReport {
    pub fn all_hold(&self) -> bool {
        self.checks.iter().all(|c| c.holds)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeConfig {
    pub d: usize,
    pub n: usize,
    pub m: usize,
    pub sigma_p: f64,
    pub sigma_0: f64,
    pub v_0: f64,
    pub eta: f64,
    pub mu_norm: f64,
}

/// Evaluates the dimension, sample size, initialization and learning-rate
/// requirements numerically with `C = 1`, `δ = 0.01` and the `log T*`
/// factor taken as 1. The flags are informational.
pub fn condition_report(c: &RegimeConfig) -> Result<ConditionReport> {
    if c.m == 0 || c.n == 0 || c.d == 0 {
        return Err(Error::invalid("d, n and m must be positive"));
    }
    let positive = [c.sigma_p, c.sigma_0, c.v_0, c.eta, c.mu_norm];
    if positive.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
        return Err(Error::invalid("sigma_p, sigma_0, v_0, eta and mu_norm must be positive"));
    }
    let delta = CONCENTRATION_DELTA;
    let (d, n, m) = (c.d as f64, c.n as f64, c.m as f64);
    let (sp, s0, v0, mu) = (c.sigma_p, c.sigma_0, c.v_0, c.mu_norm);
    let log_n2 = (4.0 * n * n / delta).ln();
    let log_mn = (8.0 * m * n / delta).ln();

    let mut checks = Vec::new();
    let mut lower = |item, name: &str, lhs: f64, rhs: f64| {
        checks.push(ConditionCheck { item, name: name.into(), lhs, rhs, holds: lhs >= rhs });
    };
    lower(
        1,
        "dimension",
        d,
        (n * mu * mu / (sp * sp)).max(n * n * log_n2).max(n.powf(5.0 / 3.0) * sp * sp * log_n2),
    );
    lower(2, "sample size", n, (m / delta).ln());
    lower(2, "width", m, (n / delta).ln());
    lower(4, "output init lower", v0, s0 * (n * log_mn).sqrt());
    let mut upper = |item, name: &str, lhs: f64, rhs: f64| {
        checks.push(ConditionCheck { item, name: name.into(), lhs, rhs, holds: lhs <= rhs });
    };
    upper(
        3,
        "hidden init",
        s0,
        1.0 / (sp * d / n.sqrt()).max((n * d).powf(0.25) * (m * sp).sqrt()).max((n / delta).ln().sqrt() * mu),
    );
    upper(
        4,
        "output init upper",
        v0,
        1.0 / (m * s0 * sp * (d * log_mn).sqrt()).max(n * sp * sp * (m * log_n2 / d).sqrt()),
    );
    upper(
        5,
        "learning rate",
        c.eta,
        1.0 / (m.powi(3) * sp * sp * d * v0.powi(4) / n)
            .max(m * sp * sp * d * v0 * v0 / n)
            .max(sp * sp * d.powf(1.5) * v0 * v0 / (n * n * log_n2.sqrt())),
    );
    checks.sort_by_key(|c| c.item);

    let v0_threshold = n.powf(0.25) * sp.powf(-0.5) * d.powf(-0.25) * m.powf(-0.5);
    Ok(ConditionReport {
        delta,
        checks,
        v0_threshold,
        regime: if v0 < v0_threshold { InitRegime::SmallInit } else { InitRegime::LargeInit },
        snr_large_init: n * mu.powi(4) / (sp.powi(4) * d),
        snr_ratio: n * mu * mu / (sp * sp * d),
    })
}
