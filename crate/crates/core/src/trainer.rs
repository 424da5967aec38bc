//! Full-batch gradient descent on the empirical logistic risk.
//!
//! Both layers are updated simultaneously: every loss derivative and ReLU
//! activation in a step is evaluated at the current iterate.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::{Class, DataSet, Slot};
use crate::decomposition::DecompCoeffs;
use crate::error::{Error, Result};
use crate::model::{relu, Design, Forward, ModelParams};

/// Any parameter with magnitude above this aborts training.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub max_iters: usize,
    pub target_loss: f64,
    pub log_every: usize,
    pub seed: u64,
    /// Maintain the signal-noise coefficients and attach them to every log
    /// entry.
    pub track_decomposition: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { eta: 0.01, max_iters: 200, target_loss: 0.0, log_every: 1, seed: 0, track_decomposition: false }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.eta)));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("log_every must be at least 1"));
        }
        if self.target_loss.is_nan() || self.target_loss < 0.0 {
            return Err(Error::invalid(format!("target loss must be nonnegative, got {}", self.target_loss)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIters,
    Diverged,
}

/// Everything computed at one iterate before stepping away from it.
pub struct StepState<'a> {
    pub t: usize,
    pub design: &'a Design,
    pub forward: &'a Forward,
    pub ell_prime: &'a Array1<f64>,
    pub loss: f64,
    /// Coefficients at `t` when decomposition tracking is on.
    pub decomp: Option<&'a DecompCoeffs>,
}

/// Observer invoked at every iterate, including the final one.
pub trait TrainHook {
    fn observe(&mut self, params: &ModelParams, state: &StepState<'_>);
}

impl TrainHook for () {
    fn observe(&mut self, _: &ModelParams, _: &StepState<'_>) {}
}

impl<H: TrainHook + ?Sized> TrainHook for &mut H {
    fn observe(&mut self, params: &ModelParams, state: &StepState<'_>) {
        (**self).observe(params, state)
    }
}

impl<A: TrainHook, B: TrainHook> TrainHook for (A, B) {
    fn observe(&mut self, params: &ModelParams, state: &StepState<'_>) {
        self.0.observe(params, state);
        self.1.observe(params, state);
    }
}

/// Scalar diagnostics at one logged iterate. Per-filter vectors are indexed
/// by `j.index() * m + r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub loss: f64,
    /// `min_i |ℓ′_i|`.
    pub lprime_min: f64,
    /// `max_i |ℓ′_i|`.
    pub lprime_max: f64,
    /// `⟨w_{j,r}, jμ⟩`.
    pub signal_inner: Vec<f64>,
    /// `max_{i: y_i = j} ⟨w_{j,r}, ξ_i⟩`; absent when no sample has label `j`.
    pub noise_inner_max: Vec<Option<f64>>,
    /// `max_{i: y_i = j}` of the output weight on the patch holding `ξ_i`.
    pub noise_weight_max: Vec<Option<f64>>,
    /// `max_{i: y_i = j}` of the output weight on the patch holding `y_i μ`.
    pub signal_weight_max: Vec<Option<f64>>,
    /// Output layer snapshot in `(j, r, p)` order.
    pub v: Vec<f64>,
    /// `max_k Σ_r v_{y_k,r,noise} σ(⟨w_{y_k,r}, ξ_k⟩)`.
    pub noise_output_max: f64,
    /// `|S_i|` for each sample.
    pub active_per_sample: Vec<usize>,
    /// `|S_{j,r}|` for each filter.
    pub active_per_filter: Vec<usize>,
    pub decomp: Option<DecompCoeffs>,
}

impl LogEntry {
    fn capture(params: &ModelParams, state: &StepState<'_>) -> Self {
        let design = state.design;
        let forward = state.forward;
        let m = params.m();
        let n = design.n();
        let mu_inner = params.w.dot(&design.mu);

        let mut signal_inner = vec![0.0; 2 * m];
        let mut noise_inner_max = vec![None; 2 * m];
        let mut noise_weight_max = vec![None; 2 * m];
        let mut signal_weight_max = vec![None; 2 * m];
        let mut active_per_filter = vec![0usize; 2 * m];
        let mut active_per_sample = vec![0usize; n];
        let mut noise_output = vec![0.0; n];
        let upd = |slot: &mut Option<f64>, x: f64| *slot = Some(slot.map_or(x, |y: f64| y.max(x)));

        for j in Class::BOTH {
            for r in 0..m {
                let row = params.row(j, r);
                signal_inner[row] = j.sign() * mu_inner[row];
                for i in 0..n {
                    if design.labels[i] != j {
                        continue;
                    }
                    let z = forward.noise_pre(design, row, i);
                    let v_noise = params.out(j, r, design.noise_slot(i));
                    upd(&mut noise_inner_max[row], z);
                    upd(&mut noise_weight_max[row], v_noise);
                    upd(&mut signal_weight_max[row], params.out(j, r, design.signal_slot[i]));
                    if z > 0.0 {
                        active_per_filter[row] += 1;
                        active_per_sample[i] += 1;
                    }
                    noise_output[i] += v_noise * relu(z);
                }
            }
        }
        let abs = state.ell_prime.mapv(f64::abs);
        LogEntry {
            iter: state.t,
            loss: state.loss,
            lprime_min: abs.iter().copied().fold(f64::INFINITY, f64::min),
            lprime_max: abs.iter().copied().fold(0.0, f64::max),
            signal_inner,
            noise_inner_max,
            noise_weight_max,
            signal_weight_max,
            v: params.v.iter().copied().collect(),
            noise_output_max: noise_output.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            active_per_sample,
            active_per_filter,
            decomp: state.decomp.cloned(),
        }
    }

    /// Whether every `|ℓ′_i|` lies in `[0.4, 0.6]`.
    pub fn in_stage_one_window(&self) -> bool {
        self.lprime_min >= 0.4 && self.lprime_max <= 0.6
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub m: usize,
    pub n: usize,
    pub entries: Vec<LogEntry>,
}

impl TrajectoryLog {
    pub fn last(&self) -> Option<&LogEntry> {
        self.entries.last()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrajectoryLog,
    pub stop: StopReason,
    /// Index of the final iterate.
    pub iterations: usize,
    pub final_loss: f64,
    pub decomp: Option<DecompCoeffs>,
}

/// Closed-form gradient of `L_S` at the iterate that produced `forward`.
pub fn gradient(params: &ModelParams, design: &Design, forward: &Forward, ell_prime: &Array1<f64>) -> (Array2<f64>, Array3<f64>) {
    let m = params.m();
    let n = design.n();
    let c: Array1<f64> = (&design.y * ell_prime) / n as f64;
    let mut grad_w = Array2::zeros(params.w.dim());
    let mut grad_v = Array3::zeros(params.v.dim());
    for p in Slot::BOTH {
        let pre = &forward.pre[p.index()];
        let mut coef = Array2::<f64>::zeros((2 * m, n));
        for j in Class::BOTH {
            for r in 0..m {
                let row = params.row(j, r);
                let v = params.out(j, r, p);
                let mut gv = 0.0;
                for i in 0..n {
                    let z = pre[[row, i]];
                    if z > 0.0 {
                        let jc = j.sign() * c[i];
                        coef[[row, i]] = jc * v;
                        gv += jc * z;
                    }
                }
                grad_v[[j.index(), r, p.index()]] = gv;
            }
        }
        grad_w += &coef.dot(&design.patches[p.index()]);
    }
    (grad_w, grad_v)
}

fn check_finite(params: &ModelParams, iteration: usize) -> Result<()> {
    let max = params.max_abs();
    if !max.is_finite() {
        return Err(Error::Diverged { iteration, reason: "non-finite parameter".into() });
    }
    if max > DIVERGENCE_LIMIT {
        return Err(Error::Diverged { iteration, reason: format!("parameter magnitude {max:.3e} exceeds {DIVERGENCE_LIMIT:.0e}") });
    }
    Ok(())
}

fn apply_step(params: &ModelParams, design: &Design, forward: &Forward, ell_prime: &Array1<f64>, eta: f64) -> ModelParams {
    let (gw, gv) = gradient(params, design, forward, ell_prime);
    let mut next = params.clone();
    next.w.scaled_add(-eta, &gw);
    next.v.scaled_add(-eta, &gv);
    next
}

/// One simultaneous gradient step on both layers.
pub fn grad_step(params: &ModelParams, ds: &DataSet, eta: f64) -> Result<ModelParams> {
    let design = Design::new(ds);
    let forward = Forward::new(params, &design)?;
    let ell_prime = forward.loss_derivatives(&design);
    let next = apply_step(params, &design, &forward, &ell_prime, eta);
    check_finite(&next, 1)?;
    Ok(next)
}

/// Runs gradient descent until the loss reaches `target_loss` or
/// `max_iters` steps have been taken. Divergence is returned as an error.
pub fn train<H: TrainHook>(params0: &ModelParams, ds: &DataSet, cfg: &TrainConfig, mut hook: H) -> Result<TrainOutcome> {
    cfg.validate()?;
    let design = Design::new(ds);
    let mut params = params0.clone();
    let mut decomp = cfg.track_decomposition.then(|| DecompCoeffs::zeros(params.m(), design.n()));
    let mut log = TrajectoryLog { m: params.m(), n: design.n(), entries: Vec::new() };
    let mut t = 0;
    loop {
        let forward = Forward::new(&params, &design)?;
        let loss = forward.loss(&design);
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: t, reason: format!("loss is {loss}") });
        }
        let ell_prime = forward.loss_derivatives(&design);
        let state = StepState { t, design: &design, forward: &forward, ell_prime: &ell_prime, loss, decomp: decomp.as_ref() };
        hook.observe(&params, &state);

        let stop = if loss <= cfg.target_loss {
            Some(StopReason::Converged)
        } else if t >= cfg.max_iters {
            Some(StopReason::MaxIters)
        } else {
            None
        };
        if t % cfg.log_every == 0 || stop.is_some() {
            log.entries.push(LogEntry::capture(&params, &state));
        }
        if let Some(stop) = stop {
            return Ok(TrainOutcome { params, log, stop, iterations: t, final_loss: loss, decomp });
        }

        if let Some(c) = decomp.as_mut() {
            c.advance(&params, &design, &forward, &ell_prime, cfg.eta);
        }
        params = apply_step(&params, &design, &forward, &ell_prime, cfg.eta);
        t += 1;
        check_finite(&params, t)?;
    }
}
