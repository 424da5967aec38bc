//! The library step against a plain-loop backprop written from the model
//! definition, plus symmetry and scale checks that need no oracle at all.

use benign_lab::data::{generate_dataset, make_mu, DataSet};
use benign_lab::model::{empirical_loss, init_params, InitConfig, ModelParams};
use benign_lab::trainer::{grad_step, train, StopReason, TrainConfig};

/// Per-sample loop over `f = F₊ − F₋` with `F_j = Σ_r Σ_p v σ(⟨w, x_p⟩)`.
/// Uses `-1/(1+e^z)` for the loss derivative without any stabilization,
/// which is accurate for the moderate margins used here.
fn oracle_step(p: &ModelParams, ds: &DataSet, eta: f64) -> ModelParams {
    let m = p.m();
    let d = p.d();
    let n = ds.n() as f64;
    let mut next = p.clone();
    for pt in &ds.points {
        let y = pt.label.sign();
        let mut f = 0.0;
        let mut pre = vec![[0.0f64; 2]; 2 * m];
        for (row, z) in pre.iter_mut().enumerate() {
            let sign = if row < m { 1.0 } else { -1.0 };
            for slot in 0..2 {
                let x = &pt.patches[slot];
                z[slot] = (0..d).map(|k| p.w[[row, k]] * x[k]).sum();
                f += sign * p.v[[row / m, row % m, slot]] * z[slot].max(0.0);
            }
        }
        let lp = -1.0 / (1.0 + (y * f).exp());
        for (row, z) in pre.iter().enumerate() {
            let sign = if row < m { 1.0 } else { -1.0 };
            for slot in 0..2 {
                if z[slot] <= 0.0 {
                    continue;
                }
                let g = lp * y * sign / n;
                let v = p.v[[row / m, row % m, slot]];
                next.v[[row / m, row % m, slot]] -= eta * g * z[slot];
                for k in 0..d {
                    next.w[[row, k]] -= eta * g * v * pt.patches[slot][k];
                }
            }
        }
    }
    next
}

fn max_diff(a: &ModelParams, b: &ModelParams) -> f64 {
    a.w.iter().chain(a.v.iter()).zip(b.w.iter().chain(b.v.iter())).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn step_matches_loop_oracle() {
    for k in 0..20u64 {
        let mu = make_mu(30, 0.5 + 0.1 * k as f64).unwrap();
        let ds = generate_dataset(9, &mu, 1.0, 100 + k).unwrap();
        let p = init_params(4, 30, &InitConfig { sigma_0: 0.3, v_0: 0.2 + 0.05 * k as f64, seed: 200 + k }).unwrap();
        let lib = grad_step(&p, &ds, 0.2).unwrap();
        let oracle = oracle_step(&p, &ds, 0.2);
        assert!(max_diff(&lib, &oracle) <= 1e-10, "seed {k}: {}", max_diff(&lib, &oracle));
    }
}

#[test]
fn trajectory_matches_loop_oracle() {
    let mu = make_mu(25, 1.5).unwrap();
    let ds = generate_dataset(6, &mu, 1.0, 9).unwrap();
    let p0 = init_params(3, 25, &InitConfig { sigma_0: 0.2, v_0: 0.3, seed: 10 }).unwrap();
    let out = train(&p0, &ds, &TrainConfig { eta: 0.1, max_iters: 30, ..TrainConfig::default() }, ()).unwrap();
    let mut q = p0;
    for _ in 0..30 {
        q = oracle_step(&q, &ds, 0.1);
    }
    assert!(max_diff(&out.params, &q) <= 1e-10);
}

#[test]
fn mirroring_labels_and_logits_commutes_with_a_step() {
    let mu = make_mu(40, 1.0).unwrap();
    let ds = generate_dataset(10, &mu, 1.0, 1).unwrap();
    let p = init_params(3, 40, &InitConfig { sigma_0: 0.2, v_0: 0.4, seed: 2 }).unwrap();
    let mirrored = ds.mirrored();
    assert!((empirical_loss(&p, &ds).unwrap() - empirical_loss(&p.mirrored(), &mirrored).unwrap()).abs() < 1e-14);
    let a = grad_step(&p, &ds, 0.3).unwrap().mirrored();
    let b = grad_step(&p.mirrored(), &mirrored, 0.3).unwrap();
    assert!(max_diff(&a, &b) < 1e-14);
}

#[test]
fn positive_scaling_keeps_the_sign_pattern() {
    let mu = make_mu(30, 1.0).unwrap();
    let ds = generate_dataset(8, &mu, 1.0, 3).unwrap();
    let p = init_params(2, 30, &InitConfig { sigma_0: 0.5, v_0: 0.5, seed: 4 }).unwrap();
    let margins = |q: &ModelParams| -> Vec<bool> {
        ds.points
            .iter()
            .map(|pt| benign_lab::model::output(q, &pt.input()).unwrap() * pt.label.sign() > 0.0)
            .collect()
    };
    // Output is homogeneous of degree 2 in (W, v), so scaling preserves signs.
    assert_eq!(margins(&p), margins(&p.scaled(3.0)));
}

#[test]
fn default_configuration_runs_to_the_horizon() {
    let mu = make_mu(1000, 1.0).unwrap();
    let ds = generate_dataset(100, &mu, 1.0, 5).unwrap();
    let p0 = init_params(10, 1000, &InitConfig { sigma_0: 0.01, v_0: 0.1, seed: 6 }).unwrap();
    let out = train(&p0, &ds, &TrainConfig { log_every: 10, ..TrainConfig::default() }, ()).unwrap();
    assert_eq!(out.stop, StopReason::MaxIters);
    assert_eq!(out.iterations, 200);
    assert_eq!(out.log.entries.len(), 21);
    assert!(out.final_loss < out.log.entries[0].loss);
}
