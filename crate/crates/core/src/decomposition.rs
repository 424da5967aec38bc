//! Signal-noise decomposition of the hidden filters.
//!
//! Every filter stays in the affine span
//!
//! ```text
//! w_{j,r}(t) = w_{j,r}(0) + j·γ_{j,r}(t)·μ/‖μ‖² + Σ_i ρ_{j,r,i}(t)·ξ_i/‖ξ_i‖²
//! ```
//!
//! because each gradient step only adds multiples of `μ` and the `ξ_i`. The
//! coefficients are advanced with the exact per-step recursion, so the
//! identity holds to floating-point accuracy at every iteration.
//!
//! Inputs place the signal in either patch. The recursion therefore uses the
//! output weight of the patch that actually carried the signal (or noise) for
//! each sample; with every signal in the first patch this is the familiar
//! `v_{j,r,1}` / `v_{j,r,2}` form.

use std::path::Path;

use nalgebra::{DMatrix, SVD};
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{Class, DataSet};
use crate::error::{Error, Result};
use crate::model::{relu_grad, Design, Forward, ModelParams};

/// Condition-number ceiling for the projection oracle.
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompCoeffs {
    pub t: usize,
    /// `gamma[[j.index(), r]]`.
    pub gamma: Array2<f64>,
    /// `rho[[j.index(), r, i]]`.
    pub rho: Array3<f64>,
}

impl DecompCoeffs {
    pub fn zeros(m: usize, n: usize) -> Self {
        DecompCoeffs { t: 0, gamma: Array2::zeros((2, m)), rho: Array3::zeros((2, m, n)) }
    }

    pub fn m(&self) -> usize {
        self.gamma.ncols()
    }

    pub fn n(&self) -> usize {
        self.rho.dim().2
    }

    pub fn gamma(&self, j: Class, r: usize) -> f64 {
        self.gamma[[j.index(), r]]
    }

    pub fn rho(&self, j: Class, r: usize, i: usize) -> f64 {
        self.rho[[j.index(), r, i]]
    }

    /// `max(ρ, 0)`.
    pub fn rho_bar(&self) -> Array3<f64> {
        self.rho.mapv(|x| x.max(0.0))
    }

    /// `min(ρ, 0)`.
    pub fn rho_under(&self) -> Array3<f64> {
        self.rho.mapv(|x| x.min(0.0))
    }

    /// One gradient-descent step of the coefficients. `forward` and
    /// `ell_prime` must be evaluated at `params`, the iterate being stepped
    /// from.
    pub fn advance(&mut self, params: &ModelParams, design: &Design, forward: &Forward, ell_prime: &Array1<f64>, eta: f64) {
        let m = params.m();
        let n = design.n();
        let scale = eta / n as f64;
        let mu_norm_sq = design.mu.dot(&design.mu);
        for j in Class::BOTH {
            for r in 0..m {
                let row = params.row(j, r);
                let mut signal = 0.0;
                for i in 0..n {
                    let act = relu_grad(forward.signal_pre(design, row, i));
                    if act != 0.0 {
                        signal += params.out(j, r, design.signal_slot[i]) * ell_prime[i];
                    }
                }
                self.gamma[[j.index(), r]] -= scale * mu_norm_sq * signal;
                for i in 0..n {
                    let act = relu_grad(forward.noise_pre(design, row, i));
                    if act == 0.0 {
                        continue;
                    }
                    let same = if design.labels[i] == j { 1.0 } else { -1.0 };
                    let v = params.out(j, r, design.noise_slot(i));
                    self.rho[[j.index(), r, i]] -= same * scale * v * ell_prime[i] * design.noise_norm_sq[i];
                }
            }
        }
        self.t += 1;
    }

    /// Writes `iter,j,r,gamma,rho_bar_sum,rho_under_sum,rho_max,rho_min`,
    /// one row per filter and snapshot.
    pub fn write_csv(snapshots: &[DecompCoeffs], path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iter", "j", "r", "gamma", "rho_bar_sum", "rho_under_sum", "rho_max", "rho_min"])?;
        for c in snapshots {
            for j in Class::BOTH {
                for r in 0..c.m() {
                    let row = c.rho.slice(ndarray::s![j.index(), r, ..]);
                    let bar: f64 = row.iter().map(|x| x.max(0.0)).sum();
                    let under: f64 = row.iter().map(|x| x.min(0.0)).sum();
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let min = row.iter().copied().fold(f64::INFINITY, f64::min);
                    w.write_record([
                        c.t.to_string(),
                        j.as_i8().to_string(),
                        r.to_string(),
                        c.gamma(j, r).to_string(),
                        bar.to_string(),
                        under.to_string(),
                        max.to_string(),
                        min.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Coefficient update from scratch: evaluates activations at `params`.
pub fn update_coeffs(
    coeffs: &DecompCoeffs,
    params: &ModelParams,
    ds: &DataSet,
    ell_prime: &Array1<f64>,
    eta: f64,
) -> Result<DecompCoeffs> {
    if coeffs.m() != params.m() || coeffs.n() != ds.n() || ell_prime.len() != ds.n() {
        return Err(Error::invalid(format!(
            "index mismatch: coeffs (m={}, n={}), params m={}, data n={}, ℓ′ length {}",
            coeffs.m(),
            coeffs.n(),
            params.m(),
            ds.n(),
            ell_prime.len()
        )));
    }
    let design = Design::new(ds);
    let forward = Forward::new(params, &design)?;
    let mut next = coeffs.clone();
    next.advance(params, &design, &forward, ell_prime, eta);
    Ok(next)
}

/// `w₀ + j·γ·μ/‖μ‖² + Σ_i ρ_i·ξ_i/‖ξ_i‖²` for every filter. `xis` has one
/// noise vector per row.
pub fn reconstruct_w(coeffs: &DecompCoeffs, w0: &Array2<f64>, mu: ArrayView1<'_, f64>, xis: ArrayView2<'_, f64>) -> Array2<f64> {
    let m = coeffs.m();
    let n = coeffs.n();
    let mu_norm_sq = mu.dot(&mu);
    let inv_norms: Array1<f64> = xis.rows().into_iter().map(|x| 1.0 / x.dot(&x)).collect();
    let mut weights = Array2::zeros((2 * m, n));
    for j in Class::BOTH {
        for r in 0..m {
            for i in 0..n {
                weights[[j.index() * m + r, i]] = coeffs.rho(j, r, i) * inv_norms[i];
            }
        }
    }
    let mut w = w0 + &weights.dot(&xis);
    for j in Class::BOTH {
        for r in 0..m {
            let c = j.sign() * coeffs.gamma(j, r) / mu_norm_sq;
            w.row_mut(j.index() * m + r).scaled_add(c, &mu);
        }
    }
    w
}

#[derive(Clone, Debug)]
pub struct Projection {
    pub coeffs: DecompCoeffs,
    /// Largest least-squares residual norm over all filters.
    pub residual: f64,
    pub condition: f64,
}

/// Least-squares solver for coefficients in the basis
/// `{μ/‖μ‖², ξ_i/‖ξ_i‖²}`. The factorization is computed once per dataset.
pub struct Projector {
    basis: DMatrix<f64>,
    svd: SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    n: usize,
    pub condition: f64,
}

impl Projector {
    pub fn new(mu: ArrayView1<'_, f64>, xis: ArrayView2<'_, f64>) -> Result<Self> {
        let (n, d) = xis.dim();
        if mu.len() != d {
            return Err(Error::invalid("signal and noise dimensions differ"));
        }
        let mu_norm_sq = mu.dot(&mu);
        let basis = DMatrix::from_fn(d, n + 1, |k, c| {
            if c == 0 {
                mu[k] / mu_norm_sq
            } else {
                let x = xis.row(c - 1);
                x[k] / x.dot(&x)
            }
        });
        let svd = SVD::new(basis.clone(), true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let condition = if n + 1 <= d && smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !(condition <= MAX_CONDITION) {
            return Err(Error::Conditioning { condition });
        }
        Ok(Projector { basis, svd, n, condition })
    }

    /// Recovers the coefficients of `w_t − w₀`.
    pub fn project(&self, w_t: &Array2<f64>, w0: &Array2<f64>) -> Result<Projection> {
        let (rows, d) = w_t.dim();
        if w0.dim() != (rows, d) || d != self.basis.nrows() || rows % 2 != 0 {
            return Err(Error::invalid("shape mismatch between filters and basis"));
        }
        let m = rows / 2;
        let n = self.n;
        let delta = DMatrix::from_fn(d, rows, |k, c| w_t[[c, k]] - w0[[c, k]]);
        let sol = self.svd.solve(&delta, 0.0).map_err(|e| Error::invalid(e.to_string()))?;
        let resid = &self.basis * &sol - &delta;
        let residual = (0..rows).map(|c| resid.column(c).norm()).fold(0.0, f64::max);

        let mut coeffs = DecompCoeffs::zeros(m, n);
        for j in Class::BOTH {
            for r in 0..m {
                let c = j.index() * m + r;
                coeffs.gamma[[j.index(), r]] = j.sign() * sol[(0, c)];
                for i in 0..n {
                    coeffs.rho[[j.index(), r, i]] = sol[(i + 1, c)];
                }
            }
        }
        Ok(Projection { coeffs, residual, condition: self.condition })
    }
}

/// Recovers the coefficients of `w_t − w₀` in the basis
/// `{j·μ/‖μ‖², ξ_i/‖ξ_i‖²}` by least squares.
pub fn project_coeffs(w_t: &Array2<f64>, w0: &Array2<f64>, mu: ArrayView1<'_, f64>, xis: ArrayView2<'_, f64>) -> Result<Projection> {
    Projector::new(mu, xis)?.project(w_t, w0)
}
