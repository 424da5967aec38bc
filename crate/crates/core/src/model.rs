//! Two-layer ReLU CNN with trainable hidden filters and output scalars.
//!
//! `F_j(x) = Σ_r Σ_p v_{j,r,p} σ(⟨w_{j,r}, x⁽ᵖ⁾⟩)` and `f(x) = F₊₁(x) − F₋₁(x)`.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayViewMut1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Class, DataPoint, DataSet, Slot};
use crate::error::{Error, Result};

/// Hidden filters `w_{j,r}` and output scalars `v_{j,r,p}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// Row `j.index() * m + r` holds `w_{j,r}`.
    pub w: Array2<f64>,
    /// `v[[j.index(), r, p]]`.
    pub v: Array3<f64>,
}

impl ModelParams {
    pub fn new(w: Array2<f64>, v: Array3<f64>) -> Result<Self> {
        let (rows, d) = w.dim();
        if rows == 0 || rows % 2 != 0 || d == 0 {
            return Err(Error::invalid(format!("filter matrix must be (2m, d) with m, d ≥ 1, got ({rows}, {d})")));
        }
        let m = rows / 2;
        if v.dim() != (2, m, 2) {
            return Err(Error::invalid(format!("output layer must be (2, {m}, 2), got {:?}", v.dim())));
        }
        Ok(ModelParams { w, v })
    }

    pub fn zeros(m: usize, d: usize) -> Self {
        ModelParams { w: Array2::zeros((2 * m, d)), v: Array3::zeros((2, m, 2)) }
    }

    pub fn m(&self) -> usize {
        self.w.nrows() / 2
    }

    pub fn d(&self) -> usize {
        self.w.ncols()
    }

    pub fn row(&self, j: Class, r: usize) -> usize {
        j.index() * self.m() + r
    }

    pub fn filter(&self, j: Class, r: usize) -> ArrayView1<'_, f64> {
        self.w.row(self.row(j, r))
    }

    pub fn filter_mut(&mut self, j: Class, r: usize) -> ArrayViewMut1<'_, f64> {
        let row = self.row(j, r);
        self.w.row_mut(row)
    }

    pub fn out(&self, j: Class, r: usize, p: Slot) -> f64 {
        self.v[[j.index(), r, p.index()]]
    }

    pub fn set_out(&mut self, j: Class, r: usize, p: Slot, value: f64) {
        self.v[[j.index(), r, p.index()]] = value;
    }

    /// Both layers multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        ModelParams { w: &self.w * c, v: &self.v * c }
    }

    /// Swaps the roles of the two logits.
    pub fn mirrored(&self) -> Self {
        let m = self.m();
        let mut out = self.clone();
        for r in 0..m {
            out.w.row_mut(r).assign(&self.w.row(m + r));
            out.w.row_mut(m + r).assign(&self.w.row(r));
        }
        out.v.index_axis_mut(Axis(0), 0).assign(&self.v.index_axis(Axis(0), 1));
        out.v.index_axis_mut(Axis(0), 1).assign(&self.v.index_axis(Axis(0), 0));
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.w.iter().chain(self.v.iter()).fold(0.0f64, |a, &x| a.max(x.abs()))
    }

    /// Writes `kind,j,r,index,value` rows: `w` rows list every coordinate of
    /// every filter, `v` rows list every output scalar with the patch number
    /// (1 or 2) in the `index` column. Ordering is `w` before `v`, then
    /// `j = +1` before `j = −1`, then `r`, then index.
    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "kind,j,r,index,value")?;
        for j in Class::BOTH {
            for r in 0..self.m() {
                for (k, x) in self.filter(j, r).iter().enumerate() {
                    writeln!(f, "w,{},{r},{k},{x}", j.as_i8())?;
                }
            }
        }
        for j in Class::BOTH {
            for r in 0..self.m() {
                for p in Slot::BOTH {
                    writeln!(f, "v,{},{r},{},{}", j.as_i8(), p.number(), self.out(j, r, p))?;
                }
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Format { path: path.to_path_buf(), message };
        let mut rdr = csv::Reader::from_path(path)?;
        let mut w_entries = Vec::new();
        let mut v_entries = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 5 {
                return Err(bad(format!("expected 5 fields, got {}", rec.len())));
            }
            let j: i8 = rec[1].parse().map_err(|_| bad(format!("bad j {:?}", &rec[1])))?;
            let j = match j {
                1 => Class::Pos,
                -1 => Class::Neg,
                _ => return Err(bad(format!("j must be ±1, got {j}"))),
            };
            let r: usize = rec[2].parse().map_err(|_| bad(format!("bad r {:?}", &rec[2])))?;
            let k: usize = rec[3].parse().map_err(|_| bad(format!("bad index {:?}", &rec[3])))?;
            let x: f64 = rec[4].parse().map_err(|_| bad(format!("bad value {:?}", &rec[4])))?;
            match &rec[0] {
                "w" => w_entries.push((j, r, k, x)),
                "v" => v_entries.push((j, r, k, x)),
                other => return Err(bad(format!("unknown kind {other:?}"))),
            }
        }
        let m = w_entries.iter().chain(&v_entries).map(|e| e.1 + 1).max().unwrap_or(0);
        let d = w_entries.iter().map(|e| e.2 + 1).max().unwrap_or(0);
        if m == 0 || d == 0 || w_entries.len() != 2 * m * d || v_entries.len() != 4 * m {
            return Err(bad("incomplete parameter table".into()));
        }
        let mut params = ModelParams::zeros(m, d);
        for (j, r, k, x) in w_entries {
            let row = params.row(j, r);
            params.w[[row, k]] = x;
        }
        for (j, r, p, x) in v_entries {
            let slot = match p {
                1 => Slot::First,
                2 => Slot::Second,
                _ => return Err(bad(format!("patch index must be 1 or 2, got {p}"))),
            };
            params.set_out(j, r, slot, x);
        }
        Ok(params)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub sigma_0: f64,
    pub v_0: f64,
    pub seed: u64,
}

/// Filters entrywise `N(0, σ₀²)`, every output scalar equal to `v₀`.
pub fn init_params(m: usize, d: usize, cfg: &InitConfig) -> Result<ModelParams> {
    if m == 0 || d == 0 {
        return Err(Error::invalid(format!("m and d must be at least 1, got m={m}, d={d}")));
    }
    if !(cfg.sigma_0 > 0.0) || !cfg.sigma_0.is_finite() {
        return Err(Error::invalid(format!("sigma_0 must be positive, got {}", cfg.sigma_0)));
    }
    if !(cfg.v_0 > 0.0) || !cfg.v_0.is_finite() {
        return Err(Error::invalid(format!("v_0 must be positive, got {}", cfg.v_0)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let w = Array2::from_shape_simple_fn((2 * m, d), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        cfg.sigma_0 * z
    });
    let v = Array3::from_elem((2, m, 2), cfg.v_0);
    Ok(ModelParams { w, v })
}

pub fn relu(z: f64) -> f64 {
    z.max(0.0)
}

/// ReLU derivative with `σ′(0) = 0`.
pub fn relu_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `ℓ(z) = log(1 + e^{−z})`.
pub fn logistic_loss(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// `ℓ′(z) = −1 / (1 + e^{z})`, always in `(−1, 0)` for finite `z`.
pub fn logistic_derivative(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        -e / (1.0 + e)
    } else {
        -1.0 / (1.0 + z.exp())
    }
}

fn check_input(params: &ModelParams, x: &[ArrayView1<'_, f64>; 2]) -> Result<()> {
    let d = params.d();
    if x[0].len() != d || x[1].len() != d {
        return Err(Error::invalid(format!(
            "input patches have lengths ({}, {}), model expects {d}",
            x[0].len(),
            x[1].len()
        )));
    }
    Ok(())
}

/// `F_j(x)`.
pub fn logit(params: &ModelParams, j: Class, x: &[ArrayView1<'_, f64>; 2]) -> Result<f64> {
    check_input(params, x)?;
    let mut acc = 0.0;
    for r in 0..params.m() {
        let w = params.filter(j, r);
        for p in Slot::BOTH {
            acc += params.out(j, r, p) * relu(w.dot(&x[p.index()]));
        }
    }
    Ok(acc)
}

/// `f(x) = F₊₁(x) − F₋₁(x)`.
pub fn output(params: &ModelParams, x: &[ArrayView1<'_, f64>; 2]) -> Result<f64> {
    Ok(logit(params, Class::Pos, x)? - logit(params, Class::Neg, x)?)
}

impl DataPoint {
    pub fn input(&self) -> [ArrayView1<'_, f64>; 2] {
        [self.patches[0].view(), self.patches[1].view()]
    }
}

/// Dense, matrix-shaped copy of a dataset for batched forward passes.
#[derive(Clone, Debug)]
pub struct Design {
    /// `patches[p]` has row `i` equal to `x_i⁽ᵖ⁾`.
    pub patches: [Array2<f64>; 2],
    /// `y_i` as `±1.0`.
    pub y: Array1<f64>,
    pub labels: Vec<Class>,
    pub signal_slot: Vec<Slot>,
    /// `‖ξ_i‖²`.
    pub noise_norm_sq: Array1<f64>,
    pub mu: Array1<f64>,
}

impl Design {
    pub fn new(ds: &DataSet) -> Self {
        Design {
            patches: [ds.patch_matrix(Slot::First), ds.patch_matrix(Slot::Second)],
            y: ds.labels().map(Class::sign).collect(),
            labels: ds.labels().collect(),
            signal_slot: ds.points.iter().map(|p| p.signal_slot).collect(),
            noise_norm_sq: ds.noise_norms_sq().into(),
            mu: ds.mu.as_array().clone(),
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.patches[0].ncols()
    }

    pub fn noise_slot(&self, i: usize) -> Slot {
        self.signal_slot[i].other()
    }

    /// Patch matrix row of `ξ_i`.
    pub fn noise(&self, i: usize) -> ArrayView1<'_, f64> {
        self.patches[self.noise_slot(i).index()].row(i)
    }
}

/// Pre-activations and outputs over a whole dataset.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `pre[p][[row(j,r), i]] = ⟨w_{j,r}, x_i⁽ᵖ⁾⟩`.
    pub pre: [Array2<f64>; 2],
    /// `f(x_i)`.
    pub f: Array1<f64>,
}

impl Forward {
    pub fn new(params: &ModelParams, design: &Design) -> Result<Self> {
        if design.d() != params.d() {
            return Err(Error::invalid(format!("data dimension {} != model dimension {}", design.d(), params.d())));
        }
        let pre = [params.w.dot(&design.patches[0].t()), params.w.dot(&design.patches[1].t())];
        let m = params.m();
        let n = design.n();
        let mut f = Array1::zeros(n);
        for j in Class::BOTH {
            for r in 0..m {
                let row = j.index() * m + r;
                for p in Slot::BOTH {
                    let v = params.out(j, r, p) * j.sign();
                    if v == 0.0 {
                        continue;
                    }
                    for (fi, &z) in f.iter_mut().zip(pre[p.index()].row(row)) {
                        *fi += v * relu(z);
                    }
                }
            }
        }
        Ok(Forward { pre, f })
    }

    /// `⟨w_{j,r}, ξ_i⟩` for the filter in matrix row `row`.
    pub fn noise_pre(&self, design: &Design, row: usize, i: usize) -> f64 {
        self.pre[design.noise_slot(i).index()][[row, i]]
    }

    /// `⟨w_{j,r}, y_i μ⟩` for the filter in matrix row `row`.
    pub fn signal_pre(&self, design: &Design, row: usize, i: usize) -> f64 {
        self.pre[design.signal_slot[i].index()][[row, i]]
    }

    /// `y_i f(x_i)`.
    pub fn margins(&self, design: &Design) -> Array1<f64> {
        &self.f * &design.y
    }

    pub fn loss(&self, design: &Design) -> f64 {
        let margins = self.margins(design);
        margins.iter().map(|&z| logistic_loss(z)).sum::<f64>() / design.n() as f64
    }

    /// `ℓ′_i = ℓ′(y_i f(x_i))`.
    pub fn loss_derivatives(&self, design: &Design) -> Array1<f64> {
        self.margins(design).mapv(logistic_derivative)
    }
}

/// `L_S = (1/n) Σ ℓ(y_i f(x_i))`.
pub fn empirical_loss(params: &ModelParams, ds: &DataSet) -> Result<f64> {
    let design = Design::new(ds);
    Ok(Forward::new(params, &design)?.loss(&design))
}

pub fn loss_derivatives(params: &ModelParams, ds: &DataSet) -> Result<Array1<f64>> {
    let design = Design::new(ds);
    Ok(Forward::new(params, &design)?.loss_derivatives(&design))
}
