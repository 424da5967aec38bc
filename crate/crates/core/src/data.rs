//! Signal-plus-noise data.
//!
//! Every input has two patches of dimension `d`. One patch carries the signal
//! `y·μ`, the other a Gaussian noise vector `ξ` drawn from
//! `N(0, σ_p²(I − μμᵀ/‖μ‖²))`, so that `ξ ⊥ μ`. The label is Rademacher and
//! the signal patch position is chosen uniformly at random per point.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Failure probability used by the noise concentration checks.
pub const CONCENTRATION_DELTA: f64 = 0.01;

/// A sign in `{+1, −1}`. Used both for labels `y` and for logit indices `j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Class {
    Pos,
    Neg,
}

impl Class {
    pub const BOTH: [Class; 2] = [Class::Pos, Class::Neg];

    pub fn sign(self) -> f64 {
        match self {
            Class::Pos => 1.0,
            Class::Neg => -1.0,
        }
    }

    /// Storage index: `Pos → 0`, `Neg → 1`.
    pub fn index(self) -> usize {
        match self {
            Class::Pos => 0,
            Class::Neg => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Class::Pos
        } else {
            Class::Neg
        }
    }

    pub fn flip(self) -> Self {
        match self {
            Class::Pos => Class::Neg,
            Class::Neg => Class::Pos,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Class::Pos => 1,
            Class::Neg => -1,
        }
    }
}

/// Patch position within an input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    First,
    Second,
}

impl Slot {
    pub const BOTH: [Slot; 2] = [Slot::First, Slot::Second];

    pub fn index(self) -> usize {
        match self {
            Slot::First => 0,
            Slot::Second => 1,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Slot::First => Slot::Second,
            Slot::Second => Slot::First,
        }
    }

    /// One-based patch number as written in CSV files.
    pub fn number(self) -> u8 {
        self.index() as u8 + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignalVector {
    mu: Array1<f64>,
    norm: f64,
}

impl SignalVector {
    /// Wraps an arbitrary nonzero vector.
    pub fn from_vec(mu: Array1<f64>) -> Result<Self> {
        let norm = mu.dot(&mu).sqrt();
        if mu.is_empty() || !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::invalid("signal vector must be nonzero and finite"));
        }
        Ok(SignalVector { mu, norm })
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.mu.view()
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.mu
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn norm_sq(&self) -> f64 {
        self.norm * self.norm
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn negated(&self) -> Self {
        SignalVector { mu: -&self.mu, norm: self.norm }
    }
}

/// `μ = norm · e₀` in dimension `d`.
pub fn make_mu(d: usize, norm: f64) -> Result<SignalVector> {
    if d == 0 {
        return Err(Error::invalid("dimension d must be at least 1"));
    }
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::invalid(format!("signal norm must be positive, got {norm}")));
    }
    let mut mu = Array1::zeros(d);
    mu[0] = norm;
    Ok(SignalVector { mu, norm })
}

/// Draws `ξ ~ N(0, σ_p² I)` and projects out the `μ` direction.
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, sigma_p: f64, mu: &SignalVector) -> Result<Array1<f64>> {
    check_sigma_p(sigma_p)?;
    let mut xi: Array1<f64> = (0..mu.dim()).map(|_| sigma_p * rng.sample::<f64, _>(StandardNormal)).collect();
    let coef = xi.dot(&mu.mu) / mu.norm_sq();
    xi.scaled_add(-coef, &mu.mu);
    Ok(xi)
}

fn check_sigma_p(sigma_p: f64) -> Result<()> {
    if !(sigma_p > 0.0) || !sigma_p.is_finite() {
        return Err(Error::invalid(format!("sigma_p must be positive, got {sigma_p}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataPoint {
    pub patches: [Array1<f64>; 2],
    pub label: Class,
    pub signal_slot: Slot,
    pub noise: Array1<f64>,
}

impl DataPoint {
    pub fn noise_slot(&self) -> Slot {
        self.signal_slot.other()
    }

    pub fn patch(&self, slot: Slot) -> ArrayView1<'_, f64> {
        self.patches[slot.index()].view()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSet {
    pub points: Vec<DataPoint>,
    pub mu: SignalVector,
    pub sigma_p: f64,
    pub seed: u64,
}

impl DataSet {
    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn d(&self) -> usize {
        self.mu.dim()
    }

    pub fn labels(&self) -> impl Iterator<Item = Class> + '_ {
        self.points.iter().map(|p| p.label)
    }

    /// `‖ξ_i‖²` for every point.
    pub fn noise_norms_sq(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.noise.dot(&p.noise)).collect()
    }

    /// Row `i` holds patch `slot` of point `i`.
    pub fn patch_matrix(&self, slot: Slot) -> Array2<f64> {
        self.stack(|p| p.patch(slot))
    }

    /// Row `i` holds `ξ_i`.
    pub fn noise_matrix(&self) -> Array2<f64> {
        self.stack(|p| p.noise.view())
    }

    fn stack<'a>(&'a self, row: impl Fn(&'a DataPoint) -> ArrayView1<'a, f64>) -> Array2<f64> {
        let mut m = Array2::zeros((self.n(), self.d()));
        for (i, p) in self.points.iter().enumerate() {
            m.row_mut(i).assign(&row(p));
        }
        m
    }

    /// The same data with every label flipped and `μ` negated. Patches are
    /// unchanged because `(−y)(−μ) = yμ`.
    pub fn mirrored(&self) -> DataSet {
        let mu = self.mu.negated();
        let points = self
            .points
            .iter()
            .map(|p| DataPoint { label: p.label.flip(), ..p.clone() })
            .collect();
        DataSet { points, mu, sigma_p: self.sigma_p, seed: self.seed }
    }

    /// Writes `index,label,signal_slot` rows to `points` and
    /// `index,xi_0,…,xi_{d-1}` rows to `noise`.
    pub fn write_csv(&self, points: &Path, noise: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(points)?;
        w.write_record(["index", "label", "signal_slot"])?;
        for (i, p) in self.points.iter().enumerate() {
            w.write_record([i.to_string(), p.label.as_i8().to_string(), p.signal_slot.number().to_string()])?;
        }
        w.flush()?;

        let mut f = std::io::BufWriter::new(std::fs::File::create(noise)?);
        write!(f, "index")?;
        for k in 0..self.d() {
            write!(f, ",xi_{k}")?;
        }
        writeln!(f)?;
        for (i, p) in self.points.iter().enumerate() {
            write!(f, "{i}")?;
            for x in p.noise.iter() {
                write!(f, ",{x:e}")?;
            }
            writeln!(f)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Draws `n` i.i.d. points. Identical arguments give identical data.
pub fn generate_dataset(n: usize, mu: &SignalVector, sigma_p: f64, seed: u64) -> Result<DataSet> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    check_sigma_p(sigma_p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let label = if rng.random::<bool>() { Class::Pos } else { Class::Neg };
        let signal_slot = if rng.random::<bool>() { Slot::First } else { Slot::Second };
        let noise = sample_noise(&mut rng, sigma_p, mu)?;
        let signal = mu.as_array() * label.sign();
        let patches = match signal_slot {
            Slot::First => [signal, noise.clone()],
            Slot::Second => [noise.clone(), signal],
        };
        points.push(DataPoint { patches, label, signal_slot, noise });
    }
    Ok(DataSet { points, mu: mu.clone(), sigma_p, seed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub delta: f64,
    /// `σ_p² d / 2`
    pub norm_lower: f64,
    /// `3 σ_p² d / 2`
    pub norm_upper: f64,
    pub min_norm_sq: f64,
    pub max_norm_sq: f64,
    pub norm_violations: usize,
    pub norms_ok: bool,
    /// `2 σ_p² √(d log(4n²/δ))`
    pub cross_bound: f64,
    pub max_abs_cross: f64,
    pub cross_ok: bool,
}

/// Checks the high-probability noise bounds on a concrete sample.
pub fn verify_concentration(ds: &DataSet) -> ConcentrationReport {
    let n = ds.n() as f64;
    let d = ds.d() as f64;
    let s2 = ds.sigma_p * ds.sigma_p;
    let delta = CONCENTRATION_DELTA;
    let norm_lower = s2 * d / 2.0;
    let norm_upper = 3.0 * s2 * d / 2.0;
    let norms = ds.noise_norms_sq();
    let min_norm_sq = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let max_norm_sq = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let norm_violations = norms.iter().filter(|&&x| x < norm_lower || x > norm_upper).count();

    let cross_bound = 2.0 * s2 * (d * (4.0 * n * n / delta).ln()).sqrt();
    let mut max_abs_cross = 0.0f64;
    for (i, a) in ds.points.iter().enumerate() {
        for b in &ds.points[i + 1..] {
            max_abs_cross = max_abs_cross.max(a.noise.dot(&b.noise).abs());
        }
    }
    ConcentrationReport {
        delta,
        norm_lower,
        norm_upper,
        min_norm_sq,
        max_norm_sq,
        norm_violations,
        norms_ok: norm_violations == 0,
        cross_bound,
        max_abs_cross,
        cross_ok: max_abs_cross <= cross_bound,
    }
}
