//! Two intertwined linear sequences
//!
//! ```text
//! a_{t+1} = a_t + A·b_t
//! b_{t+1} = b_t + B·a_t
//! ```
//!
//! model the linear-then-quadratic growth of a hidden-layer inner product
//! (`a`) and its paired output weight (`b`). Their ratio is driven to the
//! fixed point `√(A/B)` of `r ↦ (r + A)/(1 + B·r)` after roughly
//! `1/√(AB)` steps.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default relative tolerance for [`balancing_time`].
pub const DEFAULT_TOL: f64 = 0.1;

/// Starting ratios above this fraction of `√(A/B)` are outside the regime in
/// which the balancing statement applies.
pub const PRECONDITION_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqParams {
    pub a0: f64,
    pub b0: f64,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
}

impl SeqParams {
    pub fn new(a0: f64, b0: f64, a: f64, b: f64) -> Result<Self> {
        let p = SeqParams { a0, b0, a, b };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.b > 0.0) || !self.a.is_finite() || !self.b.is_finite() {
            return Err(Error::invalid(format!("coupling constants must be positive, got A={}, B={}", self.a, self.b)));
        }
        if !(self.a0 >= 0.0 && self.b0 >= 0.0) || !self.a0.is_finite() || !self.b0.is_finite() {
            return Err(Error::invalid(format!("starts must be nonnegative, got a0={}, b0={}", self.a0, self.b0)));
        }
        Ok(())
    }

    /// The limiting ratio `√(A/B)`.
    pub fn fixed_ratio(&self) -> f64 {
        (self.a / self.b).sqrt()
    }

    /// Default step cap `10·⌈1/√(AB)⌉`.
    pub fn step_cap(&self) -> usize {
        10 * (1.0 / (self.a * self.b).sqrt()).ceil() as usize
    }

    /// Whether the start is small enough relative to the fixed ratio:
    /// `AB ≤ 1` and `a₀/b₀ ≤ 0.1·√(A/B)`.
    pub fn in_regime(&self) -> bool {
        self.a * self.b <= 1.0 && self.b0 > 0.0 && self.a0 / self.b0 <= PRECONDITION_FRACTION * self.fixed_ratio()
    }
}

/// Runs the recursion for `steps` steps, returning `steps + 1` pairs
/// starting with `(a₀, b₀)`.
pub fn simulate(p: &SeqParams, steps: usize) -> Result<Vec<(f64, f64)>> {
    p.validate()?;
    let mut out = Vec::with_capacity(steps + 1);
    let (mut a, mut b) = (p.a0, p.b0);
    out.push((a, b));
    for t in 1..=steps {
        (a, b) = (a + p.a * b, b + p.b * a);
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::Diverged { iteration: t, reason: "sequence overflowed".into() });
        }
        out.push((a, b));
    }
    Ok(out)
}

/// First `t` with `|a_t/b_t − √(A/B)| ≤ tol·√(A/B)`, searched up to
/// [`SeqParams::step_cap`].
pub fn balancing_time(p: &SeqParams, tol: f64) -> Result<usize> {
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("tolerance must be positive, got {tol}")));
    }
    p.validate()?;
    let target = p.fixed_ratio();
    let cap = p.step_cap();
    let (mut a, mut b) = (p.a0, p.b0);
    for t in 0..=cap {
        if b > 0.0 && (a / b - target).abs() <= tol * target {
            return Ok(t);
        }
        (a, b) = (a + p.a * b, b + p.b * a);
        if !a.is_finite() || !b.is_finite() {
            break;
        }
    }
    Err(Error::NotBalanced { cap })
}

/// Whether `lower` stays elementwise below `upper` for `steps` steps.
pub fn dominates(upper: &SeqParams, lower: &SeqParams, steps: usize) -> Result<bool> {
    upper.validate()?;
    lower.validate()?;
    let (mut ua, mut ub) = (upper.a0, upper.b0);
    let (mut la, mut lb) = (lower.a0, lower.b0);
    for _ in 0..=steps {
        if la > ua || lb > ub {
            return Ok(false);
        }
        (ua, ub) = (ua + upper.a * ub, ub + upper.b * ua);
        (la, lb) = (la + lower.a * lb, lb + lower.b * la);
    }
    Ok(true)
}

/// Writes `t,a,b,ratio` rows; the ratio is empty where `b = 0`.
pub fn write_csv<W: Write>(seq: &[(f64, f64)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "a", "b", "ratio"])?;
    for (t, &(a, b)) in seq.iter().enumerate() {
        let ratio = if b != 0.0 { (a / b).to_string() } else { String::new() };
        w.write_record([t.to_string(), a.to_string(), b.to_string(), ratio])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(seq: &[(f64, f64)], path: &Path) -> Result<()> {
    write_csv(seq, std::fs::File::create(path)?)
}
