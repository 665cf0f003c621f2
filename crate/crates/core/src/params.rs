use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat model parameters. Every entry is finite.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values)?;
        Ok(ParamVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn distance(&self, other: &ParamVector) -> Result<f64> {
        self.ensure_same_dim(other)?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn ensure_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::DimMismatch {
                expected,
                actual: self.dim(),
            });
        }
        Ok(())
    }

    pub fn ensure_same_dim(&self, other: &ParamVector) -> Result<()> {
        self.ensure_dim(other.dim())
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ParamVector::new(values)
    }
}

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Protocol and optimizer knobs shared by server, clients and simulator.
///
/// Field names follow their role: `beta` is the base mixing weight, `a` the
/// staleness exponent, `theta` the proximal coefficient, `h_min..=h_max` the
/// range of local iterations the server may assign and `e_total` the number
/// of global aggregations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub eta: f64,
    pub beta: f64,
    pub a: f64,
    pub theta: f64,
    pub h_min: usize,
    pub h_max: usize,
    pub e_total: u64,
    pub k_bound: u64,
    pub batch_size: usize,
    pub momentum: f64,
    pub alpha_kd: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            eta: 0.001,
            beta: 0.7,
            a: 0.5,
            theta: 0.1,
            h_min: 3,
            h_max: 3,
            e_total: 80,
            k_bound: 3,
            batch_size: 8,
            momentum: 0.0,
            alpha_kd: 0.5,
            seed: 42,
        }
    }
}

impl Hyperparams {
    /// Imbalance ratio `h_max / h_min`.
    pub fn lambda(&self) -> f64 {
        self.h_max as f64 / self.h_min as f64
    }

    /// Checks every invariant and names the offending field on failure.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::invalid(format!("{field}: {why}")));
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return bad("eta", "must be finite and > 0");
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad("beta", "must lie in (0, 1]");
        }
        if !(self.a.is_finite() && self.a >= 0.0) {
            return bad("a", "must be finite and >= 0");
        }
        if !(self.theta.is_finite() && self.theta >= 0.0) {
            return bad("theta", "must be finite and >= 0");
        }
        if self.h_min < 1 {
            return bad("h_min", "must be >= 1");
        }
        if self.h_max < self.h_min {
            return bad("h_max", "must be >= h_min");
        }
        if self.e_total < 1 {
            return bad("e_total", "must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.alpha_kd) {
            return bad("alpha_kd", "must lie in [0, 1]");
        }
        Ok(())
    }
}
