use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVector;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub String);

impl ClientId {
    /// Conventional id for the client at position `index`.
    pub fn indexed(index: usize) -> Self {
        ClientId(format!("client-{index}"))
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ClientId {
    fn from(s: &str) -> Self {
        ClientId(s.to_string())
    }
}

/// What a client sends back after local training: its model and the epoch
/// of the global model it started from.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub w_new: ParamVector,
    pub tau: u64,
    pub client_id: ClientId,
    pub local_iterations_done: usize,
}

/// Server-side model and epoch counter.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalState {
    pub w: ParamVector,
    /// Number of aggregations performed since initialization.
    pub t: u64,
    pub max_staleness_seen: u64,
    pub aggregations: u64,
}

impl GlobalState {
    pub fn new(w0: ParamVector) -> Self {
        GlobalState {
            w: w0,
            t: 0,
            max_staleness_seen: 0,
            aggregations: 0,
        }
    }
}

/// Staleness-adjusted mixing weight `beta * (1 + t - tau)^(-a)`.
///
/// `t` is the server epoch at receipt, before the aggregation that consumes
/// the update. Extreme staleness can drive the weight towards zero; it is
/// passed through as is.
pub fn staleness_weight(beta: f64, a: f64, t: u64, tau: u64) -> Result<f64> {
    if !beta.is_finite() || !a.is_finite() {
        return Err(Error::invalid("beta and a must be finite"));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::invalid(format!("beta {beta} outside (0, 1]")));
    }
    if a < 0.0 {
        return Err(Error::invalid(format!("staleness exponent {a} < 0")));
    }
    if tau > t {
        return Err(Error::FutureUpdate { tau, t });
    }
    let staleness = (t - tau) as f64;
    Ok(beta * (1.0 + staleness).powf(-a))
}

/// Convex combination `(1 - beta_t) * w_prev + beta_t * w_new`.
pub fn mix(w_prev: &ParamVector, w_new: &ParamVector, beta_t: f64) -> Result<ParamVector> {
    w_prev.ensure_same_dim(w_new)?;
    if !(0.0..=1.0).contains(&beta_t) {
        return Err(Error::invalid(format!("beta_t {beta_t} outside [0, 1]")));
    }
    let values = w_prev
        .as_slice()
        .iter()
        .zip(w_new.as_slice())
        .map(|(&p, &n)| {
            // Endpoints are exact copies; interior points stay inside [p, n]
            // despite rounding.
            if beta_t == 0.0 {
                p
            } else if beta_t == 1.0 {
                n
            } else {
                (p + beta_t * (n - p)).clamp(p.min(n), p.max(n))
            }
        })
        .collect();
    ParamVector::new(values)
}
