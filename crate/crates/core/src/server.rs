//! Server side: staleness-weighted asynchronous aggregation, the synchronous
//! FedAvg round, and the policy that tells clients how many local
//! iterations to run.

use log::warn;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Hyperparams, ParamVector};
use crate::rng::Rng;
use crate::state::{mix, staleness_weight, ClientId, ClientUpdate, GlobalState};

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationRecord {
    /// Server epoch after this aggregation.
    pub t_after: u64,
    pub client_id: ClientId,
    /// `t - tau` measured at receipt.
    pub staleness: u64,
    pub beta_t: f64,
    pub global_loss_after: Option<f64>,
    pub timestamp: f64,
}

/// Blends one client update into the global model.
///
/// Staleness is never grounds for rejection; when it exceeds `hp.k_bound` a
/// warning is logged (once per new maximum) and the update is still applied.
pub fn async_aggregate(
    state: &GlobalState,
    update: &ClientUpdate,
    hp: &Hyperparams,
) -> Result<(GlobalState, AggregationRecord)> {
    if update.tau > state.t {
        return Err(Error::FutureUpdate {
            tau: update.tau,
            t: state.t,
        });
    }
    let staleness = state.t - update.tau;
    let beta_t = staleness_weight(hp.beta, hp.a, state.t, update.tau)?;
    let w = mix(&state.w, &update.w_new, beta_t)?;
    // Only new maxima are logged; the trace keeps every value.
    if staleness > hp.k_bound && staleness > state.max_staleness_seen {
        warn!(
            "update from {} has staleness {staleness}, above the assumed bound {}",
            update.client_id, hp.k_bound
        );
    }
    let next = GlobalState {
        w,
        t: state.t + 1,
        max_staleness_seen: state.max_staleness_seen.max(staleness),
        aggregations: state.aggregations + 1,
    };
    let record = AggregationRecord {
        t_after: next.t,
        client_id: update.client_id.clone(),
        staleness,
        beta_t,
        global_loss_after: None,
        timestamp: 0.0,
    };
    Ok((next, record))
}

/// FedAvg: sample-count weighted mean of one fresh update per client.
/// `shard_sizes[k]` pairs with `updates[k]`.
pub fn sync_round(
    state: &GlobalState,
    updates: &[ClientUpdate],
    shard_sizes: &[usize],
) -> Result<GlobalState> {
    if updates.is_empty() {
        return Err(Error::Empty("round"));
    }
    if updates.len() != shard_sizes.len() {
        return Err(Error::invalid(format!(
            "missing client: {} updates for {} participants",
            updates.len(),
            shard_sizes.len()
        )));
    }
    let total: usize = shard_sizes.iter().sum();
    if total == 0 {
        return Err(Error::invalid("participating shards hold no samples"));
    }
    let total = total as f64;
    let mut acc = vec![0.0; state.w.dim()];
    for (u, &n) in updates.iter().zip(shard_sizes) {
        if u.tau != state.t {
            return Err(Error::StaleInSync {
                tau: u.tau,
                t: state.t,
            });
        }
        u.w_new.ensure_same_dim(&state.w)?;
        for (a, v) in acc.iter_mut().zip(u.w_new.as_slice()) {
            *a += n as f64 / total * v;
        }
    }
    Ok(GlobalState {
        w: ParamVector::new(acc)?,
        t: state.t + 1,
        max_staleness_seen: state.max_staleness_seen,
        aggregations: state.aggregations + 1,
    })
}

/// How the server picks `H` for a client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum HPolicy {
    Fixed {
        h: usize,
    },
    Uniform,
    /// One entry per client index.
    PerDevice {
        table: Vec<usize>,
    },
}

impl HPolicy {
    pub fn assign(&self, client_index: usize, hp: &Hyperparams, rng: &mut Rng) -> Result<usize> {
        let h = match self {
            HPolicy::Fixed { h } => *h,
            HPolicy::Uniform => rng.random_range(hp.h_min..=hp.h_max),
            HPolicy::PerDevice { table } => *table.get(client_index).ok_or_else(|| {
                Error::invalid(format!("no H entry for client index {client_index}"))
            })?,
        };
        if h < hp.h_min || h > hp.h_max {
            return Err(Error::invalid(format!(
                "assigned H {h} outside [{}, {}]",
                hp.h_min, hp.h_max
            )));
        }
        Ok(h)
    }
}
