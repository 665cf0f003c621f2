//! Deterministic discrete-event simulation of heterogeneous clients.
//!
//! Simulated time is decoupled from real time. A client that is dispatched
//! the global model at time `s` with `H` local iterations delivers its
//! update at `s + downlink + (H / iterations_per_epoch) * seconds_per_epoch
//! + uplink`. Simultaneous deliveries are ordered by client index.

mod profile;
mod trace;

use std::cmp::Ordering;
use std::collections::BinaryHeap;

pub use profile::{
    heterogeneity_ratio, load_profiles, parse_profiles, DeviceProfile, JETSON_HMDB51_CSV,
    JETSON_UCF101_CSV,
};
pub use trace::{
    compare_wallclock, num, ExperimentTrace, Metrics, TraceRow, TraceSummary, TRACE_HEADER,
};

use crate::client::Client;
use crate::data::{Dataset, Shard};
use crate::error::{Error, Result};
use crate::models::{self, ModelSpec, Targets};
use crate::params::{Hyperparams, ParamVector};
use crate::rng::{self, Stream};
use crate::server::{async_aggregate, sync_round, HPolicy};
use crate::state::{ClientId, ClientUpdate, GlobalState};

/// How many local iterations make up one "local epoch" on the device clock.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EpochScale {
    Iterations(usize),
    /// One pass over the shard: `ceil(shard_len / batch_size)` iterations.
    ShardPass,
}

/// Everything a simulated or distributed run needs.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub spec: ModelSpec,
    pub hp: Hyperparams,
    pub train: Dataset,
    pub eval: Dataset,
    pub shards: Vec<Shard>,
    /// Client `k` runs on `profiles[k % profiles.len()]`.
    pub profiles: Vec<DeviceProfile>,
    pub policy: HPolicy,
    /// Evaluate every this many aggregations; 0 evaluates only the last one.
    pub eval_every: u64,
    pub epoch_scale: EpochScale,
    pub initial_w: Option<ParamVector>,
    pub record_gradients: bool,
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        self.spec.validate()?;
        if self.shards.is_empty() {
            return Err(Error::invalid("experiment needs at least one client"));
        }
        if self.profiles.is_empty() {
            return Err(Error::Empty("device profiles"));
        }
        for p in &self.profiles {
            p.validate()?;
        }
        if let EpochScale::Iterations(0) = self.epoch_scale {
            return Err(Error::invalid("iterations_per_local_epoch must be >= 1"));
        }
        if self.train.dim() != self.spec.input_dim {
            return Err(Error::DimMismatch {
                expected: self.spec.input_dim,
                actual: self.train.dim(),
            });
        }
        if let Some(w) = &self.initial_w {
            w.ensure_dim(self.spec.num_params())?;
        }
        Ok(())
    }

    pub fn n_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn shard_sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Shard::len).collect()
    }

    pub fn profile(&self, client: usize) -> &DeviceProfile {
        &self.profiles[client % self.profiles.len()]
    }

    pub fn initial_params(&self) -> ParamVector {
        match &self.initial_w {
            Some(w) => w.clone(),
            None => self
                .spec
                .init_params(&mut rng::stream(self.hp.seed, Stream::Init)),
        }
    }

    /// Simulated seconds for client `k` to turn around `h` local iterations.
    pub fn round_time(&self, client: usize, h: usize) -> f64 {
        let per_epoch = match self.epoch_scale {
            EpochScale::Iterations(n) => n,
            EpochScale::ShardPass => self.shards[client].len().div_ceil(self.hp.batch_size),
        };
        self.profile(client).round_time(h as f64 / per_epoch as f64)
    }

    pub fn clients(&self) -> Result<Vec<Client<'_>>> {
        self.shards
            .iter()
            .enumerate()
            .map(|(k, shard)| {
                let mut c = Client::new(
                    shard.clone(),
                    &self.train,
                    &self.spec,
                    &self.hp,
                    rng::client_rng(self.hp.seed, k),
                )?;
                if self.record_gradients {
                    c.record_gradients();
                }
                Ok(c)
            })
            .collect()
    }

    pub fn evaluate(&self, w: &ParamVector) -> Result<Metrics> {
        evaluate(&self.spec, w, &self.train, &self.eval)
    }

    pub(crate) fn due(&self, t: u64) -> bool {
        t == self.hp.e_total || (self.eval_every > 0 && t.is_multiple_of(self.eval_every))
    }
}

/// Loss and squared gradient norm of the full training objective, and
/// top-1 accuracy on `eval` for classifiers.
pub fn evaluate(
    spec: &ModelSpec,
    w: &ParamVector,
    train: &Dataset,
    eval: &Dataset,
) -> Result<Metrics> {
    let (loss, g) = models::loss_and_grad(spec, w, train.as_batch())?;
    let accuracy = match (spec.kind.is_classifier(), eval.targets()) {
        (true, Targets::Classes(_)) if !eval.is_empty() => {
            Some(models::accuracy(spec, w, eval.as_batch())?)
        }
        _ => None,
    };
    Ok(Metrics {
        loss,
        grad_norm_sq: g.norm_sq(),
        accuracy,
    })
}

struct Pending {
    finish: f64,
    client: usize,
    update: ClientUpdate,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    // Reversed so that BinaryHeap pops the earliest (time, client) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .finish
            .total_cmp(&self.finish)
            .then_with(|| other.client.cmp(&self.client))
    }
}

/// One aggregation as the server saw it; enough to replay a run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Arrival {
    pub client: usize,
    pub tau: u64,
    pub h: usize,
}

fn record_objective(exp: &Experiment, trace: &mut ExperimentTrace, w: &ParamVector) -> Result<()> {
    if exp.record_gradients {
        let g = models::grad(&exp.spec, w, exp.train.as_batch())?;
        trace.gradients.objective.push((w.clone(), g));
    }
    Ok(())
}

/// Turns a divergence into a marked, truncated trace; other errors propagate.
fn settle(result: Result<()>, trace: &mut ExperimentTrace) -> Result<()> {
    match result {
        Err(e) if e.is_divergence() => {
            trace.diverged = Some(e.to_string());
            Ok(())
        }
        other => other,
    }
}

/// Staleness-weighted asynchronous training. Every client starts at time 0
/// from `w_0`; whenever one delivers, the server aggregates and immediately
/// hands that client the new `(w_t, t)`. Stops after exactly `e_total`
/// aggregations.
pub fn run_async(exp: &Experiment) -> Result<ExperimentTrace> {
    exp.validate()?;
    let w0 = exp.initial_params();
    let mut trace = ExperimentTrace::new("async", exp.evaluate(&w0)?, w0.clone());
    record_objective(exp, &mut trace, &w0)?;
    let mut state = GlobalState::new(w0);
    let result = async_loop(exp, &mut state, &mut trace);
    settle(result, &mut trace)?;
    trace.final_w = state.w;
    Ok(trace)
}

fn async_loop(
    exp: &Experiment,
    state: &mut GlobalState,
    trace: &mut ExperimentTrace,
) -> Result<()> {
    let mut clients = exp.clients()?;
    let mut server_rng = rng::stream(exp.hp.seed, Stream::Server);
    let mut queue = BinaryHeap::new();

    let mut dispatch =
        |k: usize, now: f64, state: &GlobalState, clients: &mut [Client<'_>]| -> Result<Pending> {
            let h = exp.policy.assign(k, &exp.hp, &mut server_rng)?;
            let update = clients[k].local_train(&state.w, state.t, h)?;
            Ok(Pending {
                finish: now + exp.round_time(k, h),
                client: k,
                update,
            })
        };

    for k in 0..clients.len() {
        queue.push(dispatch(k, 0.0, state, &mut clients)?);
    }
    while state.t < exp.hp.e_total {
        let done = queue
            .pop()
            .expect("every client always has one update in flight");
        let (next, record) = async_aggregate(state, &done.update, &exp.hp)?;
        *state = next;
        let metrics = if exp.due(state.t) {
            Some(exp.evaluate(&state.w)?)
        } else {
            None
        };
        record_objective(exp, trace, &state.w)?;
        trace.rows.push(TraceRow {
            t: state.t,
            wall_clock_s: done.finish,
            metrics,
            staleness: record.staleness,
            beta_t: record.beta_t,
            client_id: record.client_id.to_string(),
        });
        trace
            .gradients
            .local
            .extend(clients[done.client].take_samples());
        if state.t < exp.hp.e_total {
            queue.push(dispatch(done.client, done.finish, state, &mut clients)?);
        }
    }
    Ok(())
}

/// Synchronous FedAvg: every round all clients train from the same `w_t`
/// and the round lasts as long as the slowest client.
pub fn run_sync(exp: &Experiment) -> Result<ExperimentTrace> {
    exp.validate()?;
    let w0 = exp.initial_params();
    let mut trace = ExperimentTrace::new("sync", exp.evaluate(&w0)?, w0.clone());
    record_objective(exp, &mut trace, &w0)?;
    let mut state = GlobalState::new(w0);
    let result = sync_loop(exp, &mut state, &mut trace);
    settle(result, &mut trace)?;
    trace.final_w = state.w;
    Ok(trace)
}

fn sync_loop(exp: &Experiment, state: &mut GlobalState, trace: &mut ExperimentTrace) -> Result<()> {
    let mut clients = exp.clients()?;
    let mut server_rng = rng::stream(exp.hp.seed, Stream::Server);
    let sizes = exp.shard_sizes();
    let mut clock = 0.0;
    while state.t < exp.hp.e_total {
        let mut updates = Vec::with_capacity(clients.len());
        let mut round = 0.0f64;
        for (k, client) in clients.iter_mut().enumerate() {
            let h = exp.policy.assign(k, &exp.hp, &mut server_rng)?;
            updates.push(client.local_train(&state.w, state.t, h)?);
            round = round.max(exp.round_time(k, h));
            trace.gradients.local.extend(client.take_samples());
        }
        *state = sync_round(state, &updates, &sizes)?;
        clock += round;
        let metrics = if exp.due(state.t) {
            Some(exp.evaluate(&state.w)?)
        } else {
            None
        };
        record_objective(exp, trace, &state.w)?;
        trace.rows.push(TraceRow {
            t: state.t,
            wall_clock_s: clock,
            metrics,
            staleness: 0,
            beta_t: 1.0,
            client_id: "all".into(),
        });
    }
    Ok(())
}

/// Single-machine SGD on the whole training set with the same budget of
/// `e_total` rounds of `H` steps, timed on the first device profile. The
/// momentum buffer persists across rounds, and there is no proximal term.
pub fn run_centralized(exp: &Experiment) -> Result<ExperimentTrace> {
    exp.validate()?;
    let w0 = exp.initial_params();
    let mut trace = ExperimentTrace::new("centralized", exp.evaluate(&w0)?, w0.clone());
    let mut w = w0.into_vec();
    let result = (|| -> Result<()> {
        let shard = Shard::whole(ClientId::indexed(0), &exp.train);
        let mut rng = rng::client_rng(exp.hp.seed, 0);
        let mut server_rng = rng::stream(exp.hp.seed, Stream::Server);
        let mut velocity = vec![0.0; w.len()];
        let mut clock = 0.0;
        for t in 1..=exp.hp.e_total {
            let h = exp.policy.assign(0, &exp.hp, &mut server_rng)?;
            for _ in 0..h {
                let batch =
                    crate::data::sample_batch(&shard, &exp.train, exp.hp.batch_size, &mut rng)?;
                let g = models::grad(&exp.spec, &ParamVector::new(w.clone())?, &batch)?;
                for ((wi, vi), gi) in w.iter_mut().zip(&mut velocity).zip(g.as_slice()) {
                    if exp.hp.momentum == 0.0 {
                        *wi -= exp.hp.eta * gi;
                    } else {
                        *vi = exp.hp.momentum * *vi + gi;
                        *wi -= exp.hp.eta * *vi;
                    }
                }
            }
            let current =
                ParamVector::new(w.clone()).map_err(|e| Error::Diverged(e.to_string()))?;
            clock += exp.round_time(0, h);
            let metrics = if exp.due(t) {
                Some(exp.evaluate(&current)?)
            } else {
                None
            };
            trace.rows.push(TraceRow {
                t,
                wall_clock_s: clock,
                metrics,
                staleness: 0,
                beta_t: 1.0,
                client_id: "central".into(),
            });
        }
        Ok(())
    })();
    settle(result, &mut trace)?;
    if trace.diverged.is_none() {
        trace.final_w = ParamVector::new(w)?;
    }
    Ok(trace)
}

/// Re-runs a recorded arrival order through fresh clients and the async
/// aggregation rule. Each client's local rounds happen in the same order as
/// in the recording, so each client consumes the same random draws.
pub fn replay_arrivals(exp: &Experiment, arrivals: &[Arrival]) -> Result<GlobalState> {
    exp.validate()?;
    let mut clients = exp.clients()?;
    let mut history = vec![exp.initial_params()];
    let mut state = GlobalState::new(history[0].clone());
    for a in arrivals {
        let client = clients
            .get_mut(a.client)
            .ok_or_else(|| Error::invalid(format!("arrival names unknown client {}", a.client)))?;
        let base = history.get(a.tau as usize).ok_or(Error::FutureUpdate {
            tau: a.tau,
            t: state.t,
        })?;
        let update = client.local_train(base, a.tau, a.h)?;
        state = async_aggregate(&state, &update, &exp.hp)?.0;
        history.push(state.w.clone());
    }
    Ok(state)
}

#[cfg(test)]
mod tests;
