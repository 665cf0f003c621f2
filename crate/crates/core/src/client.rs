//! Client side of the protocol: take `(w_t, t)`, run `H` proximal SGD steps
//! anchored at `w_t`, send back `(w, tau = t)`.

use crate::data::{sample_batch, Dataset, Shard};
use crate::error::{Error, Result};
use crate::models::{self, GradSample, ModelSpec};
use crate::params::{Hyperparams, ParamVector};
use crate::rng::Rng;
use crate::state::{ClientId, ClientUpdate};

pub struct Client<'a> {
    pub id: ClientId,
    shard: Shard,
    data: &'a Dataset,
    spec: &'a ModelSpec,
    hp: &'a Hyperparams,
    rng: Rng,
    recorder: Option<Vec<GradSample>>,
}

impl<'a> Client<'a> {
    pub fn new(
        shard: Shard,
        data: &'a Dataset,
        spec: &'a ModelSpec,
        hp: &'a Hyperparams,
        rng: Rng,
    ) -> Result<Self> {
        if shard.is_empty() {
            return Err(Error::Empty("shard"));
        }
        Ok(Client {
            id: shard.owner.clone(),
            shard,
            data,
            spec,
            hp,
            rng,
            recorder: None,
        })
    }

    pub fn shard(&self) -> &Shard {
        &self.shard
    }

    /// Keep every local step's gradients for later inspection.
    pub fn record_gradients(&mut self) {
        self.recorder.get_or_insert_with(Vec::new);
    }

    pub fn take_samples(&mut self) -> Vec<GradSample> {
        self.recorder
            .as_mut()
            .map(std::mem::take)
            .unwrap_or_default()
    }

    pub fn local_train(&mut self, w_t: &ParamVector, t: u64, h: usize) -> Result<ClientUpdate> {
        if h < self.hp.h_min || h > self.hp.h_max {
            return Err(Error::invalid(format!(
                "local iterations {h} outside [{}, {}]",
                self.hp.h_min, self.hp.h_max
            )));
        }
        let w = proximal_sgd(
            &LocalProblem {
                spec: self.spec,
                data: self.data,
                shard: &self.shard,
                hp: self.hp,
            },
            w_t.clone(),
            w_t,
            h,
            &mut self.rng,
            self.recorder.as_mut(),
        )
        .map_err(|e| match e {
            Error::Diverged(msg) => Error::Diverged(format!("{}: {msg}", self.id)),
            other => other,
        })?;
        Ok(ClientUpdate {
            w_new: w,
            tau: t,
            client_id: self.id.clone(),
            local_iterations_done: h,
        })
    }
}

/// Everything a local optimization run reads but never mutates.
#[derive(Clone, Copy)]
pub struct LocalProblem<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a Dataset,
    pub shard: &'a Shard,
    pub hp: &'a Hyperparams,
}

/// `steps` iterations of `w <- w - eta * grad g_anchor(w; batch)`, each on a
/// fresh batch. With momentum the buffer starts at zero.
pub fn proximal_sgd(
    problem: &LocalProblem<'_>,
    start: ParamVector,
    anchor: &ParamVector,
    steps: usize,
    rng: &mut Rng,
    mut recorder: Option<&mut Vec<GradSample>>,
) -> Result<ParamVector> {
    let LocalProblem {
        spec,
        data,
        shard,
        hp,
    } = *problem;
    start.ensure_dim(spec.num_params())?;
    anchor.ensure_dim(spec.num_params())?;
    let mut w = start.into_vec();
    let mut velocity = vec![0.0; w.len()];
    for step in 1..=steps {
        let batch = sample_batch(shard, data, hp.batch_size, rng)?;
        let current = ParamVector::new(w.clone()).map_err(|_| {
            Error::Diverged(format!(
                "non-finite parameters before local iteration {step}"
            ))
        })?;
        let loss_grad = models::grad(spec, &current, &batch).map_err(|e| {
            if e.is_divergence() {
                Error::Diverged(format!("{e} at local iteration {step}"))
            } else {
                e
            }
        })?;
        let direction = models::add_proximal(spec, loss_grad.clone(), &current, anchor, hp.theta)?;
        if hp.momentum == 0.0 {
            for (wi, gi) in w.iter_mut().zip(direction.as_slice()) {
                *wi -= hp.eta * gi;
            }
        } else {
            for ((wi, vi), gi) in w.iter_mut().zip(&mut velocity).zip(direction.as_slice()) {
                *vi = hp.momentum * *vi + gi;
                *wi -= hp.eta * *vi;
            }
        }
        if let Some(samples) = recorder.as_deref_mut() {
            samples.push(GradSample {
                w: current,
                loss_grad,
                prox_grad: direction,
            });
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!(
                "non-finite parameters after local iteration {step}"
            )));
        }
    }
    ParamVector::new(w)
}
