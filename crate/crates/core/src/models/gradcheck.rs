//! Central finite-difference check of the analytic gradients.

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{grad, loss, Batch, Matrix, ModelKind, ModelSpec, Targets};
use crate::error::Result;
use crate::params::ParamVector;
use crate::rng::{self, Rng, Stream};

pub const FD_STEP: f64 = 1e-6;
/// Floor on the relative-error denominator so coordinates whose true
/// derivative is ~0 are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub kind: ModelKind,
    pub draws: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Max relative error between `grad` and central differences of `loss`.
pub fn max_relative_error(spec: &ModelSpec, w: &ParamVector, batch: &Batch) -> Result<f64> {
    let analytic = grad(spec, w, batch)?;
    let mut probe = w.as_slice().to_vec();
    let mut worst = 0.0f64;
    for i in 0..probe.len() {
        if !spec.is_trainable(i) {
            continue;
        }
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let up = loss(spec, &ParamVector::new(probe.clone())?, batch)?;
        probe[i] = orig - FD_STEP;
        let down = loss(spec, &ParamVector::new(probe.clone())?, batch)?;
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic.as_slice()[i], numeric));
    }
    Ok(worst)
}

/// A random small problem of the given kind.
pub fn random_problem(kind: ModelKind, rng: &mut Rng) -> Result<(ModelSpec, ParamVector, Batch)> {
    let d = rng.random_range(1..=6);
    let c = rng.random_range(2..=5);
    let h = rng.random_range(1..=6);
    let n = rng.random_range(1..=8);
    let spec = ModelSpec::new(kind, d, c, h)?.with_l2(rng.random_range(0.0..0.1))?;
    let w: Vec<f64> = (0..spec.num_params())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let x: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    let targets = if kind.is_classifier() {
        Targets::Classes(
            (0..n)
                .map(|_| rng.random_range(0..spec.output_dim()))
                .collect(),
        )
    } else {
        Targets::Values((0..n).map(|_| rng.sample(StandardNormal)).collect())
    };
    let batch = Batch::new(Matrix::new(x, n, d)?, targets)?;
    Ok((spec, ParamVector::new(w)?, batch))
}

pub fn check_kind(kind: ModelKind, draws: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng::stream(seed, Stream::Init);
    let mut max_rel_error = 0.0f64;
    for _ in 0..draws {
        let (spec, w, batch) = random_problem(kind, &mut rng)?;
        max_rel_error = max_rel_error.max(max_relative_error(&spec, &w, &batch)?);
    }
    Ok(GradCheckReport {
        kind,
        draws,
        max_rel_error,
    })
}

pub fn check_all(draws: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    ModelKind::ALL
        .iter()
        .map(|&k| check_kind(k, draws, seed))
        .collect()
}
