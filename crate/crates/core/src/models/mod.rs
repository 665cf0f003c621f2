//! Learners with hand-written gradients.
//!
//! Parameter layouts (row-major, flat):
//!
//! * linear regression: `[w_0 .. w_{d-1}, b]`, one output
//! * logistic regression: `[w_0 .. w_{d-1}, b]`; logits are `[0, w.x + b]`,
//!   so the two-class softmax of the logits is the sigmoid
//! * softmax: `W (C x d)` then `b (C)`
//! * two-layer: `W1 (H x d)`, `b1 (H)`, `W2 (C x H)`, `b2 (C)`, tanh hidden
//!   units; the last layer is `W2, b2`

mod assumptions;
mod batch;
pub mod gradcheck;
mod kd;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use assumptions::{
    estimate_assumption_constants, AssumptionEstimates, GradSample, GradientTrace,
};
pub use batch::{Batch, Matrix, Targets};
pub use kd::{combined_loss, kd_loss, kd_loss_batch};

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::rng::Rng;

pub const DEFAULT_L2: f64 = 0.001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[serde(alias = "linear", alias = "l2-linear-regression")]
    LinearRegression,
    #[serde(alias = "logistic")]
    LogisticRegression,
    #[serde(alias = "softmax")]
    SoftmaxClassifier,
    TwoLayer,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::LinearRegression,
        ModelKind::LogisticRegression,
        ModelKind::SoftmaxClassifier,
        ModelKind::TwoLayer,
    ];

    pub fn is_classifier(self) -> bool {
        !matches!(self, ModelKind::LinearRegression)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Ignored for linear regression; fixed to 2 for logistic regression.
    pub num_classes: usize,
    /// Only used by the two-layer model.
    pub hidden_dim: usize,
    pub l2_coeff: f64,
    frozen_mask: Option<Vec<bool>>,
}

impl ModelSpec {
    pub fn new(
        kind: ModelKind,
        input_dim: usize,
        num_classes: usize,
        hidden_dim: usize,
    ) -> Result<Self> {
        let num_classes = match kind {
            ModelKind::LinearRegression => 1,
            ModelKind::LogisticRegression => 2,
            _ => num_classes,
        };
        let spec = ModelSpec {
            kind,
            input_dim,
            num_classes,
            hidden_dim: if kind == ModelKind::TwoLayer {
                hidden_dim
            } else {
                0
            },
            l2_coeff: DEFAULT_L2,
            frozen_mask: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn linear_regression(input_dim: usize) -> Result<Self> {
        Self::new(ModelKind::LinearRegression, input_dim, 1, 0)
    }

    pub fn logistic(input_dim: usize) -> Result<Self> {
        Self::new(ModelKind::LogisticRegression, input_dim, 2, 0)
    }

    pub fn softmax(input_dim: usize, num_classes: usize) -> Result<Self> {
        Self::new(ModelKind::SoftmaxClassifier, input_dim, num_classes, 0)
    }

    pub fn two_layer(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Result<Self> {
        Self::new(ModelKind::TwoLayer, input_dim, num_classes, hidden_dim)
    }

    pub fn with_l2(mut self, l2_coeff: f64) -> Result<Self> {
        self.l2_coeff = l2_coeff;
        self.validate()?;
        Ok(self)
    }

    pub fn with_frozen_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        self.frozen_mask = Some(mask);
        self.validate()?;
        Ok(self)
    }

    /// Freezes every coordinate except the final layer's weights and biases.
    pub fn freeze_all_but_last_layer(self) -> Result<Self> {
        let last = self.last_layer_range();
        let mask = (0..self.num_params()).map(|i| !last.contains(&i)).collect();
        self.with_frozen_mask(mask)
    }

    pub fn frozen_mask(&self) -> Option<&[bool]> {
        self.frozen_mask.as_deref()
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.frozen_mask.as_ref().is_none_or(|m| !m[i])
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be >= 1"));
        }
        if self.kind.is_classifier() && self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be >= 2"));
        }
        if self.kind == ModelKind::TwoLayer && self.hidden_dim == 0 {
            return Err(Error::invalid(
                "hidden_dim must be >= 1 for the two-layer model",
            ));
        }
        if !(self.l2_coeff.is_finite() && self.l2_coeff >= 0.0) {
            return Err(Error::invalid("l2_coeff must be finite and >= 0"));
        }
        if let Some(mask) = &self.frozen_mask {
            if mask.len() != self.num_params() {
                return Err(Error::DimMismatch {
                    expected: self.num_params(),
                    actual: mask.len(),
                });
            }
            if mask.iter().all(|&frozen| frozen) {
                return Err(Error::invalid("frozen_mask leaves no trainable parameter"));
            }
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            ModelKind::LinearRegression => 1,
            ModelKind::LogisticRegression => 2,
            ModelKind::SoftmaxClassifier | ModelKind::TwoLayer => self.num_classes,
        }
    }

    pub fn num_params(&self) -> usize {
        let d = self.input_dim;
        match self.kind {
            ModelKind::LinearRegression | ModelKind::LogisticRegression => d + 1,
            ModelKind::SoftmaxClassifier => self.num_classes * (d + 1),
            ModelKind::TwoLayer => {
                let h = self.hidden_dim;
                h * d + h + self.num_classes * h + self.num_classes
            }
        }
    }

    pub fn last_layer_range(&self) -> std::ops::Range<usize> {
        match self.kind {
            ModelKind::TwoLayer => {
                let h = self.hidden_dim;
                h * self.input_dim + h..self.num_params()
            }
            _ => 0..self.num_params(),
        }
    }

    /// Multiply-adds for one forward pass over one example.
    pub fn forward_cost(&self) -> u64 {
        let d = self.input_dim as u64;
        match self.kind {
            ModelKind::LinearRegression | ModelKind::LogisticRegression => d,
            ModelKind::SoftmaxClassifier => self.num_classes as u64 * d,
            ModelKind::TwoLayer => {
                let h = self.hidden_dim as u64;
                h * d + self.num_classes as u64 * h
            }
        }
    }

    /// Zeros for the convex models; scaled Gaussian weights and zero biases
    /// for the two-layer model, which needs asymmetric hidden units.
    pub fn init_params(&self, rng: &mut Rng) -> ParamVector {
        let mut w = vec![0.0; self.num_params()];
        if self.kind == ModelKind::TwoLayer {
            let (d, h, c) = (self.input_dim, self.hidden_dim, self.num_classes);
            let s1 = 1.0 / (d as f64).sqrt();
            for v in &mut w[..h * d] {
                *v = s1 * rng.sample::<f64, _>(StandardNormal);
            }
            let s2 = 1.0 / (h as f64).sqrt();
            let w2 = h * d + h;
            for v in &mut w[w2..w2 + c * h] {
                *v = s2 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        ParamVector::new(w).expect("finite init")
    }

    fn check_params(&self, w: &ParamVector) -> Result<()> {
        w.ensure_dim(self.num_params())
    }

    fn check_features(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(Error::DimMismatch {
                expected: self.input_dim,
                actual: x.cols(),
            });
        }
        Ok(())
    }

    fn check_targets(&self, targets: &Targets) -> Result<()> {
        match (self.kind, targets) {
            (ModelKind::LinearRegression, _) => Ok(()),
            (_, Targets::Classes(labels)) => {
                let num_classes = self.output_dim();
                match labels.iter().find(|&&l| l >= num_classes) {
                    Some(&label) => Err(Error::LabelOutOfRange { label, num_classes }),
                    None => Ok(()),
                }
            }
            (_, Targets::Values(_)) => Err(Error::invalid("classifier needs class-index targets")),
        }
    }
}

/// Forward-pass output; `hidden` holds tanh activations for the two-layer
/// model so the backward pass can reuse them.
pub(crate) struct Forward {
    pub logits: Matrix,
    hidden: Option<Matrix>,
}

pub(crate) fn forward(spec: &ModelSpec, w: &[f64], x: &Matrix) -> Forward {
    let d = spec.input_dim;
    let n = x.rows();
    let out = spec.output_dim();
    let mut logits = Matrix::zeros(n, out);
    match spec.kind {
        ModelKind::LinearRegression | ModelKind::LogisticRegression => {
            let (weights, bias) = (&w[..d], w[d]);
            for i in 0..n {
                let z = dot(weights, x.row(i)) + bias;
                logits.row_mut(i)[out - 1] = z;
            }
            Forward {
                logits,
                hidden: None,
            }
        }
        ModelKind::SoftmaxClassifier => {
            let c = spec.num_classes;
            let (weights, bias) = w.split_at(c * d);
            for i in 0..n {
                let xi = x.row(i);
                let zi = logits.row_mut(i);
                for k in 0..c {
                    zi[k] = dot(&weights[k * d..(k + 1) * d], xi) + bias[k];
                }
            }
            Forward {
                logits,
                hidden: None,
            }
        }
        ModelKind::TwoLayer => {
            let (h, c) = (spec.hidden_dim, spec.num_classes);
            let (w1, rest) = w.split_at(h * d);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(c * h);
            let mut hidden = Matrix::zeros(n, h);
            for i in 0..n {
                let xi = x.row(i);
                let hi = hidden.row_mut(i);
                for j in 0..h {
                    hi[j] = (dot(&w1[j * d..(j + 1) * d], xi) + b1[j]).tanh();
                }
                let hi = hidden.row(i);
                let zi = logits.row_mut(i);
                for k in 0..c {
                    zi[k] = dot(&w2[k * h..(k + 1) * h], hi) + b2[k];
                }
            }
            Forward {
                logits,
                hidden: Some(hidden),
            }
        }
    }
}

/// Backpropagates `dlogits` (n x out) to parameter space, then adds the L2
/// term on trainable coordinates and zeroes frozen ones.
pub(crate) fn backward(
    spec: &ModelSpec,
    w: &[f64],
    x: &Matrix,
    fwd: &Forward,
    dlogits: &Matrix,
) -> Vec<f64> {
    let d = spec.input_dim;
    let n = x.rows();
    let mut g = vec![0.0; spec.num_params()];
    match spec.kind {
        ModelKind::LinearRegression | ModelKind::LogisticRegression => {
            let out = spec.output_dim();
            for i in 0..n {
                let dz = dlogits.row(i)[out - 1];
                axpy(dz, x.row(i), &mut g[..d]);
                g[d] += dz;
            }
        }
        ModelKind::SoftmaxClassifier => {
            let c = spec.num_classes;
            let (gw, gb) = g.split_at_mut(c * d);
            for i in 0..n {
                let xi = x.row(i);
                let dzi = dlogits.row(i);
                for k in 0..c {
                    axpy(dzi[k], xi, &mut gw[k * d..(k + 1) * d]);
                    gb[k] += dzi[k];
                }
            }
        }
        ModelKind::TwoLayer => {
            let (h, c) = (spec.hidden_dim, spec.num_classes);
            let hidden = fwd
                .hidden
                .as_ref()
                .expect("two-layer forward keeps activations");
            let w2 = &w[h * d + h..h * d + h + c * h];
            let (gw1, rest) = g.split_at_mut(h * d);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(c * h);
            let mut dh = vec![0.0; h];
            for i in 0..n {
                let xi = x.row(i);
                let hi = hidden.row(i);
                let dzi = dlogits.row(i);
                dh.iter_mut().for_each(|v| *v = 0.0);
                for k in 0..c {
                    axpy(dzi[k], hi, &mut gw2[k * h..(k + 1) * h]);
                    gb2[k] += dzi[k];
                    axpy(dzi[k], &w2[k * h..(k + 1) * h], &mut dh);
                }
                for j in 0..h {
                    let da = dh[j] * (1.0 - hi[j] * hi[j]);
                    axpy(da, xi, &mut gw1[j * d..(j + 1) * d]);
                    gb1[j] += da;
                }
            }
        }
    }
    for (i, gi) in g.iter_mut().enumerate() {
        if spec.is_trainable(i) {
            *gi += spec.l2_coeff * w[i];
        } else {
            *gi = 0.0;
        }
    }
    g
}

/// Mean data loss and its gradient with respect to the logits.
pub(crate) fn data_loss_and_dlogits(
    spec: &ModelSpec,
    logits: &Matrix,
    targets: &Targets,
) -> (f64, Matrix) {
    let n = logits.rows();
    let scale = 1.0 / n as f64;
    let mut dlogits = Matrix::zeros(n, logits.cols());
    let mut total = 0.0;
    match spec.kind {
        ModelKind::LinearRegression => {
            for i in 0..n {
                let r = logits.row(i)[0] - targets.value(i);
                total += 0.5 * r * r;
                dlogits.row_mut(i)[0] = r * scale;
            }
        }
        _ => {
            let Targets::Classes(labels) = targets else {
                unreachable!("targets checked before use")
            };
            for i in 0..n {
                let zi = logits.row(i);
                let m = zi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = zi.iter().map(|z| (z - m).exp()).sum();
                let lse = m + sum.ln();
                total += lse - zi[labels[i]];
                let dzi = dlogits.row_mut(i);
                for (k, dz) in dzi.iter_mut().enumerate() {
                    *dz = (zi[k] - lse).exp() * scale;
                }
                dzi[labels[i]] -= scale;
            }
        }
    }
    (total * scale, dlogits)
}

pub(crate) fn l2_penalty(spec: &ModelSpec, w: &[f64]) -> f64 {
    let sq: f64 = w
        .iter()
        .enumerate()
        .filter(|(i, _)| spec.is_trainable(*i))
        .map(|(_, v)| v * v)
        .sum();
    0.5 * spec.l2_coeff * sq
}

fn check_batch(spec: &ModelSpec, w: &ParamVector, batch: &Batch) -> Result<()> {
    spec.check_params(w)?;
    spec.check_features(batch.features())?;
    spec.check_targets(batch.targets())?;
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    Ok(())
}

/// Mean per-example loss plus `l2_coeff / 2 * |w|^2` over trainable
/// coordinates.
pub fn loss(spec: &ModelSpec, w: &ParamVector, batch: &Batch) -> Result<f64> {
    check_batch(spec, w, batch)?;
    let fwd = forward(spec, w.as_slice(), batch.features());
    let (data, _) = data_loss_and_dlogits(spec, &fwd.logits, batch.targets());
    let value = data + l2_penalty(spec, w.as_slice());
    if !value.is_finite() {
        return Err(Error::Diverged("non-finite loss".into()));
    }
    Ok(value)
}

pub fn grad(spec: &ModelSpec, w: &ParamVector, batch: &Batch) -> Result<ParamVector> {
    loss_and_grad(spec, w, batch).map(|(_, g)| g)
}

pub fn loss_and_grad(
    spec: &ModelSpec,
    w: &ParamVector,
    batch: &Batch,
) -> Result<(f64, ParamVector)> {
    check_batch(spec, w, batch)?;
    let fwd = forward(spec, w.as_slice(), batch.features());
    let (data, dlogits) = data_loss_and_dlogits(spec, &fwd.logits, batch.targets());
    let g = backward(spec, w.as_slice(), batch.features(), &fwd, &dlogits);
    let value = data + l2_penalty(spec, w.as_slice());
    if !value.is_finite() {
        return Err(Error::Diverged("non-finite loss".into()));
    }
    Ok((value, ParamVector::new(g)?))
}

/// Gradient of the proximal local objective
/// `l(w; batch) + theta / 2 * |w - anchor|^2`.
pub fn prox_grad(
    spec: &ModelSpec,
    w: &ParamVector,
    anchor: &ParamVector,
    theta: f64,
    batch: &Batch,
) -> Result<ParamVector> {
    w.ensure_same_dim(anchor)?;
    let g = grad(spec, w, batch)?;
    add_proximal(spec, g, w, anchor, theta)
}

pub(crate) fn add_proximal(
    spec: &ModelSpec,
    g: ParamVector,
    w: &ParamVector,
    anchor: &ParamVector,
    theta: f64,
) -> Result<ParamVector> {
    if !(theta.is_finite() && theta >= 0.0) {
        return Err(Error::invalid("theta must be finite and >= 0"));
    }
    if theta == 0.0 {
        return Ok(g);
    }
    let mut g = g.into_vec();
    for (i, ((gi, wi), ai)) in g
        .iter_mut()
        .zip(w.as_slice())
        .zip(anchor.as_slice())
        .enumerate()
    {
        if spec.is_trainable(i) {
            *gi += theta * (wi - ai);
        }
    }
    ParamVector::new(g)
}

/// Pre-softmax scores, one row per example.
pub fn predict_logits(spec: &ModelSpec, w: &ParamVector, features: &Matrix) -> Result<Matrix> {
    spec.check_params(w)?;
    spec.check_features(features)?;
    Ok(forward(spec, w.as_slice(), features).logits)
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

/// Top-1 class per example.
pub fn predict_classes(spec: &ModelSpec, w: &ParamVector, features: &Matrix) -> Result<Vec<usize>> {
    let logits = predict_logits(spec, w, features)?;
    Ok(logits.iter_rows().map(argmax).collect())
}

/// Fraction of rows whose top-1 prediction equals the class label.
pub fn accuracy(spec: &ModelSpec, w: &ParamVector, batch: &Batch) -> Result<f64> {
    let Targets::Classes(labels) = batch.targets() else {
        return Err(Error::invalid("accuracy needs class-index targets"));
    };
    if labels.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let predicted = predict_classes(spec, w, batch.features())?;
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests;
