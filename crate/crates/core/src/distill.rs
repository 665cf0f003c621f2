//! Teacher → teaching assistants → student distillation.
//!
//! Each stage trains a fresh model by SGD on
//! `alpha * L_cls + (1 - alpha) * L_KD`, where `L_KD` is the batch-mean squared
//! distance between the new model's logits and its predecessor's.
//! Stage time is modeled, not measured: multiply-adds spent divided by
//! [`NOMINAL_MADDS_PER_SECOND`], so it is deterministic.

use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{self, Batch, Matrix, ModelSpec, Targets};
use crate::params::{Hyperparams, ParamVector};
use crate::rng::{self, Rng, Stream};
use crate::sim::{num, TRACE_HEADER};

/// Throughput of the nominal device behind the modeled stage times.
pub const NOMINAL_MADDS_PER_SECOND: f64 = 1e9;

/// Where a stage's classification targets come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// The predecessor's top-1 prediction is taken as ground truth.
    #[default]
    #[serde(rename = "paper-teacher-argmax", alias = "teacher-argmax")]
    TeacherArgmax,
    TrueLabels,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Ta(usize),
    Student,
}

impl Role {
    pub fn name(self) -> String {
        match self {
            Role::Teacher => "teacher".into(),
            Role::Ta(i) => format!("ta-{}", i + 1),
            Role::Student => "student".into(),
        }
    }

    fn stream(self) -> Stream {
        match self {
            Role::Teacher => Stream::Distill(0),
            Role::Ta(i) => Stream::Distill(1 + i),
            Role::Student => Stream::Distill(255),
        }
    }
}

/// Generator for a role: initial weights first, then batch draws.
pub fn role_rng(seed: u64, role: Role) -> Rng {
    rng::stream(seed, role.stream())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillPlan {
    pub teacher: ModelSpec,
    /// Largest first; at most three.
    pub tas: Vec<ModelSpec>,
    pub student: ModelSpec,
    pub alpha: f64,
    pub epochs_per_stage: usize,
    pub target_mode: TargetMode,
}

impl DistillPlan {
    pub fn validate(&self) -> Result<()> {
        if self.tas.len() > 3 {
            return Err(Error::invalid(format!(
                "at most 3 TAs are supported, got {}",
                self.tas.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.epochs_per_stage == 0 {
            return Err(Error::invalid("epochs_per_stage must be >= 1"));
        }
        let width = self.teacher.output_dim();
        for spec in self.tas.iter().chain([&self.teacher, &self.student]) {
            spec.validate()?;
            if !spec.kind.is_classifier() {
                return Err(Error::invalid("distillation stages must be classifiers"));
            }
            if spec.output_dim() != width {
                return Err(Error::DimMismatch {
                    expected: width,
                    actual: spec.output_dim(),
                });
            }
        }
        Ok(())
    }

    /// Roles and specs in training order.
    pub fn stages(&self) -> Vec<(Role, &ModelSpec)> {
        let mut out = vec![(Role::Teacher, &self.teacher)];
        out.extend(self.tas.iter().enumerate().map(|(i, s)| (Role::Ta(i), s)));
        out.push((Role::Student, &self.student));
        out
    }
}

/// A trained model a later stage can learn from.
#[derive(Clone, Debug, PartialEq)]
pub struct Trained {
    pub spec: ModelSpec,
    pub w: ParamVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub role: Role,
    pub model: Trained,
    /// Stage objective on the full training set after training.
    pub train_loss: f64,
    pub grad_norm_sq: f64,
    pub eval_accuracy: f64,
    pub alpha: f64,
    pub stage_seconds: f64,
    pub cumulative_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillOutcome {
    pub stages: Vec<StageReport>,
}

impl DistillOutcome {
    pub fn student(&self) -> &Trained {
        &self
            .stages
            .last()
            .expect("a chain has at least two stages")
            .model
    }

    pub fn total_seconds(&self) -> f64 {
        self.stages.last().map_or(0.0, |s| s.cumulative_seconds)
    }

    /// One row per stage in the simulator's trace layout: `t` is the stage
    /// index, `global_loss` the stage objective, `beta_t` the stage alpha and
    /// `client_id` the role.
    pub fn to_trace_csv(&self) -> String {
        let mut out = format!("{TRACE_HEADER}\n");
        for (i, s) in self.stages.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{},0,{},{}",
                i,
                num(s.cumulative_seconds),
                num(s.train_loss),
                num(s.grad_norm_sq),
                num(s.eval_accuracy),
                num(s.alpha),
                s.role.name()
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn stages_csv(&self) -> String {
        let mut out = String::from("stage,role,kind,hidden_dim,num_params,eval_accuracy,stage_seconds,cumulative_seconds\n");
        for (i, s) in self.stages.iter().enumerate() {
            let spec = &s.model.spec;
            writeln!(
                out,
                "{},{},{:?},{},{},{},{},{}",
                i,
                s.role.name(),
                spec.kind,
                spec.hidden_dim,
                spec.num_params(),
                num(s.eval_accuracy),
                num(s.stage_seconds),
                num(s.cumulative_seconds)
            )
            .expect("writing to a String");
        }
        out
    }
}

/// Batch objective `alpha * CE + (1 - alpha) * KD` plus the L2 term, and its
/// gradient. `teacher_logits` rows pair with the batch rows; `None` means
/// plain supervised training.
pub fn combined_loss_and_grad(
    spec: &ModelSpec,
    w: &ParamVector,
    batch: &Batch,
    teacher_logits: Option<&Matrix>,
    alpha: f64,
) -> Result<(f64, ParamVector)> {
    let Some(teacher) = teacher_logits else {
        return models::loss_and_grad(spec, w, batch);
    };
    if alpha == 1.0 {
        return models::loss_and_grad(spec, w, batch);
    }
    if teacher.rows() != batch.len() || teacher.cols() != spec.output_dim() {
        return Err(Error::DimMismatch {
            expected: spec.output_dim(),
            actual: teacher.cols(),
        });
    }
    // Validates w, features and targets.
    models::loss(spec, w, batch)?;
    let fwd = models::forward(spec, w.as_slice(), batch.features());
    let (cls, mut dlogits) = models::data_loss_and_dlogits(spec, &fwd.logits, batch.targets());
    let kd = models::kd_loss_batch(&fwd.logits, teacher)?;
    let scale = 2.0 / batch.len() as f64;
    for i in 0..batch.len() {
        let (z, t) = (fwd.logits.row(i), teacher.row(i));
        for (k, dz) in dlogits.row_mut(i).iter_mut().enumerate() {
            *dz = alpha * *dz + (1.0 - alpha) * scale * (z[k] - t[k]);
        }
    }
    let g = models::backward(spec, w.as_slice(), batch.features(), &fwd, &dlogits);
    let value = models::combined_loss(alpha, cls, kd)? + models::l2_penalty(spec, w.as_slice());
    if !value.is_finite() {
        return Err(Error::Diverged("non-finite distillation loss".into()));
    }
    Ok((value, ParamVector::new(g)?))
}

/// Minibatch SGD steps per epoch on `rows` examples.
fn steps_per_epoch(rows: usize, batch_size: usize) -> usize {
    rows.div_ceil(batch_size)
}

/// Trains `init` for `epochs` epochs of `ceil(n / batch_size)` SGD steps,
/// each on rows drawn with replacement. With `from` set, every step also
/// pulls the logits toward the predecessor's.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    from: Option<&Trained>,
    to_spec: &ModelSpec,
    init: ParamVector,
    train: &Dataset,
    alpha: f64,
    epochs: usize,
    target_mode: TargetMode,
    hp: &Hyperparams,
    rng: &mut Rng,
) -> Result<ParamVector> {
    to_spec.validate()?;
    init.ensure_dim(to_spec.num_params())?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if hp.batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let (targets, teacher_logits) = match from {
        None => (train.targets().clone(), None),
        Some(prev) => {
            if prev.spec.output_dim() != to_spec.output_dim() {
                return Err(Error::invalid(format!(
                    "class-count mismatch: predecessor has {} outputs, stage has {}",
                    prev.spec.output_dim(),
                    to_spec.output_dim()
                )));
            }
            let logits = models::predict_logits(&prev.spec, &prev.w, train.features())?;
            let targets = match target_mode {
                TargetMode::TrueLabels => train.targets().clone(),
                TargetMode::TeacherArgmax => {
                    Targets::Classes(logits.iter_rows().map(models::argmax).collect())
                }
            };
            (targets, Some(logits))
        }
    };
    let data = train.as_batch().with_targets(targets)?;
    let n = data.len();
    let mut w = init;
    for step in 0..epochs * steps_per_epoch(n, hp.batch_size) {
        let rows: Vec<usize> = (0..hp.batch_size).map(|_| rng.random_range(0..n)).collect();
        let batch = data.select(&rows);
        let teacher = teacher_logits.as_ref().map(|t| t.select_rows(&rows));
        let (_, g) =
            combined_loss_and_grad(to_spec, &w, &batch, teacher.as_ref(), alpha).map_err(|e| {
                if e.is_divergence() {
                    Error::Diverged(format!("{e} at step {}", step + 1))
                } else {
                    e
                }
            })?;
        let next: Vec<f64> = w
            .as_slice()
            .iter()
            .zip(g.as_slice())
            .map(|(wi, gi)| wi - hp.eta * gi)
            .collect();
        w = ParamVector::new(next)
            .map_err(|_| Error::Diverged(format!("non-finite weights after step {}", step + 1)))?;
    }
    Ok(w)
}

/// Supervised training on true labels from the role's own initialization.
pub fn train_plain(
    spec: &ModelSpec,
    train: &Dataset,
    epochs: usize,
    hp: &Hyperparams,
    role: Role,
) -> Result<ParamVector> {
    let mut rng = role_rng(hp.seed, role);
    let init = spec.init_params(&mut rng);
    train_stage(
        None,
        spec,
        init,
        train,
        1.0,
        epochs,
        TargetMode::TrueLabels,
        hp,
        &mut rng,
    )
}

/// Modeled seconds for one stage: forward and backward (about three forward
/// passes) through the new model plus one forward pass through the
/// predecessor, per example seen.
pub fn stage_seconds(from: Option<&ModelSpec>, to: &ModelSpec, examples: usize) -> f64 {
    let per_example = 3 * to.forward_cost() + from.map_or(0, ModelSpec::forward_cost);
    examples as f64 * per_example as f64 / NOMINAL_MADDS_PER_SECOND
}

/// Teacher on true labels, then every TA from its predecessor, then the
/// student from the last TA (or the teacher).
pub fn distill_chain(
    plan: &DistillPlan,
    train: &Dataset,
    eval: &Dataset,
    hp: &Hyperparams,
) -> Result<DistillOutcome> {
    plan.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Empty("distillation data"));
    }
    let examples =
        plan.epochs_per_stage * steps_per_epoch(train.len(), hp.batch_size) * hp.batch_size;
    let mut stages: Vec<StageReport> = Vec::new();
    let mut clock = 0.0;
    for (role, spec) in plan.stages() {
        let prev = stages.last().map(|s| &s.model);
        let (alpha, w) = match prev {
            None => (
                1.0,
                train_plain(spec, train, plan.epochs_per_stage, hp, role)?,
            ),
            Some(p) => {
                let mut rng = role_rng(hp.seed, role);
                let init = spec.init_params(&mut rng);
                let w = train_stage(
                    Some(p),
                    spec,
                    init,
                    train,
                    plan.alpha,
                    plan.epochs_per_stage,
                    plan.target_mode,
                    hp,
                    &mut rng,
                )?;
                (plan.alpha, w)
            }
        };
        let seconds = stage_seconds(prev.map(|p| &p.spec), spec, examples);
        clock += seconds;
        let (train_loss, grad_norm_sq) =
            stage_objective(prev, spec, &w, train, alpha, plan.target_mode)?;
        let eval_accuracy = models::accuracy(spec, &w, eval.as_batch())?;
        stages.push(StageReport {
            role,
            model: Trained {
                spec: spec.clone(),
                w,
            },
            train_loss,
            grad_norm_sq,
            eval_accuracy,
            alpha,
            stage_seconds: seconds,
            cumulative_seconds: clock,
        });
    }
    Ok(DistillOutcome { stages })
}

fn stage_objective(
    prev: Option<&Trained>,
    spec: &ModelSpec,
    w: &ParamVector,
    train: &Dataset,
    alpha: f64,
    mode: TargetMode,
) -> Result<(f64, f64)> {
    let (batch, logits) = match prev {
        None => (train.as_batch().clone(), None),
        Some(p) => {
            let logits = models::predict_logits(&p.spec, &p.w, train.features())?;
            let batch = match mode {
                TargetMode::TrueLabels => train.as_batch().clone(),
                TargetMode::TeacherArgmax => train.as_batch().with_targets(Targets::Classes(
                    logits.iter_rows().map(models::argmax).collect(),
                ))?,
            };
            (batch, Some(logits))
        }
    };
    let (loss, g) = combined_loss_and_grad(spec, w, &batch, logits.as_ref(), alpha)?;
    Ok((loss, g.norm_sq()))
}
