//! TOML experiment configuration.
//!
//! Every section is optional and every key has a default, so a config only
//! needs the knobs it changes. Unknown keys are rejected. Relative paths are
//! resolved against the config file's directory.

use std::path::{Path, PathBuf};

use fedasync_core::data::{self, generate_blobs, generate_linear, partition_iid, Dataset};
use fedasync_core::distill::{DistillPlan, TargetMode};
use fedasync_core::models::{ModelKind, ModelSpec};
use fedasync_core::server::HPolicy;
use fedasync_core::sim::{load_profiles, DeviceProfile, EpochScale, Experiment};
use fedasync_core::weights::load_weights_for;
use fedasync_core::Hyperparams;
use serde::Deserialize;

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub federation: FederationConfig,
    pub hyper: Hyperparams,
    pub distill: DistillConfig,
    pub sweep: SweepConfig,
    pub probe: ProbeConfig,
    pub net: NetConfig,
    pub output: OutputConfig,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden_dim: usize,
    pub l2_coeff: f64,
    /// Train only the final layer, as when fine-tuning a distilled model.
    pub fine_tune_last_layer: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::SoftmaxClassifier,
            hidden_dim: 16,
            l2_coeff: fedasync_core::models::DEFAULT_L2,
            fine_tune_last_layer: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    #[default]
    Blobs,
    Linear,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// CSV file, last column the label.
    pub path: Option<PathBuf>,
    pub classes: usize,
    pub dim: usize,
    pub train_rows: usize,
    pub eval_rows: usize,
    /// Standard deviation of each blob around its centre.
    pub spread: f64,
    /// Label noise for the linear generator.
    pub noise: f64,
    /// Defaults to `hyper.seed`.
    pub seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Blobs,
            path: None,
            classes: 3,
            dim: 10,
            train_rows: 1200,
            eval_rows: 300,
            spread: 1.0,
            noise: 0.1,
            seed: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HPolicyKind {
    #[default]
    Fixed,
    Uniform,
    PerDevice,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum LocalEpoch {
    Iterations(usize),
    Named(String),
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub n_clients: usize,
    /// `jetson-hmdb51`, `jetson-ucf101`, or a profile CSV path.
    pub profiles: String,
    pub h_policy: HPolicyKind,
    /// Local iterations under the fixed policy; defaults to `hyper.h_min`.
    pub h: Option<usize>,
    pub h_table: Vec<usize>,
    pub eval_every: u64,
    /// Local iterations per device-clock epoch, or `"shard-pass"`.
    pub local_epoch: LocalEpoch,
    pub initial_weights: Option<PathBuf>,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            n_clients: 4,
            profiles: "jetson-hmdb51".into(),
            h_policy: HPolicyKind::Fixed,
            h: None,
            h_table: Vec::new(),
            eval_every: 1,
            local_epoch: LocalEpoch::Iterations(1),
            initial_weights: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub teacher_hidden: usize,
    /// Hidden widths of the TAs, largest first; at most three.
    pub ta_hidden: Vec<usize>,
    pub student_hidden: usize,
    pub epochs_per_stage: usize,
    pub target_mode: TargetMode,
    pub eta: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            teacher_hidden: 64,
            ta_hidden: Vec::new(),
            student_hidden: 4,
            epochs_per_stage: 5,
            target_mode: TargetMode::TeacherArgmax,
            eta: 0.1,
            batch_size: 128,
            weight_decay: 0.001,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub a: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            a: vec![0.0, 0.3, 0.5, 0.9],
            beta: vec![0.3, 0.5, 0.7, 0.9],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub eta0: f64,
    pub e_grid: Vec<u64>,
    pub tolerance: f64,
    /// Client counts for the staleness comparison; empty skips it.
    pub staleness_clients: Vec<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            eta0: 0.5,
            e_grid: vec![20, 80, 320],
            tolerance: 1.1,
            staleness_clients: vec![2, 8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub bind: String,
    pub server: String,
    pub retries: u32,
    pub backoff_ms: u64,
    /// Seconds a server handler waits on a silent client.
    pub read_timeout_s: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        let port = fedasync_core::netproto::DEFAULT_PORT;
        NetConfig {
            bind: format!("0.0.0.0:{port}"),
            server: format!("127.0.0.1:{port}"),
            retries: 5,
            backoff_ms: 200,
            read_timeout_s: 600,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "out".into() }
    }
}

fn config_err(key: &str, why: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {why}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.hyper.seed)
    }

    /// Checks everything that can be checked without running.
    pub fn validate(&self) -> Result<(), CliError> {
        self.hyper.validate().map_err(|e| {
            CliError::Config(format!(
                "hyper.{}",
                e.to_string().trim_start_matches("invalid argument: ")
            ))
        })?;
        let d = &self.data;
        match d.source {
            DataSource::Csv => match &d.path {
                None => {
                    return Err(config_err(
                        "data.path",
                        "required when data.source = \"csv\"",
                    ))
                }
                Some(p) if !self.resolve(p).is_file() => {
                    return Err(config_err(
                        "data.path",
                        format!("{} does not exist", self.resolve(p).display()),
                    ))
                }
                Some(_) => {}
            },
            DataSource::Blobs => {
                if d.classes < 2 {
                    return Err(config_err("data.classes", "must be >= 2"));
                }
                if !(d.train_rows + d.eval_rows).is_multiple_of(d.classes) {
                    return Err(config_err(
                        "data.train_rows",
                        "train_rows + eval_rows must be a multiple of data.classes",
                    ));
                }
                if !(d.spread.is_finite() && d.spread > 0.0) {
                    return Err(config_err("data.spread", "must be > 0"));
                }
            }
            DataSource::Linear => {
                if !(d.noise.is_finite() && d.noise >= 0.0) {
                    return Err(config_err("data.noise", "must be >= 0"));
                }
            }
        }
        if d.source != DataSource::Csv {
            if d.dim < 1 {
                return Err(config_err("data.dim", "must be >= 1"));
            }
            if d.train_rows < 1 {
                return Err(config_err("data.train_rows", "must be >= 1"));
            }
        }
        if d.eval_rows < 1 {
            return Err(config_err("data.eval_rows", "must be >= 1"));
        }
        if (d.source == DataSource::Linear) == self.model.kind.is_classifier() {
            return Err(config_err(
                "model.kind",
                format!(
                    "{:?} does not fit data.source = {:?}",
                    self.model.kind, d.source
                ),
            ));
        }
        if self.model.kind == ModelKind::TwoLayer && self.model.hidden_dim < 1 {
            return Err(config_err("model.hidden_dim", "must be >= 1"));
        }
        if !(self.model.l2_coeff.is_finite() && self.model.l2_coeff >= 0.0) {
            return Err(config_err("model.l2_coeff", "must be >= 0"));
        }
        let f = &self.federation;
        if f.n_clients < 1 {
            return Err(config_err("federation.n_clients", "must be >= 1"));
        }
        if !matches!(f.profiles.as_str(), "jetson-hmdb51" | "jetson-ucf101")
            && !self.resolve(Path::new(&f.profiles)).is_file()
        {
            return Err(config_err(
                "federation.profiles",
                format!(
                    "{} is neither a bundled profile set nor an existing file",
                    f.profiles
                ),
            ));
        }
        match f.h_policy {
            HPolicyKind::Fixed => {
                let h = self.fixed_h();
                if h < self.hyper.h_min || h > self.hyper.h_max {
                    return Err(config_err(
                        "federation.h",
                        format!("{h} outside [hyper.h_min, hyper.h_max]"),
                    ));
                }
            }
            HPolicyKind::PerDevice => {
                if f.h_table.len() != f.n_clients {
                    return Err(config_err(
                        "federation.h_table",
                        "needs one entry per client",
                    ));
                }
                if let Some(h) = f
                    .h_table
                    .iter()
                    .find(|&&h| h < self.hyper.h_min || h > self.hyper.h_max)
                {
                    return Err(config_err(
                        "federation.h_table",
                        format!("{h} outside [hyper.h_min, hyper.h_max]"),
                    ));
                }
            }
            HPolicyKind::Uniform => {}
        }
        self.epoch_scale()?;
        if let Some(p) = &f.initial_weights {
            if !self.resolve(p).is_file() {
                return Err(config_err(
                    "federation.initial_weights",
                    format!("{} does not exist", self.resolve(p).display()),
                ));
            }
        }
        let k = &self.distill;
        if k.ta_hidden.len() > 3 {
            return Err(config_err("distill.ta_hidden", "at most 3 TAs"));
        }
        if k.teacher_hidden < 1 || k.student_hidden < 1 || k.ta_hidden.contains(&0) {
            return Err(config_err(
                "distill.ta_hidden",
                "hidden widths must be >= 1",
            ));
        }
        if k.epochs_per_stage < 1 {
            return Err(config_err("distill.epochs_per_stage", "must be >= 1"));
        }
        if !(k.eta.is_finite() && k.eta > 0.0) {
            return Err(config_err("distill.eta", "must be > 0"));
        }
        if k.batch_size < 1 {
            return Err(config_err("distill.batch_size", "must be >= 1"));
        }
        if !(k.weight_decay.is_finite() && k.weight_decay >= 0.0) {
            return Err(config_err("distill.weight_decay", "must be >= 0"));
        }
        if self.sweep.a.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(config_err("sweep.a", "values must be >= 0"));
        }
        if self.sweep.beta.iter().any(|b| !(*b > 0.0 && *b <= 1.0)) {
            return Err(config_err("sweep.beta", "values must lie in (0, 1]"));
        }
        let p = &self.probe;
        if !(p.eta0.is_finite() && p.eta0 > 0.0) {
            return Err(config_err("probe.eta0", "must be > 0"));
        }
        if p.e_grid.is_empty() || p.e_grid.contains(&0) {
            return Err(config_err("probe.e_grid", "needs positive budgets"));
        }
        if p.tolerance.is_nan() || p.tolerance < 1.0 {
            return Err(config_err("probe.tolerance", "must be >= 1"));
        }
        if p.staleness_clients.contains(&0) {
            return Err(config_err("probe.staleness_clients", "counts must be >= 1"));
        }
        Ok(())
    }

    fn fixed_h(&self) -> usize {
        self.federation.h.unwrap_or(self.hyper.h_min)
    }

    pub fn epoch_scale(&self) -> Result<EpochScale, CliError> {
        match &self.federation.local_epoch {
            LocalEpoch::Iterations(0) => Err(config_err("federation.local_epoch", "must be >= 1")),
            LocalEpoch::Iterations(n) => Ok(EpochScale::Iterations(*n)),
            LocalEpoch::Named(s) if s == "shard-pass" => Ok(EpochScale::ShardPass),
            LocalEpoch::Named(s) => Err(config_err(
                "federation.local_epoch",
                format!("expected an iteration count or \"shard-pass\", got {s:?}"),
            )),
        }
    }

    pub fn policy(&self) -> HPolicy {
        match self.federation.h_policy {
            HPolicyKind::Fixed => HPolicy::Fixed { h: self.fixed_h() },
            HPolicyKind::Uniform => HPolicy::Uniform,
            HPolicyKind::PerDevice => HPolicy::PerDevice {
                table: self.federation.h_table.clone(),
            },
        }
    }

    /// `(train, eval)` for the configured source.
    pub fn datasets(&self) -> Result<(Dataset, Dataset), CliError> {
        let d = &self.data;
        let seed = self.data_seed();
        let full = match d.source {
            DataSource::Blobs => generate_blobs(
                d.classes,
                d.dim,
                (d.train_rows + d.eval_rows) / d.classes,
                d.spread,
                seed,
            )?,
            DataSource::Linear => {
                generate_linear(d.dim, d.train_rows + d.eval_rows, d.noise, seed)?
            }
            DataSource::Csv => data::load_csv(self.resolve(d.path.as_ref().expect("validated")))?,
        };
        full.split_holdout(d.eval_rows, seed)
            .map_err(|e| config_err("data.eval_rows", e))
    }

    pub fn model_spec(&self, train: &Dataset) -> Result<ModelSpec, CliError> {
        let m = &self.model;
        let classes = train.num_classes().unwrap_or(1);
        let spec = ModelSpec::new(m.kind, train.dim(), classes, m.hidden_dim)
            .and_then(|s| s.with_l2(m.l2_coeff))
            .map_err(|e| config_err("model", e))?;
        if m.fine_tune_last_layer {
            return spec
                .freeze_all_but_last_layer()
                .map_err(|e| config_err("model.fine_tune_last_layer", e));
        }
        Ok(spec)
    }

    pub fn profiles(&self) -> Result<Vec<DeviceProfile>, CliError> {
        Ok(match self.federation.profiles.as_str() {
            "jetson-hmdb51" => DeviceProfile::jetson_hmdb51(),
            "jetson-ucf101" => DeviceProfile::jetson_ucf101(),
            path => load_profiles(self.resolve(Path::new(path)))
                .map_err(|e| config_err("federation.profiles", e))?,
        })
    }

    pub fn experiment(&self) -> Result<Experiment, CliError> {
        let (train, eval) = self.datasets()?;
        let spec = self.model_spec(&train)?;
        let initial_w = match &self.federation.initial_weights {
            Some(p) => Some(
                load_weights_for(self.resolve(p), spec.num_params())
                    .map_err(|e| config_err("federation.initial_weights", e))?,
            ),
            None => None,
        };
        let shards = partition_iid(&train, self.federation.n_clients, self.hyper.seed)
            .map_err(|e| config_err("federation.n_clients", e))?;
        let exp = Experiment {
            spec,
            hp: self.hyper.clone(),
            train,
            eval,
            shards,
            profiles: self.profiles()?,
            policy: self.policy(),
            eval_every: self.federation.eval_every,
            epoch_scale: self.epoch_scale()?,
            initial_w,
            record_gradients: false,
        };
        exp.validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(exp)
    }

    pub fn distill_plan(&self, train: &Dataset) -> Result<(DistillPlan, Hyperparams), CliError> {
        let k = &self.distill;
        let classes = train
            .num_classes()
            .ok_or_else(|| config_err("data.source", "distillation needs class labels"))?;
        let spec = |h: usize| {
            ModelSpec::two_layer(train.dim(), h, classes)
                .and_then(|s| s.with_l2(k.weight_decay))
                .map_err(|e| config_err("distill", e))
        };
        let plan = DistillPlan {
            teacher: spec(k.teacher_hidden)?,
            tas: k
                .ta_hidden
                .iter()
                .map(|&h| spec(h))
                .collect::<Result<_, _>>()?,
            student: spec(k.student_hidden)?,
            alpha: self.hyper.alpha_kd,
            epochs_per_stage: k.epochs_per_stage,
            target_mode: k.target_mode,
        };
        plan.validate().map_err(|e| config_err("distill", e))?;
        let hp = Hyperparams {
            eta: k.eta,
            batch_size: k.batch_size,
            ..self.hyper.clone()
        };
        Ok((plan, hp))
    }
}
