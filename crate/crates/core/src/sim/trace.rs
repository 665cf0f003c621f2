use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::GradientTrace;
use crate::params::ParamVector;

pub const TRACE_HEADER: &str =
    "t,wall_clock_s,global_loss,grad_norm_sq,accuracy,staleness,beta_t,client_id";

/// Full-objective metrics at one global model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub grad_norm_sq: f64,
    /// `None` for regression models.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub t: u64,
    pub wall_clock_s: f64,
    /// Absent on rows skipped by the evaluation schedule.
    pub metrics: Option<Metrics>,
    pub staleness: u64,
    pub beta_t: f64,
    pub client_id: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TraceSummary {
    pub aggregations: u64,
    pub total_wall_clock_s: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_accuracy: Option<f64>,
    /// Minimum over every evaluated global model, `w_0` included.
    pub min_grad_norm_sq: f64,
    pub max_staleness: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentTrace {
    pub mode: String,
    pub initial: Metrics,
    pub rows: Vec<TraceRow>,
    pub final_w: ParamVector,
    /// Set when training stopped on non-finite state.
    pub diverged: Option<String>,
    pub gradients: GradientTrace,
}

impl ExperimentTrace {
    pub fn new(mode: &str, initial: Metrics, w0: ParamVector) -> Self {
        ExperimentTrace {
            mode: mode.to_string(),
            initial,
            rows: Vec::new(),
            final_w: w0,
            diverged: None,
            gradients: GradientTrace::default(),
        }
    }

    pub fn is_diverged(&self) -> bool {
        self.diverged.is_some()
    }

    pub fn summary(&self) -> TraceSummary {
        let evaluated = self.rows.iter().filter_map(|r| r.metrics);
        let last = self
            .rows
            .iter()
            .rev()
            .find_map(|r| r.metrics)
            .unwrap_or(self.initial);
        TraceSummary {
            aggregations: self.rows.len() as u64,
            total_wall_clock_s: self.rows.last().map_or(0.0, |r| r.wall_clock_s),
            initial_loss: self.initial.loss,
            final_loss: last.loss,
            final_accuracy: last.accuracy,
            min_grad_norm_sq: evaluated
                .fold(self.initial.grad_norm_sq, |m, x| m.min(x.grad_norm_sq)),
            max_staleness: self.rows.iter().map(|r| r.staleness).max().unwrap_or(0),
        }
    }

    /// CSV with the fixed column order and 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(TRACE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let (loss, gn, acc) = match r.metrics {
                Some(m) => (
                    num(m.loss),
                    num(m.grad_norm_sq),
                    m.accuracy.map(num).unwrap_or_default(),
                ),
                None => Default::default(),
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.t,
                num(r.wall_clock_s),
                loss,
                gn,
                acc,
                r.staleness,
                num(r.beta_t),
                r.client_id
            )
            .expect("writing to a String");
        }
        out
    }

    /// Flat `key = value` text, one pair per line.
    pub fn summary_text(&self) -> String {
        let s = self.summary();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("writing to a String");
        kv("mode", self.mode.clone());
        kv("aggregations", s.aggregations.to_string());
        kv("total_wall_clock_s", num(s.total_wall_clock_s));
        kv("initial_loss", num(s.initial_loss));
        kv("final_loss", num(s.final_loss));
        kv(
            "final_accuracy",
            s.final_accuracy.map(num).unwrap_or_else(|| "none".into()),
        );
        kv("min_grad_norm_sq", num(s.min_grad_norm_sq));
        kv("max_staleness", s.max_staleness.to_string());
        kv("diverged", self.diverged.is_some().to_string());
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// 17 significant digits, enough to round-trip any double.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Fraction of wall-clock time saved by `async_trace` relative to
/// `sync_trace`: `1 - async_total / sync_total`.
pub fn compare_wallclock(
    async_trace: &ExperimentTrace,
    sync_trace: &ExperimentTrace,
) -> Result<f64> {
    for t in [async_trace, sync_trace] {
        if let Some(why) = &t.diverged {
            return Err(Error::Diverged(format!("{} trace: {why}", t.mode)));
        }
    }
    if async_trace.rows.len() != sync_trace.rows.len() {
        return Err(Error::invalid(format!(
            "traces cover different budgets: {} vs {} aggregations",
            async_trace.rows.len(),
            sync_trace.rows.len()
        )));
    }
    let a = async_trace.summary().total_wall_clock_s;
    let s = sync_trace.summary().total_wall_clock_s;
    if s <= 0.0 {
        return Err(Error::invalid("synchronous trace has no elapsed time"));
    }
    Ok(1.0 - a / s)
}
