//! One function per subcommand. Each writes its artifacts under `out` and
//! returns what it computed so tests can inspect it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Duration;

use fedasync_core::distill::{distill_chain, DistillOutcome};
use fedasync_core::models::gradcheck::{check_all, GradCheckReport};
use fedasync_core::netproto::{run_client, ClientOptions, ClientReport, ServeOutcome, Server};
use fedasync_core::probes::{staleness_study, theorem_probe, TheoremReport};
use fedasync_core::sim::{num, run_async, run_centralized, run_sync, ExperimentTrace};
use fedasync_core::weights::save_weights;
use fedasync_core::{Error as CoreError, ParamVector};
use log::info;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::svg::{line_chart, Series};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimMode {
    Async,
    Sync,
    Centralized,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn save(path: &Path, w: &ParamVector) -> Result<(), CliError> {
    save_weights(path, w).map_err(|e| match e {
        CoreError::Io(source) => CliError::io(path, source),
        other => other.into(),
    })
}

fn charts(trace: &ExperimentTrace, out: &Path) -> Result<(), CliError> {
    let rows = || {
        trace
            .rows
            .iter()
            .filter_map(|r| r.metrics.map(|m| (r.wall_clock_s, m)))
    };
    let mut loss = vec![(0.0, trace.initial.loss)];
    loss.extend(rows().map(|(x, m)| (x, m.loss)));
    let mut grad = vec![(0.0, trace.initial.grad_norm_sq)];
    grad.extend(rows().map(|(x, m)| (x, m.grad_norm_sq)));
    let label = trace.mode.as_str();
    write(
        &out.join("loss.svg"),
        line_chart(
            "training loss",
            "wall clock (s)",
            "loss",
            &[Series {
                label,
                points: loss,
            }],
        ),
    )?;
    write(
        &out.join("grad_norm_sq.svg"),
        line_chart(
            "squared gradient norm",
            "wall clock (s)",
            "|grad F|^2",
            &[Series {
                label,
                points: grad,
            }],
        ),
    )?;
    let acc: Vec<(f64, f64)> = rows()
        .filter_map(|(x, m)| m.accuracy.map(|a| (x, a)))
        .collect();
    if !acc.is_empty() {
        write(
            &out.join("accuracy.svg"),
            line_chart(
                "eval accuracy",
                "wall clock (s)",
                "top-1",
                &[Series { label, points: acc }],
            ),
        )?;
    }
    Ok(())
}

/// trace.csv, summary.txt, final_weights.bin and the charts.
pub fn write_trace_artifacts(trace: &ExperimentTrace, out: &Path) -> Result<(), CliError> {
    ensure_dir(out)?;
    write(&out.join("trace.csv"), trace.to_csv())?;
    write(&out.join("summary.txt"), trace.summary_text())?;
    save(&out.join("final_weights.bin"), &trace.final_w)?;
    charts(trace, out)
}

fn diverged(trace: &ExperimentTrace) -> Result<(), CliError> {
    match &trace.diverged {
        Some(why) => Err(CliError::Diverged(why.clone())),
        None => Ok(()),
    }
}

/// Runs one simulation. Artifacts are written even when training diverges,
/// in which case the result is an error.
pub fn simulate(
    cfg: &ExperimentConfig,
    mode: SimMode,
    out: &Path,
) -> Result<ExperimentTrace, CliError> {
    let exp = cfg.experiment()?;
    let trace = match mode {
        SimMode::Async => run_async(&exp)?,
        SimMode::Sync => run_sync(&exp)?,
        SimMode::Centralized => run_centralized(&exp)?,
    };
    write_trace_artifacts(&trace, out)?;
    let s = trace.summary();
    info!(
        "{}: {} aggregations, {:.1} simulated s, loss {:.6} -> {:.6}",
        trace.mode, s.aggregations, s.total_wall_clock_s, s.initial_loss, s.final_loss
    );
    diverged(&trace)?;
    Ok(trace)
}

pub fn serve(
    cfg: &ExperimentConfig,
    bind: Option<&str>,
    out: &Path,
) -> Result<ServeOutcome, CliError> {
    let exp = cfg.experiment()?;
    let addr = bind.unwrap_or(&cfg.net.bind);
    let timeout = (cfg.net.read_timeout_s > 0).then(|| Duration::from_secs(cfg.net.read_timeout_s));
    let server = Server::bind(addr, exp)
        .map_err(|e| CliError::Config(format!("net.bind: cannot bind {addr}: {e}")))?
        .with_read_timeout(timeout);
    info!("serving on {}", server.local_addr()?);
    let outcome = server.run()?;
    write_trace_artifacts(&outcome.trace, out)?;
    let mut arrivals = String::from("t,client,tau,h\n");
    for (i, a) in outcome.arrivals.iter().enumerate() {
        writeln!(arrivals, "{},{},{},{}", i + 1, a.client, a.tau, a.h)
            .expect("writing to a String");
    }
    write(&out.join("arrivals.csv"), arrivals)?;
    diverged(&outcome.trace)?;
    Ok(outcome)
}

pub fn client(
    cfg: &ExperimentConfig,
    index: usize,
    server: Option<&str>,
) -> Result<ClientReport, CliError> {
    let exp = cfg.experiment()?;
    let mut clients = exp.clients()?;
    if index >= clients.len() {
        return Err(CliError::Config(format!(
            "client index {index} outside federation.n_clients = {}",
            clients.len()
        )));
    }
    let mut me = clients.swap_remove(index);
    let addr = server.unwrap_or(&cfg.net.server);
    let opts = ClientOptions {
        max_retries: cfg.net.retries,
        initial_backoff: Duration::from_millis(cfg.net.backoff_ms),
    };
    let report = run_client(addr, &mut me, opts).map_err(|e| match e {
        CoreError::Io(io) => CoreError::Protocol {
            code: "connection_lost".into(),
            detail: io.to_string(),
        },
        other => other,
    })?;
    info!("{} finished after {} rounds", me.id, report.rounds);
    Ok(report)
}

pub fn distill(cfg: &ExperimentConfig, out: &Path) -> Result<DistillOutcome, CliError> {
    let (train, eval) = cfg.datasets()?;
    let (plan, hp) = cfg.distill_plan(&train)?;
    let outcome = distill_chain(&plan, &train, &eval, &hp)?;
    ensure_dir(out)?;
    write(&out.join("trace.csv"), outcome.to_trace_csv())?;
    write(&out.join("stages.csv"), outcome.stages_csv())?;
    for (i, s) in outcome.stages.iter().enumerate() {
        save(
            &out.join(format!("stage{i}_{}.bin", s.role.name())),
            &s.model.w,
        )?;
    }
    save(&out.join("final_weights.bin"), &outcome.student().w)?;
    let mut summary = String::new();
    for s in &outcome.stages {
        writeln!(
            summary,
            "{} = accuracy {} after {} s",
            s.role.name(),
            num(s.eval_accuracy),
            num(s.cumulative_seconds)
        )
        .expect("writing to a String");
    }
    write(&out.join("summary.txt"), summary)?;
    Ok(outcome)
}

/// Fails unless every model kind stays under `tolerance`.
pub fn gradcheck(
    draws: usize,
    seed: u64,
    tolerance: f64,
    out: Option<&Path>,
) -> Result<Vec<GradCheckReport>, CliError> {
    let reports = check_all(draws, seed)?;
    let mut csv = String::from("kind,draws,max_rel_error,passes\n");
    for r in &reports {
        writeln!(
            csv,
            "{:?},{},{},{}",
            r.kind,
            r.draws,
            num(r.max_rel_error),
            r.passes(tolerance)
        )
        .expect("writing to a String");
    }
    print!("{csv}");
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write(&dir.join("gradcheck.csv"), &csv)?;
    }
    if let Some(bad) = reports.iter().find(|r| !r.passes(tolerance)) {
        return Err(CliError::Failed(format!(
            "{:?} gradient check: max relative error {:e} >= {tolerance:e}",
            bad.kind, bad.max_rel_error
        )));
    }
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub a: f64,
    pub beta: f64,
    pub trace: ExperimentTrace,
}

impl SweepCell {
    pub fn file_name(&self) -> String {
        format!("trace_a{}_beta{}.csv", self.a, self.beta)
    }
}

/// Async runs over the `a` x `beta` grid, in parallel. Each cell's trace is
/// written; comparison.csv has one row per cell in grid order.
pub fn sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SweepCell>, CliError> {
    let base = cfg.experiment()?;
    let grid: Vec<(f64, f64)> = cfg
        .sweep
        .a
        .iter()
        .flat_map(|&a| cfg.sweep.beta.iter().map(move |&b| (a, b)))
        .collect();
    let cells: Vec<SweepCell> = grid
        .par_iter()
        .map(|&(a, beta)| {
            let mut exp = base.clone();
            exp.hp.a = a;
            exp.hp.beta = beta;
            run_async(&exp).map(|trace| SweepCell { a, beta, trace })
        })
        .collect::<Result<_, _>>()?;
    ensure_dir(out)?;
    let mut csv = String::from(
        "a,beta,initial_loss,final_loss,final_accuracy,total_wall_clock_s,max_staleness,diverged\n",
    );
    for c in &cells {
        write(&out.join(c.file_name()), c.trace.to_csv())?;
        let s = c.trace.summary();
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            c.a,
            c.beta,
            num(s.initial_loss),
            num(s.final_loss),
            s.final_accuracy.map(num).unwrap_or_default(),
            num(s.total_wall_clock_s),
            s.max_staleness,
            c.trace.is_diverged()
        )
        .expect("writing to a String");
    }
    write(&out.join("comparison.csv"), csv)?;
    let labels: Vec<String> = cells
        .iter()
        .map(|c| format!("a={} beta={}", c.a, c.beta))
        .collect();
    let series: Vec<Series<'_>> = cells
        .iter()
        .zip(&labels)
        .map(|(c, label)| Series {
            label,
            points: c
                .trace
                .rows
                .iter()
                .filter_map(|r| r.metrics.map(|m| (r.t as f64, m.loss)))
                .collect(),
        })
        .collect();
    write(
        &out.join("sweep_loss.svg"),
        line_chart("sweep: training loss", "aggregation", "loss", &series),
    )?;
    if let Some(c) = cells.iter().find(|c| c.trace.is_diverged()) {
        return Err(CliError::Diverged(format!(
            "a = {}, beta = {}",
            c.a, c.beta
        )));
    }
    Ok(cells)
}

pub fn probe(cfg: &ExperimentConfig, out: &Path) -> Result<TheoremReport, CliError> {
    let exp = cfg.experiment()?;
    let p = &cfg.probe;
    let report = theorem_probe(&exp, p.eta0, &p.e_grid, p.tolerance)?;
    ensure_dir(out)?;
    write(&out.join("theorem_report.csv"), report.to_csv())?;
    write(&out.join("theorem_verdict.txt"), report.verdict_text())?;
    if !p.staleness_clients.is_empty() {
        let mut at_max_budget = exp.clone();
        at_max_budget.hp.e_total = *p.e_grid.iter().max().expect("validated non-empty");
        at_max_budget.hp.eta = p.eta0 / (at_max_budget.hp.e_total as f64).sqrt();
        let points = staleness_study(&at_max_budget, &p.staleness_clients)?;
        let mut csv = String::from("clients,max_staleness,mean_staleness,min_grad_norm_sq\n");
        for pt in points {
            writeln!(
                csv,
                "{},{},{},{}",
                pt.clients,
                pt.max_staleness,
                num(pt.mean_staleness),
                num(pt.min_grad_norm_sq)
            )
            .expect("writing to a String");
        }
        write(&out.join("staleness_study.csv"), csv)?;
    }
    print!("{}", report.verdict_text());
    Ok(report)
}
