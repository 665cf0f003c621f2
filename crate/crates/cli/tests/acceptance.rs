//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any
//! fails. Runs without the libtest harness so the lines always print.

use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use fedasync::commands;
use fedasync::ExperimentConfig;
use fedasync_core::client::{proximal_sgd, LocalProblem};
use fedasync_core::data::generate_blobs;
use fedasync_core::distill::{distill_chain, train_plain, DistillPlan, Role, TargetMode};
use fedasync_core::models::{self, gradcheck, ModelSpec};
use fedasync_core::netproto::{
    decode_frame, encode_frame, run_client, ClientOptions, Message, Server,
};
use fedasync_core::probes::theorem_probe;
use fedasync_core::rng::{client_rng, stream, Stream};
use fedasync_core::server::async_aggregate;
use fedasync_core::sim::{
    compare_wallclock, heterogeneity_ratio, load_profiles, replay_arrivals, run_async,
    run_centralized, run_sync,
};
use fedasync_core::{ClientId, ClientUpdate, GlobalState, Hyperparams, ParamVector};
use rand::Rng as _;

type Outcome = Result<String, String>;

/// Name, time budget in seconds, check.
type Criterion = (&'static str, f64, fn() -> Outcome);

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(configs().join(name)).expect("bundled config loads")
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn pv(v: &[f64]) -> ParamVector {
    ParamVector::new(v.to_vec()).unwrap()
}

/// Scripted staleness {0, 1, 0, 3, 2} against a straight-line unrolling.
fn scripted_oracle() -> Outcome {
    let hp = Hyperparams {
        beta: 0.7,
        a: 0.5,
        ..Default::default()
    };
    let w0 = [0.5, -1.0];
    let u = [
        [1.0, 2.0],
        [-1.0, 0.5],
        [3.0, -2.0],
        [0.25, 0.75],
        [2.0, 2.0],
    ];
    // (client, tau) chosen so that staleness = t - tau follows the script.
    let script = [(0usize, 0u64), (1, 0), (0, 2), (1, 0), (0, 2)];
    let b = |s: f64| 0.7 * (1.0 + s).powf(-0.5);
    let (b1, b2, b3, b4, b5) = (b(0.0), b(1.0), b(0.0), b(3.0), b(2.0));
    let mut want = Vec::new();
    let x1 = [
        (1.0 - b1) * w0[0] + b1 * u[0][0],
        (1.0 - b1) * w0[1] + b1 * u[0][1],
    ];
    want.push(x1);
    let x2 = [
        (1.0 - b2) * x1[0] + b2 * u[1][0],
        (1.0 - b2) * x1[1] + b2 * u[1][1],
    ];
    want.push(x2);
    let x3 = [
        (1.0 - b3) * x2[0] + b3 * u[2][0],
        (1.0 - b3) * x2[1] + b3 * u[2][1],
    ];
    want.push(x3);
    let x4 = [
        (1.0 - b4) * x3[0] + b4 * u[3][0],
        (1.0 - b4) * x3[1] + b4 * u[3][1],
    ];
    want.push(x4);
    let x5 = [
        (1.0 - b5) * x4[0] + b5 * u[4][0],
        (1.0 - b5) * x4[1] + b5 * u[4][1],
    ];
    want.push(x5);

    let mut state = GlobalState::new(pv(&w0));
    let mut worst = 0.0f64;
    for (k, ((client, tau), w)) in script.iter().zip(&u).enumerate() {
        let update = ClientUpdate {
            w_new: pv(w),
            tau: *tau,
            client_id: ClientId::indexed(*client),
            local_iterations_done: 3,
        };
        let (next, rec) = async_aggregate(&state, &update, &hp).map_err(e2s)?;
        ensure(
            rec.staleness == [0, 1, 0, 3, 2][k],
            format!("step {k}: staleness {}", rec.staleness),
        )?;
        state = next;
        for (a, b) in state.w.as_slice().iter().zip(want[k]) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-12, format!("max deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:e}"))
}

fn degenerate_reductions() -> Outcome {
    // (a) one client, beta = 1, no proximal pull: async is centralized SGD.
    let mut cfg = config("desk_blobs.toml");
    cfg.federation.n_clients = 1;
    cfg.hyper.beta = 1.0;
    cfg.hyper.theta = 0.0;
    cfg.hyper.e_total = 40;
    let exp = cfg.experiment().map_err(e2s)?;
    let a = run_async(&exp).map_err(e2s)?;
    let c = run_centralized(&exp).map_err(e2s)?;
    let same_w = a
        .final_w
        .as_slice()
        .iter()
        .zip(c.final_w.as_slice())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    let same_rows = a
        .rows
        .iter()
        .zip(&c.rows)
        .all(|(x, y)| x.metrics == y.metrics);
    ensure(
        same_w && same_rows,
        "(a) async with one client differs from centralized SGD",
    )?;

    // (b) theta = 0 local step is a plain SGD step.
    let exp = config("desk_blobs.toml").experiment().map_err(e2s)?;
    let hp = Hyperparams {
        theta: 0.0,
        ..exp.hp.clone()
    };
    let shard = &exp.shards[0];
    let w = exp.spec.init_params(&mut stream(1, Stream::Init));
    let anchor = pv(&vec![0.3; w.dim()]);
    let problem = LocalProblem {
        spec: &exp.spec,
        data: &exp.train,
        shard,
        hp: &hp,
    };
    let stepped =
        proximal_sgd(&problem, w.clone(), &anchor, 1, &mut client_rng(7, 0), None).map_err(e2s)?;
    let batch =
        fedasync_core::data::sample_batch(shard, &exp.train, hp.batch_size, &mut client_rng(7, 0))
            .map_err(e2s)?;
    let g = models::grad(&exp.spec, &w, &batch).map_err(e2s)?;
    let sgd: Vec<f64> = w
        .as_slice()
        .iter()
        .zip(g.as_slice())
        .map(|(wi, gi)| wi - hp.eta * gi)
        .collect();
    ensure(
        stepped.as_slice() == sgd.as_slice(),
        "(b) theta = 0 step differs from SGD",
    )?;

    // (c) synchronous rounds are never stale.
    let sync = run_sync(&exp).map_err(e2s)?;
    ensure(
        sync.rows.iter().all(|r| r.staleness == 0),
        "(c) sync trace has staleness",
    )?;
    Ok(format!(
        "bitwise over {} aggregations; {} sync rounds at staleness 0",
        a.rows.len(),
        sync.rows.len()
    ))
}

fn wallclock_reduction() -> Outcome {
    let cfg = config("jetson_hmdb51.toml");
    ensure(
        cfg.hyper.h_min == 3 && cfg.hyper.e_total == 80,
        "config drifted from H = 3, E = 80",
    )?;
    let exp = cfg.experiment().map_err(e2s)?;
    let times: Vec<f64> = exp
        .profiles
        .iter()
        .map(|p| p.seconds_per_local_epoch)
        .collect();
    ensure(
        times == [391.1, 293.1, 121.3, 84.5],
        format!("profiles {times:?}"),
    )?;
    let a = run_async(&exp).map_err(e2s)?;
    let s = run_sync(&exp).map_err(e2s)?;
    let r = compare_wallclock(&a, &s).map_err(e2s)?;
    let (ta, ts) = (
        a.summary().total_wall_clock_s,
        s.summary().total_wall_clock_s,
    );
    ensure(ta < ts, "async not faster")?;
    ensure(r >= 0.30, format!("reduction {r:.3}"))?;
    Ok(format!(
        "async {ta:.1} s vs sync {ts:.1} s, reduction {:.1}%",
        100.0 * r
    ))
}

fn heterogeneity() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/profiles/jetson_hmdb51.csv");
    let profiles = load_profiles(path).map_err(e2s)?;
    let r = heterogeneity_ratio(&profiles).map_err(e2s)?;
    ensure((4.6..=4.7).contains(&r), format!("ratio {r}"))?;
    Ok(format!("Nano / AGX = {r:.4}"))
}

fn convergence_parity() -> Outcome {
    let cfg = config("desk_blobs.toml");
    let exp = cfg.experiment().map_err(e2s)?;
    ensure(
        exp.train.len() == 1200
            && exp.eval.len() == 300
            && exp.n_clients() == 4
            && exp.spec.input_dim == 10,
        "config drifted from the parity setup",
    )?;
    let acc =
        |t: fedasync_core::sim::ExperimentTrace| t.summary().final_accuracy.unwrap_or(f64::NAN);
    let a = acc(run_async(&exp).map_err(e2s)?);
    let s = acc(run_sync(&exp).map_err(e2s)?);
    let c = acc(run_centralized(&exp).map_err(e2s)?);
    ensure(
        (a - s).abs() <= 0.02 && (a - c).abs() <= 0.02,
        format!("async {a}, sync {s}, central {c}"),
    )?;
    Ok(format!(
        "accuracy async {:.4}, sync {:.4}, centralized {:.4}",
        a, s, c
    ))
}

fn gradient_correctness() -> Outcome {
    let reports = gradcheck::check_all(100, 42).map_err(e2s)?;
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    ensure(
        reports.len() == 4 && reports.iter().all(|r| r.draws >= 100 && r.passes(1e-5)),
        format!("worst {worst:e}"),
    )?;
    Ok(format!(
        "4 kinds x 100 draws, worst relative error {worst:e}"
    ))
}

fn kd_identities() -> Outcome {
    let data = generate_blobs(3, 6, 100, 1.5, 42).map_err(e2s)?;
    let (train, eval) = data.split_holdout(60, 42).map_err(e2s)?;
    let hp = Hyperparams {
        eta: 0.1,
        batch_size: 32,
        ..Default::default()
    };
    let spec = |h| ModelSpec::two_layer(6, h, 3).unwrap();
    let plan = |tas: &[usize], alpha, mode| DistillPlan {
        teacher: spec(48),
        tas: tas.iter().map(|&h| spec(h)).collect(),
        student: spec(4),
        alpha,
        epochs_per_stage: 3,
        target_mode: mode,
    };

    let p = plan(&[16], 1.0, TargetMode::TrueLabels);
    let chain = distill_chain(&p, &train, &eval, &hp).map_err(e2s)?;
    let plain =
        train_plain(&p.student, &train, p.epochs_per_stage, &hp, Role::Student).map_err(e2s)?;
    ensure(
        chain.student().w == plain,
        "alpha = 1 student differs from plain training",
    )?;

    let teacher = &chain.stages[0].model;
    let logits =
        models::predict_logits(&teacher.spec, &teacher.w, train.features()).map_err(e2s)?;
    ensure(
        models::kd_loss_batch(&logits, &logits).map_err(e2s)? == 0.0,
        "KD of equal logits is not 0",
    )?;

    let mut times = Vec::new();
    for k in 0..=3 {
        let tas = &[32, 16, 8][..k];
        let out = distill_chain(
            &plan(tas, 0.5, TargetMode::TeacherArgmax),
            &train,
            &eval,
            &hp,
        )
        .map_err(e2s)?;
        ensure(
            out.stages.len() == k + 2,
            format!("{k} TAs gave {} stages", out.stages.len()),
        )?;
        times.push(out.total_seconds());
    }
    ensure(
        times.windows(2).all(|w| w[0] < w[1]),
        format!("times {times:?}"),
    )?;
    let growth: Vec<String> = times
        .iter()
        .map(|t| format!("{:+.0}%", 100.0 * (t / times[0] - 1.0)))
        .collect();
    Ok(format!(
        "bitwise alpha = 1, KD(z, z) = 0, chain time growth {}",
        growth.join(" ")
    ))
}

fn sweep_harness() -> Outcome {
    let cfg = config("sweep_blobs.toml");
    ensure(
        cfg.sweep.a == [0.0, 0.3, 0.5, 0.9] && cfg.sweep.beta == [0.3, 0.5, 0.7, 0.9],
        "grid drifted",
    )?;
    let dir = tempfile::tempdir().map_err(e2s)?;
    let cells = commands::sweep(&cfg, dir.path()).map_err(e2s)?;
    ensure(cells.len() == 16, format!("{} cells", cells.len()))?;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for c in &cells {
        let s = c.trace.summary();
        let finite = c
            .trace
            .rows
            .iter()
            .filter_map(|r| r.metrics)
            .all(|m| m.loss.is_finite() && m.grad_norm_sq.is_finite());
        ensure(
            finite && !c.trace.is_diverged(),
            format!("a = {}, beta = {}: NaN", c.a, c.beta),
        )?;
        ensure(
            s.final_loss < s.initial_loss,
            format!("a = {}, beta = {}: loss did not drop", c.a, c.beta),
        )?;
        ensure(
            dir.path().join(c.file_name()).is_file(),
            "missing trace file",
        )?;
        if s.final_loss < best.0 {
            best = (s.final_loss, c.a, c.beta);
        }
    }
    ensure(
        dir.path().join("comparison.csv").is_file(),
        "missing comparison.csv",
    )?;
    Ok(format!(
        "16 cells finite and decreasing; lowest final loss at a = {}, beta = {}",
        best.1, best.2
    ))
}

fn wire_protocol() -> Outcome {
    let mut rng = stream(2024, Stream::Server);
    for i in 0..1000 {
        let dim = rng.random_range(0..200);
        let v: Vec<f64> = (0..dim)
            .map(|_| loop {
                let x = f64::from_bits(rng.random::<u64>());
                if x.is_finite() {
                    break x;
                }
            })
            .collect();
        let m = Message::ModelUp {
            tau: rng.random(),
            client_id: format!("client-{i}"),
            weights: pv(&v),
        };
        let back = decode_frame(&encode_frame(&m)).map_err(e2s)?;
        let Message::ModelUp { weights, .. } = &back else {
            return Err("wrong message kind".into());
        };
        let bits = |w: &[f64]| w.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure(
            back == m && bits(weights.as_slice()) == bits(&v),
            format!("vector {i} changed"),
        )?;
    }

    let mut cfg = config("loopback.toml");
    cfg.hyper.e_total = 40;
    let exp = cfg.experiment().map_err(e2s)?;
    let server = Server::bind("127.0.0.1:0", exp.clone()).map_err(e2s)?;
    let addr = server.local_addr().map_err(e2s)?;
    let opts = ClientOptions {
        max_retries: 3,
        initial_backoff: Duration::from_millis(10),
    };
    let outcome = thread::scope(|s| {
        let handle = s.spawn(move || server.run());
        for mut c in exp.clients().unwrap() {
            s.spawn(move || run_client(addr, &mut c, opts));
        }
        handle.join().expect("server thread")
    })
    .map_err(e2s)?;
    let ts: Vec<u64> = outcome.trace.rows.iter().map(|r| r.t).collect();
    ensure(
        ts == (1..=40).collect::<Vec<_>>(),
        "aggregation epochs not gap-free",
    )?;
    let replay = replay_arrivals(&exp, &outcome.arrivals).map_err(e2s)?;
    let gap = replay.w.distance(&outcome.state.w).map_err(e2s)?;
    ensure(gap <= 1e-12, format!("replay gap {gap:e}"))?;
    let stale = outcome.trace.summary().max_staleness;
    Ok(format!("1000 frames bit-exact; loopback 4 clients, 40 aggregations (max staleness {stale}), replay gap {gap:e}"))
}

fn theorem_probe_check() -> Outcome {
    let cfg = config("probe_softmax.toml");
    ensure(cfg.probe.e_grid == [20, 80, 320], "grid drifted")?;
    let exp = cfg.experiment().map_err(e2s)?;
    let report = theorem_probe(&exp, cfg.probe.eta0, &cfg.probe.e_grid, 1.1).map_err(e2s)?;
    let mins: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("{:.3e}", r.min_grad_norm_sq))
        .collect();
    ensure(
        report.non_increasing(),
        format!("min |grad F|^2 by E: {mins:?}"),
    )?;
    ensure(
        report.eta_below_inverse_smoothness(),
        "eta >= 1 / L_hat on some run",
    )?;
    let l = report.rows.iter().map(|r| r.l_hat).fold(0.0, f64::max);
    Ok(format!(
        "min |grad F|^2 by E: {}; max L_hat {l:.3}",
        mins.join(" ")
    ))
}

fn run_bin(cmd: &str, cfg: &Path, out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_fedasync"))
        .args([cmd, "-c"])
        .arg(cfg)
        .env("FEDASYNC_OUT", out)
        .env("RUST_LOG", "error")
        .stdout(Stdio::null())
        .status()
        .map_err(e2s)?;
    ensure(
        status.success(),
        format!("{cmd} {} exited with {status}", cfg.display()),
    )
}

/// Every bundled config, run twice through the binary. Configs with a
/// [distill] section go through `distill`, the rest through all three
/// simulation modes. The fine-tune config is pointed at a fresh distill run.
fn determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(e2s)?;
    let mut names: Vec<String> = std::fs::read_dir(configs())
        .map_err(e2s)?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.ends_with(".toml"))
        .collect();
    names.sort();
    let mut checked = 0;
    for name in &names {
        let mut path = configs().join(name);
        let text = std::fs::read_to_string(&path).map_err(e2s)?;
        if text.contains("initial_weights") {
            let student = root.path().join("student-source");
            run_bin("distill", &configs().join("distill_chain.toml"), &student)?;
            let local = root.path().join(name);
            let rewritten: String = text
                .lines()
                .map(|l| match l.starts_with("initial_weights") {
                    true => format!("initial_weights = {:?}", student.join("final_weights.bin")),
                    false => l.to_string(),
                })
                .collect::<Vec<_>>()
                .join("\n");
            std::fs::write(&local, rewritten).map_err(e2s)?;
            path = local;
        }
        let cmds: &[&str] = if text.contains("[distill]") {
            &["distill"]
        } else {
            &["simulate-async", "simulate-sync", "simulate-centralized"]
        };
        for cmd in cmds {
            let mut traces = Vec::new();
            for rep in 0..2 {
                let out = root.path().join(format!("{cmd}-{name}-{rep}"));
                run_bin(cmd, &path, &out)?;
                traces.push(std::fs::read(out.join("trace.csv")).map_err(e2s)?);
            }
            ensure(
                traces[0] == traces[1],
                format!("{cmd} {name}: trace.csv differs between runs"),
            )?;
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} runs over {} configs reproduce trace.csv byte for byte",
        names.len()
    ))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("scripted staleness oracle", 1.0, scripted_oracle),
        ("degenerate reductions", 5.0, degenerate_reductions),
        ("wall-clock reduction", 5.0, wallclock_reduction),
        ("heterogeneity ratio", 1.0, heterogeneity),
        ("convergence parity", 30.0, convergence_parity),
        ("gradient correctness", 10.0, gradient_correctness),
        ("distillation identities", 60.0, kd_identities),
        ("sweep harness", 300.0, sweep_harness),
        ("wire protocol", 60.0, wire_protocol),
        ("theorem probe", 300.0, theorem_probe_check),
        ("determinism", 30.0, determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget_s, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        let result = match result {
            Ok(detail) if secs > *budget_s => {
                Err(format!("{detail}; took {secs:.1} s, budget {budget_s} s"))
            }
            other => other,
        };
        match result {
            Ok(detail) => println!(
                "criterion {:>2} PASS  {name} ({secs:.2} s): {detail}",
                i + 1
            ),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name} ({secs:.2} s): {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
