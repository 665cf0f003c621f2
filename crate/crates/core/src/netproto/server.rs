use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use super::frame::{codes, read_frame, write_frame, Message};
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};
use crate::server::async_aggregate;
use crate::sim::{Arrival, Experiment, ExperimentTrace, TraceRow};
use crate::state::{ClientId, ClientUpdate, GlobalState};

/// Everything the server produced by the time it said bye.
#[derive(Clone, Debug)]
pub struct ServeOutcome {
    pub state: GlobalState,
    /// Wall-clock column holds real seconds since the server started.
    pub trace: ExperimentTrace,
    /// Aggregations in the order they happened.
    pub arrivals: Vec<Arrival>,
}

struct Shared {
    state: GlobalState,
    trace: ExperimentTrace,
    arrivals: Vec<Arrival>,
    h_rng: Rng,
}

pub struct Server {
    listener: TcpListener,
    exp: Experiment,
    read_timeout: Option<Duration>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, exp: Experiment) -> Result<Self> {
        exp.validate()?;
        let listener = TcpListener::bind(addr)?;
        Ok(Server {
            listener,
            exp,
            read_timeout: Some(Duration::from_secs(600)),
        })
    }

    /// Give up on a client that stays silent this long.
    pub fn with_read_timeout(mut self, timeout: Option<Duration>) -> Self {
        self.read_timeout = timeout;
        self
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Serves until `e_total` aggregations have been applied, then waits for
    /// every open connection to be told bye.
    pub fn run(self) -> Result<ServeOutcome> {
        let exp = &self.exp;
        let w0 = exp.initial_params();
        let shared = Mutex::new(Shared {
            trace: ExperimentTrace::new("distributed", exp.evaluate(&w0)?, w0.clone()),
            state: GlobalState::new(w0),
            arrivals: Vec::new(),
            h_rng: rng::stream(exp.hp.seed, Stream::Server),
        });
        let done = AtomicBool::new(exp.hp.e_total == 0);
        let started = Instant::now();
        self.listener.set_nonblocking(true)?;
        info!("listening on {}", self.local_addr()?);

        thread::scope(|scope| -> Result<()> {
            while !done.load(Ordering::SeqCst) {
                match self.listener.accept() {
                    Ok((stream, peer)) => {
                        stream.set_nonblocking(false)?;
                        stream.set_read_timeout(self.read_timeout)?;
                        stream.set_nodelay(true)?;
                        let (shared, done) = (&shared, &done);
                        scope.spawn(move || {
                            let mut handler = Handler {
                                exp,
                                shared,
                                done,
                                started,
                                stream,
                            };
                            if let Err(e) = handler.serve() {
                                warn!("connection from {peer}: {e}");
                            }
                        });
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock => {
                        thread::sleep(Duration::from_millis(2))
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            Ok(())
        })?;

        let mut shared = shared
            .into_inner()
            .expect("handler panicked while aggregating");
        shared.trace.final_w = shared.state.w.clone();
        Ok(ServeOutcome {
            state: shared.state,
            trace: shared.trace,
            arrivals: shared.arrivals,
        })
    }
}

struct Handler<'a> {
    exp: &'a Experiment,
    shared: &'a Mutex<Shared>,
    done: &'a AtomicBool,
    started: Instant,
    stream: TcpStream,
}

enum Reply {
    Down(Message),
    Bye,
}

impl Handler<'_> {
    fn send(&mut self, m: &Message) -> Result<()> {
        write_frame(&mut self.stream, m)
    }

    fn reject(&mut self, code: &str, detail: String) -> Result<()> {
        // The peer may already be gone; the original problem is what matters.
        let _ = self.send(&Message::error(code, detail.clone()));
        Err(Error::protocol(code, detail))
    }

    fn serve(&mut self) -> Result<()> {
        let (client, id) = match read_frame(&mut self.stream) {
            Ok(Message::Hello {
                client_id,
                shard_size,
            }) => {
                let id = ClientId(client_id);
                let Some(k) = self.exp.shards.iter().position(|s| s.owner == id) else {
                    return self.reject(codes::UNKNOWN_CLIENT, format!("no shard belongs to {id}"));
                };
                if shard_size != self.exp.shards[k].len() as u64 {
                    warn!(
                        "{id} reports {shard_size} samples, config assigns {}",
                        self.exp.shards[k].len()
                    );
                }
                (k, id)
            }
            Ok(other) => {
                return self.reject(
                    codes::HANDSHAKE_REQUIRED,
                    format!("got {} before hello", other.kind()),
                );
            }
            Err(e @ Error::Protocol { .. }) => {
                let _ = self.send(&Message::error(codes::MALFORMED_FRAME, e.to_string()));
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        debug!("{id} joined");
        let mut assigned_h = match self.next_model(client, None)? {
            (Reply::Down(m), h) => {
                self.send(&m)?;
                h
            }
            (Reply::Bye, _) => return self.send(&Message::Bye),
        };
        loop {
            let (tau, weights) = match read_frame(&mut self.stream) {
                Ok(Message::ModelUp {
                    tau,
                    client_id,
                    weights,
                }) => {
                    if client_id != id.0 {
                        return self.reject(
                            codes::UNEXPECTED_MESSAGE,
                            format!("{id} sent an update as {client_id}"),
                        );
                    }
                    (tau, weights)
                }
                Ok(other) => {
                    return self.reject(
                        codes::UNEXPECTED_MESSAGE,
                        format!("expected model_up, got {}", other.kind()),
                    )
                }
                Err(e @ Error::Protocol { .. }) => {
                    let _ = self.send(&Message::error(codes::MALFORMED_FRAME, e.to_string()));
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if weights.dim() != self.exp.spec.num_params() {
                return self.reject(
                    codes::DIM_MISMATCH,
                    format!(
                        "{} parameters, model has {}",
                        weights.dim(),
                        self.exp.spec.num_params()
                    ),
                );
            }
            let update = ClientUpdate {
                w_new: weights,
                tau,
                client_id: id.clone(),
                local_iterations_done: assigned_h,
            };
            match self.next_model(client, Some(&update)) {
                Ok((Reply::Down(m), h)) => {
                    self.send(&m)?;
                    assigned_h = h;
                }
                Ok((Reply::Bye, _)) => return self.send(&Message::Bye),
                Err(Error::FutureUpdate { tau, t }) => {
                    return self.reject(
                        codes::STALE_PROTOCOL_VIOLATION,
                        format!("tau {tau} is ahead of server epoch {t}"),
                    )
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Applies `update` if the budget allows, then picks what to send back.
    /// The whole step runs under the lock so aggregations never interleave.
    fn next_model(&self, client: usize, update: Option<&ClientUpdate>) -> Result<(Reply, usize)> {
        let exp = self.exp;
        let mut guard = self
            .shared
            .lock()
            .expect("handler panicked while aggregating");
        let sh = &mut *guard;
        let finished = |sh: &Shared| sh.state.t >= exp.hp.e_total || sh.trace.is_diverged();
        if let Some(u) = update {
            if finished(sh) {
                return Ok((Reply::Bye, 0));
            }
            let (next, record) = match async_aggregate(&sh.state, u, &exp.hp) {
                Ok(x) => x,
                Err(e) if e.is_divergence() => {
                    warn!("stopping: {e}");
                    sh.trace.diverged = Some(e.to_string());
                    self.done.store(true, Ordering::SeqCst);
                    return Ok((Reply::Bye, 0));
                }
                Err(e) => return Err(e),
            };
            sh.state = next;
            let metrics = if exp.due(sh.state.t) {
                Some(exp.evaluate(&sh.state.w)?)
            } else {
                None
            };
            sh.trace.rows.push(TraceRow {
                t: sh.state.t,
                wall_clock_s: self.started.elapsed().as_secs_f64(),
                metrics,
                staleness: record.staleness,
                beta_t: record.beta_t,
                client_id: record.client_id.to_string(),
            });
            sh.arrivals.push(Arrival {
                client,
                tau: u.tau,
                h: u.local_iterations_done,
            });
            if sh.state.t >= exp.hp.e_total {
                self.done.store(true, Ordering::SeqCst);
            }
        }
        if finished(sh) {
            return Ok((Reply::Bye, 0));
        }
        let h = exp.policy.assign(client, &exp.hp, &mut sh.h_rng)?;
        let m = Message::ModelDown {
            t: sh.state.t,
            h_assign: h as u64,
            weights: sh.state.w.clone(),
        };
        Ok((Reply::Down(m), h))
    }
}
