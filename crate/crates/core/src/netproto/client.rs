use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::thread;
use std::time::Duration;

use log::{debug, warn};

use super::frame::{codes, read_frame, write_frame, Message};
use crate::client::Client;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClientOptions {
    /// Consecutive failed connections or sessions tolerated before giving up.
    pub max_retries: u32,
    /// First backoff; doubles after every consecutive failure.
    pub initial_backoff: Duration,
}

impl Default for ClientOptions {
    fn default() -> Self {
        ClientOptions {
            max_retries: 5,
            initial_backoff: Duration::from_millis(200),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClientReport {
    /// Updates sent.
    pub rounds: usize,
    pub reconnects: u32,
    pub last_error: Option<String>,
}

enum Failure {
    /// Lost or garbled connection; worth another attempt.
    Retry(Error),
    /// The server refused us or local training failed.
    Fatal(Error),
}

/// Hello, then `model_down -> local_train -> model_up` until the server says
/// bye. Connection problems are retried with exponential backoff.
pub fn run_client(
    addr: impl ToSocketAddrs,
    client: &mut Client<'_>,
    opts: ClientOptions,
) -> Result<ClientReport> {
    let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
    let mut report = ClientReport::default();
    let mut failures = 0u32;
    loop {
        match session(&addrs, client, &mut report, &mut failures) {
            Ok(()) => return Ok(report),
            Err(Failure::Fatal(e)) => return Err(e),
            Err(Failure::Retry(e)) => {
                report.last_error = Some(e.to_string());
                if failures >= opts.max_retries {
                    return Err(e);
                }
                let wait = opts.initial_backoff * 2u32.saturating_pow(failures);
                warn!("{}: {e}; retrying in {wait:?}", client.id);
                thread::sleep(wait);
                failures += 1;
                report.reconnects += 1;
            }
        }
    }
}

fn session(
    addrs: &[SocketAddr],
    client: &mut Client<'_>,
    report: &mut ClientReport,
    failures: &mut u32,
) -> std::result::Result<(), Failure> {
    let io = |e: Error| match e {
        Error::Io(_) | Error::Protocol { .. } => Failure::Retry(e),
        other => Failure::Fatal(other),
    };
    let mut stream = TcpStream::connect(addrs).map_err(|e| Failure::Retry(e.into()))?;
    stream
        .set_nodelay(true)
        .map_err(|e| Failure::Retry(e.into()))?;
    let hello = Message::Hello {
        client_id: client.id.0.clone(),
        shard_size: client.shard().len() as u64,
    };
    write_frame(&mut stream, &hello).map_err(io)?;
    loop {
        match read_frame(&mut stream).map_err(io)? {
            Message::ModelDown {
                t,
                h_assign,
                weights,
            } => {
                *failures = 0;
                debug!("{} got model t={t} h={h_assign}", client.id);
                let update = client
                    .local_train(&weights, t, h_assign as usize)
                    .map_err(Failure::Fatal)?;
                let up = Message::ModelUp {
                    tau: update.tau,
                    client_id: update.client_id.0,
                    weights: update.w_new,
                };
                write_frame(&mut stream, &up).map_err(io)?;
                report.rounds += 1;
            }
            Message::Bye => return Ok(()),
            Message::Error { code, detail } => {
                return Err(Failure::Fatal(Error::Protocol { code, detail }))
            }
            other => {
                return Err(Failure::Fatal(Error::protocol(
                    codes::UNEXPECTED_MESSAGE,
                    format!("server sent {}", other.kind()),
                )))
            }
        }
    }
}
