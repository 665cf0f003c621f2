//! Asynchronous federated optimization with staleness-weighted aggregation.
//!
//! Clients run proximal local SGD from the global model they last fetched and
//! push `(w_new, tau)` back to the server. The server blends each update into
//! the global model with weight `beta * (1 + t - tau)^(-a)`, so stale updates
//! count for less. A synchronous FedAvg baseline, a teacher → TA → student
//! distillation chain, a discrete-event simulator for heterogeneous devices,
//! a TCP wire protocol and empirical probes for the convergence assumptions
//! are built on the same primitives.

pub mod client;
pub mod data;
pub mod distill;
pub mod error;
pub mod models;
pub mod netproto;
pub mod params;
pub mod probes;
pub mod rng;
pub mod server;
pub mod sim;
pub mod state;
pub mod weights;

pub use error::{Error, Result};
pub use params::{Hyperparams, ParamVector};
pub use state::{mix, staleness_weight, ClientId, ClientUpdate, GlobalState};
