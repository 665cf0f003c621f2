//! Length-prefixed JSON over TCP: one server process aggregates updates from
//! any number of client processes.

mod client;
mod frame;
mod server;

pub use client::{run_client, ClientOptions, ClientReport};
pub use frame::{
    codes, decode_frame, encode_frame, read_frame, weights_from_base64, weights_to_base64,
    write_frame, Message, MAX_FRAME_BYTES,
};
pub use server::{ServeOutcome, Server};

pub const DEFAULT_PORT: u16 = 7070;
