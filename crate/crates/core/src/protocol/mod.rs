//! Embedding file format and the JSON-lines oracle protocol.

pub mod file;
pub mod remote;
pub mod server;
pub mod wire;

pub use file::{
    read_embedding, read_insert_pair, read_params, write_atomic, write_embedding, write_insert_pair, write_params,
    Role,
};
pub use remote::{timeout_from_env, Endpoint, RemoteOracle};
pub use server::{pseudo_encode, serve_oracle, ServeOptions, ServeStats};
pub use wire::{decode_matrix, encode_matrix, WireMatrix};
