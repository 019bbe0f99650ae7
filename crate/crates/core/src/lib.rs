pub mod bench;
pub mod broker;
pub mod client;
mod crypto;
pub mod ids;
pub mod trusted_core;
pub mod wire;
