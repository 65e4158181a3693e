//! Genuine atomic multicast: the white-box protocol, Skeen's protocol and its
//! replicated variant, a deterministic network simulator and a trace checker.

pub mod checker;
pub mod explore;
pub mod ftskeen;
pub mod latency;
pub mod message;
pub mod protocol;
pub mod scenario;
pub mod sim;
pub mod skeen;
pub mod time;
pub mod trace;
pub mod types;
pub mod whitebox;
