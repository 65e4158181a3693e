//! Socket transport and command-line front end.

pub mod cluster;
pub mod frame;
pub mod node;
