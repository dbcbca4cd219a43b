//! Secure three-way authentication for IoT devices: a deterministic
//! simulation of the manufacturer, KDC, central key server, user device and
//! service provider, with an adversary-controlled network and a symbolic
//! trace verifier.

pub mod actors;
pub mod adversary;
pub mod crypto;
pub mod demo;
pub mod registry;
pub mod runner;
pub mod scenario;
pub mod simnet;
pub mod verifier;
pub mod wire;
