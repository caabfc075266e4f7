//! Segmented anode fuel-delivery model in port-Hamiltonian form, an
//! energy-shaping tracking controller, a sliding-mode observer and a
//! deterministic scenario runner.

pub mod cli;
pub mod config;
pub mod controller;
pub mod model;
pub mod observer;
pub mod ph_core;
pub mod scalar;
pub mod sim;
pub mod verify;
