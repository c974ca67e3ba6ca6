//! NOMA vehicular edge computing simulator.
//!
//! Vehicles move over a grid of edge servers and upload one task per slot
//! over a shared NOMA uplink. Each slot the library solves uplink powers,
//! splits edge CPU among the tasks each edge executes, and lets edges choose
//! where to run their tasks through a potential game.
//!
//! Layers, bottom up:
//!
//! - [`domain`]: configuration, units, edge placement, seeded streams
//! - [`mobility`]: vehicle traces and edge coverage
//! - [`channel`]: fading, SIC decode order, SINR and upload time
//! - [`power_alloc`]: per-edge uplink power by successive convex approximation
//! - [`compute_alloc`]: closed-form CPU split and processing time
//! - [`offload_game`]: utility, null contributions and best-response dynamics
//! - [`env_engine`]: slot loop, policies and metrics
//! - [`bridge`]: JSON-lines service for an external learner

pub mod channel;
pub mod domain;
pub mod mobility;
pub mod power_alloc;
pub mod compute_alloc;
pub mod offload_game;
pub mod env_engine;
pub mod bridge;
pub mod verify;
