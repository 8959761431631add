//! Parallel Monte Carlo tree search with batched simulations for
//! push-to-grasp object retrieval in a planar clutter world.
//!
//! - [`pushworld`]: deterministic quasi-static push simulator and batched stepping.
//! - [`actions`]: contour push sampling and geometric graspability.
//! - [`mcts`]: serial UCB tree search baseline.
//! - [`pmbs`]: virtual-loss batched selection, batch expansion, leaf-parallel
//!   simulation and max-reward backpropagation.
//! - [`bench`]: episode runner, case generator and CSV benchmark harness.

pub mod actions;
pub mod bench;
pub mod geometry;
pub mod mcts;
pub mod pmbs;
pub mod pushworld;
pub mod rng;
