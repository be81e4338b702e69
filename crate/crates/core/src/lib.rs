//! Simulation and exact verification of inhomogeneous push-block particle
//! dynamics on interlacing arrays (random stepped-surface growth with a wall).
//!
//! The engine has two halves that check each other:
//!
//! * a probabilistic half: birth-death chains, coalescing flows, two-level
//!   couplings and the event-driven multilevel simulator ([`chain`], [`flow`],
//!   [`dynamics`]);
//! * an analytic half: birth-death-chain orthogonal polynomials, interlacing
//!   links, coherent measures and the determinantal correlation kernel
//!   computed by contour quadrature ([`orthopoly`], [`interlacing`],
//!   [`measures`]).
//!
//! Every formula carried by the analytic half is validated against a
//! brute-force oracle from the probabilistic half (matrix exponentials,
//! exhaustive generators, Monte Carlo); the [`verify`] module bundles those
//! checks into named suites.

pub mod chain;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod families;
pub mod flow;
pub mod interlacing;
pub mod mc;
pub mod measures;
pub mod orthopoly;
pub mod quadrature;
pub mod surface;
pub mod verify;

pub use error::{Error, Result};
