//! Dynamic-phasor simulation of the IEEE 39-bus system with a grid-forming
//! microgrid at bus 24, a UDP telemetry/command link, and an autonomous
//! breaker-attack agent.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversary;
pub mod dynamics;
pub mod harness;
pub mod model;
pub mod netio;
pub mod protection;
pub mod steady;
