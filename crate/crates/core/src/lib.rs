//! Electromagnetic-transient simulation of a grid-following wind-turbine
//! converter, with a pluggable PLL solver (delayed, Newton-iterated, or a
//! neural surrogate).

pub mod circuit;
pub mod cli;
pub mod control;
pub mod engine;
pub mod pinn;
pub mod wt4;
