//! Energy-based reading of robust classifiers.

pub mod attacks;
pub mod data;
pub mod energy;
pub mod genesis;
pub mod ndcore;
pub mod nets;
pub mod shell;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;
