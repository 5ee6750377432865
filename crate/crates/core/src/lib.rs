#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attack;
pub mod data;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod noise;
pub mod protocol;
pub mod representation;
pub mod seed;

pub use linalg::Matrix;
