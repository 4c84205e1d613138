pub mod allocation;
pub mod cost;
mod optim;
pub mod psychometric;
pub mod rng;
pub mod session;
pub mod staircase;
pub mod transport;
