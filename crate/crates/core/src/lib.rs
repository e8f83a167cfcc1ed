pub mod balancing;
pub mod baselines;
pub mod diffnet;
pub mod losses;
pub mod oracles;
pub mod problems;
pub mod metrics;
pub mod trainer;
#[cfg(feature = "cli")]
pub mod cli;
