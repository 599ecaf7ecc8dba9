pub mod graph;
pub mod game;
pub mod query;
pub mod sprov;
pub mod table;
pub mod workflow;
pub mod privacy;
#[cfg(feature = "testkit")]
pub mod testkit;
