pub mod api;
pub mod cli;
pub mod error;
pub mod hub;
pub mod store;
