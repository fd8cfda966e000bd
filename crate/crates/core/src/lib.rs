pub mod client;
pub mod env;
pub mod genesis;
pub mod metrics;
pub mod parse;
pub mod probe;
pub mod prompt;
