pub mod cli;
pub mod plot;
pub mod server;
