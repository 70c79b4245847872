pub mod config;
pub mod plot;
pub mod props;
pub mod run;
pub mod sweep;
