//! Scenario runner: reads a scenario file, runs simulations and the fluid
//! model, and writes CSV results into one directory per scenario.

pub mod config;
pub mod run;

pub use config::{parse_config, parse_str, Overrides, ScenarioConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration or arguments; every problem found is listed.
    #[error("{}", .0.join("\n"))]
    Invalid(Vec<String>),

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}
