use headkv::budget::BudgetError;
use headkv::engine::EngineError;
use headkv::eval::EvalError;
use headkv::profiler::ProfileError;
use headkv::trace::TraceError;
use serde::Serialize;
use thiserror::Error;

/// Failure classes with stable exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("{0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Input(_) => 3,
            CliError::Infeasible(_) => 4,
            CliError::Output(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Input(_) => "input_format",
            CliError::Infeasible(_) => "infeasible_budget",
            CliError::Output(_) => "output",
        }
    }

    /// One-line JSON for standard error.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            error: &'a str,
            exit_code: u8,
            message: String,
        }
        serde_json::to_string(&Line {
            error: self.kind(),
            exit_code: self.exit_code(),
            message: self.to_string(),
        })
        .expect("plain struct serializes")
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::InvalidSpec(_) => CliError::Config(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<ProfileError> for CliError {
    fn from(e: ProfileError) -> Self {
        match e {
            ProfileError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<BudgetError> for CliError {
    fn from(e: BudgetError) -> Self {
        match e {
            BudgetError::Infeasible { .. } | BudgetError::MinLengthInfeasible { .. } => {
                CliError::Infeasible(e.to_string())
            }
            BudgetError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_) => CliError::Config(e.to_string()),
            EngineError::Infeasible(_) | EngineError::BudgetExceeded { .. } => {
                CliError::Infeasible(e.to_string())
            }
            EngineError::Taxonomy(p) => p.into(),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Engine(inner) => inner.into(),
            EvalError::Budget(inner) => inner.into(),
            EvalError::Policy(_) | EvalError::BudgetMismatch(_) => CliError::Config(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}
