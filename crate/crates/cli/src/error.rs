use std::fmt;
use std::io;
use std::path::Path;

use negadapt::evalkit::EvalError;
use negadapt::formats::FormatError;
use negadapt::policynet::PolicyError;
use negadapt::qstate::StateError;
use negadapt::trainer::TrainError;

/// Failure category, mapped onto the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Numeric,
    Io,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Config => 2,
            Kind::Numeric => 3,
            Kind::Io => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Config,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: io::Error) -> Self {
        Self {
            kind: Kind::Io,
            message: format!("{}: {err}", path.display()),
        }
    }

    fn new(kind: Kind, err: impl fmt::Display) -> Self {
        Self {
            kind,
            message: err.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn state_kind(_: &StateError) -> Kind {
    Kind::Numeric
}

fn policy_kind(e: &PolicyError) -> Kind {
    match e {
        PolicyError::Io(_) => Kind::Io,
        PolicyError::Ad(_) => Kind::Numeric,
        PolicyError::State(s) => state_kind(s),
        _ => Kind::Config,
    }
}

fn eval_kind(e: &EvalError) -> Kind {
    match e {
        EvalError::InsufficientSamples { .. } | EvalError::EmptySet => Kind::Config,
        _ => Kind::Numeric,
    }
}

fn train_kind(e: &TrainError) -> Kind {
    match e {
        TrainError::ConfigInvalid(_) => Kind::Config,
        TrainError::Policy(p) => policy_kind(p),
        TrainError::State(s) => state_kind(s),
        TrainError::Eval(v) => eval_kind(v),
        _ => Kind::Numeric,
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        Self::new(train_kind(&e), e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::new(eval_kind(&e), e)
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        Self::new(policy_kind(&e), e)
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        let kind = match &e {
            FormatError::InvalidManifest(_) | FormatError::Json(_) => Kind::Config,
            FormatError::Policy(p) => policy_kind(p),
            FormatError::Train(t) => train_kind(t),
            FormatError::State(s) => state_kind(s),
            FormatError::Ad(_) => Kind::Numeric,
            _ => Kind::Io,
        };
        Self::new(kind, e)
    }
}
