//! Exit codes and the JSON error record written to stderr.

use std::fmt;
use std::process::ExitCode;

use serde::Serialize;
use toggl_core::toy::ToyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Config,
    Data,
    Numeric,
}

impl Kind {
    pub fn exit_code(self) -> u8 {
        match self {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Numeric => 4,
        }
    }
}

/// An error raised by the CLI itself with an explicit class.
#[derive(Debug)]
pub struct Tagged {
    pub kind: Kind,
    pub message: String,
}

impl fmt::Display for Tagged {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Tagged {}

pub fn config(message: impl Into<String>) -> anyhow::Error {
    Tagged {
        kind: Kind::Config,
        message: message.into(),
    }
    .into()
}

pub fn data(message: impl Into<String>) -> anyhow::Error {
    Tagged {
        kind: Kind::Data,
        message: message.into(),
    }
    .into()
}

fn toy_kind(e: &ToyError) -> Kind {
    match e {
        ToyError::Config(_) | ToyError::TooManySpeakers { .. } | ToyError::BadSymbol { .. } => Kind::Config,
        ToyError::Divergence { .. } => Kind::Numeric,
        _ => Kind::Data,
    }
}

/// The first recognizable cause decides; anything else is a data error.
pub fn classify(err: &anyhow::Error) -> Kind {
    for cause in err.chain() {
        if let Some(t) = cause.downcast_ref::<Tagged>() {
            return t.kind;
        }
        if let Some(e) = cause.downcast_ref::<ToyError>() {
            return toy_kind(e);
        }
        if cause.is::<toml::de::Error>() {
            return Kind::Config;
        }
    }
    Kind::Data
}

#[derive(Serialize)]
struct Record<'a> {
    error: Body<'a>,
}

#[derive(Serialize)]
struct Body<'a> {
    kind: Kind,
    message: &'a str,
    exit_code: u8,
}

/// Prints the error record and returns the matching exit code.
pub fn report(kind: Kind, message: &str) -> ExitCode {
    let record = Record {
        error: Body {
            kind,
            message,
            exit_code: kind.exit_code(),
        },
    };
    eprintln!("{}", serde_json::to_string(&record).expect("error record serializes"));
    ExitCode::from(kind.exit_code())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_follows_the_cause_chain() {
        assert_eq!(classify(&config("x")), Kind::Config);
        assert_eq!(classify(&data("x").context("reading refs")), Kind::Data);
        let e: anyhow::Error = ToyError::Divergence { step: 3 }.into();
        assert_eq!(classify(&e.context("training")), Kind::Numeric);
        let e: anyhow::Error = ToyError::Config("bad".into()).into();
        assert_eq!(classify(&e), Kind::Config);
        assert_eq!(classify(&anyhow::anyhow!("other")), Kind::Data);
    }
}
