use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("svd did not converge after {sweeps} sweeps (off-diagonal {off_diagonal:e})")]
    SvdNoConvergence { sweeps: usize, off_diagonal: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("round {round}{}{}: {source}", client.map(|c| format!(", client {c}")).unwrap_or_default(), module.map(|m| format!(", module {m}")).unwrap_or_default())]
    InRound {
        round: usize,
        client: Option<usize>,
        module: Option<usize>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub fn in_round(self, round: usize, client: Option<usize>, module: Option<usize>) -> Self {
        Error::InRound {
            round,
            client,
            module,
            source: Box::new(self),
        }
    }

    /// Innermost error, with round/client/module context peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::InRound { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self.root(), Error::SvdNoConvergence { .. })
    }

    pub fn is_config(&self) -> bool {
        matches!(self.root(), Error::Config(_) | Error::Dimension { .. })
    }
}
