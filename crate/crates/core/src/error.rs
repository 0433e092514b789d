use std::io;

use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with inputs outside its documented domain.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A dataset that cannot be processed, e.g. one containing a single class.
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),

    #[error("protocol error in round {round}: {detail}")]
    Protocol { round: u64, detail: String },

    #[error("transport error{}: {detail}", client_label(*.client_id))]
    Transport {
        client_id: Option<usize>,
        detail: String,
    },

    #[error("decode error in field `{field}`: {detail}")]
    Decode { field: &'static str, detail: String },

    #[error("run {strategy}/seed {seed} failed: {source}")]
    Run {
        strategy: String,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn client_label(client_id: Option<usize>) -> String {
    match client_id {
        Some(id) => format!(" (client {id})"),
        None => String::new(),
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transport_error_names_client() {
        let err = Error::Transport {
            client_id: Some(4),
            detail: "connection reset".into(),
        };
        assert_eq!(
            err.to_string(),
            "transport error (client 4): connection reset"
        );
    }
}
