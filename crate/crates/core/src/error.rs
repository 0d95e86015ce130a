use alloc::string::String;
use core::fmt;

use crate::wire::DecodeError;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors raised by the simulator core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two objects that must agree in size do not.
    Shape {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    /// A gradient or parameter became NaN or infinite.
    NonFinite { layer: usize },
    /// A batch or training set with no rows.
    EmptyData,
    /// The dataset has fewer rows than the partition needs.
    InsufficientData { rows: usize, clients: usize },
    /// An invalid configuration value.
    Config(String),
    /// A wire message could not be decoded.
    Decode(DecodeError),
    /// A module error raised while running a round, tagged with where it happened.
    Round {
        round: u32,
        client: Option<u32>,
        source: alloc::boxed::Box<Error>,
    },
    /// The traffic meter disagreed with the closed-form byte count.
    TrafficMismatch { metered: u64, closed_form: u64 },
}

impl Error {
    pub(crate) fn shape(what: &'static str, expected: usize, found: usize) -> Self {
        Error::Shape {
            what,
            expected,
            found,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn in_round(self, round: u32, client: Option<u32>) -> Self {
        Error::Round {
            round,
            client,
            source: alloc::boxed::Box::new(self),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape {
                what,
                expected,
                found,
            } => write!(
                f,
                "shape mismatch in {what}: expected {expected}, found {found}"
            ),
            Error::NonFinite { layer } => write!(f, "non-finite gradient in layer {layer}"),
            Error::EmptyData => f.write_str("client has no data"),
            Error::InsufficientData { rows, clients } => write!(
                f,
                "insufficient data: {rows} rows cannot be spread over {clients} clients"
            ),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Decode(e) => write!(f, "{e}"),
            Error::Round {
                round,
                client: Some(client),
                source,
            } => write!(f, "round {round}, client {client}: {source}"),
            Error::Round {
                round,
                client: None,
                source,
            } => write!(f, "round {round}: {source}"),
            Error::TrafficMismatch {
                metered,
                closed_form,
            } => write!(
                f,
                "traffic meter reported {metered} bytes but the layout implies {closed_form}"
            ),
        }
    }
}

impl core::error::Error for Error {}

impl From<DecodeError> for Error {
    fn from(e: DecodeError) -> Self {
        Error::Decode(e)
    }
}
