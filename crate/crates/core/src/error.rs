use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("distribution over an empty provider set")]
    EmptyProviderSet,
    #[error("degenerate performance value: {0}")]
    DegeneratePerformance(f64),
    #[error("invalid load: {0}")]
    InvalidLoad(f64),
    #[error("invalid overhead slope: {0}")]
    InvalidOverhead(f64),
    #[error("no samples in performance history")]
    NoSamples,
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("plan mismatch: {0}")]
    PlanMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("frame of {0} bytes exceeds the 2^31-1 byte limit")]
    FrameTooLarge(usize),
    #[error("unknown message kind tag {0}")]
    UnknownKind(u8),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error("invalid endpoint: {0}")]
    InvalidEndpoint(String),
    #[error("channel closed")]
    ChannelClosed,
    #[error("i/o error ({context}): {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },

    #[error("registration rejected: {0}")]
    RegistrationRejected(String),
    #[error("unknown provider {0}")]
    UnknownProvider(String),
    #[error("no eligible providers for workload {0}")]
    NoProviders(String),
    #[error("job {job_id} failed: {detail}")]
    JobFailed { job_id: u64, detail: String },

    #[error("range {0} was already received or overlaps a received range")]
    DuplicateRange(String),
    #[error("range {0} is not part of the plan")]
    UnexpectedRange(String),
    #[error("assembly incomplete: {0} range(s) missing")]
    Incomplete(usize),
    #[error("assembly timed out with {0} range(s) missing")]
    AssemblyTimeout(usize),
    #[error("operand for job {0} never arrived")]
    OperandTimeout(u64),

    #[error("empty input")]
    EmptyInput,
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Stable short name used in `error: <code>: <detail>` lines and on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyProviderSet => "EmptyProviderSet",
            Error::DegeneratePerformance(_) => "DegeneratePerformance",
            Error::InvalidLoad(_) => "InvalidLoad",
            Error::InvalidOverhead(_) => "InvalidOverhead",
            Error::NoSamples => "NoSamples",
            Error::InvalidSample(_) => "InvalidSample",
            Error::PlanMismatch(_) => "PlanMismatch",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::InvalidMatrix(_) => "InvalidMatrix",
            Error::FrameTooLarge(_) => "FrameTooLarge",
            Error::UnknownKind(_) => "UnknownKind",
            Error::Decode(_) => "DecodeError",
            Error::InvalidMessage(_) => "InvalidMessage",
            Error::InvalidEndpoint(_) => "InvalidEndpoint",
            Error::ChannelClosed => "ChannelClosed",
            Error::Io { .. } => "IoError",
            Error::RegistrationRejected(_) => "RegistrationRejected",
            Error::UnknownProvider(_) => "UnknownProvider",
            Error::NoProviders(_) => "NoProviders",
            Error::JobFailed { .. } => "JobFailed",
            Error::DuplicateRange(_) => "DuplicateRange",
            Error::UnexpectedRange(_) => "UnexpectedRange",
            Error::Incomplete(_) => "Incomplete",
            Error::AssemblyTimeout(_) => "AssemblyTimeout",
            Error::OperandTimeout(_) => "OperandTimeout",
            Error::EmptyInput => "EmptyInput",
            Error::Config(_) => "ConfigError",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::Csv(_) => "CsvError",
        }
    }
}
