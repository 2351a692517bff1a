use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matmul::{Matrix, RowRange};
use crate::scheduler::ProviderId;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
}

impl Endpoint {
    pub fn new(host: impl Into<String>, port: u16) -> Result<Self> {
        let host = host.into();
        if host.is_empty() || host.len() > u16::MAX as usize {
            return Err(Error::InvalidEndpoint(format!("host {host:?}")));
        }
        if port == 0 {
            return Err(Error::InvalidEndpoint(format!("{host}:0")));
        }
        Ok(Endpoint { host, port })
    }

    /// An endpoint to bind to; port 0 asks for an ephemeral port.
    pub fn bind_any(host: impl Into<String>) -> Self {
        Endpoint {
            host: host.into(),
            port: 0,
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

impl FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (host, port) = s
            .rsplit_once(':')
            .ok_or_else(|| Error::InvalidEndpoint(format!("{s:?} is not host:port")))?;
        let port: u16 = port
            .parse()
            .map_err(|_| Error::InvalidEndpoint(format!("bad port in {s:?}")))?;
        Endpoint::new(host, port)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Policy {
    Homogenized,
    EqualSplit,
}

impl Policy {
    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Homogenized => "homogenized",
            Policy::EqualSplit => "equal",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Policy::Homogenized => 0,
            Policy::EqualSplit => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Policy::Homogenized),
            1 => Ok(Policy::EqualSplit),
            t => Err(Error::Decode(format!("unknown policy tag {t}"))),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "homogenized" => Ok(Policy::Homogenized),
            "equal" | "equal_split" | "equal-split" => Ok(Policy::EqualSplit),
            other => Err(Error::InvalidArgument(format!("unknown policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageKind {
    Register = 1,
    RegisterAck = 2,
    Heartbeat = 3,
    JobRequest = 4,
    SubRequest = 5,
    BroadcastOperand = 6,
    PartialResult = 7,
    JobAccepted = 8,
    Error = 9,
    StatusQuery = 10,
    StatusReport = 11,
}

impl MessageKind {
    pub fn from_tag(tag: u8) -> Result<Self> {
        use MessageKind::*;
        Ok(match tag {
            1 => Register,
            2 => RegisterAck,
            3 => Heartbeat,
            4 => JobRequest,
            5 => SubRequest,
            6 => BroadcastOperand,
            7 => PartialResult,
            8 => JobAccepted,
            9 => Error,
            10 => StatusQuery,
            11 => StatusReport,
            t => return Err(crate::error::Error::UnknownKind(t)),
        })
    }

    pub fn tag(self) -> u8 {
        self as u8
    }
}

/// One provider's part in an accepted job, as announced to the client.
#[derive(Debug, Clone, PartialEq)]
pub struct Participant {
    pub provider: ProviderId,
    pub endpoint: Endpoint,
    pub range: RowRange,
    /// The homogenized performance the plan was computed from.
    pub performance: f64,
}

/// One row of the coordinator's table, as reported to `status`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProviderStatus {
    pub provider: ProviderId,
    pub endpoint: Endpoint,
    pub services: Vec<String>,
    /// Homogenized performance, or `None` before the first heartbeat.
    pub performance: Option<f64>,
    /// Seconds since the last heartbeat, or `None` if never seen.
    pub last_seen_age: Option<f64>,
    pub round_trip: Option<f64>,
    pub fresh: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Register {
        endpoint: Endpoint,
        services: Vec<String>,
    },
    RegisterAck {
        heartbeat_interval: f64,
        staleness_window: f64,
    },
    Heartbeat {
        raw_speed: f64,
        load_factor: f64,
    },
    JobRequest {
        workload: String,
        policy: Policy,
        reply: Endpoint,
        first: Matrix,
        second_cols: u32,
    },
    SubRequest {
        workload: String,
        range: RowRange,
        first_rows: u64,
        client: Endpoint,
        block: Matrix,
    },
    BroadcastOperand {
        operand: Matrix,
    },
    PartialResult {
        range: RowRange,
        compute_seconds: f64,
        block: Matrix,
    },
    JobAccepted {
        predicted_finish: f64,
        participants: Vec<Participant>,
    },
    Error {
        code: String,
        detail: String,
    },
    StatusQuery,
    StatusReport {
        providers: Vec<ProviderStatus>,
    },
}

impl Body {
    pub fn kind(&self) -> MessageKind {
        match self {
            Body::Register { .. } => MessageKind::Register,
            Body::RegisterAck { .. } => MessageKind::RegisterAck,
            Body::Heartbeat { .. } => MessageKind::Heartbeat,
            Body::JobRequest { .. } => MessageKind::JobRequest,
            Body::SubRequest { .. } => MessageKind::SubRequest,
            Body::BroadcastOperand { .. } => MessageKind::BroadcastOperand,
            Body::PartialResult { .. } => MessageKind::PartialResult,
            Body::JobAccepted { .. } => MessageKind::JobAccepted,
            Body::Error { .. } => MessageKind::Error,
            Body::StatusQuery => MessageKind::StatusQuery,
            Body::StatusReport { .. } => MessageKind::StatusReport,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub job_id: u64,
    pub sender: String,
    pub body: Body,
}

impl Message {
    pub fn new(job_id: u64, sender: impl Into<String>, body: Body) -> Self {
        Message {
            job_id,
            sender: sender.into(),
            body,
        }
    }

    pub fn kind(&self) -> MessageKind {
        self.body.kind()
    }

    pub fn error(job_id: u64, sender: impl Into<String>, err: &Error) -> Self {
        Message::new(
            job_id,
            sender,
            Body::Error {
                code: err.code().to_owned(),
                detail: err.to_string(),
            },
        )
    }

    /// Checks the job-id rule: membership and status traffic carries job id
    /// 0, job traffic a non-zero id. `ERROR` may carry either.
    pub fn validate(&self) -> Result<()> {
        use MessageKind::{
            BroadcastOperand, Heartbeat, JobAccepted, JobRequest, PartialResult, Register, RegisterAck, StatusQuery,
            StatusReport, SubRequest,
        };
        let kind = self.kind();
        match kind {
            Register | RegisterAck | Heartbeat | StatusQuery | StatusReport if self.job_id != 0 => Err(
                Error::InvalidMessage(format!("{kind:?} must carry job id 0, got {}", self.job_id)),
            ),
            JobRequest | SubRequest | BroadcastOperand | PartialResult | JobAccepted if self.job_id == 0 => {
                Err(Error::InvalidMessage(format!("{kind:?} needs a non-zero job id")))
            }
            _ if self.sender.len() > u16::MAX as usize => {
                Err(Error::InvalidMessage("sender id longer than 65535 bytes".into()))
            }
            _ => Ok(()),
        }
    }
}
