//! Wire protocol for the client / coordinator / provider triangle.

pub mod channel;
pub mod codec;
pub mod message;

pub use channel::{
    Backoff, Connection, FrameSink, FrameSource, Listener, LoopbackNetwork, Network, Shutdown, TcpNetwork,
};
pub use codec::{decode, encode, read_frame, FrameDecoder, MAX_FRAME};
pub use message::{Body, Endpoint, Message, MessageKind, Participant, Policy, ProviderStatus};
