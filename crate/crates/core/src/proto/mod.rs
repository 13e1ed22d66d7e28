//! Wire protocol, broker and clock synchronization.

pub mod broker;
pub mod clock;
pub mod codec;
pub mod control;
pub mod gateway;
pub mod net;
pub mod payload;

pub use broker::{Broker, BrokerError, ClientId, Envelope, SubscriberQueue};
pub use clock::{clock_offset, to_reference, ClockError, ClockEstimate, ClockSample};
pub use codec::{decode_message, encode_message, CodecError, Message, Topic};
pub use control::{Command, ControlMessage, Subscription};
pub use payload::Payload;
