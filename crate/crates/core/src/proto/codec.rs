//! Frame layout, little-endian:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "MGCW" (4D 47 43 57)
//!      4     1  version (1)
//!      5     2  topic id
//!      7     4  seq
//!     11     8  timestamp, ns (publisher clock)
//!     19     4  payload_len
//!     23     n  payload
//! ```

use std::fmt;

use thiserror::Error;

use crate::types::Timestamp;

pub const MAGIC: [u8; 4] = *b"MGCW";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 23;
pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Topic(pub u16);

impl Topic {
    pub const POSE: Topic = Topic(1);
    pub const RGB: Topic = Topic(2);
    pub const DEPTH: Topic = Topic(3);
    pub const MARKERS_L: Topic = Topic(4);
    pub const MARKERS_R: Topic = Topic(5);
    pub const WRENCH_L: Topic = Topic(6);
    pub const WRENCH_R: Topic = Topic(7);
    pub const GRIP_STATE: Topic = Topic(8);
    pub const GRIP_CMD: Topic = Topic(9);
    pub const TELEOP_CMD: Topic = Topic(10);
    pub const HAPTIC_FB: Topic = Topic(11);
    pub const CLOCK: Topic = Topic(12);
    pub const CONTROL: Topic = Topic(13);

    pub const ALL: [Topic; 13] = [
        Topic::POSE,
        Topic::RGB,
        Topic::DEPTH,
        Topic::MARKERS_L,
        Topic::MARKERS_R,
        Topic::WRENCH_L,
        Topic::WRENCH_R,
        Topic::GRIP_STATE,
        Topic::GRIP_CMD,
        Topic::TELEOP_CMD,
        Topic::HAPTIC_FB,
        Topic::CLOCK,
        Topic::CONTROL,
    ];

    pub fn id(self) -> u16 {
        self.0
    }

    pub fn is_known(self) -> bool {
        (1..=13).contains(&self.0)
    }

    pub fn name(self) -> Option<&'static str> {
        Some(match self.0 {
            1 => "POSE",
            2 => "RGB",
            3 => "DEPTH",
            4 => "MARKERS_L",
            5 => "MARKERS_R",
            6 => "WRENCH_L",
            7 => "WRENCH_R",
            8 => "GRIP_STATE",
            9 => "GRIP_CMD",
            10 => "TELEOP_CMD",
            11 => "HAPTIC_FB",
            12 => "CLOCK",
            13 => "CONTROL",
            _ => return None,
        })
    }

    /// Accepts a topic name (case-insensitive) or a numeric id.
    pub fn parse(s: &str) -> Option<Topic> {
        let s = s.trim();
        if let Ok(id) = s.parse::<u16>() {
            return Some(Topic(id));
        }
        Topic::ALL
            .iter()
            .copied()
            .find(|t| t.name().is_some_and(|n| n.eq_ignore_ascii_case(s)))
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name() {
            Some(n) => f.write_str(n),
            None => write!(f, "topic#{}", self.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub topic: Topic,
    pub seq: u32,
    pub timestamp: Timestamp,
    pub payload: Vec<u8>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("bad magic {0:02x?}")]
    Format([u8; 4]),
    #[error("incomplete frame: need {needed} bytes, have {available}")]
    Incomplete { needed: usize, available: usize },
    #[error("unsupported protocol version {0}")]
    Version(u8),
    #[error("payload of {0} bytes exceeds the 16 MiB cap")]
    Size(usize),
    #[error("{0} trailing bytes after frame")]
    Trailing(usize),
}

impl Message {
    pub fn new(topic: Topic, seq: u32, timestamp: Timestamp, payload: Vec<u8>) -> Self {
        Message {
            topic,
            seq,
            timestamp,
            payload,
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, CodecError> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out)?;
        Ok(out)
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) -> Result<(), CodecError> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(CodecError::Size(self.payload.len()));
        }
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.topic.0.to_le_bytes());
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&self.timestamp.0.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        Ok(())
    }

    /// Decodes exactly one frame occupying all of `buf`.
    pub fn decode(buf: &[u8]) -> Result<Message, CodecError> {
        let (msg, used) = Message::decode_prefix(buf)?;
        if used != buf.len() {
            return Err(CodecError::Trailing(buf.len() - used));
        }
        Ok(msg)
    }

    /// Decodes the frame at the start of `buf`, returning it with the number
    /// of bytes consumed. Suitable for reading from a byte stream.
    pub fn decode_prefix(buf: &[u8]) -> Result<(Message, usize), CodecError> {
        let magic_have = buf.len().min(4);
        if buf[..magic_have] != MAGIC[..magic_have] {
            let mut m = [0u8; 4];
            m[..magic_have].copy_from_slice(&buf[..magic_have]);
            return Err(CodecError::Format(m));
        }
        if buf.len() < 5 {
            return Err(CodecError::Incomplete {
                needed: HEADER_LEN,
                available: buf.len(),
            });
        }
        if buf[4] != VERSION {
            return Err(CodecError::Version(buf[4]));
        }
        if buf.len() < HEADER_LEN {
            return Err(CodecError::Incomplete {
                needed: HEADER_LEN,
                available: buf.len(),
            });
        }
        let topic = Topic(u16::from_le_bytes([buf[5], buf[6]]));
        let seq = u32::from_le_bytes(buf[7..11].try_into().unwrap());
        let timestamp = Timestamp(i64::from_le_bytes(buf[11..19].try_into().unwrap()));
        let len = u32::from_le_bytes(buf[19..23].try_into().unwrap()) as usize;
        if len > MAX_PAYLOAD {
            return Err(CodecError::Size(len));
        }
        let total = HEADER_LEN + len;
        if buf.len() < total {
            return Err(CodecError::Incomplete {
                needed: total,
                available: buf.len(),
            });
        }
        Ok((
            Message {
                topic,
                seq,
                timestamp,
                payload: buf[HEADER_LEN..total].to_vec(),
            },
            total,
        ))
    }
}

pub fn encode_message(m: &Message) -> Result<Vec<u8>, CodecError> {
    m.encode()
}

pub fn decode_message(b: &[u8]) -> Result<Message, CodecError> {
    Message::decode(b)
}
