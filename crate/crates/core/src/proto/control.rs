//! CONTROL payloads: UTF-8 text, one `key=value` pair per line.
//!
//! Recognized keys:
//!
//! * `cmd`: `hello`, `start`, `stop`, `record:begin`, `record:end`,
//!   `teleop:enable`, `teleop:disable`, `node-down`, `error`
//! * `id`: sender identity (required in `hello`)
//! * `sub`: comma-separated subscriptions for `hello`, each `TOPIC` or
//!   `TOPIC@publisher`; topics may be names or numeric ids
//! * `target`: node the command is meant for; absent means everyone
//! * `node`: subject of `node-down`
//! * `reason`: free text
//!
//! Every TCP connection must open with a `cmd=hello` frame.

use std::fmt;

use thiserror::Error;

use super::codec::Topic;

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("control payload is not UTF-8")]
    Utf8,
    #[error("malformed control line {0:?}")]
    Line(String),
    #[error("missing key {0:?}")]
    Missing(&'static str),
    #[error("unknown command {0:?}")]
    UnknownCommand(String),
    #[error("bad subscription {0:?}")]
    Subscription(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Subscription {
    pub topic: Topic,
    /// Restrict delivery to frames from this publisher.
    pub publisher: Option<String>,
}

impl Subscription {
    pub fn all(topic: Topic) -> Self {
        Subscription {
            topic,
            publisher: None,
        }
    }

    pub fn from(topic: Topic, publisher: impl Into<String>) -> Self {
        Subscription {
            topic,
            publisher: Some(publisher.into()),
        }
    }

    pub fn matches(&self, topic: Topic, publisher: &str) -> bool {
        self.topic == topic && self.publisher.as_deref().is_none_or(|p| p == publisher)
    }

    pub fn parse(s: &str) -> Result<Self, ControlError> {
        let (t, p) = match s.split_once('@') {
            Some((t, p)) if !p.is_empty() => (t, Some(p.to_string())),
            Some(_) => return Err(ControlError::Subscription(s.into())),
            None => (s, None),
        };
        let topic = Topic::parse(t).ok_or_else(|| ControlError::Subscription(s.into()))?;
        Ok(Subscription {
            topic,
            publisher: p,
        })
    }
}

impl fmt::Display for Subscription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.topic.name() {
            Some(n) => f.write_str(n)?,
            None => write!(f, "{}", self.topic.0)?,
        }
        if let Some(p) = &self.publisher {
            write!(f, "@{p}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Hello,
    Start,
    Stop,
    RecordBegin,
    RecordEnd,
    TeleopEnable,
    TeleopDisable,
    NodeDown,
    Error,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Hello => "hello",
            Command::Start => "start",
            Command::Stop => "stop",
            Command::RecordBegin => "record:begin",
            Command::RecordEnd => "record:end",
            Command::TeleopEnable => "teleop:enable",
            Command::TeleopDisable => "teleop:disable",
            Command::NodeDown => "node-down",
            Command::Error => "error",
        }
    }

    pub fn parse(s: &str) -> Result<Command, ControlError> {
        Ok(match s {
            "hello" => Command::Hello,
            "start" => Command::Start,
            "stop" => Command::Stop,
            "record:begin" => Command::RecordBegin,
            "record:end" => Command::RecordEnd,
            "teleop:enable" => Command::TeleopEnable,
            "teleop:disable" => Command::TeleopDisable,
            "node-down" => Command::NodeDown,
            "error" => Command::Error,
            other => return Err(ControlError::UnknownCommand(other.into())),
        })
    }
}

/// Ordered key-value record.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ControlMessage {
    pairs: Vec<(String, String)>,
}

impl ControlMessage {
    pub fn new(cmd: Command) -> Self {
        ControlMessage::default().with("cmd", cmd.as_str())
    }

    pub fn hello(id: &str, subs: &[Subscription]) -> Self {
        let subs = subs.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
        ControlMessage::new(Command::Hello).with("id", id).with("sub", &subs)
    }

    pub fn node_down(node: &str, reason: &str) -> Self {
        ControlMessage::new(Command::NodeDown)
            .with("node", node)
            .with("reason", reason)
    }

    pub fn with(mut self, key: &str, value: &str) -> Self {
        self.pairs.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn command(&self) -> Result<Command, ControlError> {
        Command::parse(self.get("cmd").ok_or(ControlError::Missing("cmd"))?)
    }

    /// True when the message carries no `target` or names `node`.
    pub fn is_for(&self, node: &str) -> bool {
        self.get("target").is_none_or(|t| t == node)
    }

    pub fn subscriptions(&self) -> Result<Vec<Subscription>, ControlError> {
        match self.get("sub") {
            None => Ok(Vec::new()),
            Some(s) => s
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(Subscription::parse)
                .collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = String::new();
        for (k, v) in &self.pairs {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ControlError> {
        let text = std::str::from_utf8(bytes).map_err(|_| ControlError::Utf8)?;
        let mut pairs = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ControlError::Line(line.to_string()))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ControlError::Line(line.to_string()));
            }
            pairs.push((k.to_string(), v.trim().to_string()));
        }
        Ok(ControlMessage { pairs })
    }
}
