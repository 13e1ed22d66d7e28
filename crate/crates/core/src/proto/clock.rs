//! Four-timestamp offset estimation.
//!
//! The querying side ("client") stamps `t0` on send and `t3` on receipt in its
//! own clock; the answering side ("server") stamps `t1` on receipt and `t2` on
//! send in its clock. In this system the broker holds the reference clock and
//! is the client, so the estimated offset is *node clock minus reference*.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::types::Timestamp;

pub const SYNC_PERIOD_NS: i64 = 1_000_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum ClockError {
    #[error("inconsistent clock sample: round-trip delay {0} ns is negative")]
    Inconsistent(i64),
    #[error("timestamp arithmetic overflowed")]
    Overflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClockSample {
    pub t0: Timestamp,
    pub t1: Timestamp,
    pub t2: Timestamp,
    pub t3: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClockEstimate {
    /// server clock minus client clock, ns
    pub offset: i64,
    /// round-trip path delay excluding server processing, ns
    pub delay: i64,
}

/// `offset = ((t1 − t0) + (t2 − t3)) / 2` rounded toward zero and
/// `delay = (t3 − t0) − (t2 − t1)`.
pub fn clock_offset(s: &ClockSample) -> Result<ClockEstimate, ClockError> {
    let (t0, t1, t2, t3) = (s.t0.0 as i128, s.t1.0 as i128, s.t2.0 as i128, s.t3.0 as i128);
    let delay = (t3 - t0) - (t2 - t1);
    let offset = ((t1 - t0) + (t2 - t3)) / 2;
    let delay = i64::try_from(delay).map_err(|_| ClockError::Overflow)?;
    if delay < 0 {
        return Err(ClockError::Inconsistent(delay));
    }
    let offset = i64::try_from(offset).map_err(|_| ClockError::Overflow)?;
    Ok(ClockEstimate { offset, delay })
}

/// Maps a timestamp from a node clock into the reference clock.
pub fn to_reference(t: Timestamp, offset: i64) -> Result<Timestamp, ClockError> {
    t.checked_sub(offset).ok_or(ClockError::Overflow)
}

/// Exponential smoothing of successive offset estimates, factor 1/10.
/// The first sample is taken as-is. Integer arithmetic keeps repeated
/// identical samples exact.
#[derive(Debug, Clone, Default)]
pub struct ClockFilter {
    estimate: Option<ClockEstimate>,
    samples: u64,
}

impl ClockFilter {
    pub const SMOOTHING_DIVISOR: i64 = 10;

    pub fn update(&mut self, sample: ClockEstimate) -> ClockEstimate {
        self.samples += 1;
        let next = match self.estimate {
            None => sample,
            Some(prev) => ClockEstimate {
                offset: prev.offset + (sample.offset - prev.offset) / Self::SMOOTHING_DIVISOR,
                delay: prev.delay + (sample.delay - prev.delay) / Self::SMOOTHING_DIVISOR,
            },
        };
        self.estimate = Some(next);
        next
    }

    pub fn estimate(&self) -> Option<ClockEstimate> {
        self.estimate
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }
}

/// Latest known offset per node, fed from CLOCK offset broadcasts.
#[derive(Debug, Clone, Default)]
pub struct OffsetBook {
    offsets: BTreeMap<String, i64>,
}

impl OffsetBook {
    pub fn set(&mut self, node: &str, offset: i64) {
        self.offsets.insert(node.to_string(), offset);
    }

    pub fn get(&self, node: &str) -> Option<i64> {
        self.offsets.get(node).copied()
    }

    /// Rebases `t` from `node`'s clock; `None` until the node has been synced.
    pub fn to_reference(&self, node: &str, t: Timestamp) -> Option<Timestamp> {
        self.get(node).and_then(|o| to_reference(t, o).ok())
    }
}
