//! Binary payload encodings carried inside frames. All little-endian.
//!
//! | topic        | layout                                                      |
//! |--------------|-------------------------------------------------------------|
//! | POSE         | px py pz qw qx qy qz (7 × f64)                              |
//! | WRENCH_*     | fx fy fz tx ty tz (6 × f64)                                 |
//! | GRIP_STATE   | width setpoint motor_angle grip_force (4 × f64), stalled u8 |
//! | GRIP_CMD     | setpoint f64                                                |
//! | TELEOP_CMD   | target pose (7 × f64), grip setpoint f64                    |
//! | HAPTIC_FB    | left wrench, right wrench, origin_l i64, origin_r i64, stale u8 |
//! | MARKERS_*    | capture ts i64, count u32, count × (u f64, v f64)           |
//! | RGB / DEPTH  | width u16, height u16, format u8, len u32, bytes            |
//! | CLOCK        | tag u8 then per-variant fields (see [`ClockPayload`])        |
//! | CONTROL      | UTF-8 `key=value` lines (see [`super::control`])            |

use thiserror::Error;

use crate::lattice::MarkerSet;
use crate::pose::Pose6D;
use crate::types::{GripState, Timestamp, Wrench6D};

#[derive(Debug, Error, PartialEq)]
pub enum PayloadError {
    #[error("payload truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} unexpected trailing payload bytes")]
    Trailing(usize),
    #[error("invalid payload: {0}")]
    Invalid(String),
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer::default()
    }
    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }
    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn i64(&mut self, v: i64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }
    /// u32 length prefix followed by the bytes.
    pub fn blob(&mut self, v: &[u8]) -> &mut Self {
        self.u32(v.len() as u32).bytes(v)
    }
    pub fn pose(&mut self, p: &Pose6D) -> &mut Self {
        let pos = p.position();
        self.f64(pos.x).f64(pos.y).f64(pos.z);
        for q in p.quat_wxyz() {
            self.f64(q);
        }
        self
    }
    pub fn wrench(&mut self, w: &Wrench6D) -> &mut Self {
        for v in w.to_array() {
            self.f64(v);
        }
        self
    }
    pub fn grip(&mut self, g: &GripState) -> &mut Self {
        self.f64(g.width)
            .f64(g.setpoint)
            .f64(g.motor_angle)
            .f64(g.grip_force)
            .u8(g.stalled as u8)
    }
    pub fn len(&self) -> usize {
        self.buf.len()
    }
    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    pub fn position(&self) -> usize {
        self.pos
    }
    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    pub fn take(&mut self, n: usize) -> Result<&'a [u8], PayloadError> {
        if self.remaining() < n {
            return Err(PayloadError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N], PayloadError> {
        Ok(self.take(N)?.try_into().unwrap())
    }
    pub fn u8(&mut self) -> Result<u8, PayloadError> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16, PayloadError> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    pub fn u32(&mut self) -> Result<u32, PayloadError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    pub fn u64(&mut self) -> Result<u64, PayloadError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    pub fn i64(&mut self) -> Result<i64, PayloadError> {
        Ok(i64::from_le_bytes(self.array()?))
    }
    pub fn f64(&mut self) -> Result<f64, PayloadError> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    pub fn blob(&mut self) -> Result<&'a [u8], PayloadError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    pub fn bool(&mut self) -> Result<bool, PayloadError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(PayloadError::Invalid(format!("bool byte {other}"))),
        }
    }
    pub fn pose(&mut self) -> Result<Pose6D, PayloadError> {
        let mut v = [0.0; 7];
        for x in v.iter_mut() {
            *x = self.f64()?;
        }
        Pose6D::from_arrays([v[0], v[1], v[2]], [v[3], v[4], v[5], v[6]])
            .map_err(|e| PayloadError::Invalid(e.to_string()))
    }
    pub fn wrench(&mut self) -> Result<Wrench6D, PayloadError> {
        let mut v = [0.0; 6];
        for x in v.iter_mut() {
            *x = self.f64()?;
        }
        Ok(Wrench6D::from_array(v))
    }
    pub fn grip(&mut self) -> Result<GripState, PayloadError> {
        Ok(GripState {
            width: self.f64()?,
            setpoint: self.f64()?,
            motor_angle: self.f64()?,
            grip_force: self.f64()?,
            stalled: self.bool()?,
        })
    }
    pub fn finish(self) -> Result<(), PayloadError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(PayloadError::Trailing(n)),
        }
    }
}

/// Types with a fixed payload encoding.
pub trait Payload: Sized {
    fn write(&self, w: &mut Writer);
    fn read(r: &mut Reader<'_>) -> Result<Self, PayloadError>;

    fn to_payload(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.finish()
    }

    fn from_payload(bytes: &[u8]) -> Result<Self, PayloadError> {
        let mut r = Reader::new(bytes);
        let v = Self::read(&mut r)?;
        r.finish()?;
        Ok(v)
    }
}

impl Payload for Pose6D {
    fn write(&self, w: &mut Writer) {
        w.pose(self);
    }
    fn read(r: &mut Reader<'_>) -> Result<Self, PayloadError> {
        r.pose()
    }
}

impl Payload for Wrench6D {
    fn write(&self, w: &mut Writer) {
        w.wrench(self);
    }
    fn read(r: &mut Reader<'_>) -> Result<Self, PayloadError> {
        r.wrench()
    }
}

impl Payload for GripState {
    fn write(&self, w: &mut Writer) {
        w.grip(self);
    }
    fn read(r: &mut Reader<'_>) -> Result<Self, PayloadError> {
        r.grip()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GripCommand {
    pub setpoint: f64,
}

impl Payload for GripCommand {
    fn write(&self, w: &mut Writer) {
        w.f64(self.setpoint);
    }
    fn read(r: &mut Reader<'_>) -> Result<Self, PayloadError> {
        let setpoint = r.f64()?;
        if !setpoint.is_finite() {
            return Err(PayloadError::Invalid("non-finite grip setpoint".into()));
        }
        Ok(GripCommand { setpoint })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeleopCommand {
    pub target: Pose6D,
    pub grip_setpoint: f64,
}

impl Payload for TeleopCommand {
    fn write(&self, w: &mut Writer) {
        w.pose(&self.target).f64(self.grip_setpoint);
    }
    fn read(r: &mut Reader<'_>) -> Result<Self, PayloadError> {
        Ok(TeleopCommand {
            target: r.pose()?,
            grip_setpoint: r.f64()?,
        })
    }
}

/// Follower fingertip wrenches relayed to the leader. Origin timestamps are
/// the wrench capture times rebased into the reference clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HapticFeedback {
    pub left: Wrench6D,
    pub right: Wrench6D,
    pub origin_left: Timestamp,
    pub origin_right: Timestamp,
    pub stale: bool,
}

impl HapticFeedback {
    /// Force magnitude presented to the operator: mean of the two fingertip
    /// force norms.
    pub fn felt_force(&self) -> f64 {
        0.5 * (self.left.force.norm() + self.right.force.norm())
    }
}

impl Payload for HapticFeedback {
    fn write(&self, w: &mut Writer) {
        w.wrench(&self.left)
            .wrench(&self.right)
            .i64(self.origin_left.0)
            .i64(self.origin_right.0)
            .u8(self.stale as u8);
    }
    fn read(r: &mut Reader<'_>) -> Result<Self, PayloadError> {
        Ok(HapticFeedback {
            left: r.wrench()?,
            right: r.wrench()?,
            origin_left: Timestamp(r.i64()?),
            origin_right: Timestamp(r.i64()?),
            stale: r.bool()?,
        })
    }
}

impl Payload for MarkerSet {
    fn write(&self, w: &mut Writer) {
        w.i64(self.timestamp.0).u32(self.points.len() as u32);
        for p in &self.points {
            w.f64(p[0]).f64(p[1]);
        }
    }
    fn read(r: &mut Reader<'_>) -> Result<Self, PayloadError> {
        let timestamp = Timestamp(r.i64()?);
        let n = r.u32()? as usize;
        if n * 16 > r.remaining() {
            return Err(PayloadError::Truncated(r.position()));
        }
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            points.push([r.f64()?, r.f64()?]);
        }
        Ok(MarkerSet { timestamp, points })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ImageFormat {
    Rgb8 = 0,
    /// Little-endian u16 millimeters.
    Depth16 = 1,
}

impl ImageFormat {
    pub fn bytes_per_pixel(self) -> usize {
        match self {
            ImageFormat::Rgb8 => 3,
            ImageFormat::Depth16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: u16,
    pub height: u16,
    pub format: ImageFormat,
    pub data: Vec<u8>,
}

impl Payload for Image {
    fn write(&self, w: &mut Writer) {
        w.u16(self.width)
            .u16(self.height)
            .u8(self.format as u8)
            .blob(&self.data);
    }
    fn read(r: &mut Reader<'_>) -> Result<Self, PayloadError> {
        let width = r.u16()?;
        let height = r.u16()?;
        let format = match r.u8()? {
            0 => ImageFormat::Rgb8,
            1 => ImageFormat::Depth16,
            other => return Err(PayloadError::Invalid(format!("image format {other}"))),
        };
        let data = r.blob()?.to_vec();
        if data.len() != width as usize * height as usize * format.bytes_per_pixel() {
            return Err(PayloadError::Invalid("image size mismatch".into()));
        }
        Ok(Image {
            width,
            height,
            format,
            data,
        })
    }
}

/// Clock-sync exchange. The broker (reference clock) sends `Request`, the
/// node answers with `Reply`, and the broker broadcasts the resulting
/// per-node estimate as `Offset`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClockPayload {
    Request {
        t0: Timestamp,
    },
    Reply {
        t0: Timestamp,
        t1: Timestamp,
        t2: Timestamp,
    },
    Offset {
        node: String,
        /// node clock minus reference clock, ns
        offset: i64,
        delay: i64,
    },
}

impl Payload for ClockPayload {
    fn write(&self, w: &mut Writer) {
        match self {
            ClockPayload::Request { t0 } => {
                w.u8(0).i64(t0.0);
            }
            ClockPayload::Reply { t0, t1, t2 } => {
                w.u8(1).i64(t0.0).i64(t1.0).i64(t2.0);
            }
            ClockPayload::Offset {
                node,
                offset,
                delay,
            } => {
                w.u8(2).i64(*offset).i64(*delay).blob(node.as_bytes());
            }
        }
    }
    fn read(r: &mut Reader<'_>) -> Result<Self, PayloadError> {
        match r.u8()? {
            0 => Ok(ClockPayload::Request {
                t0: Timestamp(r.i64()?),
            }),
            1 => Ok(ClockPayload::Reply {
                t0: Timestamp(r.i64()?),
                t1: Timestamp(r.i64()?),
                t2: Timestamp(r.i64()?),
            }),
            2 => {
                let offset = r.i64()?;
                let delay = r.i64()?;
                let node = std::str::from_utf8(r.blob()?)
                    .map_err(|_| PayloadError::Invalid("node name not UTF-8".into()))?
                    .to_string();
                Ok(ClockPayload::Offset {
                    node,
                    offset,
                    delay,
                })
            }
            tag => Err(PayloadError::Invalid(format!("clock tag {tag}"))),
        }
    }
}
