//! Episode files.
//!
//! ```text
//! "MGCL"  version u16
//! header_len u32, header JSON (EpisodeHeader)
//! per frame: record_len u32, record
//! footer: 0xFFFFFFFF, frame count u64, aborted u8,
//!         n u16, n × (topic u16, dropped u64),
//!         CRC32 of every preceding byte (u32)
//! ```
//!
//! Record (all little-endian, fixed order): t i64; pose 7×f64; grip 4×f64 +
//! stalled u8; wrench_l 6×f64; wrench_r 6×f64; Δt pose, grip, wrench_l,
//! wrench_r (4×i64); image flags u8 (bit 0 RGB, bit 1 depth); then per
//! present image Δt i64 and the image (width u16, height u16, format u8,
//! len u32, bytes).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{AlignedFrame, FrameOffsets};
use crate::proto::codec::Topic;
use crate::proto::payload::{Image, Payload, PayloadError, Reader, Writer};
use crate::types::Timestamp;

pub const MAGIC: [u8; 4] = *b"MGCL";
pub const VERSION: u16 = 1;
pub const SCHEMA_VERSION: u32 = 1;
const FOOTER_SENTINEL: u32 = u32::MAX;
const MAX_HEADER: usize = 16 << 20;
const MAX_RECORD: usize = 64 << 20;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not an episode file (bad magic)")]
    BadMagic,
    #[error("unsupported episode version {0}")]
    Version(u16),
    #[error("corrupt episode at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error("episode header: {0}")]
    Header(String),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: Box<EpisodeError> },
}

impl EpisodeError {
    fn corrupt(offset: usize, reason: impl Into<String>) -> Self {
        EpisodeError::Corrupt {
            offset,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeHeader {
    pub schema_version: u32,
    /// Hex SHA-256 of the node configuration.
    pub config_digest: String,
    /// Publish rates by topic name, Hz.
    pub rates: BTreeMap<String, f64>,
    pub start_time: i64,
    pub seed: u64,
    pub epsilon_ns: i64,
    pub reference_topic: String,
    /// Rig configuration the episode was recorded with, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl Default for EpisodeHeader {
    fn default() -> Self {
        EpisodeHeader {
            schema_version: SCHEMA_VERSION,
            config_digest: digest(b""),
            rates: BTreeMap::new(),
            start_time: 0,
            seed: 0,
            epsilon_ns: super::DEFAULT_EPSILON_NS,
            reference_topic: "POSE".into(),
            config: None,
        }
    }
}

pub fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Footer {
    pub aborted: bool,
    pub drops: BTreeMap<Topic, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub header: EpisodeHeader,
    pub frames: Vec<AlignedFrame>,
    pub footer: Footer,
}

fn encode_frame(f: &AlignedFrame) -> Vec<u8> {
    let mut w = Writer::new();
    w.i64(f.t.0)
        .pose(&f.pose)
        .grip(&f.grip)
        .wrench(&f.wrench_l)
        .wrench(&f.wrench_r)
        .i64(f.dt.pose)
        .i64(f.dt.grip)
        .i64(f.dt.wrench_l)
        .i64(f.dt.wrench_r);
    let flags = f.rgb.is_some() as u8 | (f.depth.is_some() as u8) << 1;
    w.u8(flags);
    for (img, dt) in [(&f.rgb, f.dt.rgb), (&f.depth, f.dt.depth)] {
        if let Some(img) = img {
            w.i64(dt.unwrap_or(0));
            img.write(&mut w);
        }
    }
    w.finish()
}

fn decode_frame(b: &[u8]) -> Result<AlignedFrame, PayloadError> {
    let mut r = Reader::new(b);
    let t = Timestamp(r.i64()?);
    let pose = r.pose()?;
    let grip = r.grip()?;
    let wrench_l = r.wrench()?;
    let wrench_r = r.wrench()?;
    let mut dt = FrameOffsets {
        pose: r.i64()?,
        grip: r.i64()?,
        wrench_l: r.i64()?,
        wrench_r: r.i64()?,
        rgb: None,
        depth: None,
    };
    let flags = r.u8()?;
    if flags > 3 {
        return Err(PayloadError::Invalid(format!("image flags {flags}")));
    }
    let mut image = |bit: u8| -> Result<Option<(i64, Arc<Image>)>, PayloadError> {
        if flags & bit == 0 {
            return Ok(None);
        }
        let d = r.i64()?;
        Ok(Some((d, Arc::new(Image::read(&mut r)?))))
    };
    let rgb = image(1)?;
    let depth = image(2)?;
    dt.rgb = rgb.as_ref().map(|x| x.0);
    dt.depth = depth.as_ref().map(|x| x.0);
    r.finish()?;
    Ok(AlignedFrame {
        t,
        pose,
        grip,
        wrench_l,
        wrench_r,
        rgb: rgb.map(|x| x.1),
        depth: depth.map(|x| x.1),
        dt,
    })
}

/// Streaming writer; the CRC is accumulated as bytes go out, so an episode
/// can be finalized (possibly as aborted) at any point.
pub struct EpisodeWriter<W: Write> {
    out: W,
    crc: crc32fast::Hasher,
    count: u64,
}

impl<W: Write> EpisodeWriter<W> {
    pub fn new(out: W, header: &EpisodeHeader) -> Result<Self, EpisodeError> {
        let json = serde_json::to_vec(header).map_err(|e| EpisodeError::Header(e.to_string()))?;
        let mut w = EpisodeWriter {
            out,
            crc: crc32fast::Hasher::new(),
            count: 0,
        };
        w.put(&MAGIC)?;
        w.put(&VERSION.to_le_bytes())?;
        w.put(&(json.len() as u32).to_le_bytes())?;
        w.put(&json)?;
        Ok(w)
    }

    fn put(&mut self, b: &[u8]) -> Result<(), EpisodeError> {
        self.crc.update(b);
        self.out.write_all(b)?;
        Ok(())
    }

    pub fn frames_written(&self) -> u64 {
        self.count
    }

    pub fn write_frame(&mut self, f: &AlignedFrame) -> Result<(), EpisodeError> {
        let rec = encode_frame(f);
        self.put(&(rec.len() as u32).to_le_bytes())?;
        self.put(&rec)?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self, footer: &Footer) -> Result<W, EpisodeError> {
        let mut w = Writer::new();
        w.u32(FOOTER_SENTINEL)
            .u64(self.count)
            .u8(footer.aborted as u8)
            .u16(footer.drops.len() as u16);
        for (t, n) in &footer.drops {
            w.u16(t.id()).u64(*n);
        }
        self.put(&w.finish())?;
        let crc = self.crc.clone().finalize();
        self.out.write_all(&crc.to_le_bytes())?;
        self.out.flush()?;
        Ok(self.out)
    }
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], EpisodeError> {
        if self.b.len() - self.pos < n {
            return Err(EpisodeError::corrupt(self.pos, format!("truncated {what}")));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8, EpisodeError> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16, EpisodeError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self, what: &str) -> Result<u32, EpisodeError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64, EpisodeError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl Episode {
    pub fn new(header: EpisodeHeader) -> Self {
        Episode {
            header,
            frames: Vec::new(),
            footer: Footer::default(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = EpisodeWriter::new(Vec::new(), &self.header).expect("writing to memory");
        for f in &self.frames {
            w.write_frame(f).expect("writing to memory");
        }
        w.finish(&self.footer).expect("writing to memory")
    }

    /// Parses and validates a whole file. Nothing is returned unless every
    /// check passes.
    pub fn from_bytes(b: &[u8]) -> Result<Episode, EpisodeError> {
        if b.len() < 6 || b[..4] != MAGIC {
            return Err(EpisodeError::BadMagic);
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != VERSION {
            return Err(EpisodeError::Version(version));
        }
        if b.len() < 10 {
            return Err(EpisodeError::corrupt(b.len(), "file too short"));
        }
        let body = b.len() - 4;
        let stored = u32::from_le_bytes(b[body..].try_into().expect("4 bytes"));
        if crc32fast::hash(&b[..body]) != stored {
            return Err(EpisodeError::corrupt(body, "checksum mismatch"));
        }

        let mut c = Cursor { b: &b[..body], pos: 6 };
        let hlen = c.u32("header length")? as usize;
        if hlen > MAX_HEADER {
            return Err(EpisodeError::corrupt(c.pos - 4, format!("header length {hlen}")));
        }
        let hpos = c.pos;
        let header: EpisodeHeader = serde_json::from_slice(c.take(hlen, "header")?)
            .map_err(|e| EpisodeError::corrupt(hpos, format!("header: {e}")))?;

        let mut frames = Vec::new();
        loop {
            let at = c.pos;
            let len = c.u32("record length")?;
            if len == FOOTER_SENTINEL {
                break;
            }
            if len as usize > MAX_RECORD {
                return Err(EpisodeError::corrupt(at, format!("record length {len}")));
            }
            let rec = c.take(len as usize, "record")?;
            frames.push(decode_frame(rec).map_err(|e| EpisodeError::corrupt(at + 4, e.to_string()))?);
        }
        let at = c.pos;
        let count = c.u64("frame count")?;
        if count != frames.len() as u64 {
            return Err(EpisodeError::corrupt(at, format!("footer count {count}, found {}", frames.len())));
        }
        let at = c.pos;
        let aborted = match c.u8("abort flag")? {
            0 => false,
            1 => true,
            v => return Err(EpisodeError::corrupt(at, format!("abort flag {v}"))),
        };
        let n = c.u16("drop count")?;
        let mut drops = BTreeMap::new();
        for _ in 0..n {
            let topic = Topic(c.u16("drop topic")?);
            drops.insert(topic, c.u64("drop count")?);
        }
        if c.pos != body {
            return Err(EpisodeError::corrupt(c.pos, "trailing bytes after footer"));
        }
        Ok(Episode {
            header,
            frames,
            footer: Footer { aborted, drops },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), EpisodeError> {
        let wrap = |e: EpisodeError| EpisodeError::File {
            path: path.into(),
            source: Box::new(e),
        };
        let tmp = path.with_extension("partial");
        let f = BufWriter::new(File::create(&tmp).map_err(|e| wrap(e.into()))?);
        let mut w = EpisodeWriter::new(f, &self.header).map_err(wrap)?;
        for fr in &self.frames {
            w.write_frame(fr).map_err(wrap)?;
        }
        w.finish(&self.footer).map_err(wrap)?;
        std::fs::rename(&tmp, path).map_err(|e| wrap(e.into()))
    }

    pub fn load(path: &Path) -> Result<Episode, EpisodeError> {
        let bytes = std::fs::read(path).map_err(|e| EpisodeError::File {
            path: path.into(),
            source: Box::new(e.into()),
        })?;
        Episode::from_bytes(&bytes).map_err(|e| EpisodeError::File {
            path: path.into(),
            source: Box::new(e),
        })
    }

    pub fn duration_ns(&self) -> i64 {
        match (self.frames.first(), self.frames.last()) {
            (Some(a), Some(b)) => b.t.0 - a.t.0,
            _ => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nodes::{depth_frame, rgb_frame};
    use crate::pose::Pose6D;
    use crate::types::{GripState, Wrench6D};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(rng: &mut ChaCha8Rng, i: i64) -> AlignedFrame {
        let mut a = || rng.random_range(-1.0..1.0);
        let pose = Pose6D::from_arrays([a(), a(), a()], [a(), a(), a(), a() + 2.0]).unwrap();
        let grip = GripState {
            width: a(),
            setpoint: a(),
            motor_angle: a(),
            grip_force: a(),
            stalled: a() > 0.0,
        };
        let wl = Wrench6D::from_array([a(), a(), a(), a(), a(), a()]);
        let wr = Wrench6D::from_array([a(), a(), a(), a(), a(), a()]);
        let with_img = i % 3 == 0;
        AlignedFrame {
            t: Timestamp(i * 50_000_000),
            pose,
            grip,
            wrench_l: wl,
            wrench_r: wr,
            rgb: with_img.then(|| Arc::new(rgb_frame(i as u32))),
            depth: (i % 2 == 0).then(|| Arc::new(depth_frame(i as u32))),
            dt: FrameOffsets {
                pose: 0,
                grip: -3,
                wrench_l: 4,
                wrench_r: i,
                rgb: with_img.then_some(-7),
                depth: (i % 2 == 0).then_some(2),
            },
        }
    }

    fn sample(n: i64) -> Episode {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut e = Episode::new(EpisodeHeader {
            seed: 9,
            ..Default::default()
        });
        e.frames = (0..n).map(|i| random_frame(&mut rng, i)).collect();
        e.footer.drops.insert(Topic::GRIP_STATE, 2);
        e
    }

    #[test]
    fn empty_round_trip() {
        let e = Episode::new(EpisodeHeader::default());
        let back = Episode::from_bytes(&e.to_bytes()).unwrap();
        assert_eq!(back, e);
        assert!(back.frames.is_empty());
    }

    #[test]
    fn hundred_frames_bit_identical() {
        let e = sample(100);
        let bytes = e.to_bytes();
        let back = Episode::from_bytes(&bytes).unwrap();
        assert_eq!(back, e);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn every_bit_flip_rejected() {
        let mut e = sample(3);
        for f in &mut e.frames {
            (f.rgb, f.depth, f.dt.rgb, f.dt.depth) = (None, None, None, None);
        }
        let bytes = e.to_bytes();
        for i in 0..bytes.len() {
            for bit in 0..8 {
                let mut b = bytes.clone();
                b[i] ^= 1 << bit;
                assert!(Episode::from_bytes(&b).is_err(), "flip at byte {i} bit {bit} accepted");
            }
        }
    }

    #[test]
    fn random_flips_with_images_rejected() {
        let bytes = sample(4).to_bytes();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let mut b = bytes.clone();
            let i = rng.random_range(0..b.len());
            b[i] ^= 1 << rng.random_range(0..8);
            assert!(Episode::from_bytes(&b).is_err());
        }
    }

    #[test]
    fn truncation_and_version() {
        let bytes = sample(2).to_bytes();
        for n in [0, 5, 9, bytes.len() / 2, bytes.len() - 1] {
            assert!(Episode::from_bytes(&bytes[..n]).is_err());
        }
        let mut b = bytes.clone();
        b[4] = 9;
        assert!(matches!(Episode::from_bytes(&b), Err(EpisodeError::Version(9))));
        let mut b = bytes;
        let n = b.len();
        b[n - 1] ^= 0x80;
        match Episode::from_bytes(&b) {
            Err(EpisodeError::Corrupt { offset, .. }) => assert_eq!(offset, n - 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn save_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.mgcl");
        let mut e = sample(5);
        e.footer.aborted = true;
        e.save(&p).unwrap();
        assert_eq!(Episode::load(&p).unwrap(), e);
        assert!(Episode::load(&dir.path().join("missing")).is_err());
    }
}
