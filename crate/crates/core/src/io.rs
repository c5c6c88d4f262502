//! On-disk formats: the RVT raw video container and JSON dataset manifests.
//!
//! RVT layout (all integers little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `RVT1`                            |
//! | 4      | 1    | version (1)                             |
//! | 5      | 16   | frames, height, width, channels (u32)   |
//! | 21     | 1    | dtype: 0 = u8 (0..255), 1 = f32         |
//! | 22     | ...  | payload, frame-major, channels last     |
//!
//! Masks are single-channel u8 streams holding only 0 and 255.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::mask::Mask;
use crate::render::Category;
use crate::video::VideoTensor;

pub const RVT_MAGIC: &[u8; 4] = b"RVT1";
pub const RVT_VERSION: u8 = 1;
pub const RVT_HEADER_LEN: usize = 22;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic {0:02x?}, expected \"RVT1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported RVT version {0}")]
    BadVersion(u8),
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("header too short: {0} bytes")]
    ShortHeader(usize),
    #[error("zero extent in header {0:?}")]
    ZeroExtent([u32; 4]),
    #[error("payload size overflows for extents {0:?}")]
    Overflow([u32; 4]),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} unexpected trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("non-finite sample in float payload")]
    NonFinite,
    #[error("mask stream must have 1 channel and dtype 0, found {channels} channel(s), dtype {dtype}")]
    NotAMask { channels: u32, dtype: u8 },
    #[error("mask byte {0} is neither 0 nor 255")]
    MaskValue(u8),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl IoError {
    fn fs(path: &Path, source: std::io::Error) -> Self {
        IoError::Fs {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    U8 = 0,
    F32 = 1,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RvtHeader {
    pub version: u8,
    pub frames: u32,
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub dtype: Dtype,
}

impl RvtHeader {
    pub fn payload_len(&self) -> Result<usize, IoError> {
        let ext = [self.frames, self.height, self.width, self.channels];
        ext.iter()
            .try_fold(self.dtype.size(), |acc, &e| acc.checked_mul(e as usize))
            .ok_or(IoError::Overflow(ext))
    }

    pub fn encode(&self) -> [u8; RVT_HEADER_LEN] {
        let mut h = [0u8; RVT_HEADER_LEN];
        h[..4].copy_from_slice(RVT_MAGIC);
        h[4] = self.version;
        for (i, v) in [self.frames, self.height, self.width, self.channels].iter().enumerate() {
            h[5 + 4 * i..9 + 4 * i].copy_from_slice(&v.to_le_bytes());
        }
        h[21] = self.dtype as u8;
        h
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, IoError> {
        if bytes.len() < RVT_HEADER_LEN {
            if bytes.len() >= 4 && &bytes[..4] != RVT_MAGIC {
                return Err(IoError::BadMagic(bytes[..4].try_into().expect("4 bytes")));
            }
            return Err(IoError::ShortHeader(bytes.len()));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &magic != RVT_MAGIC {
            return Err(IoError::BadMagic(magic));
        }
        if bytes[4] != RVT_VERSION {
            return Err(IoError::BadVersion(bytes[4]));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().expect("4 bytes"));
        let ext = [u(0), u(1), u(2), u(3)];
        if ext.contains(&0) {
            return Err(IoError::ZeroExtent(ext));
        }
        let dtype = match bytes[21] {
            0 => Dtype::U8,
            1 => Dtype::F32,
            d => return Err(IoError::BadDtype(d)),
        };
        Ok(Self {
            version: bytes[4],
            frames: ext[0],
            height: ext[1],
            width: ext[2],
            channels: ext[3],
            dtype,
        })
    }
}

fn parse_container(bytes: &[u8]) -> Result<(RvtHeader, &[u8]), IoError> {
    let header = RvtHeader::parse(bytes)?;
    let expected = header.payload_len()?;
    let found = bytes.len() - RVT_HEADER_LEN;
    if found < expected {
        return Err(IoError::Truncated { expected, found });
    }
    if found > expected {
        return Err(IoError::TrailingBytes(found - expected));
    }
    Ok((header, &bytes[RVT_HEADER_LEN..]))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_video(video: &VideoTensor, dtype: Dtype) -> Vec<u8> {
    let [f, h, w, c] = video.dims();
    let header = RvtHeader {
        version: RVT_VERSION,
        frames: f as u32,
        height: h as u32,
        width: w as u32,
        channels: c as u32,
        dtype,
    };
    let mut out = Vec::with_capacity(RVT_HEADER_LEN + video.data().len() * dtype.size());
    out.extend_from_slice(&header.encode());
    match dtype {
        Dtype::U8 => out.extend(video.data().iter().map(|&v| to_u8(v))),
        Dtype::F32 => video.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

pub fn decode_video(bytes: &[u8]) -> Result<VideoTensor, IoError> {
    let (h, payload) = parse_container(bytes)?;
    let data: Vec<f32> = match h.dtype {
        Dtype::U8 => payload.iter().map(|&b| b as f32 / 255.0).collect(),
        Dtype::F32 => {
            let v: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(IoError::NonFinite);
            }
            v
        }
    };
    Ok(VideoTensor::new(
        h.frames as usize,
        h.height as usize,
        h.width as usize,
        h.channels as usize,
        data,
    )
    .expect("extents validated by header"))
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let [f, h, w] = mask.dims();
    let header = RvtHeader {
        version: RVT_VERSION,
        frames: f as u32,
        height: h as u32,
        width: w as u32,
        channels: 1,
        dtype: Dtype::U8,
    };
    let mut out = Vec::with_capacity(RVT_HEADER_LEN + mask.len());
    out.extend_from_slice(&header.encode());
    out.extend(mask.bits().iter().map(|&b| if b != 0 { 255 } else { 0 }));
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<Mask, IoError> {
    let (h, payload) = parse_container(bytes)?;
    if h.channels != 1 || h.dtype != Dtype::U8 {
        return Err(IoError::NotAMask {
            channels: h.channels,
            dtype: h.dtype as u8,
        });
    }
    let mut bits = Vec::with_capacity(payload.len());
    for &b in payload {
        match b {
            0 => bits.push(false),
            255 => bits.push(true),
            other => return Err(IoError::MaskValue(other)),
        }
    }
    Ok(Mask::from_bits(h.frames as usize, h.height as usize, h.width as usize, bits))
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| IoError::fs(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| IoError::fs(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| IoError::fs(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|e| IoError::fs(path, e))
}

pub fn write_video(path: &Path, video: &VideoTensor, dtype: Dtype) -> Result<(), IoError> {
    write_atomic(path, &encode_video(video, dtype))
}

pub fn read_video(path: &Path) -> Result<VideoTensor, IoError> {
    decode_video(&read_bytes(path)?)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<(), IoError> {
    write_atomic(path, &encode_mask(mask))
}

pub fn read_mask(path: &Path) -> Result<Mask, IoError> {
    decode_mask(&read_bytes(path)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub original: String,
    pub edited: String,
    pub mask: String,
    pub category: Category,
    pub scene_seed: u64,
}

/// Reproducibility record appended by every pipeline run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub runs: Vec<RunRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            entries: Vec::new(),
            runs: Vec::new(),
        }
    }
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, IoError> {
        let m: Manifest = serde_json::from_slice(&read_bytes(path)?)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        write_atomic(path, &json)
    }

    pub fn entries_for(&self, category: Category) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.category == category)
    }
}
