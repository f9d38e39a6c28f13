//! Binary PNM images and FSAL1 float grids.
//!
//! Both formats are tiny and fully specified here so that files written by
//! one tool can be compared byte-for-byte with files written by another:
//!
//! * PNM: `P5` (gray) or `P6` (RGB), binary, maxval ≤ 255. Output is always
//!   the canonical `P5\n<w> <h>\n255\n` header followed by raw samples.
//! * FSAL1: ASCII `FSAL1 <w> <h>\n` followed by `w*h` little-endian `f32`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MediaError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported maxval {0} (must be 1..=255)")]
    UnsupportedMaxval(u32),
    #[error("bad magic: {0}")]
    BadMagic(String),
    #[error("size mismatch: header says {expected} bytes of payload, found {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("sample {value} exceeds maxval {maxval}")]
    SampleOutOfRange { value: u8, maxval: u32 },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("invalid dimensions {width}x{height}x{channels}")]
    InvalidDimensions {
        width: usize,
        height: usize,
        channels: usize,
    },
}

/// Row-major 8-bit image with one (gray) or three (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<u8>,
    ) -> Result<Self, MediaError> {
        let bad = || MediaError::InvalidDimensions {
            width,
            height,
            channels,
        };
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(bad());
        }
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(bad)?;
        if data.len() != expected {
            return Err(MediaError::SizeMismatch {
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self, MediaError> {
        let len = width.saturating_mul(height).saturating_mul(channels);
        Self::new(width, height, channels, vec![value; len])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// Samples of the pixel at `(x, y)`.
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }
}

/// Row-major grid of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatGrid {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl FloatGrid {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, MediaError> {
        if width == 0 || height == 0 {
            return Err(MediaError::InvalidDimensions {
                width,
                height,
                channels: 1,
            });
        }
        let expected = width
            .checked_mul(height)
            .ok_or(MediaError::InvalidDimensions {
                width,
                height,
                channels: 1,
            })?;
        if data.len() != expected {
            return Err(MediaError::SizeMismatch {
                expected,
                found: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(MediaError::NonFinite(i));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self, MediaError> {
        Self::new(width, height, vec![0.0; width.saturating_mul(height)])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32, MediaError> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(MediaError::MalformedHeader(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse::<u32>().ok())
            .ok_or_else(|| MediaError::MalformedHeader(format!("{what} out of range")))
    }
}

/// Decode a binary P5/P6 file. Samples are rescaled to 0..=255 when the
/// file's maxval is below 255.
pub fn read_pnm(bytes: &[u8]) -> Result<ImageBuffer, MediaError> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => {
            let shown = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
            return Err(MediaError::BadMagic(shown));
        }
    };
    let mut cur = HeaderCursor { bytes, pos: 2 };
    if !bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(MediaError::MalformedHeader("missing separator after magic".into()));
    }
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(MediaError::MalformedHeader(format!(
            "zero dimension {width}x{height}"
        )));
    }
    if maxval == 0 || maxval > 255 {
        return Err(MediaError::UnsupportedMaxval(maxval));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => {
            return Err(MediaError::MalformedHeader(
                "missing single whitespace after maxval".into(),
            ))
        }
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| MediaError::MalformedHeader("dimensions overflow".into()))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(MediaError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(MediaError::SizeMismatch {
            expected,
            found: payload.len(),
        });
    }
    let mut data = payload.to_vec();
    if maxval < 255 {
        for v in data.iter_mut() {
            if u32::from(*v) > maxval {
                return Err(MediaError::SampleOutOfRange { value: *v, maxval });
            }
            *v = ((u32::from(*v) * 255 + maxval / 2) / maxval) as u8;
        }
    }
    ImageBuffer::new(width, height, channels, data)
}

pub fn write_pnm(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let header = format!("{magic}\n{} {}\n255\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.data.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&img.data);
    out
}

const FSAL_MAGIC: &str = "FSAL1";

pub fn read_float_grid(bytes: &[u8]) -> Result<FloatGrid, MediaError> {
    let newline = bytes
        .iter()
        .take(64)
        .position(|&b| b == b'\n')
        .ok_or_else(|| MediaError::BadMagic("no FSAL1 header line".into()))?;
    let line = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| MediaError::BadMagic("header is not ASCII".into()))?;
    let mut parts = line.split(' ');
    if parts.next() != Some(FSAL_MAGIC) {
        return Err(MediaError::BadMagic(line.chars().take(16).collect()));
    }
    let mut dim = |what: &str| -> Result<usize, MediaError> {
        parts
            .next()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| MediaError::MalformedHeader(format!("bad {what} in FSAL1 header")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    if parts.next().is_some() {
        return Err(MediaError::MalformedHeader("trailing FSAL1 header fields".into()));
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| MediaError::MalformedHeader("dimensions overflow".into()))?;
    let payload = &bytes[newline + 1..];
    if payload.len() != expected {
        return Err(MediaError::SizeMismatch {
            expected,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FloatGrid::new(width, height, data)
}

/// Encode a grid. Rejects non-finite values even though [`FloatGrid`]
/// construction already forbids them.
pub fn write_float_grid(grid: &FloatGrid) -> Result<Vec<u8>, MediaError> {
    if let Some(i) = grid.data.iter().position(|v| !v.is_finite()) {
        return Err(MediaError::NonFinite(i));
    }
    let header = format!("{FSAL_MAGIC} {} {}\n", grid.width, grid.height);
    let mut out = Vec::with_capacity(header.len() + grid.data.len() * 4);
    out.extend_from_slice(header.as_bytes());
    for v in &grid.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}
