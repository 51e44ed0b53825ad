//! NetPBM reading and writing (P1 to P6, maxval up to 65535).
//!
//! Samples are normalised to `[0, 1]` by dividing by maxval; [`Pnm`] keeps
//! the raw integer samples so that a read followed by a write at the same
//! depth reproduces the payload exactly.

use std::path::Path;

use super::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PnmKind {
    /// P1 / P4.
    Bitmap,
    /// P2 / P5.
    Gray,
    /// P3 / P6.
    Rgb,
}

impl PnmKind {
    pub fn channels(self) -> usize {
        match self {
            PnmKind::Rgb => 3,
            _ => 1,
        }
    }
}

/// A decoded NetPBM image with raw integer samples.
///
/// Bitmap samples follow the format's convention: `1` is black (ink). They
/// are exposed as-is; [`Pnm::normalized`] maps ink to `1.0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub kind: PnmKind,
    pub width: usize,
    pub height: usize,
    /// 1 for bitmaps.
    pub maxval: u16,
    /// Interleaved samples, `height * width * channels`.
    pub samples: Vec<u16>,
}

impl Pnm {
    pub fn normalized(&self) -> Vec<f32> {
        let m = f32::from(self.maxval);
        self.samples.iter().map(|&s| f32::from(s) / m).collect()
    }

    /// Quantises `[0, 1]` values (clamped) to `maxval` levels.
    pub fn from_normalized(
        kind: PnmKind,
        width: usize,
        height: usize,
        maxval: u16,
        values: &[f32],
    ) -> Result<Self, DataError> {
        let maxval = if kind == PnmKind::Bitmap { 1 } else { maxval };
        if maxval == 0 || values.len() != width * height * kind.channels() {
            return Err(DataError::Format(format!(
                "{} samples for {width}x{height}x{}",
                values.len(),
                kind.channels()
            )));
        }
        let m = f32::from(maxval);
        let samples = values
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * m).round() as u16)
            .collect();
        Ok(Self {
            kind,
            width,
            height,
            maxval,
            samples,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n' && c != b'\r') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32, DataError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(DataError::Format(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| DataError::Format(format!("{what} out of range")))
    }

    /// A single bit in plain P1 data, where digits need not be separated.
    fn bit(&mut self) -> Result<u16, DataError> {
        self.skip_space_and_comments();
        match self.bytes.get(self.pos) {
            Some(b'0') => {
                self.pos += 1;
                Ok(0)
            }
            Some(b'1') => {
                self.pos += 1;
                Ok(1)
            }
            Some(_) => Err(DataError::Format("bitmap samples must be 0 or 1".into())),
            None => Err(DataError::Truncated),
        }
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Pnm, DataError> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(DataError::UnsupportedMagic(
            String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned(),
        ));
    }
    let (kind, ascii) = match bytes[1] {
        b'1' => (PnmKind::Bitmap, true),
        b'2' => (PnmKind::Gray, true),
        b'3' => (PnmKind::Rgb, true),
        b'4' => (PnmKind::Bitmap, false),
        b'5' => (PnmKind::Gray, false),
        b'6' => (PnmKind::Rgb, false),
        other => return Err(DataError::UnsupportedMagic(format!("P{}", other as char))),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    if width == 0 || height == 0 {
        return Err(DataError::Format("zero image dimension".into()));
    }
    let maxval = if kind == PnmKind::Bitmap {
        1
    } else {
        let m = cur.number("maxval")?;
        if m == 0 || m > 65535 {
            return Err(DataError::Format(format!("maxval {m} outside 1..=65535")));
        }
        m as u16
    };
    let count = width * height * kind.channels();
    let mut samples = Vec::with_capacity(count);
    if ascii {
        for _ in 0..count {
            let v = if kind == PnmKind::Bitmap {
                cur.bit()?
            } else {
                let v = cur.number("sample").map_err(|e| match cur.pos >= bytes.len() {
                    true => DataError::Truncated,
                    false => e,
                })?;
                if v > u32::from(maxval) {
                    return Err(DataError::Format(format!("sample {v} exceeds maxval")));
                }
                v as u16
            };
            samples.push(v);
        }
    } else {
        // Exactly one whitespace byte separates the header from raster data.
        if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(DataError::Format("missing whitespace after header".into()));
        }
        let data = &bytes[cur.pos + 1..];
        match kind {
            PnmKind::Bitmap => {
                let stride = width.div_ceil(8);
                if data.len() < stride * height {
                    return Err(DataError::Truncated);
                }
                for y in 0..height {
                    for x in 0..width {
                        let byte = data[y * stride + x / 8];
                        samples.push(u16::from((byte >> (7 - x % 8)) & 1));
                    }
                }
            }
            _ if maxval < 256 => {
                if data.len() < count {
                    return Err(DataError::Truncated);
                }
                for &b in &data[..count] {
                    if u16::from(b) > maxval {
                        return Err(DataError::Format(format!("sample {b} exceeds maxval")));
                    }
                    samples.push(u16::from(b));
                }
            }
            _ => {
                if data.len() < 2 * count {
                    return Err(DataError::Truncated);
                }
                for c in data[..2 * count].chunks_exact(2) {
                    let v = u16::from_be_bytes([c[0], c[1]]);
                    if v > maxval {
                        return Err(DataError::Format(format!("sample {v} exceeds maxval")));
                    }
                    samples.push(v);
                }
            }
        }
    }
    Ok(Pnm {
        kind,
        width,
        height,
        maxval,
        samples,
    })
}

/// Encodes in the binary variant (P4, P5 or P6).
pub fn encode_pnm(img: &Pnm) -> Result<Vec<u8>, DataError> {
    if img.samples.len() != img.width * img.height * img.kind.channels() {
        return Err(DataError::Format("sample count does not match dimensions".into()));
    }
    let magic = match img.kind {
        PnmKind::Bitmap => "P4",
        PnmKind::Gray => "P5",
        PnmKind::Rgb => "P6",
    };
    let mut out = match img.kind {
        PnmKind::Bitmap => format!("{magic}\n{} {}\n", img.width, img.height),
        _ => format!("{magic}\n{} {}\n{}\n", img.width, img.height, img.maxval),
    }
    .into_bytes();
    match img.kind {
        PnmKind::Bitmap => {
            let stride = img.width.div_ceil(8);
            for y in 0..img.height {
                let mut row = vec![0u8; stride];
                for x in 0..img.width {
                    if img.samples[y * img.width + x] != 0 {
                        row[x / 8] |= 0x80 >> (x % 8);
                    }
                }
                out.extend_from_slice(&row);
            }
        }
        _ if img.maxval < 256 => out.extend(img.samples.iter().map(|&s| s as u8)),
        _ => {
            for s in &img.samples {
                out.extend_from_slice(&s.to_be_bytes());
            }
        }
    }
    Ok(out)
}

pub fn read_pnm(path: impl AsRef<Path>) -> crate::Result<Pnm> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| DataError::InFile(path.display().to_string(), Box::new(e)).into())
}

pub fn write_pnm(img: &Pnm, path: impl AsRef<Path>) -> crate::Result<()> {
    let path = path.as_ref();
    let bytes = encode_pnm(img)?;
    std::fs::write(path, bytes).map_err(|e| crate::Error::io(path, e))
}
