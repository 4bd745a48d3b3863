//! Image and raw tensor files.

use std::path::Path;

use thiserror::Error;
use yk_core::tensor::Tensor4;

pub const RAW_MAGIC: &[u8; 4] = b"YTEN";
pub const RAW_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("unsupported image format (magic {0:?})")]
    UnsupportedMagic(String),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("payload size mismatch: expected {expected} bytes, got {found}")]
    Payload { expected: usize, found: usize },
    #[error("unsupported tensor shape {0:?}, expected (3, h, w) or (1, 3, h, w)")]
    Shape(Vec<u64>),
}

pub type Result<T> = std::result::Result<T, IoError>;

/// `YTEN` file contents: dims and row-major values.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensorFile {
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl RawTensorFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(RAW_MAGIC);
        out.extend_from_slice(&RAW_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let take = |at: usize, n: usize| {
            bytes
                .get(at..at + n)
                .ok_or_else(|| IoError::CorruptHeader(format!("file ends at byte {} inside the header", bytes.len())))
        };
        if take(0, 4)? != RAW_MAGIC {
            return Err(IoError::UnsupportedMagic(
                String::from_utf8_lossy(&bytes[..4]).into_owned(),
            ));
        }
        let version = u32::from_le_bytes(take(4, 4)?.try_into().unwrap());
        if version != RAW_VERSION {
            return Err(IoError::CorruptHeader(format!("unsupported version {version}")));
        }
        let ndim = u32::from_le_bytes(take(8, 4)?.try_into().unwrap()) as usize;
        if ndim > 8 {
            return Err(IoError::CorruptHeader(format!("{ndim} dimensions")));
        }
        let dims: Vec<u64> = (0..ndim)
            .map(|i| take(12 + 8 * i, 8).map(|b| u64::from_le_bytes(b.try_into().unwrap())))
            .collect::<Result<_>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(usize::try_from(d).ok()?))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| IoError::CorruptHeader(format!("dims {dims:?} overflow")))?;
        let payload = &bytes[12 + 8 * ndim..];
        if payload.len() != count {
            return Err(IoError::Payload {
                expected: count,
                found: payload.len(),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dims, data })
    }
}

fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(IoError::CorruptHeader("PPM header ends early".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

fn ppm_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = ppm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&v: &usize| v > 0)
        .ok_or_else(|| IoError::CorruptHeader(format!("bad PPM {what} {:?}", String::from_utf8_lossy(tok))))
}

/// Binary PPM with maxval 255, scaled to `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor4> {
    if !bytes.starts_with(b"P6") {
        return Err(IoError::UnsupportedMagic(
            String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned(),
        ));
    }
    let mut pos = 2;
    let w = ppm_number(bytes, &mut pos, "width")?;
    let h = ppm_number(bytes, &mut pos, "height")?;
    let maxval = ppm_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(IoError::CorruptHeader(format!(
            "maxval {maxval}, only 255 is supported"
        )));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(IoError::CorruptHeader("missing separator before pixel data".into()));
    }
    let pixels = &bytes[pos + 1..];
    let expected = 3 * w * h;
    if pixels.len() != expected {
        return Err(IoError::Payload {
            expected,
            found: pixels.len(),
        });
    }
    Ok(Tensor4::from_fn([1, 3, h, w], |[_, c, y, x]| {
        pixels[3 * (y * w + x) + c] as f32 / 255.0
    }))
}

pub fn encode_ppm(img: &Tensor4) -> Vec<u8> {
    let [_, _, h, w] = img.shape();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((img.at([0, c, y, x]).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Decodes a PPM or `YTEN` buffer into a `(1, 3, h, w)` RGB tensor.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor4> {
    if bytes.starts_with(RAW_MAGIC) {
        let raw = RawTensorFile::decode(bytes)?;
        let shape = match raw.dims[..] {
            [3, h, w] | [1, 3, h, w] if h > 0 && w > 0 => [1, 3, h as usize, w as usize],
            _ => return Err(IoError::Shape(raw.dims)),
        };
        Ok(Tensor4::new(shape, raw.data).expect("payload length checked"))
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else {
        Err(IoError::UnsupportedMagic(
            String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        ))
    }
}

pub fn load_image(path: &Path) -> Result<Tensor4> {
    let bytes = std::fs::read(path).map_err(|source| IoError::Read {
        path: path.display().to_string(),
        source,
    })?;
    decode_image(&bytes)
}
