//! Raster masks, binary PGM (`P5`, maxval 255) I/O and pixel set operations.
//!
//! Gray values live in `[0, 1]`; a stored byte `b` maps to `b / 255` and a
//! value `v` is stored as `floor(v * 255 + 0.5)`, so binary masks round-trip
//! exactly (0 <-> 0, 1 <-> 255).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Threshold used when ingesting stored binary masks: byte `b` is foreground
/// iff `b > 128`.
pub const INGEST_THRESHOLD: f64 = 128.0 / 255.0;

/// A row-major map of unit-interval intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayMask {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

/// A row-major map over `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    values: Vec<bool>,
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument(format!(
            "mask dimensions must be positive, got {width}x{height}"
        )));
    }
    if width.checked_mul(height) != Some(len) {
        return Err(Error::InvalidArgument(format!(
            "{width}x{height} mask needs {} values, got {len}",
            width.saturating_mul(height)
        )));
    }
    Ok(())
}

impl GrayMask {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(width, height, values.len())?;
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidArgument(format!(
                "value {v} at index {i} is outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Value 1 iff the input value is strictly greater than `threshold`.
    pub fn binarize(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| v > threshold).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.values.iter().map(|&v| quantize(v)).collect()
    }
}

/// `floor(v * 255 + 0.5)`, saturated to the byte range.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, values: Vec<bool>) -> Result<Self> {
        check_dims(width, height, values.len())?;
        Ok(Self {
            width,
            height,
            values,
        })
    }

    /// Builds a mask from 0/1 bytes; any nonzero byte is foreground.
    pub fn from_bits(width: usize, height: usize, bits: &[u8]) -> Result<Self> {
        Self::new(width, height, bits.iter().map(|&b| b != 0).collect())
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![false; width * height])
    }

    pub fn ones(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![true; width * height])
    }

    /// Axis-aligned rectangle covering columns `x0..x1` and rows `y0..y1`.
    pub fn rect(width: usize, height: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        let mut m = Self::zeros(width, height)?;
        for y in y0..y1.min(height) {
            for x in x0..x1.min(width) {
                m.values[y * width + x] = true;
            }
        }
        Ok(m)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.values[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn is_all_zero(&self) -> bool {
        !self.values.iter().any(|&v| v)
    }

    pub fn is_all_one(&self) -> bool {
        self.values.iter().all(|&v| v)
    }

    pub fn to_gray(&self) -> GrayMask {
        GrayMask {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        }
    }
}

impl From<&BinaryMask> for GrayMask {
    fn from(m: &BinaryMask) -> Self {
        m.to_gray()
    }
}

pub(crate) fn ensure_same(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: a,
            found: b,
        });
    }
    Ok(())
}

/// Pixel-wise logical OR.
pub fn union(masks: &[BinaryMask]) -> Result<BinaryMask> {
    let (first, rest) = masks.split_first().ok_or(Error::Empty("union of zero masks"))?;
    let mut out = first.clone();
    for m in rest {
        ensure_same(out.dims(), m.dims())?;
        for (o, &v) in out.values.iter_mut().zip(&m.values) {
            *o |= v;
        }
    }
    Ok(out)
}

/// Intersection over union; 1.0 when both masks are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    ensure_same(a.dims(), b.dims())?;
    let (mut inter, mut uni) = (0usize, 0usize);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        inter += (x && y) as usize;
        uni += (x || y) as usize;
    }
    if uni == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / uni as f64)
}

/// Parses an in-memory binary PGM. `origin` is only used in diagnostics.
pub fn decode_pgm(bytes: &[u8], origin: &Path) -> Result<GrayMask> {
    let err = |offset: usize, message: &str| Error::Pgm {
        path: origin.to_path_buf(),
        offset,
        message: message.to_string(),
    };
    if bytes.len() < 2 {
        return Err(err(0, "truncated header"));
    }
    if &bytes[..2] != b"P5" {
        return Err(err(0, "unsupported format (expected binary PGM magic P5)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // whitespace and '#' comments between header fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(err(pos, "truncated header")),
            }
        }
        if k == 0 && pos == 2 {
            return Err(err(pos, "malformed header: missing whitespace after magic"));
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, "malformed header: expected decimal number"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| err(start, "malformed header: number out of range"))?;
    }
    let [width, height, maxval] = fields;
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err(pos, "malformed header: expected single whitespace before raster")),
    }
    if maxval != 255 {
        return Err(err(pos, "unsupported maxval (expected 255)"));
    }
    if width == 0 || height == 0 {
        return Err(err(pos, "malformed header: zero dimension"));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| err(pos, "malformed header: dimensions overflow"))?;
    if bytes.len() < pos + n {
        return Err(err(bytes.len(), "truncated payload"));
    }
    let values = bytes[pos..pos + n].iter().map(|&b| b as f64 / 255.0).collect();
    GrayMask::new(width, height, values)
}

pub fn encode_pgm(mask: &GrayMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.to_bytes());
    out
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<GrayMask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

pub fn save_mask(mask: &GrayMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(mask)).map_err(|e| Error::io(path, e))
}

/// Loads a stored binary mask, thresholding at [`INGEST_THRESHOLD`].
pub fn load_binary_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    Ok(load_mask(path)?.binarize(INGEST_THRESHOLD))
}

pub fn save_binary_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    save_mask(&mask.to_gray(), path)
}
