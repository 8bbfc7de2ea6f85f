//! Binary container formats and export helpers.
//!
//! All containers share one layout philosophy: a 4-byte ASCII magic, little
//! endian `u32` dimensions, then a flat row-major payload. Decoders validate
//! every length with checked arithmetic before allocating, reject non-finite
//! payload values, and reject trailing bytes, so `encode(decode(x)) == x`
//! holds for every accepted input.
//!
//! * `SGM1` — sinogram, `f32` payload, decodes to [`Sinogram`]
//! * `IMG1` — image or raster, `f32` payload, decodes to [`Grid2`]
//! * `MSK1` — defect mask, `u8` payload in {0, 1} (1 = reliable), constant
//!   within each column, decodes to [`DefectMask`]
//! * `CKPT` — named `f64` parameter sections, decodes to [`Checkpoint`]
//!
//! 16-bit PGM export is write-only and intended for quick visual inspection.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid2;
use crate::sinogram::{DefectMask, Sinogram};

const SGM_MAGIC: &[u8; 4] = b"SGM1";
const IMG_MAGIC: &[u8; 4] = b"IMG1";
const MSK_MAGIC: &[u8; 4] = b"MSK1";
const CKPT_MAGIC: &[u8; 4] = b"CKPT";

/// Supported checkpoint container version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named parameter arrays in a fixed order, as stored in a `CKPT` container.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub sections: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Option<&[f64]> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Cursor over an input buffer with checked reads.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(fmt_err(format!(
                "truncated {what}: need {n} bytes, have {}",
                self.remaining()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expect {
            return Err(fmt_err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expect)
            )));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(fmt_err(format!("{} trailing bytes after payload", self.remaining())));
        }
        Ok(())
    }
}

/// Validated payload element count for `rows x cols` entries of `elem_size`
/// bytes, checked against the remaining input before any allocation.
fn payload_len(r: &Reader, rows: u32, cols: u32, elem_size: usize, what: &str) -> Result<usize> {
    let count = (rows as usize)
        .checked_mul(cols as usize)
        .ok_or_else(|| fmt_err(format!("{what} dimensions {rows}x{cols} overflow")))?;
    let bytes = count
        .checked_mul(elem_size)
        .ok_or_else(|| fmt_err(format!("{what} payload size overflows")))?;
    if r.remaining() < bytes {
        return Err(fmt_err(format!(
            "truncated {what} payload: need {bytes} bytes, have {}",
            r.remaining()
        )));
    }
    Ok(count)
}

fn decode_f32_grid(bytes: &[u8], magic: &[u8; 4], what: &str) -> Result<Grid2> {
    let mut r = Reader::new(bytes);
    r.magic(magic)?;
    let rows = r.u32("row count")?;
    let cols = r.u32("column count")?;
    if rows == 0 || cols == 0 {
        return Err(fmt_err(format!("{what} dimensions {rows}x{cols} contain zero")));
    }
    let count = payload_len(&r, rows, cols, 4, what)?;
    let raw = r.take(count * 4, what)?;
    r.finish()?;
    let mut data = Vec::with_capacity(count);
    for (k, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(fmt_err(format!("{what} value {k} is not finite")));
        }
        data.push(v as f64);
    }
    Grid2::new(rows as usize, cols as usize, data)
        .map_err(|e| fmt_err(format!("{what}: {e}")))
}

fn encode_f32_grid(g: &Grid2, magic: &[u8; 4]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + g.len() * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(g.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(g.cols() as u32).to_le_bytes());
    for &v in g.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parses an `SGM1` container into a validated sinogram.
pub fn decode_sinogram(bytes: &[u8]) -> Result<Sinogram> {
    let grid = decode_f32_grid(bytes, SGM_MAGIC, "sinogram")?;
    Sinogram::new(grid).map_err(|e| fmt_err(format!("sinogram: {e}")))
}

pub fn encode_sinogram(s: &Sinogram) -> Vec<u8> {
    encode_f32_grid(s.grid(), SGM_MAGIC)
}

/// Parses an `IMG1` container into a grid.
pub fn decode_image(bytes: &[u8]) -> Result<Grid2> {
    decode_f32_grid(bytes, IMG_MAGIC, "image")
}

pub fn encode_image(g: &Grid2) -> Vec<u8> {
    encode_f32_grid(g, IMG_MAGIC)
}

/// Parses an `MSK1` container. Mask bytes must be 0 or 1 (1 = reliable) and
/// constant within each column, since detector defects persist across views.
pub fn decode_mask(bytes: &[u8]) -> Result<DefectMask> {
    let mut r = Reader::new(bytes);
    r.magic(MSK_MAGIC)?;
    let rows = r.u32("row count")?;
    let cols = r.u32("column count")?;
    if rows == 0 || cols == 0 {
        return Err(fmt_err(format!("mask dimensions {rows}x{cols} contain zero")));
    }
    let count = payload_len(&r, rows, cols, 1, "mask")?;
    let raw = r.take(count, "mask")?;
    r.finish()?;
    let cols = cols as usize;
    let mut keep = vec![false; cols];
    for (k, &b) in raw.iter().enumerate() {
        let flag = match b {
            0 => false,
            1 => true,
            other => return Err(fmt_err(format!("mask byte {k} is {other}, expected 0 or 1"))),
        };
        let (i, j) = (k / cols, k % cols);
        if i == 0 {
            keep[j] = flag;
        } else if keep[j] != flag {
            return Err(fmt_err(format!("mask column {j} is not constant across rows")));
        }
    }
    DefectMask::new(rows as usize, keep).map_err(|e| fmt_err(format!("mask: {e}")))
}

pub fn encode_mask(m: &DefectMask) -> Vec<u8> {
    let (rows, cols) = (m.n_angles(), m.n_detectors());
    let mut out = Vec::with_capacity(12 + rows * cols);
    out.extend_from_slice(MSK_MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for _ in 0..rows {
        for j in 0..cols {
            out.push(u8::from(m.is_kept(j)));
        }
    }
    out
}

/// Parses a `CKPT` container holding named `f64` parameter sections.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.magic(CKPT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(fmt_err(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let n_sections = r.u32("section count")?;
    let mut sections: Vec<(String, Vec<f64>)> = Vec::new();
    for s in 0..n_sections {
        let name_len = r.u32("section name length")? as usize;
        if name_len == 0 {
            return Err(fmt_err(format!("section {s} has an empty name")));
        }
        let name_bytes = r.take(name_len, "section name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| fmt_err(format!("section {s} name is not valid UTF-8")))?
            .to_owned();
        if sections.iter().any(|(n, _)| *n == name) {
            return Err(fmt_err(format!("duplicate section name {name:?}")));
        }
        let count = r.u32("section value count")? as usize;
        let bytes_needed = count
            .checked_mul(8)
            .ok_or_else(|| fmt_err("section payload size overflows"))?;
        let raw = r.take(bytes_needed, "section values")?;
        let mut values = Vec::with_capacity(count);
        for (k, chunk) in raw.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(fmt_err(format!("section {name:?} value {k} is not finite")));
            }
            values.push(v);
        }
        sections.push((name, values));
    }
    r.finish()?;
    Ok(Checkpoint { version, sections })
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&c.version.to_le_bytes());
    out.extend_from_slice(&(c.sections.len() as u32).to_le_bytes());
    for (name, values) in &c.sections {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u32).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Renders a grid to a 16-bit binary PGM (`P5`, big-endian samples), mapping
/// `[lo, hi]` linearly onto `[0, 65535]` with clamping.
pub fn encode_pgm16(g: &Grid2, lo: f64, hi: f64) -> Result<Vec<u8>> {
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::Config(format!("pgm range [{lo}, {hi}] is not an increasing interval")));
    }
    if !g.all_finite() {
        return Err(Error::NumericalFault("pgm source contains non-finite values".into()));
    }
    let mut out = format!("P5\n{} {}\n65535\n", g.cols(), g.rows()).into_bytes();
    let span = hi - lo;
    for &v in g.data() {
        let t = ((v.clamp(lo, hi) - lo) / span * 65535.0).round() as u16;
        out.extend_from_slice(&t.to_be_bytes());
    }
    Ok(out)
}

pub fn read_sinogram(path: impl AsRef<Path>) -> Result<Sinogram> {
    decode_sinogram(&std::fs::read(path)?)
}

pub fn write_sinogram(path: impl AsRef<Path>, s: &Sinogram) -> Result<()> {
    Ok(std::fs::write(path, encode_sinogram(s))?)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Grid2> {
    decode_image(&std::fs::read(path)?)
}

pub fn write_image(path: impl AsRef<Path>, g: &Grid2) -> Result<()> {
    Ok(std::fs::write(path, encode_image(g))?)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<DefectMask> {
    decode_mask(&std::fs::read(path)?)
}

pub fn write_mask(path: impl AsRef<Path>, m: &DefectMask) -> Result<()> {
    Ok(std::fs::write(path, encode_mask(m))?)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

pub fn write_checkpoint(path: impl AsRef<Path>, c: &Checkpoint) -> Result<()> {
    Ok(std::fs::write(path, encode_checkpoint(c))?)
}

/// Reads a grid from either an `SGM1` or an `IMG1` container, sniffing the
/// magic. Useful for tools that accept both sinograms and images.
pub fn read_any_grid(path: impl AsRef<Path>) -> Result<Grid2> {
    let bytes = std::fs::read(path)?;
    match bytes.get(0..4) {
        Some(m) if m == SGM_MAGIC => Ok(decode_sinogram(&bytes)?.into_grid()),
        Some(m) if m == IMG_MAGIC => decode_image(&bytes),
        _ => Err(fmt_err("unrecognized container magic, expected SGM1 or IMG1")),
    }
}
