//! IDX (`*-ubyte`) reader and writer for MNIST-family corpora.
//!
//! Layout: big-endian `u32` magic (`0x00000803` for images, `0x00000801`
//! for labels), one big-endian `u32` per dimension, then raw `u8` data.

use std::fs;
use std::path::Path;

use crate::data::{Dataset, Role};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Truncated(format!("{} header", self.what)))?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::Truncated(format!(
                "{} body: need {n} bytes, {} available",
                self.what,
                self.bytes.len() - self.pos
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

fn expect_magic(r: &mut Reader<'_>, expected: u32) -> Result<()> {
    let found = r.u32()?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

/// Parses an image file into `(rows, cols, images)`, pixels scaled to `[0, 1]`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let mut r = Reader {
        bytes,
        pos: 0,
        what: "images",
    };
    expect_magic(&mut r, IMAGES_MAGIC)?;
    let n = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let body = r.take(n * rows * cols)?;
    let images = body
        .chunks_exact((rows * cols).max(1))
        .take(n)
        .map(|px| px.iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect();
    Ok((rows, cols, images))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        what: "labels",
    };
    expect_magic(&mut r, LABELS_MAGIC)?;
    let n = r.u32()? as usize;
    Ok(r.take(n)?.iter().map(|&b| b as usize).collect())
}

/// Loads an image/label file pair as a `[1, rows, cols]` dataset with role
/// `Train`; the class count is one past the largest label.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (rows, cols, inputs) = parse_images(&fs::read(images)?)?;
    let labels = parse_labels(&fs::read(labels)?)?;
    if inputs.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: inputs.len(),
            labels: labels.len(),
        });
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(inputs, labels, vec![1, rows, cols], classes, Role::Train)
}

/// Serializes images (values in `[0, 1]`, rounded to bytes).
pub fn encode_images(rows: usize, cols: usize, images: &[Vec<f64>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        out.extend(img.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    out
}

pub fn encode_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}
