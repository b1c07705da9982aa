//! Big-endian IDX files (the MNIST container), optionally gzip-compressed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array2;

use super::{ImageDataset, Split};
use crate::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Upper bound on `count * rows * cols` accepted from a header.
const MAX_PIXELS: u64 = 1 << 34;

fn open(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("gzip: {e}"),
        })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes(b.try_into().unwrap()))
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail("truncated IDX file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Parses an image file: `count x (rows * cols)` gray values in `[0, 1]` plus `(rows, cols)`.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<(Array2<f64>, usize, usize)> {
    let mut c = Cursor { bytes, pos: 0, path };
    let magic = c.u32()?;
    if magic != IMAGE_MAGIC {
        return Err(c.fail(format!("bad image magic {magic:#010x}")));
    }
    let (n, rows, cols) = (c.u32()? as u64, c.u32()? as u64, c.u32()? as u64);
    let total = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .filter(|&v| v <= MAX_PIXELS)
        .ok_or_else(|| c.fail("image dimensions overflow"))?;
    let pixels = c.take(total as usize)?;
    let d = (rows * cols) as usize;
    let images = Array2::from_shape_vec(
        (n as usize, d),
        pixels.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )
    .expect("sized pixel buffer");
    Ok((images, rows as usize, cols as usize))
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let mut c = Cursor { bytes, pos: 0, path };
    let magic = c.u32()?;
    if magic != LABEL_MAGIC {
        return Err(c.fail(format!("bad label magic {magic:#010x}")));
    }
    let n = c.u32()? as usize;
    Ok(c.take(n)?.to_vec())
}

/// Loads an IDX image file and, optionally, its label file.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<ImageDataset> {
    let (x, rows, cols) = parse_images(&open(images)?, images)?;
    let labels = labels
        .map(|p| parse_labels(&open(p)?, p))
        .transpose()?;
    if let Some(l) = &labels {
        if l.len() != x.nrows() {
            return Err(Error::Format {
                path: images.to_path_buf(),
                reason: format!("{} images but {} labels", x.nrows(), l.len()),
            });
        }
    }
    ImageDataset::new(x, labels, cols, rows, Split::Train)
}

fn sink(path: &Path) -> Result<Box<dyn Write>> {
    let f = BufWriter::new(File::create(path)?);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzEncoder::new(f, Compression::default())))
    } else {
        Ok(Box::new(f))
    }
}

/// Encodes gray values as bytes (`round(255 v)`); gzip when the path ends in `.gz`.
pub fn write_idx(ds: &ImageDataset, images: &Path, labels: Option<&Path>) -> Result<()> {
    let mut w = sink(images)?;
    w.write_all(&IMAGE_MAGIC.to_be_bytes())?;
    for v in [ds.len(), ds.height(), ds.width()] {
        w.write_all(&(v as u32).to_be_bytes())?;
    }
    let bytes: Vec<u8> = ds.images().iter().map(|&v| (v * 255.0).round() as u8).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    drop(w);
    if let Some(lp) = labels {
        let l = ds
            .labels()
            .ok_or_else(|| Error::invalid("dataset has no labels to write"))?;
        let mut w = sink(lp)?;
        w.write_all(&LABEL_MAGIC.to_be_bytes())?;
        w.write_all(&(l.len() as u32).to_be_bytes())?;
        w.write_all(l)?;
        w.flush()?;
    }
    Ok(())
}
