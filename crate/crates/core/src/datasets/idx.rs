//! IDX reader and writer (the MNIST container format).
//!
//! Layout: big-endian `u32` magic, one big-endian `u32` per dimension, then the
//! unsigned-byte payload. Images use magic `0x00000803` (three dimensions:
//! count, rows, cols), labels use `0x00000801` (one dimension: count).

use std::fs;
use std::path::Path;

use crate::datasets::LabeledSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Raw image payload of an IDX image file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let raw = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.fail(self.pos, format!("truncated header: missing {what}")))?;
        self.pos = end;
        Ok(u32::from_be_bytes(raw.try_into().expect("four bytes")))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32_be("magic number")?;
        if found != expected {
            return Err(self.fail(
                0,
                format!("magic number {found:#010x}, expected {expected:#010x}"),
            ));
        }
        Ok(())
    }

    fn payload(&mut self, len: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < len {
            return Err(self.fail(
                self.bytes.len(),
                format!("truncated payload: {len} bytes declared, {available} present"),
            ));
        }
        if available > len {
            return Err(self.fail(
                self.pos + len,
                format!("{} trailing bytes after payload", available - len),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }
}

pub fn parse_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path,
    };
    cur.magic(IMAGE_MAGIC)?;
    let count = cur.u32_be("image count")? as usize;
    let rows = cur.u32_be("row count")? as usize;
    let cols = cur.u32_be("column count")? as usize;
    let pixels = cur.payload(count * rows * cols)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path,
    };
    cur.magic(LABEL_MAGIC)?;
    let count = cur.u32_be("label count")? as usize;
    Ok(cur.payload(count)?.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an image/label file pair, scaling pixels to `[0, 1]` by `/ 255`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<LabeledSample>> {
    let images = parse_images(&read(images_path)?, images_path)?;
    let labels = parse_labels(&read(labels_path)?, labels_path)?;
    if images.count != labels.len() {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            offset: 4,
            message: format!(
                "{} labels but {} images in {}",
                labels.len(),
                images.count,
                images_path.display()
            ),
        });
    }
    let per = images.rows * images.cols;
    Ok(images
        .pixels
        .chunks(per.max(1))
        .take(images.count)
        .zip(labels)
        .map(|(px, label)| LabeledSample {
            image: Tensor::from_parts(
                vec![1, images.rows, images.cols],
                px.iter().map(|&b| f64::from(b) / 255.0).collect(),
            ),
            label: usize::from(label),
        })
        .collect())
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for dim in [images.count, images.rows, images.cols] {
        out.extend_from_slice(&(dim as u32).to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    // Byte-level reference reader: magic and dims decoded by hand, independent
    // of the cursor above.
    fn reference_header(bytes: &[u8], words: usize) -> Vec<u32> {
        (0..words)
            .map(|w| {
                let b = &bytes[w * 4..w * 4 + 4];
                (u32::from(b[0]) << 24)
                    | (u32::from(b[1]) << 16)
                    | (u32::from(b[2]) << 8)
                    | u32::from(b[3])
            })
            .collect()
    }

    fn two_sample_files() -> (Vec<u8>, Vec<u8>) {
        let images = IdxImages {
            count: 2,
            rows: 2,
            cols: 3,
            pixels: vec![0, 255, 51, 102, 153, 204, 1, 2, 3, 4, 5, 6],
        };
        (encode_images(&images), encode_labels(&[7, 2]))
    }

    #[test]
    fn hand_built_pair_matches_reference() {
        let (img, lbl) = two_sample_files();
        assert_eq!(reference_header(&img, 4), vec![0x803, 2, 2, 3]);
        assert_eq!(reference_header(&lbl, 2), vec![0x801, 2]);
        assert_eq!(&img[..4], &[0x00, 0x00, 0x08, 0x03]);
        assert_eq!(&lbl[..4], &[0x00, 0x00, 0x08, 0x01]);

        let parsed = parse_images(&img, Path::new("img")).unwrap();
        assert_eq!((parsed.count, parsed.rows, parsed.cols), (2, 2, 3));
        assert_eq!(parsed.pixels, img[16..].to_vec());
        assert_eq!(parse_labels(&lbl, Path::new("lbl")).unwrap(), vec![7, 2]);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let (img, lbl) = two_sample_files();
        let err = parse_images(&lbl, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
        assert!(parse_labels(&img, Path::new("x")).is_err());
    }

    #[test]
    fn truncation_reports_offset() {
        let (img, _) = two_sample_files();
        let err = parse_images(&img[..img.len() - 1], Path::new("x")).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, img.len() as u64 - 1),
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_images(&img[..10], Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 8, .. }));
    }

    #[test]
    fn empty_but_valid() {
        let images = IdxImages {
            count: 0,
            rows: 28,
            cols: 28,
            pixels: vec![],
        };
        let parsed = parse_images(&encode_images(&images), Path::new("x")).unwrap();
        assert_eq!(parsed.count, 0);
        assert!(parse_labels(&encode_labels(&[]), Path::new("x"))
            .unwrap()
            .is_empty());
    }
}
