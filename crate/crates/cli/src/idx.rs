//! Big-endian IDX files: unsigned-byte images (`0x00000803`) and labels
//! (`0x00000801`).

use std::path::Path;

use vitleak_core::Image;

use crate::error::{HarnessError, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    /// Grayscale images scaled to `[0, 1]`.
    Images(Vec<Image>),
    Labels(Vec<usize>),
}

/// Images with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Option<Vec<usize>>,
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let chunk = bytes.get(at..at + 4).ok_or(HarnessError::Truncated {
        expected: at + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("four bytes")))
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    if bytes.len() < 4 {
        return Err(HarnessError::Truncated {
            expected: 4,
            found: bytes.len(),
        });
    }
    // bytes 0-1 are zero, byte 2 is the element type (0x08 = u8), byte 3 the rank
    for (offset, want) in [(0, Some(0u8)), (1, Some(0)), (2, Some(0x08)), (3, None)] {
        let found = bytes[offset];
        let ok = match want {
            Some(w) => found == w,
            None => found == 1 || found == 3,
        };
        if !ok {
            return Err(HarnessError::BadMagic { offset, found });
        }
    }
    let rank = bytes[3] as usize;
    let dims: Vec<usize> = (0..rank).map(|i| read_u32(bytes, 4 + 4 * i).map(|d| d as usize)).collect::<Result<_>>()?;
    let header = 4 + 4 * rank;
    let payload: usize = dims.iter().product();
    if bytes.len() < header + payload {
        return Err(HarnessError::Truncated {
            expected: header + payload,
            found: bytes.len(),
        });
    }
    let body = &bytes[header..header + payload];
    if rank == 1 {
        return Ok(IdxData::Labels(body.iter().map(|&b| b as usize).collect()));
    }
    let (rows, cols) = (dims[1], dims[2]);
    let images = body
        .chunks(rows * cols)
        .take(dims[0])
        .map(|px| Image::new(rows, cols, 1, px.iter().map(|&b| b as f64 / 255.0).collect()))
        .collect::<vitleak_core::Result<Vec<_>>>()?;
    Ok(IdxData::Images(images))
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxData> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    parse_idx(&bytes)
}

/// Loads an image file and, optionally, its label file; the counts must agree.
pub fn load_dataset(images: impl AsRef<Path>, labels: Option<&Path>) -> Result<Dataset> {
    let images = match load_idx(images.as_ref())? {
        IdxData::Images(v) => v,
        IdxData::Labels(_) => {
            return Err(HarnessError::ImageFormat(format!(
                "{} holds labels, expected images",
                images.as_ref().display()
            )))
        }
    };
    let labels = match labels {
        None => None,
        Some(p) => match load_idx(p)? {
            IdxData::Labels(l) if l.len() == images.len() => Some(l),
            IdxData::Labels(l) => {
                return Err(HarnessError::ImageFormat(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.len()
                )))
            }
            IdxData::Images(_) => {
                return Err(HarnessError::ImageFormat(format!("{} holds images, expected labels", p.display())))
            }
        },
    };
    Ok(Dataset { images, labels })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Serializes grayscale images of one size, or labels below 256.
pub fn encode_idx(data: &IdxData) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    match data {
        IdxData::Labels(labels) => {
            out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
            out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
            for &l in labels {
                let b = u8::try_from(l).map_err(|_| HarnessError::ImageFormat(format!("label {l} exceeds 255")))?;
                out.push(b);
            }
        }
        IdxData::Images(images) => {
            let first = images
                .first()
                .ok_or_else(|| HarnessError::ImageFormat("no images to write".into()))?;
            let (h, w, _) = first.dims();
            if images.iter().any(|im| im.dims() != (h, w, 1)) {
                return Err(HarnessError::ImageFormat("IDX images must be grayscale and equally sized".into()));
            }
            out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
            for d in [images.len(), h, w] {
                out.extend_from_slice(&(d as u32).to_be_bytes());
            }
            for im in images {
                out.extend(im.data().iter().map(|&v| to_byte(v)));
            }
        }
    }
    Ok(out)
}

pub fn write_idx(path: impl AsRef<Path>, data: &IdxData) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_idx(data)?).map_err(|e| HarnessError::io(path, e))
}
