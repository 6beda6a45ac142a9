//! Binary PGM (`P5`, grayscale) and PPM (`P6`, color) with maxval 255.

use std::path::Path;

use vitleak_core::Image;

use crate::error::{HarnessError, Result};

/// Clamps to `[0, 1]` and rounds to the nearest byte.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pnm(image: &Image) -> Result<Vec<u8>> {
    let (h, w, c) = image.dims();
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(HarnessError::ImageFormat(format!("{c}-channel image has no PNM form"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn write_pnm(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pnm(image)?).map_err(|e| HarnessError::io(path, e))
}

/// Whitespace-separated header tokens, skipping `#` comments.
fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count {
        match bytes.get(i) {
            None => return Err(HarnessError::ImageFormat("header ends early".into())),
            Some(b'#') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => i += 1,
            Some(_) => {
                let start = i;
                while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
            }
        }
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((tokens, i + 1))
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let (tok, body) = header_tokens(bytes, 4)?;
    let channels = match tok[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(HarnessError::ImageFormat(format!("unsupported magic `{other}`"))),
    };
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| HarnessError::ImageFormat(format!("bad header field `{s}`")))
    };
    let (w, h, maxval) = (num(&tok[1])?, num(&tok[2])?, num(&tok[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(HarnessError::ImageFormat(format!("maxval {maxval} unsupported")));
    }
    let n = w * h * channels;
    let raster = bytes.get(body..body + n).ok_or(HarnessError::Truncated {
        expected: body + n,
        found: bytes.len(),
    })?;
    let scale = maxval as f64;
    Ok(Image::new(h, w, channels, raster.iter().map(|&b| b as f64 / scale).collect())?)
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    decode_pnm(&std::fs::read(path).map_err(|e| HarnessError::io(path, e))?)
}
