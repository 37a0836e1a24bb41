//! Binary PGM (P5) / PPM (P6) images, 8-bit, dependency-free and
//! byte-reproducible.
//!
//! Tensors map to pixels as [-1, 1] -> 0..=255 with round-half-away
//! clamping; loading inverts that to [-1, 1].

use std::fs;
use std::path::Path;

use crate::error::{GecaError, Result};
use crate::tensor::Tensor;

fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round()) as u8
}

fn to_unit(b: u8) -> f32 {
    b as f32 / 255.0 * 2.0 - 1.0
}

/// Encode an [H, W, 1] or [H, W, 3] tensor in [-1, 1].
pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    if image.rank() != 3 {
        return Err(GecaError::Dimension(format!(
            "image must be [H, W, C], got {:?}",
            image.shape
        )));
    }
    let (h, w, c) = (image.shape[0], image.shape[1], image.shape[2]);
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(GecaError::Dimension(format!(
                "image must have 1 or 3 channels, got {}",
                c
            )))
        }
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data.iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn write(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode(image)?)?;
    Ok(())
}

/// Decode P5/P6 bytes to an [H, W, C] tensor in [-1, 1].
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    // header: magic, width, height, maxval; '#' comments allowed
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(GecaError::Corrupt("truncated image header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| {
            GecaError::Corrupt("non-ascii image header".into())
        })?);
    }
    let channels = match fields[0] {
        "P5" => 1usize,
        "P6" => 3usize,
        other => {
            return Err(GecaError::Corrupt(format!(
                "unsupported image magic {:?}",
                other
            )))
        }
    };
    let parse = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| GecaError::Corrupt(format!("bad header field {:?}", s)))
    };
    let w = parse(fields[1])?;
    let h = parse(fields[2])?;
    let maxval = parse(fields[3])?;
    if maxval != 255 {
        return Err(GecaError::Corrupt(format!(
            "only 8-bit images are supported, maxval {}",
            maxval
        )));
    }
    pos += 1; // single whitespace after maxval
    let need = h * w * channels;
    if bytes.len() < pos + need {
        return Err(GecaError::Corrupt(format!(
            "pixel payload truncated: need {}, have {}",
            need,
            bytes.len().saturating_sub(pos)
        )));
    }
    let data = bytes[pos..pos + need].iter().map(|&b| to_unit(b)).collect();
    Tensor::new(vec![h, w, channels], data)
}

pub fn read(path: &Path) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

/// Lay out same-height images side by side with a 1-pixel black gap
/// (the m-sweep contact sheet).
pub fn contact_sheet(images: &[Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(GecaError::Input("contact sheet of zero images".into()));
    }
    let (h, c) = (images[0].shape[0], images[0].shape[2]);
    for img in images {
        if img.shape[0] != h || img.shape[2] != c {
            return Err(GecaError::Dimension(
                "contact sheet images must share height and channels".into(),
            ));
        }
    }
    let gap = 1usize;
    let total_w: usize = images.iter().map(|i| i.shape[1]).sum::<usize>()
        + gap * (images.len() - 1);
    let mut data = vec![-1.0f32; h * total_w * c];
    let mut x0 = 0usize;
    for img in images {
        let w = img.shape[1];
        for row in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    data[(row * total_w + x0 + col) * c + ch] =
                        img.data[(row * w + col) * c + ch];
                }
            }
        }
        x0 += w + gap;
    }
    Tensor::new(vec![h, total_w, c], data)
}
