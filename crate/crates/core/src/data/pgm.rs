//! Binary PGM (`P5`, maxval 255) output for explanation masks.

use std::fs;
use std::path::{Path, PathBuf};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Quantizes `[0, 1]` intensities to bytes, clamping out-of-range values.
pub fn to_gray_bytes(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Shape(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    write_atomic(path, &bytes)
}

/// Reads a `P5` file with maxval 255; returns `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad =
        |why: &str| Error::InvalidArgument(format!("{}: not a P5 PGM ({why})", path.display()));
    // Header: magic, width, height, maxval separated by whitespace; comments
    // start with '#'.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("short header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("magic"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("dimensions"));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    let pixels = bytes
        .get(pos..pos + width * height)
        .ok_or_else(|| bad("truncated"))?;
    Ok((width, height, pixels.to_vec()))
}

/// Paths of the four images written for one explanation.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskImages {
    pub original: PathBuf,
    pub reconstruction: PathBuf,
    pub overlay: PathBuf,
    pub mask: PathBuf,
}

/// Writes `{stem}-original.pgm`, `{stem}-reconstruction.pgm`,
/// `{stem}-overlay.pgm` (original with masked pixels set to 255) and
/// `{stem}-mask.pgm` (255 where the mask is set, 0 elsewhere) into `dir`.
pub fn write_mask_images(
    original: &Tensor,
    reconstruction: &Tensor,
    mask: &Tensor,
    (height, width): (usize, usize),
    dir: &Path,
    stem: &str,
) -> Result<MaskImages> {
    let m = height * width;
    for (what, t) in [
        ("original", original),
        ("reconstruction", reconstruction),
        ("mask", mask),
    ] {
        if t.len() != m {
            return Err(Error::Shape(format!(
                "{what} has {} values, image is {height}x{width}",
                t.len()
            )));
        }
    }
    let orig = to_gray_bytes(original.data());
    let overlay: Vec<u8> = orig
        .iter()
        .zip(mask.data())
        .map(|(&p, &k)| if k != 0.0 { 255 } else { p })
        .collect();
    let bare: Vec<u8> = mask
        .data()
        .iter()
        .map(|&k| if k != 0.0 { 255 } else { 0 })
        .collect();
    let paths = MaskImages {
        original: dir.join(format!("{stem}-original.pgm")),
        reconstruction: dir.join(format!("{stem}-reconstruction.pgm")),
        overlay: dir.join(format!("{stem}-overlay.pgm")),
        mask: dir.join(format!("{stem}-mask.pgm")),
    };
    write_pgm(&paths.original, width, height, &orig)?;
    write_pgm(
        &paths.reconstruction,
        width,
        height,
        &to_gray_bytes(reconstruction.data()),
    )?;
    write_pgm(&paths.overlay, width, height, &overlay)?;
    write_pgm(&paths.mask, width, height, &bare)?;
    Ok(paths)
}
