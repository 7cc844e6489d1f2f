//! Binary P6 portable pixmaps, 8-bit.

use std::fs;
use std::path::Path;

use super::Image;
use crate::{CoreError, Result};

pub fn encode(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{0} {0}\n255\n", img.size()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let bad = |why: &str| CoreError::Format(format!("ppm: {why}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
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
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("not a P6 file"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if w != h {
        return Err(bad("image is not square"));
    }
    if max != 255 {
        return Err(bad("only 8-bit pixmaps are supported"));
    }
    let raster = bytes.get(pos..).ok_or_else(|| bad("truncated raster"))?;
    if raster.len() != w * h * 3 {
        return Err(bad("raster length does not match header"));
    }
    Image::new(w, raster.to_vec())
}

pub fn write(path: &Path, img: &Image) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    fs::write(path, encode(img)).map_err(|e| CoreError::io(path, e))
}

pub fn read(path: &Path) -> Result<Image> {
    decode(&fs::read(path).map_err(|e| CoreError::io(path, e))?)
}
