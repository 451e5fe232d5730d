//! Binary PGM (P5, maxval 255) import and export.

use std::fs;
use std::path::Path;

use super::GrayFrame;
use crate::error::{Error, Result};

pub fn encode(frame: &GrayFrame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend_from_slice(&frame.pixels);
    out
}

pub fn decode(bytes: &[u8]) -> Result<GrayFrame> {
    let bad = |m: &str| Error::parse("pgm", m);
    let mut pos = 0;
    let mut header = Vec::with_capacity(4);
    while header.len() < 4 {
        // whitespace and comments
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        header.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if header[0] != "P5" {
        return Err(bad("not a binary PGM (expected P5)"));
    }
    let num = |s: &str| s.parse::<u32>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(header[1])?, num(header[2])?, num(header[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = w as usize * h as usize;
    if bytes.len() < pos + n {
        return Err(bad("truncated raster"));
    }
    GrayFrame::new(w, h, bytes[pos..pos + n].to_vec())
}

pub fn write(path: impl AsRef<Path>, frame: &GrayFrame) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(frame)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<GrayFrame> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
