//! Binary 8-bit PPM (P6) and PGM (P5) rasters.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Decoded raster: `channels` interleaved bytes per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn encode(r: &Raster) -> Result<Vec<u8>> {
    let magic = match r.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::Format(format!(
                "netpbm supports 1 or 3 channels, got {c}"
            )))
        }
    };
    if r.data.len() != r.width * r.height * r.channels {
        return Err(Error::Format(
            "raster data length does not match its extents".into(),
        ));
    }
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.data);
    Ok(out)
}

fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated netpbm header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let t = token(bytes, pos)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| {
            Error::Format(format!(
                "bad netpbm header field {:?}",
                String::from_utf8_lossy(t)
            ))
        })
}

pub fn decode(bytes: &[u8]) -> Result<Raster> {
    let mut pos = 0;
    let channels = match token(bytes, &mut pos)? {
        b"P5" => 1,
        b"P6" => 3,
        m => {
            return Err(Error::Format(format!(
                "unsupported netpbm magic {:?}",
                String::from_utf8_lossy(m)
            )))
        }
    };
    let width = number(bytes, &mut pos)?;
    let height = number(bytes, &mut pos)?;
    let maxval = number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "only 8-bit netpbm is supported, maxval {maxval}"
        )));
    }
    // exactly one whitespace byte separates the header from the samples
    pos += 1;
    let len = width * height * channels;
    let data = bytes
        .get(pos..pos + len)
        .ok_or_else(|| Error::Format(format!("netpbm payload shorter than {len} bytes")))?
        .to_vec();
    Ok(Raster {
        width,
        height,
        channels,
        data,
    })
}

pub fn write(path: &Path, r: &Raster) -> Result<()> {
    fs::write(path, encode(r)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
