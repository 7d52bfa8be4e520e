//! Binary netpbm: P6 (8-bit RGB) and P5 (8-bit gray).

use std::io::{Read, Write};

use crate::{Error, Result};

fn write_header(out: &mut impl Write, magic: &str, w: usize, h: usize) -> std::io::Result<()> {
    write!(out, "{magic}\n{w} {h}\n255\n")
}

pub fn write_ppm(out: &mut impl Write, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != w * h * 3 {
        return Err(Error::Data(format!("P6 payload {} bytes for {w}x{h}", rgb.len())));
    }
    write_header(out, "P6", w, h).and_then(|_| out.write_all(rgb)).map_err(|e| Error::io("writing P6", e))
}

pub fn write_pgm(out: &mut impl Write, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != w * h {
        return Err(Error::Data(format!("P5 payload {} bytes for {w}x{h}", gray.len())));
    }
    write_header(out, "P5", w, h).and_then(|_| out.write_all(gray)).map_err(|e| Error::io("writing P5", e))
}

/// Decoded netpbm raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

fn parse(bytes: &[u8]) -> Result<Raster> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Data("truncated netpbm header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| Error::Data("non-ASCII netpbm header".into()))?);
    }
    let channels = match fields[0] {
        "P6" => 3,
        "P5" => 1,
        m => return Err(Error::Data(format!("unsupported netpbm magic `{m}`"))),
    };
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| Error::Data(format!("bad netpbm {what} `{s}`")));
    let (width, height, maxval) = (num(fields[1], "width")?, num(fields[2], "height")?, num(fields[3], "maxval")?);
    if maxval != 255 {
        return Err(Error::Data(format!("only 8-bit netpbm is supported, maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    i += 1;
    let need = width * height * channels;
    if bytes.len() < i + need {
        return Err(Error::Data(format!("netpbm raster truncated: {} of {need} bytes", bytes.len().saturating_sub(i))));
    }
    Ok(Raster { width, height, channels, data: bytes[i..i + need].to_vec() })
}

pub fn read(input: &mut impl Read) -> Result<Raster> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(|e| Error::io("reading netpbm", e))?;
    parse(&bytes)
}

pub fn read_file(path: &std::path::Path) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
