//! Binary PGM (`P5`) masks and maps, PGM/PPM (`P5`/`P6`) images. Only 8-bit
//! samples are supported.

use std::fs;
use std::path::Path;

use super::formats::write_file;
use crate::error::{Error, Result};
use crate::raster::{Grid, Mask, Raster};

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' || !(bytes[1] == b'5' || bytes[1] == b'6') {
        return Err(Error::format(0, "not a binary PGM/PPM (expected P5 or P6)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::format(pos as u64, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos as u64, format!("expected header field {k}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start as u64, "header number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(pos as u64, "missing whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(0, format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(0, "zero image dimension"));
    }
    Ok(Header {
        magic: [bytes[0], bytes[1]],
        width,
        height,
        data_start: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h
        .width
        .checked_mul(h.height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::format(h.data_start as u64, "image size overflow"))?;
    let have = bytes.len() - h.data_start;
    if have < need {
        return Err(Error::format(
            h.data_start as u64,
            format!("truncated pixel data: need {need} bytes, have {have}"),
        ));
    }
    Ok(&bytes[h.data_start..h.data_start + need])
}

fn pgm_bytes(width: usize, height: usize, magic: &str, data: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

/// Any nonzero sample is anomalous.
pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let h = parse_header(bytes)?;
    if h.magic != *b"P5" {
        return Err(Error::format(0, "mask must be a P5 PGM"));
    }
    let data = payload(bytes, &h, 1)?;
    Mask::new(h.height, h.width, data.iter().map(|&v| v != 0).collect())
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let data: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    pgm_bytes(mask.width, mask.height, "P5", &data)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    decode_mask(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_mask(mask: &Mask, path: &Path) -> Result<()> {
    write_file(path, &encode_mask(mask))
}

/// Reads a mask and checks it against expected dimensions.
pub fn read_mask_sized(path: &Path, height: usize, width: usize) -> Result<Mask> {
    let m = read_mask(path)?;
    if m.height != height || m.width != width {
        return Err(Error::Shape(format!(
            "{}: mask is {}x{}, expected {height}x{width}",
            path.display(),
            m.height,
            m.width
        )));
    }
    Ok(m)
}

/// Samples are scaled to `[0, 1]`.
pub fn decode_image(bytes: &[u8]) -> Result<Raster> {
    let h = parse_header(bytes)?;
    let channels = if h.magic == *b"P6" { 3 } else { 1 };
    let data = payload(bytes, &h, channels)?;
    Raster::new(
        h.height,
        h.width,
        channels,
        data.iter().map(|&v| v as f32 / 255.0).collect(),
    )
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One- and three-channel rasters only; values are clamped to `[0, 1]`.
pub fn encode_image(image: &Raster) -> Result<Vec<u8>> {
    let magic = match image.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Usage(format!("cannot store a {c}-channel raster as PNM"))),
    };
    let data: Vec<u8> = image.data.iter().map(|&v| quantize(v as f64)).collect();
    Ok(pgm_bytes(image.width, image.height, magic, &data))
}

pub fn read_image(path: &Path) -> Result<Raster> {
    decode_image(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_image(image: &Raster, path: &Path) -> Result<()> {
    write_file(path, &encode_image(image)?)
}

/// Anomaly map scaled from `[0, 1]` to 0–255.
pub fn write_map(map: &Grid, path: &Path) -> Result<()> {
    let data: Vec<u8> = map.data.iter().map(|&v| quantize(v)).collect();
    write_file(path, &pgm_bytes(map.width, map.height, "P5", &data))
}
