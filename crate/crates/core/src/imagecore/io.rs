//! Binary PPM (P6), PGM (P5) and Middlebury `.flo` codecs.
//!
//! Images are stored as 8-bit samples (round-half-up, clamped); flow is
//! stored as little-endian f32.

use std::fs;
use std::path::Path;

use super::{check_dims, quantize_u8, FlowField, Image, LabelMap};
use crate::error::{format_err, Error, Result};

/// `.flo` header tag; reads as "PIEH" in ASCII.
pub const FLO_MAGIC: f32 = 202021.25;

fn encode_pnm(magic: &str, width: usize, height: usize, payload: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(payload);
    out
}

struct PnmHeader {
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_pnm_header(bytes: &[u8], magic: &[u8; 2]) -> Result<PnmHeader> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return format_err(format!(
            "bad magic, expected {}",
            String::from_utf8_lossy(magic)
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comment lines between tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return format_err("truncated header"),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return format_err("expected a number in header");
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| Error::Format(format!("header value {text} out of range")))?;
    }
    // exactly one whitespace byte separates the header from the payload
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return format_err("missing whitespace after header"),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return format_err(format!("unsupported maxval {maxval}"));
    }
    check_dims(width, height).map_err(|e| Error::Format(e.to_string()))?;
    Ok(PnmHeader {
        width,
        height,
        offset: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &PnmHeader, channels: usize) -> Result<&'a [u8]> {
    let need = header.width * header.height * channels;
    let body = &bytes[header.offset..];
    if body.len() < need {
        return format_err(format!("truncated payload: {} of {need} bytes", body.len()));
    }
    Ok(&body[..need])
}

/// Encodes a 3-channel image as binary PPM.
pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return format_err(format!("PPM needs 3 channels, got {}", img.channels()));
    }
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize_u8(v)).collect();
    Ok(encode_pnm("P6", img.width(), img.height(), &bytes))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let header = parse_pnm_header(bytes, b"P6")?;
    let data = payload(bytes, &header, 3)?
        .iter()
        .map(|&b| b as f32)
        .collect();
    Image::from_vec(header.width, header.height, 3, data)
}

/// Encodes a 1-channel image as binary PGM.
pub fn encode_pgm(img: &Image) -> Result<Vec<u8>> {
    if img.channels() != 1 {
        return format_err(format!("PGM needs 1 channel, got {}", img.channels()));
    }
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize_u8(v)).collect();
    Ok(encode_pnm("P5", img.width(), img.height(), &bytes))
}

pub fn encode_pgm_labels(labels: &LabelMap) -> Vec<u8> {
    encode_pnm("P5", labels.width(), labels.height(), labels.data())
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let header = parse_pnm_header(bytes, b"P5")?;
    let data = payload(bytes, &header, 1)?
        .iter()
        .map(|&b| b as f32)
        .collect();
    Image::from_vec(header.width, header.height, 1, data)
}

pub fn decode_pgm_labels(bytes: &[u8]) -> Result<LabelMap> {
    let header = parse_pnm_header(bytes, b"P5")?;
    let data = payload(bytes, &header, 1)?.to_vec();
    LabelMap::from_vec(header.width, header.height, data)
}

pub fn encode_flo(flow: &FlowField) -> Result<Vec<u8>> {
    if !flow.is_finite() {
        return format_err("flow contains non-finite values");
    }
    let mut out = Vec::with_capacity(12 + flow.data().len() * 4);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for v in flow.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return format_err("truncated .flo header");
    }
    let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().expect("4 bytes") };
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return format_err("bad .flo magic");
    }
    let width = i32::from_le_bytes(word(4));
    let height = i32::from_le_bytes(word(8));
    if width <= 0 || height <= 0 {
        return format_err(format!("bad .flo dimensions {width}x{height}"));
    }
    let (width, height) = (width as usize, height as usize);
    check_dims(width, height).map_err(|e| Error::Format(e.to_string()))?;
    let need = width * height * 2 * 4;
    let body = &bytes[12..];
    if body.len() < need {
        return format_err(format!(
            "truncated .flo payload: {} of {need} bytes",
            body.len()
        ));
    }
    let data = body[..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    FlowField::from_vec(width, height, data)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    fs::write(path, encode_pgm(img)?)?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Image> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_pgm_labels(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    fs::write(path, encode_pgm_labels(labels))?;
    Ok(())
}

pub fn read_pgm_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    decode_pgm_labels(&fs::read(path)?)
}

pub fn write_flo(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    fs::write(path, encode_flo(flow)?)?;
    Ok(())
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flo(&fs::read(path)?)
}
