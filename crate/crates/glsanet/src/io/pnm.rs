//! Binary netpbm codecs: PGM (`P5`) and PPM (`P6`), maxval 255 only.
//!
//! Headers are emitted byte-exactly as `P5\n<w> <h>\n255\n` (resp. `P6`)
//! followed by the raw payload. The parser accepts standard netpbm
//! whitespace and `#` comments and reports failures with a byte offset.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn encode_pgm(gray: &[u8], width: usize, height: usize) -> Vec<u8> {
    assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn encode_ppm(rgb: &[u8], width: usize, height: usize) -> Vec<u8> {
    assert_eq!(rgb.len(), 3 * width * height);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Decode a binary PGM; returns (width, height, pixels).
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    decode(bytes, b"P5", 1)
}

/// Decode a binary PPM; returns (width, height, interleaved RGB).
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    decode(bytes, b"P6", 3)
}

fn decode(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Parse {
            offset: 0,
            message: format!("expected magic {:?}", std::str::from_utf8(magic).unwrap()),
        });
    }
    pos += 2;
    let width = read_header_int(bytes, &mut pos)?;
    let height = read_header_int(bytes, &mut pos)?;
    let maxval = read_header_int(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Parse { offset: pos, message: format!("unsupported maxval {maxval}, want 255") });
    }
    // Exactly one whitespace byte separates the header from the payload.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(Error::Parse { offset: pos, message: "missing whitespace before payload".into() })
        }
    }
    let expect = width * height * channels;
    if bytes.len() < pos + expect {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("payload truncated: have {}, want {expect}", bytes.len() - pos),
        });
    }
    Ok((width, height, bytes[pos..pos + expect].to_vec()))
}

/// Skip netpbm whitespace and `#` comments, then parse one decimal integer.
fn read_header_int(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    let mut value = 0usize;
    while let Some(&b) = bytes.get(*pos) {
        if b.is_ascii_digit() {
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((b - b'0') as usize))
                .ok_or(Error::Parse { offset: *pos, message: "header integer overflow".into() })?;
            *pos += 1;
        } else {
            break;
        }
    }
    if *pos == start {
        return Err(Error::Parse { offset: start, message: "expected a decimal integer".into() });
    }
    Ok(value)
}

/// Interleaved RGB bytes -> planar `[3,H,W]` tensor with values in [0,1].
pub fn rgb_to_tensor(rgb: &[u8], width: usize, height: usize) -> Tensor {
    let mut data = vec![0.0f32; 3 * width * height];
    let plane = width * height;
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = rgb[p * 3 + c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, height, width], data).expect("sizes agree")
}

/// Planar `[3,H,W]` tensor in [0,1] -> interleaved RGB bytes (round half up).
pub fn tensor_to_rgb(image: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dimension(format!("expected [3,H,W] image, got {s:?}")));
    }
    let (height, width) = (s[1], s[2]);
    let plane = height * width;
    let data = image.data();
    let mut rgb = vec![0u8; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            rgb[p * 3 + c] = quantize_unit(data[c * plane + p]);
        }
    }
    Ok((width, height, rgb))
}

/// Map a [0,1] value to a byte: round(v*255), half away from zero, clamped.
pub fn quantize_unit(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}
