//! Binary PPM (P6) frames and PGM (P5) debug masks.

use thiserror::Error;

use super::RainbowMask;
use crate::domain::Frame;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("not a binary PPM: {0}")]
    Format(String),
    #[error("truncated pixel data: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
}

/// Encode a frame as binary PPM with maxval 255.
pub fn encode_ppm(frame: &Frame) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", frame.width, frame.height);
    let mut out = Vec::with_capacity(header.len() + frame.pixels.len() * 3);
    out.extend_from_slice(header.as_bytes());
    for p in &frame.pixels {
        out.extend_from_slice(p);
    }
    out
}

/// Encode a rainbow mask as PGM, scores quantized to 0..=255.
pub fn encode_pgm(mask: &RainbowMask) -> Vec<u8> {
    let header = format!("P5\n{} {}\n255\n", mask.width, mask.height);
    let mut out = header.into_bytes();
    out.extend(mask.to_gray_bytes());
    out
}

struct Header {
    magic: [u8; 2],
    width: u32,
    height: u32,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, PnmError> {
    if bytes.len() < 2 {
        return Err(PnmError::Format("file too short".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(PnmError::Format("expected a number in header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PnmError::Format("header number out of range".into()))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(PnmError::Format("missing whitespace after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(PnmError::Format(format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(PnmError::Format("zero dimension".into()));
    }
    Ok(Header {
        magic,
        width,
        height,
        data_start: pos,
    })
}

/// Decode a binary PPM with maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<Frame, PnmError> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" {
        return Err(PnmError::Format("magic is not P6".into()));
    }
    let n = h.width as usize * h.height as usize;
    let data = &bytes[h.data_start..];
    if data.len() < n * 3 {
        return Err(PnmError::Truncated {
            expected: n * 3,
            got: data.len(),
        });
    }
    let pixels = data[..n * 3]
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Frame::new(h.width, h.height, pixels).map_err(|e| PnmError::Format(e.to_string()))
}

/// Decode a PGM into raw gray levels with its dimensions.
pub fn decode_pgm(bytes: &[u8]) -> Result<(u32, u32, Vec<u8>), PnmError> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" {
        return Err(PnmError::Format("magic is not P5".into()));
    }
    let n = h.width as usize * h.height as usize;
    let data = &bytes[h.data_start..];
    if data.len() < n {
        return Err(PnmError::Truncated {
            expected: n,
            got: data.len(),
        });
    }
    Ok((h.width, h.height, data[..n].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let f = decode_ppm(&bytes).unwrap();
        assert_eq!(f.pixels, vec![[1, 2, 3], [4, 5, 6]]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(matches!(decode_ppm(b"P6\n2 2\n255\n\x01\x02"), Err(PnmError::Truncated { .. })));
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode_ppm(b"").is_err());
    }

    #[test]
    fn mask_quantization() {
        let m = RainbowMask::new(3, 1, vec![0.0, 0.5, 1.0]).unwrap();
        let (w, h, px) = decode_pgm(&encode_pgm(&m)).unwrap();
        assert_eq!((w, h), (3, 1));
        assert_eq!(px, vec![0, 128, 255]);
    }

    proptest! {
        #[test]
        fn ppm_round_trip(w in 1u32..16, h in 1u32..16, seed in any::<u64>()) {
            let pixels = (0..(w * h) as u64).map(|i| {
                let v = seed.wrapping_mul(6364136223846793005).wrapping_add(i.wrapping_mul(1442695040888963407));
                [(v >> 8) as u8, (v >> 24) as u8, (v >> 40) as u8]
            }).collect();
            let f = Frame::new(w, h, pixels).unwrap();
            prop_assert_eq!(decode_ppm(&encode_ppm(&f)).unwrap(), f);
        }
    }
}
