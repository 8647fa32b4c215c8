//! Portable Float Map reader/writer.
//!
//! Layout: `PF` (RGB) or `Pf` (grey), ASCII `width height`, a scale line
//! whose sign gives the byte order (negative = little-endian), then rows of
//! interleaved f32 samples stored bottom row first.

use std::path::Path;

use super::Map;
use crate::error::{Error, Result};

pub fn encode_pfm(map: &Map) -> Result<Vec<u8>> {
    let tag = match map.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::Invalid(format!("PFM stores 1 or 3 channels, got {c}"))),
    };
    if !map.all_finite() {
        return Err(Error::NonFinite("PFM payload".into()));
    }
    let (w, h, c) = (map.width(), map.height(), map.channels());
    let header = format!("{tag}\n{w} {h}\n-1.0\n");
    let mut out = Vec::with_capacity(header.len() + w * h * c * 4);
    out.extend_from_slice(header.as_bytes());
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                out.extend_from_slice(&map.get(ch, y, x).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn write_pfm(map: &Map, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pfm(map)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Map> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes).map_err(|reason| Error::format(path, reason))
}

/// Parse PFM bytes; the error is a human-readable reason.
pub fn decode_pfm(bytes: &[u8]) -> std::result::Result<Map, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<&str, String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ASCII header".to_string())
    };
    let channels = match token()? {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(format!("bad PFM magic {other:?}")),
    };
    let width: usize = token()?
        .parse()
        .map_err(|_| "bad width in header".to_string())?;
    let height: usize = token()?
        .parse()
        .map_err(|_| "bad height in header".to_string())?;
    let scale: f32 = token()?
        .parse()
        .map_err(|_| "bad scale in header".to_string())?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(format!("invalid scale {scale}"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("missing newline after header".into());
    }
    pos += 1;
    let little = scale < 0.0;
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or("image dimensions overflow")?;
    let payload = &bytes[pos..];
    if payload.len() < count * 4 {
        return Err(format!(
            "truncated payload: expected {} bytes, found {}",
            count * 4,
            payload.len()
        ));
    }
    let mut map = Map::filled(width, height, channels, 0.0);
    let mut chunks = payload.chunks_exact(4);
    for y in (0..height).rev() {
        for x in 0..width {
            for c in 0..channels {
                let b: [u8; 4] = chunks.next().expect("length checked").try_into().unwrap();
                let v = if little {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                };
                map.set(c, y, x, v);
            }
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_payload_bytes() {
        let bytes = encode_pfm(&Map::filled(1, 1, 1, 0.5)).unwrap();
        assert_eq!(&bytes[..], b"Pf\n1 1\n-1.0\n\x00\x00\x00\x3f");
    }

    #[test]
    fn header_of_grey_map() {
        let bytes = encode_pfm(&Map::filled(2, 3, 1, 0.0)).unwrap();
        assert!(bytes.starts_with(b"Pf\n2 3\n-1.0\n"));
        assert_eq!(bytes.len(), 12 + 2 * 3 * 4);
    }

    #[test]
    fn rows_are_stored_bottom_up() {
        let m = Map::from_fn(1, 2, 1, |_, y, _| y as f32);
        let bytes = encode_pfm(&m).unwrap();
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(first, 1.0);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = Map::from_fn(5, 3, 3, |c, y, x| ((c * 31 + y * 7 + x) as f32).sin() * 1e3);
        let back = decode_pfm(&encode_pfm(&m).unwrap()).unwrap();
        assert_eq!(back.channels(), 3);
        for (a, b) in m.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn big_endian_payload_is_accepted() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&0.25f32.to_be_bytes());
        assert_eq!(decode_pfm(&bytes).unwrap().data(), &[0.25]);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(decode_pfm(b"P6\n1 1\n-1.0\n\0\0\0\0").unwrap_err().contains("magic"));
        assert!(decode_pfm(b"Pf\n2 2\n-1.0\n\0\0\0\0").unwrap_err().contains("truncated"));
        assert!(decode_pfm(b"Pf\n2").is_err());
        assert!(decode_pfm(b"Pf\nx 2\n-1.0\n").is_err());
    }
}
