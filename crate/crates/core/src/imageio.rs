//! Binary portable pixmap/graymap encoding.

use autograd::Tensor;

use crate::{Error, Result};

/// Value in `[0, 1]` to an 8-bit level, clamped.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3, "pixmap size");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height, "graymap size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Parsed binary PNM: magic (`5` or `6`), width, height and raw samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub kind: u8,
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Pnm> {
    let bad = |m: &str| Error::Format(format!("pnm: {m}"));
    let kind = match bytes.get(..2) {
        Some(b"P5") => 5,
        Some(b"P6") => 6,
        _ => return Err(bad("unsupported magic")),
    };
    let mut fields = Vec::new();
    let mut pos = 2;
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("malformed header"))?;
        fields.push(text.parse::<usize>().map_err(|_| bad("malformed header"))?);
    }
    if fields[2] != 255 {
        return Err(bad("only 8-bit maxval supported"));
    }
    pos += 1;
    let (width, height) = (fields[0], fields[1]);
    let need = width * height * if kind == 6 { 3 } else { 1 };
    let data = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated data"))?.to_vec();
    Ok(Pnm {
        kind,
        width,
        height,
        data,
    })
}

/// `[g² × 3]` diffusion-grid image in `[-1, 1]` as a pixmap.
pub fn grid_to_ppm(x: &Tensor, grid: usize) -> Vec<u8> {
    let rgb: Vec<u8> = x.data().iter().map(|&v| to_u8((v + 1.0) / 2.0)).collect();
    encode_ppm(grid, grid, &rgb)
}

/// `[h × w × 3]` image in `[0, 1]` as a pixmap.
pub fn image_to_ppm(x: &Tensor) -> Vec<u8> {
    let s = x.shape();
    let rgb: Vec<u8> = x.data().iter().map(|&v| to_u8(v)).collect();
    encode_ppm(s[1], s[0], &rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixmap_round_trip_and_clamping() {
        let x = Tensor::new(&[4, 3], vec![-2.0, -1.0, 0.0, 1.0, 3.0, 0.5, -0.5, 0.2, 0.9, 1.0, 1.0, 1.0]).unwrap();
        let bytes = grid_to_ppm(&x, 2);
        let p = decode_pnm(&bytes).unwrap();
        assert_eq!((p.kind, p.width, p.height), (6, 2, 2));
        assert_eq!(&p.data[..5], &[0, 0, 128, 255, 255]);
    }

    #[test]
    fn rejects_bad_headers() {
        assert!(decode_pnm(b"P3\n1 1\n255\n").is_err());
        assert!(decode_pnm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pnm(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }
}
