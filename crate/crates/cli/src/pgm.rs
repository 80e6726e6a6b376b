//! Binary (P5) greymap output.

use std::path::Path;

use crate::error::{CliError, CliResult};

/// `P5\n<W> <H>\n255\n` followed by `W * H` bytes.
pub fn encode(width: usize, height: usize, pixels: &[u8]) -> CliResult<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(CliError::Usage(format!(
            "PGM {width}x{height} needs {} pixels, got {}",
            width * height,
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write(path: &Path, width: usize, height: usize, pixels: &[u8]) -> CliResult<()> {
    let bytes = encode(width, height, pixels)?;
    std::fs::write(path, bytes).map_err(|e| gaitrdae::Error::io(path, e).into())
}

/// Parses a P5 image written by [`encode`], returning `(width, height, pixels)`.
pub fn decode(bytes: &[u8]) -> CliResult<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| CliError::Usage(format!("malformed PGM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        let end = bytes[pos..]
            .iter()
            .position(|b| b.is_ascii_whitespace())
            .ok_or_else(|| bad("truncated header"))?;
        fields.push(std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("header is not ASCII"))?);
        pos += end + 1;
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    if bytes.len() - pos != w * h {
        return Err(bad("payload size"));
    }
    Ok((w, h, bytes[pos..].to_vec()))
}

/// Maps `values` linearly onto 0..=255 with `max` at 255; all zero when
/// `max` is not positive.
pub fn normalize(values: &[f64], max: f64) -> Vec<u8> {
    values
        .iter()
        .map(|&v| {
            if max > 0.0 {
                (v / max * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes() {
        let b = encode(3, 2, &[0, 1, 2, 3, 4, 255]).unwrap();
        assert_eq!(&b[..11], b"P5\n3 2\n255\n");
        assert_eq!(b.len(), 11 + 6);
        assert_eq!(decode(&b).unwrap(), (3, 2, vec![0, 1, 2, 3, 4, 255]));
        assert!(encode(3, 2, &[0; 5]).is_err());
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize(&[0.0, 1.0, 2.0], 2.0), vec![0, 128, 255]);
        assert_eq!(normalize(&[0.0, 0.0], 0.0), vec![0, 0]);
    }
}
