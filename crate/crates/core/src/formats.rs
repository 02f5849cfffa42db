//! File codecs: OPM1 dense maps, binary PGM masks and CSV number
//! formatting.
//!
//! OPM1 layout: the magic `OPM1`, a kind byte (0 = probabilities,
//! 1 = logits or other raw reals), three little-endian `u32` dimensions
//! K, H, W, then K·H·W little-endian `f64` values, channel-major and
//! row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::maps::{ChannelGrid, SegmentationMask};

pub const OPM1_MAGIC: &[u8; 4] = b"OPM1";
const OPM1_HEADER: usize = 4 + 1 + 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Probabilities = 0,
    Raw = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Opm1 {
    pub kind: MapKind,
    pub grid: ChannelGrid,
}

fn opm1_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        format: "OPM1",
        offset,
        message: message.into(),
    }
}

pub fn encode_opm1(kind: MapKind, grid: &ChannelGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(OPM1_HEADER + grid.as_slice().len() * 8);
    out.extend_from_slice(OPM1_MAGIC);
    out.push(kind as u8);
    let (k, h, w) = grid.shape();
    for dim in [k, h, w] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in grid.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_opm1(bytes: &[u8]) -> Result<Opm1> {
    if bytes.len() < 4 || &bytes[..4] != OPM1_MAGIC {
        return Err(opm1_err(0, "missing `OPM1` magic"));
    }
    if bytes.len() < OPM1_HEADER {
        return Err(opm1_err(
            bytes.len(),
            format!("header truncated: expected {OPM1_HEADER} bytes, got {}", bytes.len()),
        ));
    }
    let kind = match bytes[4] {
        0 => MapKind::Probabilities,
        1 => MapKind::Raw,
        other => return Err(opm1_err(4, format!("unknown kind flag {other}"))),
    };
    let dim = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (k, h, w) = (dim(5), dim(9), dim(13));
    if k == 0 || h == 0 || w == 0 {
        return Err(opm1_err(5, format!("empty dimension {k}x{h}x{w}")));
    }
    let expected = k
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| opm1_err(5, format!("dimensions {k}x{h}x{w} overflow")))?;
    let payload = &bytes[OPM1_HEADER..];
    if payload.len() != expected {
        return Err(opm1_err(
            OPM1_HEADER,
            format!(
                "payload length mismatch: expected {expected} bytes for {k}x{h}x{w}, got {}",
                payload.len()
            ),
        ));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Opm1 {
        kind,
        grid: ChannelGrid::new(k, h, w, data)?,
    })
}

pub fn read_opm1(path: &Path) -> Result<Opm1> {
    decode_opm1(&fs::read(path)?)
}

pub fn write_opm1(path: &Path, kind: MapKind, grid: &ChannelGrid) -> Result<()> {
    fs::write(path, encode_opm1(kind, grid))?;
    Ok(())
}

fn pgm_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        format: "PGM",
        offset,
        message: message.into(),
    }
}

/// Binary PGM with maxval 255; each byte is a class index.
pub fn encode_pgm(mask: &SegmentationMask) -> Result<Vec<u8>> {
    if mask.max_label() > 255 {
        return Err(Error::invalid(
            "mask",
            format!("label {} does not fit in a PGM byte", mask.max_label()),
        ));
    }
    let header = format!("P5\n{} {}\n255\n", mask.width(), mask.height());
    let mut out = header.into_bytes();
    out.extend(mask.labels().iter().map(|&l| l as u8));
    Ok(out)
}

/// Raw pixel bytes and dimensions `(height, width)` of a binary PGM.
pub fn decode_pgm_bytes(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut token = |what: &str| -> Result<(usize, String)> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(pgm_err(start, format!("missing {what}")));
        }
        Ok((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()))
    };

    let (_, magic) = token("magic")?;
    if magic != "P5" {
        return Err(pgm_err(0, format!("expected magic P5, found `{magic}`")));
    }
    let mut number = |what: &str| -> Result<usize> {
        let (at, text) = token(what)?;
        text.parse()
            .map_err(|_| pgm_err(at, format!("{what} `{text}` is not an integer")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(pgm_err(0, format!("maxval must be 255, found {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let raster_start = pos + 1;
    let expected = width
        .checked_mul(height)
        .ok_or_else(|| pgm_err(0, "dimensions overflow"))?;
    let actual = bytes.len().saturating_sub(raster_start);
    if actual != expected {
        return Err(pgm_err(
            raster_start.min(bytes.len()),
            format!("raster length mismatch: expected {expected} bytes for {width}x{height}, got {actual}"),
        ));
    }
    Ok((height, width, bytes[raster_start..].to_vec()))
}

pub fn decode_pgm(bytes: &[u8], num_classes: usize) -> Result<SegmentationMask> {
    let (height, width, raster) = decode_pgm_bytes(bytes)?;
    SegmentationMask::new(
        height,
        width,
        num_classes,
        raster.into_iter().map(usize::from).collect(),
    )
}

pub fn read_pgm(path: &Path, num_classes: usize) -> Result<SegmentationMask> {
    decode_pgm(&fs::read(path)?, num_classes)
}

pub fn write_pgm(path: &Path, mask: &SegmentationMask) -> Result<()> {
    fs::write(path, encode_pgm(mask)?)?;
    Ok(())
}

/// Formats like C's `%.6g`: six significant digits, trailing zeros
/// removed, scientific notation outside `[1e-4, 1e6)`.
pub fn format_sig6(value: f64) -> String {
    const DIGITS: i32 = 6;
    if value == 0.0 {
        return "0".to_string();
    }
    if value.is_nan() {
        return "nan".to_string();
    }
    if value.is_infinite() {
        return if value > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    // the exponent after rounding to six digits
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, value);
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if exp < -4 || exp >= DIGITS {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (DIGITS - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{value:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Writes rows as comma-separated LF-terminated lines.
pub fn csv_string(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig6_matches_printf() {
        let cases = [
            (1.0, "1"),
            (0.5, "0.5"),
            (2.0 / 3.0, "0.666667"),
            (123456.0, "123456"),
            (1234567.0, "1.23457e+06"),
            (1e-5, "1e-05"),
            (1.5e-6, "1.5e-06"),
            (0.0001234567, "0.000123457"),
            (-0.25, "-0.25"),
            (999999.5, "1e+06"),
            (10000.0, "10000"),
            (0.1, "0.1"),
        ];
        for (value, expected) in cases {
            assert_eq!(format_sig6(value), expected, "{value}");
        }
    }

    #[test]
    fn opm1_errors_name_offsets() {
        let grid = ChannelGrid::new(2, 1, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let bytes = encode_opm1(MapKind::Raw, &grid);
        let msg = decode_opm1(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(msg.contains("expected 32 bytes") && msg.contains("got 29"), "{msg}");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_opm1(&bad).unwrap_err().to_string().contains("offset 0"));

        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(decode_opm1(&bad).unwrap_err().to_string().contains("offset 4"));

        let mut huge = bytes[..OPM1_HEADER].to_vec();
        huge[5..17].copy_from_slice(&[0xff; 12]);
        let msg = decode_opm1(&huge).unwrap_err().to_string();
        assert!(msg.contains("overflow") || msg.contains("mismatch"), "{msg}");
    }

    #[test]
    fn pgm_rules() {
        let mask = SegmentationMask::new(2, 3, 4, vec![0, 1, 2, 3, 2, 1]).unwrap();
        let bytes = encode_pgm(&mask).unwrap();
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(decode_pgm(&bytes, 4).unwrap(), mask);

        let maxval_15 = b"P5\n1 1\n15\n\x00";
        assert!(decode_pgm(maxval_15, 2).unwrap_err().to_string().contains("maxval"));

        let with_comment = b"P5\n# made by hand\n2 1\n255\n\x01\x00";
        assert_eq!(decode_pgm(with_comment, 2).unwrap().labels(), &[1, 0]);

        assert!(decode_pgm(b"P2\n1 1\n255\n0", 2).is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00", 2).is_err());
    }
}
