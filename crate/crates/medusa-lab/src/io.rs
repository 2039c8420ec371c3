//! File formats: 17-significant-digit JSON, binary PGM images, manifests.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::numkit::Tensor;

/// JSON formatter that writes every float with 17 significant digits, enough
/// to reproduce any `f64` bit-exactly on load.
struct SigDigitFormatter;

impl serde_json::ser::Formatter for SigDigitFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

/// Serializes to JSON with 17-significant-digit floats.
pub fn to_json_17<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigDigitFormatter);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Parse {
            offset: 0,
            message: format!("serialize: {e}"),
        })?;
    String::from_utf8(buf).map_err(|e| Error::Parse {
        offset: 0,
        message: format!("serialize produced invalid utf-8: {e}"),
    })
}

/// Parses JSON, reporting the byte offset of the first error.
pub fn from_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in text.split('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len() + 1;
    }
    text.len()
}

/// Writes an image as binary PGM (P5, 8-bit): pixel byte = round(x·255).
pub fn write_pgm(path: &Path, image: &Image) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let mut out = Vec::with_capacity(32 + h * w);
    write!(out, "P5\n{w} {h}\n255\n")?;
    for &v in image.pixels().data() {
        out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a binary PGM written by [`write_pgm`]; pixels map back to `v/255`.
pub fn read_pgm(path: &Path, id: &str, label: &str) -> Result<Image> {
    let bytes = fs::read(path)?;
    let header_err = |msg: &str, offset: usize| Error::Parse {
        offset,
        message: format!("pgm: {msg}"),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push((start, &bytes[start..pos]));
    }
    if fields.len() < 4 {
        return Err(header_err("truncated header", pos));
    }
    if fields[0].1 != b"P5" {
        return Err(header_err("expected P5 magic", fields[0].0));
    }
    let parse_num = |f: (usize, &[u8])| -> Result<usize> {
        std::str::from_utf8(f.1)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| header_err("invalid header number", f.0))
    };
    let w = parse_num(fields[1])?;
    let h = parse_num(fields[2])?;
    let maxval = parse_num(fields[3])?;
    if maxval != 255 {
        return Err(header_err("only maxval 255 supported", fields[3].0));
    }
    pos += 1; // single whitespace byte after maxval
    if bytes.len() < pos + h * w {
        return Err(header_err("truncated pixel data", bytes.len()));
    }
    let data: Vec<f64> = bytes[pos..pos + h * w]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Image::new(id, label, Tensor::new(vec![h, w], data)?)
}

/// Manifest entry pairing an image id/label with its pixel file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: String,
    pub file: String,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(entries).map_err(json_err)?)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    from_json(&fs::read_to_string(path)?)
}

/// Float-exact image record: pixels stored as raw f64 arrays so downstream
/// quantization (PGM export, bit-depth defenses) is measured, never implied.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FloatImageFile {
    pub id: String,
    pub label: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_float_image(path: &Path, image: &Image) -> Result<()> {
    let record = FloatImageFile {
        id: image.id.clone(),
        label: image.label.clone(),
        shape: image.pixels().shape().to_vec(),
        data: image.pixels().data().to_vec(),
    };
    fs::write(path, to_json_17(&record)?)?;
    Ok(())
}

pub fn read_float_image(path: &Path) -> Result<Image> {
    let record: FloatImageFile = from_json(&fs::read_to_string(path)?)?;
    Image::new(
        record.id,
        record.label,
        Tensor::new(record.shape, record.data)?,
    )
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Parse {
        offset: 0,
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_17_round_trips_f64_exactly() {
        let values = vec![0.1, 1.0 / 3.0, 2.0_f64.sqrt(), -1e-300, 255.0 / 7.0];
        let text = to_json_17(&values).unwrap();
        let back: Vec<f64> = from_json(&text).unwrap();
        assert_eq!(values, back);
    }

    #[test]
    fn parse_error_reports_byte_offset() {
        let bad = "{\"a\": 1,\n  \"b\": }";
        let err = from_json::<serde_json::Value>(bad).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert!(offset > 8, "offset {offset} too small"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn pgm_round_trip_on_grid_aligned_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let data: Vec<f64> = (0..16).map(|i| f64::from(i as u8 * 16) / 255.0).collect();
        let img = Image::new("i0", "normal", Tensor::new(vec![4, 4], data).unwrap()).unwrap();
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path, "i0", "normal").unwrap();
        assert_eq!(img.pixels(), back.pixels());
    }
}
