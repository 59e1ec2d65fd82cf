//! Plain-file formats: parameter blobs, PNG images and raw float images.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Sidecar describing a flat little-endian `f64` blob.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobMeta {
    pub kind: String,
    /// `(name, rows, cols)` for each tensor, in storage order.
    pub shapes: Vec<(String, usize, usize)>,
    pub config_hash: String,
}

impl BlobMeta {
    pub fn total_len(&self) -> usize {
        self.shapes.iter().map(|(_, r, c)| r * c).sum()
    }
}

pub fn sidecar_path(blob: &Path) -> PathBuf {
    let mut s = blob.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_f64(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f64(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::InvalidParameter(format!("blob length {} is not a multiple of 8", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect())
}

/// Writes `path` and `path.json`.
pub fn write_blob(path: &Path, values: &[f64], meta: &BlobMeta) -> Result<()> {
    if values.len() != meta.total_len() {
        return Err(Error::InvalidParameter(format!("{} values for shapes totalling {}", values.len(), meta.total_len())));
    }
    fs::write(path, encode_f64(values))?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn read_blob(path: &Path) -> Result<(Vec<f64>, BlobMeta)> {
    let meta: BlobMeta = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let values = decode_f64(&fs::read(path)?)?;
    check_blob(&values, &meta)?;
    Ok((values, meta))
}

pub fn check_blob(values: &[f64], meta: &BlobMeta) -> Result<()> {
    if values.len() != meta.total_len() {
        return Err(Error::InvalidParameter(format!("blob has {} values, sidecar expects {}", values.len(), meta.total_len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "blob load" });
    }
    Ok(())
}

/// 8-bit RGB PNG, values clamped to `[0, 1]` and rounded.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    writer.write_image_data(&bytes)?;
    writer.finish()?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Image> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info()?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!("expected 8-bit RGB, got {:?} {:?}", info.color_type, info.bit_depth)));
    }
    let data = buf[..info.buffer_size()].iter().map(|&b| b as f64 / 255.0).collect();
    Image::from_data(info.width as usize, info.height as usize, data)
}

#[derive(Serialize, Deserialize)]
struct RawHeader {
    width: usize,
    height: usize,
    channels: usize,
    dtype: String,
}

/// One JSON header line, then `width * height * 3` little-endian `f64`s.
pub fn write_raw(path: &Path, img: &Image) -> Result<()> {
    let header = RawHeader { width: img.width, height: img.height, channels: 3, dtype: "f64le".into() };
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    w.write_all(&encode_f64(&img.data))?;
    w.flush()?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<Image> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: RawHeader = serde_json::from_str(line.trim_end())?;
    if header.channels != 3 || header.dtype != "f64le" {
        return Err(Error::InvalidParameter(format!("unsupported raw image {} channels {}", header.channels, header.dtype)));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    Image::from_data(header.width, header.height, decode_f64(&bytes)?)
}

/// Reads an image by extension: `.png` or raw float otherwise.
pub fn read_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => read_png(path),
        _ => read_raw(path),
    }
}
