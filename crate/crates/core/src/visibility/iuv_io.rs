//! IUV images: 3-channel 8-bit PNG (part, round(255 u), round(255 v)) with
//! an optional lossless JSON sidecar holding float UVs.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DenseUVMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IuvSidecar {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Sidecar location for a PNG: same stem, `.json` extension.
pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

fn quantize(t: f64) -> u8 {
    (255.0 * t).round().clamp(0.0, 255.0) as u8
}

pub fn write_iuv_png(path: impl AsRef<Path>, map: &DenseUVMap) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), map.width as u32, map.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| png_err(path, e))?;
    let mut data = Vec::with_capacity(map.part.len() * 3);
    for i in 0..map.part.len() {
        data.extend([map.part[i], quantize(map.u[i]), quantize(map.v[i])]);
    }
    writer.write_image_data(&data).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// Writes the PNG and its float sidecar.
pub fn write_iuv(path: impl AsRef<Path>, map: &DenseUVMap) -> Result<()> {
    let path = path.as_ref();
    write_iuv_png(path, map)?;
    crate::io::write_json(
        sidecar_path(path),
        &IuvSidecar {
            width: map.width,
            height: map.height,
            u: map.u.clone(),
            v: map.v.clone(),
        },
    )
}

pub fn read_iuv_png(path: impl AsRef<Path>) -> Result<DenseUVMap> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(png_err(path, format!("expected an RGB image, got {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut map = DenseUVMap::background(w, h);
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            let px = &row[x * channels..x * channels + 3];
            if px[0] != 0 {
                map.set(x, y, px[0], px[1] as f64 / 255.0, px[2] as f64 / 255.0);
            }
        }
    }
    Ok(map)
}

/// Reads an IUV PNG; when a sidecar exists next to it, its float UVs
/// replace the quantized ones on human pixels.
pub fn load_iuv(path: impl AsRef<Path>) -> Result<DenseUVMap> {
    let path = path.as_ref();
    let mut map = read_iuv_png(path)?;
    let side = sidecar_path(path);
    if side.exists() {
        let s: IuvSidecar = crate::io::read_json(&side)?;
        if s.width != map.width || s.height != map.height || s.u.len() != map.u.len() || s.v.len() != map.v.len() {
            return Err(Error::InvalidInput(format!(
                "sidecar `{}` does not match the {}x{} image",
                side.display(),
                map.width,
                map.height
            )));
        }
        for i in 0..map.part.len() {
            if map.part[i] != 0 {
                map.u[i] = s.u[i];
                map.v[i] = s.v[i];
            }
        }
    }
    map.validate()?;
    Ok(map)
}
