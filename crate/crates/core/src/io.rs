//! File helpers: atomic writes, PNG images, raw float sidecars and base64
//! weight blobs.

use std::fs;
use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use objsdf_autodiff::Matrix;
use serde::Serialize;

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary sibling and renames it over `path`, so that
/// readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn encode_png<P, C>(path: &Path, img: &ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?;
    write_atomic(path, buf.get_ref())
}

/// Quantizes `[0,1]` colors (row-major pixels) to an 8-bit RGB PNG.
pub fn write_rgb_png(path: &Path, width: u32, height: u32, pixels: &[[f64; 3]]) -> Result<()> {
    check_len(pixels.len(), width, height)?;
    let img = RgbImage::from_fn(width, height, |x, y| {
        let p = pixels[(y * width + x) as usize];
        Rgb(p.map(to_u8))
    });
    encode_png(path, &img)
}

/// Single-channel 8-bit PNG, e.g. a label map.
pub fn write_gray_png(path: &Path, width: u32, height: u32, values: &[u8]) -> Result<()> {
    check_len(values.len(), width, height)?;
    let img = GrayImage::from_raw(width, height, values.to_vec()).expect("length checked");
    encode_png(path, &img)
}

pub fn write_gray16_png(path: &Path, width: u32, height: u32, values: &[u16]) -> Result<()> {
    check_len(values.len(), width, height)?;
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width, height, values.to_vec()).expect("length checked");
    encode_png(path, &img)
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn check_len(len: usize, width: u32, height: u32) -> Result<()> {
    if len != width as usize * height as usize {
        return Err(Error::ShapeMismatch {
            op: "png",
            expected: format!("{width}x{height} pixels"),
            found: format!("{len}"),
        });
    }
    Ok(())
}

pub fn read_rgb_png(path: &Path) -> Result<(u32, u32, Vec<[f64; 3]>)> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?
        .to_rgb8();
    let px = img
        .pixels()
        .map(|p| p.0.map(|c| c as f64 / 255.0))
        .collect();
    Ok((img.width(), img.height(), px))
}

pub fn read_gray_png(path: &Path) -> Result<(u32, u32, Vec<u8>)> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::Dataset {
            path: path.into(),
            reason: format!(
                "expected an 8-bit single-channel PNG, got {:?}",
                img.color()
            ),
        });
    }
    let img = img.to_luma8();
    Ok((img.width(), img.height(), img.into_raw()))
}

/// Little-endian `f32` values with no header.
pub fn write_f32_raw(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values
        .iter()
        .flat_map(|v| (*v as f32).to_le_bytes())
        .collect();
    write_atomic(path, &bytes)
}

pub fn read_f32_raw(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Dataset {
            path: path.into(),
            reason: "float sidecar length is not a multiple of 4".into(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect())
}

/// Concatenated little-endian `f64` entries of `ms`, base64-encoded.
pub fn encode_matrices(ms: &[Matrix]) -> String {
    let mut bytes = Vec::with_capacity(8 * ms.iter().map(Matrix::len).sum::<usize>());
    for m in ms {
        for v in m.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    BASE64.encode(bytes)
}

/// Inverse of [`encode_matrices`] for the given shapes.
pub fn decode_matrices(text: &str, shapes: &[(usize, usize)]) -> Result<Vec<Matrix>> {
    let bytes = BASE64
        .decode(text)
        .map_err(|e| Error::invalid(format!("weights are not valid base64: {e}")))?;
    let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
    if bytes.len() != 8 * total {
        return Err(Error::invalid(format!(
            "expected {} weight bytes, found {}",
            8 * total,
            bytes.len()
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    Ok(shapes
        .iter()
        .map(|&(r, c)| Matrix::from_vec(r, c, values.by_ref().take(r * c).collect()))
        .collect())
}
