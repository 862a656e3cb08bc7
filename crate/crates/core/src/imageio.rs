//! Image files: the SBIM1 raw float format and 8-bit PNG renders.
//!
//! SBIM1 layout: the 5 ASCII bytes `SBIM1`, width and height as `u32` little
//! endian, then `width * height` row-major `f32` little-endian pixels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

pub const SBIM_MAGIC: &[u8; 5] = b"SBIM1";

pub fn write_sbim(img: &Image, mut w: impl Write) -> Result<()> {
    if !img.is_finite() {
        return Err(Error::Format("refusing to write non-finite pixels".into()));
    }
    let width = u32::try_from(img.width()).map_err(|_| Error::Format("width exceeds u32".into()))?;
    let height = u32::try_from(img.height()).map_err(|_| Error::Format("height exceeds u32".into()))?;
    let mut buf = Vec::with_capacity(13 + 4 * img.len());
    buf.extend_from_slice(SBIM_MAGIC);
    buf.extend_from_slice(&width.to_le_bytes());
    buf.extend_from_slice(&height.to_le_bytes());
    for &v in img.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_sbim(mut r: impl Read) -> Result<Image> {
    let mut header = [0u8; 13];
    r.read_exact(&mut header)
        .map_err(|e| Error::Format(format!("truncated SBIM1 header: {e}")))?;
    if &header[..5] != SBIM_MAGIC {
        return Err(Error::Format("bad magic, expected SBIM1".into()));
    }
    let width = u32::from_le_bytes(header[5..9].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(header[9..13].try_into().unwrap()) as usize;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload has {} bytes, {width}x{height} needs {expected}",
            payload.len()
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite pixel in payload".into()));
    }
    Image::from_vec(width, height, data)
}

pub fn save_sbim(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_sbim(img, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_sbim(path: impl AsRef<Path>) -> Result<Image> {
    read_sbim(BufReader::new(File::open(path)?))
}

/// Rounds `img` to the precision stored on disk.
pub fn quantize_f32(img: &Image) -> Image {
    img.map(|v| v as f32 as f64)
}

/// Fixed window `[0, 1] -> [0, 255]`, clamped.
pub fn to_gray8(img: &Image) -> Vec<u8> {
    img.data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Signed difference map: `-limit` renders blue, 0 white, `+limit` red.
pub fn to_signed_rgb8(img: &Image, limit: f64) -> Vec<u8> {
    let limit = if limit > 0.0 { limit } else { 1.0 };
    let mut out = Vec::with_capacity(3 * img.len());
    for &v in img.data() {
        let s = (v / limit).clamp(-1.0, 1.0);
        let fade = ((1.0 - s.abs()) * 255.0).round() as u8;
        if s >= 0.0 {
            out.extend_from_slice(&[255, fade, fade]);
        } else {
            out.extend_from_slice(&[fade, fade, 255]);
        }
    }
    out
}

fn encode_png(width: usize, height: usize, color: png::ColorType, pixels: &[u8], w: impl Write) -> Result<()> {
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Format(format!("png header: {e}")))?;
    writer
        .write_image_data(pixels)
        .map_err(|e| Error::Format(format!("png data: {e}")))?;
    writer
        .finish()
        .map_err(|e| Error::Format(format!("png finish: {e}")))?;
    Ok(())
}

pub fn write_png_gray(img: &Image, w: impl Write) -> Result<()> {
    encode_png(img.width(), img.height(), png::ColorType::Grayscale, &to_gray8(img), w)
}

pub fn png_gray_bytes(img: &Image) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_png_gray(img, &mut buf)?;
    Ok(buf)
}

pub fn write_png_signed(img: &Image, limit: f64, w: impl Write) -> Result<()> {
    encode_png(img.width(), img.height(), png::ColorType::Rgb, &to_signed_rgb8(img, limit), w)
}

pub fn save_png_gray(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_png_gray(img, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn save_png_signed(img: &Image, limit: f64, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_png_signed(img, limit, &mut w)?;
    w.flush()?;
    Ok(())
}
