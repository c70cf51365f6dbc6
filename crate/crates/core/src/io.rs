//! PNG and JSON persistence for rasters.

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Image};

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

/// Loads an 8-bit PNG. Gray images stay single-channel, alpha is dropped.
pub fn read_image(path: &Path) -> Result<Image> {
    let dynimg = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    if dynimg.color().channel_count() < 3 {
        let g = dynimg.to_luma8();
        let data = g.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Image::new(w, h, 1, data)
    } else {
        let rgb = dynimg.to_rgb8();
        let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Image::new(w, h, 3, data)
    }
}

/// Writes an 8-bit RGB PNG (gray images are replicated to three channels).
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let mut buf = Vec::with_capacity(image.pixel_count() * 3);
    for i in 0..image.pixel_count() {
        let [r, g, b] = image.rgb255(i);
        buf.extend([r, g, b].map(|v| (v.clamp(0.0, 255.0)).round() as u8));
    }
    let img = RgbImage::from_raw(image.width() as u32, image.height() as u32, buf)
        .expect("buffer sized from image");
    save(path, img)
}

/// Mask PNG: 8-bit gray with values {0, 255}.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let buf = mask.data().iter().map(|&v| v * 255).collect();
    write_gray(path, mask.width(), mask.height(), buf)
}

/// Reads a mask PNG; any pixel above mid-gray counts as foreground.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let (w, h, raw) = read_gray(path)?;
    BinaryMask::new(w, h, raw.into_iter().map(|v| (v > 127) as u8).collect())
}

pub fn write_gray(path: &Path, width: usize, height: usize, buf: Vec<u8>) -> Result<()> {
    let img =
        GrayImage::from_raw(width as u32, height as u32, buf).ok_or_else(|| {
            Error::Input(format!("gray buffer does not match {width}x{height}"))
        })?;
    save(path, img)
}

pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

fn save<P, C>(path: &Path, img: image::ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    ensure_parent(path)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Maps `[0, 1]` to `0..=255`, rounding and clamping.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
