//! 8-bit grayscale rendering of real-valued maps with a JSON sidecar.

use std::path::{Path, PathBuf};

use diffseg::io::{quantize, write_json};
use diffseg::{Error, RealMap};
use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

/// How map values are mapped onto `0..=255`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scale {
    /// The map's own range; a constant map renders as all zeros.
    MinMax,
    /// A fixed interval, values outside are clamped.
    Fixed { lo: f64, hi: f64 },
}

/// Records what a heatmap pixel means: `value = lo + level/255 · (hi − lo)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub width: usize,
    pub height: usize,
    /// Range of the map itself.
    pub min: f64,
    pub max: f64,
    /// Interval mapped onto `0..=255`.
    pub lo: f64,
    pub hi: f64,
    /// Multiplier from value to unit intensity, `1/(hi − lo)`.
    pub scale: f64,
}

/// 8-bit levels and the sidecar describing them.
pub fn quantize_map(map: &RealMap, scale: Scale) -> Result<(Vec<u8>, Sidecar), Error> {
    if map.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("heatmap source contains non-finite values".into()));
    }
    let (min, max) = map.min_max();
    let (lo, hi) = match scale {
        Scale::MinMax => (min, max),
        Scale::Fixed { lo, hi } => {
            if !(hi > lo) {
                return Err(Error::Input(format!("heatmap interval [{lo}, {hi}] is empty")));
            }
            (lo, hi)
        }
    };
    let s = if hi > lo { 1.0 / (hi - lo) } else { 0.0 };
    let levels = map.data().iter().map(|&v| quantize((v - lo) * s)).collect();
    let side = Sidecar {
        width: map.width(),
        height: map.height(),
        min,
        max,
        lo,
        hi,
        scale: s,
    };
    Ok((levels, side))
}

/// PNG bytes for `map`. Identical inputs give identical bytes.
pub fn render_heatmap(map: &RealMap, scale: Scale) -> Result<(Vec<u8>, Sidecar), Error> {
    let (levels, side) = quantize_map(map, scale)?;
    let mut bytes = Vec::new();
    PngEncoder::new(&mut bytes)
        .write_image(&levels, map.width() as u32, map.height() as u32, ExtendedColorType::L8)
        .map_err(|source| Error::Image {
            path: PathBuf::from("<memory>"),
            source,
        })?;
    Ok((bytes, side))
}

pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

/// Writes `path` and its `.json` sidecar.
pub fn write_heatmap(path: &Path, map: &RealMap, scale: Scale) -> Result<Sidecar, Error> {
    let (bytes, side) = render_heatmap(map, scale)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    write_json(&sidecar_path(path), &side)?;
    Ok(side)
}

/// Reads a heatmap back into value units using its sidecar.
pub fn read_heatmap(path: &Path) -> Result<RealMap, Error> {
    let side_path = sidecar_path(path);
    let text = std::fs::read_to_string(&side_path).map_err(|e| Error::Io {
        path: side_path.clone(),
        source: e,
    })?;
    let side: Sidecar = serde_json::from_str(&text)?;
    let (w, h, raw) = diffseg::io::read_gray(path)?;
    if (w, h) != (side.width, side.height) {
        return Err(Error::Data(format!("{} does not match its sidecar size", path.display())));
    }
    let data = raw
        .into_iter()
        .map(|l| side.lo + l as f64 / 255.0 * (side.hi - side.lo))
        .collect();
    RealMap::new(w, h, data)
}
