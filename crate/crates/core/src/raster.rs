//! Pixel containers shared by every stage: colour images, real-valued maps and
//! binary masks. All are row-major with `(x, y)` addressing.

use crate::error::{ensure, Result};

/// H×W×C raster with values in `[0, 1]`, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            width > 0 && height > 0 && channels > 0,
            Input,
            "image dimensions must be positive, got {width}x{height}x{channels}"
        );
        ensure!(
            data.len() == width * height * channels,
            Input,
            "image buffer holds {} values, expected {}",
            data.len(),
            width * height * channels
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            Input,
            "image contains non-finite values"
        );
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, color: &[f32]) -> Self {
        let mut data = Vec::with_capacity(width * height * color.len());
        for _ in 0..width * height {
            data.extend_from_slice(color);
        }
        Self {
            width,
            height,
            channels: color.len(),
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Channel `c` as a planar `f64` buffer.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .map(|&v| v as f64)
            .collect()
    }

    pub fn set_plane(&mut self, c: usize, plane: &[f64]) {
        for (i, v) in plane.iter().enumerate() {
            self.data[i * self.channels + c] = *v as f32;
        }
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Colour vector for pixel `i` on a 0–255 scale with exactly three
    /// channels; single-channel images are replicated.
    pub fn rgb255(&self, i: usize) -> [f64; 3] {
        let p = &self.data[i * self.channels..(i + 1) * self.channels];
        match self.channels {
            1 | 2 => {
                let g = p[0] as f64 * 255.0;
                [g, g, g]
            }
            _ => [p[0] as f64 * 255.0, p[1] as f64 * 255.0, p[2] as f64 * 255.0],
        }
    }
}

/// Real-valued H×W map.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RealMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == width * height,
            Input,
            "map buffer holds {} values, expected {}x{}",
            data.len(),
            width,
            height
        );
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Mean over pixels where `mask` is set; `None` when the mask is empty.
    pub fn masked_mean(&self, mask: &BinaryMask, inside: bool) -> Option<f64> {
        let (sum, n) = self
            .data
            .iter()
            .zip(mask.data())
            .filter(|(_, &m)| (m == 1) == inside)
            .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

/// Strictly binary H×W mask (values 0 or 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        ensure!(
            data.len() == width * height,
            Input,
            "mask buffer holds {} values, expected {}x{}",
            data.len(),
            width,
            height
        );
        ensure!(
            data.iter().all(|&v| v <= 1),
            Input,
            "mask values must be 0 or 1"
        );
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] == 1
    }
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }
    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }
    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }
    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn to_real(&self) -> RealMap {
        RealMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }
}
