use crate::diffusion::ClassLabel;
use crate::error::{ensure, Result};
use crate::filter::gaussian_blur;
use crate::raster::BinaryMask;

use super::Sample;

/// For every mask pixel, the index of its nearest (Euclidean) unmasked pixel.
///
/// Only unmasked pixels 4-adjacent to the mask are candidates: if `q` is
/// nearest to `p` and all four neighbours of `q` were unmasked, the neighbour
/// stepping toward `p` along its larger offset axis would be strictly closer.
/// Ties go to the lowest candidate index.
pub fn nearest_outside_fill(mask: &BinaryMask) -> Vec<Option<usize>> {
    let (w, h) = (mask.width(), mask.height());
    let mut border = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                continue;
            }
            let touches = (x > 0 && mask.get(x - 1, y))
                || (x + 1 < w && mask.get(x + 1, y))
                || (y > 0 && mask.get(x, y - 1))
                || (y + 1 < h && mask.get(x, y + 1));
            if touches {
                border.push((x as i64, y as i64));
            }
        }
    }
    (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            if !mask.get(x as usize, y as usize) {
                return None;
            }
            border
                .iter()
                .min_by_key(|&&(bx, by)| (bx - x).pow(2) + (by - y).pow(2))
                .map(|&(bx, by)| by as usize * w + bx as usize)
        })
        .collect()
}

/// Removes masked lesions: nearest-skin fill, then a σ=3 blend inside the mask.
pub fn healthy_counterfactual(s: &Sample) -> Result<Sample> {
    let (w, h) = (s.mask.width(), s.mask.height());
    ensure!(
        s.image.width() == w && s.image.height() == h,
        Data,
        "mask and image sizes differ"
    );
    ensure!(
        s.mask.area() < w * h,
        Data,
        "mask covers the whole image; no skin left to fill from"
    );
    let mut image = s.image.clone();
    if !s.mask.is_empty() {
        let nearest = nearest_outside_fill(&s.mask);
        for c in 0..image.channels() {
            let plane = image.plane(c);
            let filled: Vec<f64> = (0..w * h)
                .map(|i| nearest[i].map_or(plane[i], |j| plane[j]))
                .collect();
            let blended = gaussian_blur(&filled, w, h, 3.0);
            let out: Vec<f64> = (0..w * h)
                .map(|i| if s.mask.data()[i] == 1 { blended[i] } else { plane[i] })
                .collect();
            image.set_plane(c, &out);
        }
    }
    Ok(Sample {
        image,
        mask: BinaryMask::zeros(w, h),
        label: ClassLabel::Healthy,
    })
}
