use rayon::prelude::*;

use super::{check_shapes, iterate, pairwise_kernel, CrfParams, Features, MarginalField, MeanField, UnaryField};
use crate::error::{ensure, Result};
use crate::raster::Image;

/// Largest pixel count accepted by the quadratic path (64×64).
pub const NAIVE_MAX_PIXELS: usize = 64 * 64;

/// Mean field with exact O(N²) message passing.
pub fn mean_field_naive(unary: &UnaryField, image: &Image, params: &CrfParams) -> Result<MarginalField> {
    Ok(mean_field_naive_with(unary, image, params, None, |_, _| {})?.marginals)
}

/// As [`mean_field_naive`] with an optional starting point and a per-iteration observer.
pub fn mean_field_naive_with(
    unary: &UnaryField,
    image: &Image,
    params: &CrfParams,
    init: Option<&MarginalField>,
    observe: impl FnMut(usize, &MarginalField),
) -> Result<MeanField> {
    check_shapes(unary, image)?;
    ensure!(
        image.width() <= 64 && image.height() <= 64,
        Input,
        "naive CRF is limited to 64x64 images (got {}x{}); use the fast path",
        image.width(),
        image.height()
    );
    let f = Features::from_image(image);
    let n = f.rgb.len();
    // Kernel rows are recomputed per iteration to keep memory linear.
    let messages = |q: &MarginalField| -> Vec<[f64; 2]> {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let (pi, ci) = (f.pos(i), f.rgb[i]);
                let mut m = [0.0; 2];
                for j in 0..n {
                    if j != i {
                        let k = pairwise_kernel(pi, f.pos(j), ci, f.rgb[j], params);
                        m[0] += k * q.q[j][0];
                        m[1] += k * q.q[j][1];
                    }
                }
                m
            })
            .collect()
    };
    iterate(unary, params, init, messages, observe)
}
