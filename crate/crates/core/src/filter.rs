//! Separable Gaussian filtering on planar `f64` buffers.

/// How samples outside the plane are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Outside samples are zero; weights are not renormalised.
    Zero,
    /// Edge pixels are repeated.
    Clamp,
}

/// Unnormalised taps `exp(-d²/2σ²)` for `d = -radius..=radius`.
pub fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Taps normalised to unit sum, radius `ceil(3σ)`.
pub fn normalized_taps(sigma: f64) -> Vec<f64> {
    let taps = gaussian_taps(sigma, (3.0 * sigma).ceil().max(1.0) as usize);
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

fn convolve_rows(src: &[f64], dst: &mut [f64], w: usize, h: usize, taps: &[f64], b: Boundary) {
    let r = (taps.len() / 2) as isize;
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                let v = if xx >= 0 && (xx as usize) < w {
                    row[xx as usize]
                } else {
                    match b {
                        Boundary::Zero => continue,
                        Boundary::Clamp => row[xx.clamp(0, w as isize - 1) as usize],
                    }
                };
                acc += t * v;
            }
            dst[y * w + x] = acc;
        }
    }
}

fn convolve_cols(src: &[f64], dst: &mut [f64], w: usize, h: usize, taps: &[f64], b: Boundary) {
    let r = (taps.len() / 2) as isize;
    dst.iter_mut().for_each(|v| *v = 0.0);
    for (k, &t) in taps.iter().enumerate() {
        let off = k as isize - r;
        for y in 0..h {
            let yy = y as isize + off;
            let sy = if yy >= 0 && (yy as usize) < h {
                yy as usize
            } else {
                match b {
                    Boundary::Zero => continue,
                    Boundary::Clamp => yy.clamp(0, h as isize - 1) as usize,
                }
            };
            let (d, s) = (&mut dst[y * w..(y + 1) * w], &src[sy * w..(sy + 1) * w]);
            for (dv, sv) in d.iter_mut().zip(s) {
                *dv += t * sv;
            }
        }
    }
}

/// Applies the same 1-D taps along x then y.
pub fn separable(plane: &[f64], w: usize, h: usize, taps: &[f64], boundary: Boundary) -> Vec<f64> {
    let mut tmp = vec![0.0; plane.len()];
    let mut out = vec![0.0; plane.len()];
    convolve_rows(plane, &mut tmp, w, h, taps, boundary);
    convolve_cols(&tmp, &mut out, w, h, taps, boundary);
    out
}

/// Normalised Gaussian blur with edge clamping, as used for image processing.
pub fn gaussian_blur(plane: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    separable(plane, w, h, &normalized_taps(sigma), Boundary::Clamp)
}
