use std::collections::HashMap;

use rayon::prelude::*;

use super::{check_shapes, iterate, CrfParams, Features, MarginalField, MeanField, UnaryField};
use crate::error::{ensure, Result};
use crate::filter::{gaussian_taps, separable, Boundary};
use crate::raster::Image;

/// Grid nodes allowed before the sampling rate is lowered.
pub const DEFAULT_NODE_BUDGET: usize = 1 << 20;
/// Preferred grid cells per kernel standard deviation.
const RHO_MAX: f64 = 2.0;
const DIMS: usize = 5;
/// Pixels with at most this many colour neighbours get exact appearance sums.
pub const SPARSE_NEIGHBOURS: usize = 512;
/// Colour truncation radius for exact sums, in units of `theta_beta`.
const COLOUR_RADIUS: f64 = 6.0;

/// Sampling of the 5-D (x, y, r, g, b) bilateral grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPlan {
    /// Grid cells per standard deviation, shared by all five axes.
    pub rho: f64,
    pub dims: [usize; DIMS],
}

impl GridPlan {
    pub fn nodes(&self) -> usize {
        self.dims.iter().product()
    }

    /// Finest rate `≤ RHO_MAX` that fits `budget`; fails below one cell per σ.
    pub fn choose(extent: [f64; DIMS], budget: usize) -> Result<Self> {
        let dims_at = |rho: f64| extent.map(|e| (e * rho).floor() as usize + 2);
        let nodes = |d: [usize; DIMS]| d.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
        let mut rho = RHO_MAX;
        while nodes(dims_at(rho)).is_none_or(|n| n > budget) {
            rho *= 0.95;
            ensure!(
                rho >= 1.0,
                Config,
                "CRF bandwidth is smaller than one bilateral grid cell at this image size; use the naive path or widen theta_alpha/theta_beta"
            );
        }
        Ok(Self { rho, dims: dims_at(rho) })
    }
}

/// Mean field with filtered message passing: exact separable convolution for
/// the smoothness kernel and a tent-sampled bilateral grid for appearance.
/// Pixels in sparse colour neighbourhoods bypass the grid and sum their
/// appearance neighbours exactly (colour distance truncated at 6θβ).
pub fn mean_field_fast(unary: &UnaryField, image: &Image, params: &CrfParams) -> Result<MarginalField> {
    Ok(mean_field_fast_with(unary, image, params, DEFAULT_NODE_BUDGET, None, |_, _| {})?.marginals)
}

pub fn mean_field_fast_with(
    unary: &UnaryField,
    image: &Image,
    params: &CrfParams,
    node_budget: usize,
    init: Option<&MarginalField>,
    observe: impl FnMut(usize, &MarginalField),
) -> Result<MeanField> {
    check_shapes(unary, image)?;
    params.validate()?;
    let f = Features::from_image(image);
    let (w, h) = (f.width, f.height);
    let smooth = (params.w2 > 0.0).then(|| {
        let g = params.theta_gamma;
        gaussian_taps(g, (6.0 * g).ceil() as usize)
    });
    let grid = if params.w1 > 0.0 {
        Some(Appearance::new(&f, params, node_budget)?)
    } else {
        None
    };
    let ones = grid.as_ref().map(|g| g.filter(&vec![1.0; w * h]));
    let messages = |q: &MarginalField| -> Vec<[f64; 2]> {
        let q1: Vec<f64> = q.q.iter().map(|v| v[1]).collect();
        let mut m = vec![[0.0; 2]; q1.len()];
        if let (Some(grid), Some(ones)) = (&grid, &ones) {
            let a1 = grid.filter(&q1);
            for (i, mi) in m.iter_mut().enumerate() {
                mi[1] += params.w1 * a1[i];
                mi[0] += params.w1 * (ones[i] - a1[i]);
            }
        }
        if let Some(taps) = &smooth {
            let s1 = separable(&q1, w, h, taps, Boundary::Zero);
            let q0: Vec<f64> = q.q.iter().map(|v| v[0]).collect();
            let s0 = separable(&q0, w, h, taps, Boundary::Zero);
            for (i, mi) in m.iter_mut().enumerate() {
                // The centre tap is 1; drop the i = j term.
                mi[1] += params.w2 * (s1[i] - q1[i]);
                mi[0] += params.w2 * (s0[i] - q0[i]);
            }
        }
        m
    };
    iterate(unary, params, init, messages, observe)
}

/// Operator for `Σ_{j≠i} k_app(i,j)·v_j`.
struct Appearance {
    exact: Vec<Option<Vec<(u32, f64)>>>,
    grid: Option<Grid>,
}

impl Appearance {
    fn new(f: &Features, params: &CrfParams, budget: usize) -> Result<Self> {
        let exact = sparse_neighbours(f, params);
        // Planned even when unused so the bandwidth check does not depend on content.
        let grid = Grid::new(f, params, budget)?;
        let grid = exact.iter().any(Option::is_none).then_some(grid);
        Ok(Self { exact, grid })
    }

    fn filter(&self, v: &[f64]) -> Vec<f64> {
        let sliced = self.grid.as_ref().map(|g| g.filter(v, &self.exact));
        self.exact
            .iter()
            .enumerate()
            .map(|(i, row)| match row {
                Some(row) => row.iter().map(|&(j, k)| k * v[j as usize]).sum(),
                None => sliced.as_ref().expect("grid built for dense pixels")[i],
            })
            .collect()
    }
}

/// Exact appearance neighbour lists for pixels with few similar colours.
fn sparse_neighbours(f: &Features, params: &CrfParams) -> Vec<Option<Vec<(u32, f64)>>> {
    let radius = COLOUR_RADIUS * params.theta_beta;
    let cell = |c: &[f64; 3]| c.map(|v| (v / radius).floor() as i64);
    let mut buckets: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
    for (i, c) in f.rgb.iter().enumerate() {
        buckets.entry(cell(c)).or_default().push(i as u32);
    }
    let (a2, b2) = (
        2.0 * params.theta_alpha * params.theta_alpha,
        2.0 * params.theta_beta * params.theta_beta,
    );
    (0..f.rgb.len())
        .into_par_iter()
        .map(|i| {
            let ci = f.rgb[i];
            let (xi, yi) = f.pos(i);
            let home = cell(&ci);
            let mut row = Vec::new();
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let key = [home[0] + dx, home[1] + dy, home[2] + dz];
                        for &j in buckets.get(&key).into_iter().flatten() {
                            let j = j as usize;
                            let dc: f64 = (0..3).map(|c| (ci[c] - f.rgb[j][c]).powi(2)).sum();
                            if j == i || dc >= radius * radius {
                                continue;
                            }
                            if row.len() == SPARSE_NEIGHBOURS {
                                return None;
                            }
                            let (xj, yj) = f.pos(j);
                            let dp = (xi - xj).powi(2) + (yi - yj).powi(2);
                            row.push((j as u32, (-dp / a2 - dc / b2).exp()));
                        }
                    }
                }
            }
            Some(row)
        })
        .collect()
}

/// Splat/blur/slice approximation of the appearance sum.
struct Grid {
    plan: GridPlan,
    /// Grid index and tent weight of the 32 corners around each pixel.
    corners: Vec<[(u32, f64); 1 << DIMS]>,
    /// Effective kernel value of each pixel with itself.
    self_weight: Vec<f64>,
    taps: Vec<f64>,
    norm: f64,
}

impl Grid {
    fn new(f: &Features, params: &CrfParams, budget: usize) -> Result<Self> {
        let n = f.rgb.len();
        let feats: Vec<[f64; DIMS]> = (0..n)
            .map(|i| {
                let (x, y) = f.pos(i);
                let c = f.rgb[i];
                let (a, b) = (params.theta_alpha, params.theta_beta);
                [x / a, y / a, c[0] / b, c[1] / b, c[2] / b]
            })
            .collect();
        let mut lo = [f64::INFINITY; DIMS];
        let mut hi = [f64::NEG_INFINITY; DIMS];
        for p in &feats {
            for d in 0..DIMS {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let extent: [f64; DIMS] = std::array::from_fn(|d| hi[d] - lo[d]);
        let plan = GridPlan::choose(extent, budget)?;
        ensure!(plan.nodes() <= u32::MAX as usize, Config, "bilateral grid too large");
        let rho = plan.rho;
        // Tent splat and slice each add 1/6 cell² of variance.
        let s = (rho * rho - 1.0 / 3.0).sqrt();
        let mut taps = gaussian_taps(s, (4.0 * s).ceil() as usize);
        let sum: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= sum);
        let r = taps.len() / 2;
        let (g0, g1) = (taps[r], taps[r + 1]);
        let mut strides = [1usize; DIMS];
        for d in (0..DIMS - 1).rev() {
            strides[d] = strides[d + 1] * plan.dims[d + 1];
        }
        let mut corners = Vec::with_capacity(n);
        let mut self_weight = Vec::with_capacity(n);
        for p in &feats {
            let mut base = [0usize; DIMS];
            let mut frac = [0.0; DIMS];
            let mut sw = 1.0;
            for d in 0..DIMS {
                let u = (p[d] - lo[d]) * rho;
                let c = (u.floor() as usize).min(plan.dims[d] - 2);
                let fr = u - c as f64;
                base[d] = c;
                frac[d] = fr;
                sw *= (1.0 - fr) * (1.0 - fr) * g0 + 2.0 * fr * (1.0 - fr) * g1 + fr * fr * g0;
            }
            let cs: [(u32, f64); 1 << DIMS] = std::array::from_fn(|k| {
                let mut idx = 0;
                let mut wgt = 1.0;
                for d in 0..DIMS {
                    let bit = (k >> d) & 1;
                    idx += (base[d] + bit) * strides[d];
                    wgt *= if bit == 1 { frac[d] } else { 1.0 - frac[d] };
                }
                (idx as u32, wgt)
            });
            corners.push(cs);
            self_weight.push(sw);
        }
        let norm = ((2.0 * std::f64::consts::PI).sqrt() * rho).powi(DIMS as i32);
        Ok(Self {
            plan,
            corners,
            self_weight,
            taps,
            norm,
        })
    }

    /// Slices only pixels without an exact row.
    fn filter(&self, v: &[f64], exact: &[Option<Vec<(u32, f64)>>]) -> Vec<f64> {
        let mut grid = vec![0.0; self.plan.nodes()];
        for (cs, &val) in self.corners.iter().zip(v) {
            for &(idx, wgt) in cs {
                grid[idx as usize] += wgt * val;
            }
        }
        let dims = self.plan.dims;
        for axis in 0..DIMS {
            let inner: usize = dims[axis + 1..].iter().product();
            blur_axis(&mut grid, dims[axis], inner, &self.taps);
        }
        self.corners
            .par_iter()
            .zip(&self.self_weight)
            .zip(v)
            .zip(exact)
            .map(|(((cs, &sw), &val), row)| {
                if row.is_some() {
                    return 0.0;
                }
                let s: f64 = cs.iter().map(|&(idx, wgt)| wgt * grid[idx as usize]).sum();
                self.norm * (s - sw * val)
            })
            .collect()
    }
}

/// Convolves every line along one axis. The grid is viewed as slabs of
/// `len × inner` values; slabs are independent.
fn blur_axis(grid: &mut [f64], len: usize, inner: usize, taps: &[f64]) {
    let r = taps.len() / 2;
    grid.par_chunks_mut(len * inner).for_each_init(
        || (Vec::new(), Vec::new()),
        |(src, live): &mut (Vec<f64>, Vec<bool>), slab| {
            live.clear();
            live.extend(slab.chunks(inner).map(|row| row.iter().any(|&x| x != 0.0)));
            if !live.iter().any(|&l| l) {
                return;
            }
            src.clear();
            src.extend_from_slice(slab);
            slab.fill(0.0);
            for (k, out) in slab.chunks_mut(inner).enumerate() {
                let from = k.saturating_sub(r);
                let to = (k + r).min(len - 1);
                for j in from..=to {
                    if !live[j] {
                        continue;
                    }
                    let t = taps[j + r - k];
                    let row = &src[j * inner..(j + 1) * inner];
                    for (o, &s) in out.iter_mut().zip(row) {
                        *o += t * s;
                    }
                }
            }
        },
    );
}
