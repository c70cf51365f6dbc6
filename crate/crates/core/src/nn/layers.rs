//! Layers with explicit reverse passes. Parameters live in one flat buffer;
//! each layer stores offsets into it so gradients share the same layout.

use crate::nn::real::{gemm, Real};
use crate::nn::tensor::Tensor4;

/// Parameterised layer families, used for gradient-check reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Linear,
    GroupNorm,
    Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Identity,
}

impl Activation {
    pub fn apply<F: Real>(self, x: F) -> F {
        match self {
            Activation::Silu => x / (F::one() + (-x).exp()),
            Activation::Identity => x,
        }
    }

    pub fn derivative<F: Real>(self, x: F) -> F {
        match self {
            Activation::Silu => {
                let s = F::one() / (F::one() + (-x).exp());
                s * (F::one() + x * (F::one() - s))
            }
            Activation::Identity => F::one(),
        }
    }

    pub(crate) fn forward<F: Real>(self, x: &[F]) -> Vec<F> {
        x.iter().map(|&v| self.apply(v)).collect()
    }

    /// Gradient w.r.t. the pre-activation `x`.
    pub(crate) fn backward<F: Real>(self, x: &[F], dy: &[F]) -> Vec<F> {
        x.iter()
            .zip(dy)
            .map(|(&v, &g)| g * self.derivative(v))
            .collect()
    }
}

/// A named slice of the flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub kind: LayerKind,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Allocates parameter blocks in declaration order.
#[derive(Debug, Default)]
pub(crate) struct Layout {
    pub blocks: Vec<ParamBlock>,
    pub total: usize,
}

impl Layout {
    pub fn add(&mut self, name: String, kind: LayerKind, shape: Vec<usize>) -> usize {
        let offset = self.total;
        let block = ParamBlock {
            name,
            kind,
            offset,
            shape,
        };
        self.total += block.len();
        self.blocks.push(block);
        offset
    }
}

/// 3×3 (or any odd k) convolution, stride 1, zero "same" padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub w: usize,
    pub b: usize,
}

impl Conv2d {
    pub(crate) fn declare(layout: &mut Layout, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let w = layout.add(format!("{name}.weight"), LayerKind::Conv, vec![cout, cin, k, k]);
        let b = layout.add(format!("{name}.bias"), LayerKind::Conv, vec![cout]);
        Self { cin, cout, k, w, b }
    }

    fn wlen(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    fn im2col<F: Real>(&self, x: &[F], h: usize, w: usize, col: &mut [F]) {
        let (k, pad) = (self.k, (self.k / 2) as isize);
        let hw = h * w;
        for c in 0..self.cin {
            let plane = &x[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((c * k + ky) * k + kx) * hw..][..hw];
                    let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                    for y in 0..h {
                        let sy = y as isize + dy;
                        let dst = &mut row[y * w..(y + 1) * w];
                        if sy < 0 || sy >= h as isize {
                            dst.fill(F::zero());
                            continue;
                        }
                        let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                        for (x, d) in dst.iter_mut().enumerate() {
                            let sx = x as isize + dx;
                            *d = if sx < 0 || sx >= w as isize {
                                F::zero()
                            } else {
                                src[sx as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<F: Real>(&self, col: &[F], h: usize, w: usize, dx: &mut [F]) {
        let (k, pad) = (self.k, (self.k / 2) as isize);
        let hw = h * w;
        for c in 0..self.cin {
            let plane = &mut dx[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((c * k + ky) * k + kx) * hw..][..hw];
                    let (oy, ox) = (ky as isize - pad, kx as isize - pad);
                    for y in 0..h {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                        for x in 0..w {
                            let sx = x as isize + ox;
                            if sx >= 0 && sx < w as isize {
                                dst[sx as usize] += row[y * w + x];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<F: Real>(&self, p: &[F], x: &Tensor4<F>) -> Tensor4<F> {
        let [n, c, h, w] = x.shape();
        debug_assert_eq!(c, self.cin);
        let (hw, ckk) = (h * w, self.cin * self.k * self.k);
        let weight = &p[self.w..self.w + self.wlen()];
        let bias = &p[self.b..self.b + self.cout];
        let mut y = Tensor4::zeros([n, self.cout, h, w]);
        let mut col = vec![F::zero(); ckk * hw];
        for i in 0..n {
            self.im2col(x.item(i), h, w, &mut col);
            let out = y.item_mut(i);
            for (o, &bv) in bias.iter().enumerate() {
                out[o * hw..(o + 1) * hw].fill(bv);
            }
            gemm(false, false, self.cout, hw, ckk, weight, &col, F::one(), out);
        }
        y
    }

    /// Accumulates parameter gradients into `g` and returns the input gradient.
    pub fn backward<F: Real>(&self, p: &[F], g: &mut [F], x: &Tensor4<F>, dy: &Tensor4<F>) -> Tensor4<F> {
        let [n, _, h, w] = x.shape();
        let (hw, ckk) = (h * w, self.cin * self.k * self.k);
        let weight = &p[self.w..self.w + self.wlen()];
        let mut dx = Tensor4::zeros(x.shape());
        let mut col = vec![F::zero(); ckk * hw];
        let mut dcol = vec![F::zero(); ckk * hw];
        for i in 0..n {
            let d = dy.item(i);
            self.im2col(x.item(i), h, w, &mut col);
            gemm(false, true, self.cout, ckk, hw, d, &col, F::one(), &mut g[self.w..self.w + self.wlen()]);
            for o in 0..self.cout {
                g[self.b + o] += d[o * hw..(o + 1) * hw].iter().copied().sum::<F>();
            }
            gemm(true, false, ckk, hw, self.cout, weight, d, F::zero(), &mut dcol);
            self.col2im(&dcol, h, w, dx.item_mut(i));
        }
        dx
    }
}

/// Fully connected layer on row vectors `[n, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub din: usize,
    pub dout: usize,
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub(crate) fn declare(layout: &mut Layout, name: &str, din: usize, dout: usize) -> Self {
        let w = layout.add(format!("{name}.weight"), LayerKind::Linear, vec![dout, din]);
        let b = layout.add(format!("{name}.bias"), LayerKind::Linear, vec![dout]);
        Self { din, dout, w, b }
    }

    pub fn forward<F: Real>(&self, p: &[F], x: &[F], n: usize) -> Vec<F> {
        let mut y = Vec::with_capacity(n * self.dout);
        for _ in 0..n {
            y.extend_from_slice(&p[self.b..self.b + self.dout]);
        }
        gemm(false, true, n, self.dout, self.din, x, &p[self.w..], F::one(), &mut y);
        y
    }

    pub fn backward<F: Real>(&self, p: &[F], g: &mut [F], x: &[F], dy: &[F], n: usize) -> Vec<F> {
        gemm(true, false, self.dout, self.din, n, dy, x, F::one(), &mut g[self.w..self.w + self.dout * self.din]);
        for i in 0..n {
            for o in 0..self.dout {
                g[self.b + o] += dy[i * self.dout + o];
            }
        }
        let mut dx = vec![F::zero(); n * self.din];
        gemm(false, false, n, self.din, self.dout, dy, &p[self.w..], F::zero(), &mut dx);
        dx
    }
}

/// Group normalisation with per-channel affine parameters.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub channels: usize,
    pub gamma: usize,
    pub beta: usize,
}

pub struct NormCache<F> {
    xhat: Vec<F>,
    inv_std: Vec<F>,
}

const NORM_EPS: f64 = 1e-5;

impl GroupNorm {
    pub(crate) fn declare(layout: &mut Layout, name: &str, channels: usize, groups: usize) -> Self {
        assert!(groups >= 1 && channels % groups == 0);
        let gamma = layout.add(format!("{name}.gamma"), LayerKind::GroupNorm, vec![channels]);
        let beta = layout.add(format!("{name}.beta"), LayerKind::GroupNorm, vec![channels]);
        Self {
            groups,
            channels,
            gamma,
            beta,
        }
    }

    pub fn forward<F: Real>(&self, p: &[F], x: &Tensor4<F>) -> (Tensor4<F>, NormCache<F>) {
        let [n, c, h, w] = x.shape();
        let per = (c / self.groups) * h * w;
        let hw = h * w;
        let mut y = Tensor4::zeros(x.shape());
        let mut xhat = vec![F::zero(); x.data().len()];
        let mut inv_std = Vec::with_capacity(n * self.groups);
        let m = F::of(per as f64);
        for i in 0..n {
            for gi in 0..self.groups {
                let start = (i * c * hw) + gi * per;
                let seg = &x.data()[start..start + per];
                let mean = seg.iter().copied().sum::<F>() / m;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / m;
                let is = F::one() / (var + F::of(NORM_EPS)).sqrt();
                inv_std.push(is);
                for (j, &v) in seg.iter().enumerate() {
                    let ch = gi * (c / self.groups) + j / hw;
                    let xh = (v - mean) * is;
                    xhat[start + j] = xh;
                    y.data_mut()[start + j] = p[self.gamma + ch] * xh + p[self.beta + ch];
                }
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward<F: Real>(&self, p: &[F], g: &mut [F], cache: &NormCache<F>, dy: &Tensor4<F>) -> Tensor4<F> {
        let [n, c, h, w] = dy.shape();
        let hw = h * w;
        let per = (c / self.groups) * hw;
        let m = F::of(per as f64);
        let mut dx = Tensor4::zeros(dy.shape());
        let mut dxhat = vec![F::zero(); per];
        for i in 0..n {
            for gi in 0..self.groups {
                let start = (i * c * hw) + gi * per;
                let (mut s1, mut s2) = (F::zero(), F::zero());
                for j in 0..per {
                    let ch = gi * (c / self.groups) + j / hw;
                    let d = dy.data()[start + j];
                    let xh = cache.xhat[start + j];
                    g[self.gamma + ch] += d * xh;
                    g[self.beta + ch] += d;
                    let dh = d * p[self.gamma + ch];
                    dxhat[j] = dh;
                    s1 += dh;
                    s2 += dh * xh;
                }
                let is = cache.inv_std[i * self.groups + gi];
                for j in 0..per {
                    let xh = cache.xhat[start + j];
                    dx.data_mut()[start + j] = is / m * (m * dxhat[j] - s1 - xh * s2);
                }
            }
        }
        dx
    }
}

/// Learned lookup table, one row per class.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub rows: usize,
    pub dim: usize,
    pub table: usize,
}

impl Embedding {
    pub(crate) fn declare(layout: &mut Layout, name: &str, rows: usize, dim: usize) -> Self {
        let table = layout.add(format!("{name}.table"), LayerKind::Embedding, vec![rows, dim]);
        Self { rows, dim, table }
    }

    pub fn row<'a, F: Real>(&self, p: &'a [F], r: usize) -> &'a [F] {
        &p[self.table + r * self.dim..self.table + (r + 1) * self.dim]
    }

    pub fn backward<F: Real>(&self, g: &mut [F], r: usize, dy: &[F]) {
        for (gv, &d) in g[self.table + r * self.dim..].iter_mut().zip(dy) {
            *gv += d;
        }
    }
}

/// Sinusoidal features of `ᾱ·1000`: `[sin(a·f_k)…, cos(a·f_k)…]`, `f_k = 10000^(−k/half)`.
pub fn sinusoidal<F: Real>(alphabar: f64, dim: usize) -> Vec<F> {
    let half = dim / 2;
    let a = alphabar * 1000.0;
    let mut out = vec![F::zero(); dim];
    for k in 0..half {
        let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = F::of((a * f).sin());
        out[half + k] = F::of((a * f).cos());
    }
    out
}

pub fn avg_pool2<F: Real>(x: &Tensor4<F>) -> Tensor4<F> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor4::zeros([n, c, oh, ow]);
    let q = F::of(0.25);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut y.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for yy in 0..oh {
            for xx in 0..ow {
                let s = src[2 * yy * w + 2 * xx]
                    + src[2 * yy * w + 2 * xx + 1]
                    + src[(2 * yy + 1) * w + 2 * xx]
                    + src[(2 * yy + 1) * w + 2 * xx + 1];
                dst[yy * ow + xx] = s * q;
            }
        }
    }
    y
}

pub fn avg_pool2_backward<F: Real>(dy: &Tensor4<F>) -> Tensor4<F> {
    let [n, c, oh, ow] = dy.shape();
    let (h, w) = (oh * 2, ow * 2);
    let mut dx = Tensor4::zeros([n, c, h, w]);
    let q = F::of(0.25);
    for p in 0..n * c {
        let src = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / 2) * ow + x / 2] * q;
            }
        }
    }
    dx
}

pub fn upsample2<F: Real>(x: &Tensor4<F>) -> Tensor4<F> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h * 2, w * 2);
    let mut y = Tensor4::zeros([n, c, oh, ow]);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut y.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for yy in 0..oh {
            for xx in 0..ow {
                dst[yy * ow + xx] = src[(yy / 2) * w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<F: Real>(dy: &Tensor4<F>) -> Tensor4<F> {
    let [n, c, oh, ow] = dy.shape();
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Tensor4::zeros([n, c, h, w]);
    for p in 0..n * c {
        let src = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for yy in 0..oh {
            for xx in 0..ow {
                dst[(yy / 2) * w + xx / 2] += src[yy * ow + xx];
            }
        }
    }
    dx
}

/// Channel concatenation `[a | b]`.
pub fn concat<F: Real>(a: &Tensor4<F>, b: &Tensor4<F>) -> Tensor4<F> {
    let [n, ca, h, w] = a.shape();
    let cb = b.channels();
    let mut y = Tensor4::zeros([n, ca + cb, h, w]);
    for i in 0..n {
        let out = y.item_mut(i);
        out[..ca * h * w].copy_from_slice(a.item(i));
        out[ca * h * w..].copy_from_slice(b.item(i));
    }
    y
}

pub fn split<F: Real>(d: &Tensor4<F>, ca: usize) -> (Tensor4<F>, Tensor4<F>) {
    let [n, c, h, w] = d.shape();
    let mut a = Tensor4::zeros([n, ca, h, w]);
    let mut b = Tensor4::zeros([n, c - ca, h, w]);
    for i in 0..n {
        let src = d.item(i);
        a.item_mut(i).copy_from_slice(&src[..ca * h * w]);
        b.item_mut(i).copy_from_slice(&src[ca * h * w..]);
    }
    (a, b)
}

pub(crate) fn add_into<F: Real>(acc: &mut Tensor4<F>, other: &Tensor4<F>) {
    for (a, &b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(cin: usize, cout: usize, k: usize, wt: &[f64], b: &[f64], x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let pad = (k / 2) as isize;
        let mut y = vec![0.0; cout * h * w];
        for o in 0..cout {
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = b[o];
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = yy as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    acc += wt[((o * cin + c) * k + ky) * k + kx] * x[(c * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                    }
                    y[(o * h + yy) * w + xx] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut layout = Layout::default();
        let conv = Conv2d::declare(&mut layout, "c", 2, 3, 3);
        let p: Vec<f64> = (0..layout.total).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.1).collect();
        let (h, w) = (4, 5);
        let x: Vec<f64> = (0..2 * h * w).map(|i| (i as f64 * 0.3).sin()).collect();
        let y = conv.forward(&p, &Tensor4::new([1, 2, h, w], x.clone()).unwrap());
        let want = direct_conv(2, 3, 3, &p[conv.w..], &p[conv.b..], &x, h, w);
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn group_norm_output_is_standardised() {
        let mut layout = Layout::default();
        let gn = GroupNorm::declare(&mut layout, "n", 4, 2);
        let mut p = vec![0.0f64; layout.total];
        p[gn.gamma..gn.gamma + 4].fill(1.0);
        let x = Tensor4::new([1, 4, 2, 2], (0..16).map(|i| (i * i) as f64).collect()).unwrap();
        let (y, _) = gn.forward(&p, &x);
        for g in 0..2 {
            let seg = &y.data()[g * 8..(g + 1) * 8];
            let mean: f64 = seg.iter().sum::<f64>() / 8.0;
            let var: f64 = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint_shaped() {
        let x = Tensor4::new([1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let up = upsample2(&x);
        assert_eq!(up.shape(), [1, 1, 4, 4]);
        assert_eq!(avg_pool2(&up), x);
        let back = upsample2_backward(&Tensor4::new([1, 1, 4, 4], vec![1.0; 16]).unwrap());
        assert_eq!(back.data(), &[4.0; 4]);
    }

    #[test]
    fn sinusoid_layout() {
        let e: Vec<f64> = sinusoidal(0.5, 8);
        assert!((e[0] - 500f64.sin()).abs() < 1e-12);
        assert!((e[4] - 500f64.cos()).abs() < 1e-12);
    }
}
