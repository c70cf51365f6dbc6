//! Class-conditional U-Net noise predictor.

use crate::diffusion::ClassLabel;
use crate::error::{ensure, Result};
use crate::nn::layers::{
    add_into, avg_pool2, avg_pool2_backward, concat, sinusoidal, split, upsample2,
    upsample2_backward, Activation, Conv2d, Embedding, GroupNorm, Layout, Linear, NormCache,
    ParamBlock,
};
use crate::nn::real::Real;
use crate::nn::tensor::Tensor4;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    Group,
    None,
}

/// Everything that determines the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub in_channels: usize,
    pub emb_dim: usize,
    /// Channels per resolution level, finest first.
    pub channels: Vec<usize>,
    /// Upper bound on GroupNorm groups.
    pub norm_groups: usize,
    pub activation: Activation,
    pub norm: Norm,
    /// Whether a learned class table is summed into the embedding.
    pub class_conditioned: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            in_channels: 3,
            emb_dim: 64,
            channels: vec![32, 64, 128],
            norm_groups: 8,
            activation: Activation::Silu,
            norm: Norm::Group,
            class_conditioned: true,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.in_channels >= 1, Config, "in_channels must be positive");
        ensure!(
            self.emb_dim >= 2 && self.emb_dim % 2 == 0,
            Config,
            "emb_dim must be a positive even number, got {}",
            self.emb_dim
        );
        ensure!(!self.channels.is_empty(), Config, "channels must list at least one level");
        ensure!(
            self.channels.iter().all(|&c| c >= 1),
            Config,
            "channels must be positive"
        );
        ensure!(self.norm_groups >= 1, Config, "norm_groups must be positive");
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Largest divisor of `c` not above `min(norm_groups, c/4)`.
    pub fn groups_for(&self, c: usize) -> usize {
        let cap = self.norm_groups.min((c / 4).max(1));
        (1..=cap).rev().find(|g| c % g == 0).unwrap_or(1)
    }

    /// Spatial sizes must survive `levels − 1` halvings.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn param_count(&self) -> usize {
        build_layers(self).1.total
    }
}

#[derive(Debug, Clone)]
struct UBlock {
    conv1: Conv2d,
    norm1: Option<GroupNorm>,
    emb: Linear,
    conv2: Conv2d,
    norm2: Option<GroupNorm>,
}

struct BlockTape<F> {
    x: Tensor4<F>,
    n1: Option<NormCache<F>>,
    pre1: Tensor4<F>,
    h1: Tensor4<F>,
    n2: Option<NormCache<F>>,
    pre2: Tensor4<F>,
}

impl UBlock {
    fn declare(layout: &mut Layout, arch: &Architecture, name: &str, cin: usize, cout: usize) -> Self {
        let norm = |layout: &mut Layout, tag: &str| match arch.norm {
            Norm::Group => Some(GroupNorm::declare(
                layout,
                &format!("{name}.{tag}"),
                cout,
                arch.groups_for(cout),
            )),
            Norm::None => None,
        };
        let conv1 = Conv2d::declare(layout, &format!("{name}.conv1"), cin, cout, 3);
        let norm1 = norm(layout, "norm1");
        let emb = Linear::declare(layout, &format!("{name}.emb"), arch.emb_dim, cout);
        let conv2 = Conv2d::declare(layout, &format!("{name}.conv2"), cout, cout, 3);
        let norm2 = norm(layout, "norm2");
        Self {
            conv1,
            norm1,
            emb,
            conv2,
            norm2,
        }
    }

    fn forward<F: Real>(&self, p: &[F], act: Activation, x: Tensor4<F>, e: &[F]) -> (Tensor4<F>, BlockTape<F>) {
        let n = x.batch();
        let mut a1 = self.conv1.forward(p, &x);
        let mut n1 = None;
        if let Some(gn) = &self.norm1 {
            let (y, c) = gn.forward(p, &a1);
            a1 = y;
            n1 = Some(c);
        }
        let proj = self.emb.forward(p, e, n);
        let hw = a1.height() * a1.width();
        let c = a1.channels();
        for i in 0..n {
            let item = a1.item_mut(i);
            for ch in 0..c {
                let b = proj[i * c + ch];
                item[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v += b);
            }
        }
        let pre1 = a1;
        let h1 = Tensor4::new(pre1.shape(), act.forward(pre1.data())).expect("same shape");
        let mut a2 = self.conv2.forward(p, &h1);
        let mut n2 = None;
        if let Some(gn) = &self.norm2 {
            let (y, c) = gn.forward(p, &a2);
            a2 = y;
            n2 = Some(c);
        }
        let pre2 = a2;
        let out = Tensor4::new(pre2.shape(), act.forward(pre2.data())).expect("same shape");
        let tape = BlockTape {
            x,
            n1,
            pre1,
            h1,
            n2,
            pre2,
        };
        (out, tape)
    }

    /// Returns the input gradient; the embedding gradient is accumulated into `de`.
    fn backward<F: Real>(
        &self,
        p: &[F],
        g: &mut [F],
        act: Activation,
        t: &BlockTape<F>,
        e: &[F],
        de: &mut [F],
        dout: &Tensor4<F>,
    ) -> Tensor4<F> {
        let n = dout.batch();
        let mut d = Tensor4::new(dout.shape(), act.backward(t.pre2.data(), dout.data())).expect("shape");
        if let (Some(gn), Some(c)) = (&self.norm2, &t.n2) {
            d = gn.backward(p, g, c, &d);
        }
        let dh1 = self.conv2.backward(p, g, &t.h1, &d);
        let mut dpre1 = Tensor4::new(dh1.shape(), act.backward(t.pre1.data(), dh1.data())).expect("shape");
        let (c, hw) = (dpre1.channels(), dpre1.height() * dpre1.width());
        let mut dproj = vec![F::zero(); n * c];
        for i in 0..n {
            let item = dpre1.item(i);
            for ch in 0..c {
                dproj[i * c + ch] = item[ch * hw..(ch + 1) * hw].iter().copied().sum();
            }
        }
        let dei = self.emb.backward(p, g, e, &dproj, n);
        for (a, b) in de.iter_mut().zip(dei) {
            *a += b;
        }
        if let (Some(gn), Some(cache)) = (&self.norm1, &t.n1) {
            dpre1 = gn.backward(p, g, cache, &dpre1);
        }
        self.conv1.backward(p, g, &t.x, &dpre1)
    }
}

#[derive(Debug, Clone)]
struct Layers {
    class: Option<Embedding>,
    mlp: Linear,
    down: Vec<UBlock>,
    up: Vec<(Conv2d, UBlock)>,
    out: Conv2d,
}

fn build_layers(arch: &Architecture) -> (Layers, Layout) {
    let mut layout = Layout::default();
    let e = arch.emb_dim;
    let class = arch
        .class_conditioned
        .then(|| Embedding::declare(&mut layout, "class", 2, e));
    let mlp = Linear::declare(&mut layout, "time_mlp", e, e);
    let mut down = Vec::new();
    let mut ci = arch.in_channels;
    for (i, &c) in arch.channels.iter().enumerate() {
        down.push(UBlock::declare(&mut layout, arch, &format!("down{i}"), ci, c));
        ci = c;
    }
    let mut up = Vec::new();
    for (j, &c) in arch.channels[..arch.levels() - 1].iter().rev().enumerate() {
        let conv = Conv2d::declare(&mut layout, &format!("up{j}.conv"), ci, c, 3);
        let block = UBlock::declare(&mut layout, arch, &format!("up{j}"), 2 * c, c);
        up.push((conv, block));
        ci = c;
    }
    let out = Conv2d::declare(&mut layout, "out", ci, arch.in_channels, 3);
    (
        Layers {
            class,
            mlp,
            down,
            up,
            out,
        },
        layout,
    )
}

/// Initialisation switches.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    /// Zero the output convolution so the untrained net predicts zero noise.
    pub zero_output: bool,
}

impl Default for Init {
    fn default() -> Self {
        Self { zero_output: true }
    }
}

/// Conditional noise predictor `f(x_t, c, ᾱ)` with a flat parameter buffer.
#[derive(Debug, Clone)]
pub struct DenoiserNet<F> {
    arch: Architecture,
    layers: Layers,
    blocks: Vec<ParamBlock>,
    params: Vec<F>,
}

/// Intermediate values kept for the reverse pass.
pub struct Tape<F> {
    labels: Vec<ClassLabel>,
    s: Vec<F>,
    u: Vec<F>,
    e: Vec<F>,
    down: Vec<BlockTape<F>>,
    up: Vec<(Tensor4<F>, BlockTape<F>)>,
    out_in: Tensor4<F>,
}

impl<F: Real> DenoiserNet<F> {
    /// Seeded fan-in uniform initialisation; output conv zeroed.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        Self::with_init(arch, seed, Init::default())
    }

    pub fn with_init(arch: Architecture, seed: u64, init: Init) -> Result<Self> {
        arch.validate()?;
        let (layers, layout) = build_layers(&arch);
        let mut rng = RngStream::new(seed);
        let mut params = vec![F::zero(); layout.total];
        for b in &layout.blocks {
            let r = b.range();
            let fill: Vec<f64> = if b.name.starts_with("out.") && init.zero_output {
                vec![0.0; b.len()]
            } else if b.name.ends_with(".gamma") {
                vec![1.0; b.len()]
            } else if b.name.ends_with(".beta") {
                vec![0.0; b.len()]
            } else if b.name == "class.table" {
                (0..b.len()).map(|_| rng.normal()).collect()
            } else {
                let fan_in = fan_in(&layout.blocks, b);
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..b.len()).map(|_| rng.uniform(-bound, bound)).collect()
            };
            for (d, v) in params[r].iter_mut().zip(fill) {
                *d = F::of(v);
            }
        }
        Ok(Self {
            arch,
            layers,
            blocks: layout.blocks,
            params,
        })
    }

    /// Builds a net from an explicit parameter vector.
    pub fn from_params(arch: Architecture, params: Vec<F>) -> Result<Self> {
        arch.validate()?;
        let (layers, layout) = build_layers(&arch);
        ensure!(
            params.len() == layout.total,
            Model,
            "expected {} parameters for this architecture, got {}",
            layout.total,
            params.len()
        );
        ensure!(
            params.iter().all(|v| v.is_finite()),
            Model,
            "parameters contain non-finite values"
        );
        Ok(Self {
            arch,
            layers,
            blocks: layout.blocks,
            params,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn cast<G: Real>(&self) -> DenoiserNet<G> {
        DenoiserNet {
            arch: self.arch.clone(),
            layers: self.layers.clone(),
            blocks: self.blocks.clone(),
            params: self.params.iter().map(|v| G::of(v.f64())).collect(),
        }
    }

    fn check_input(&self, x: &Tensor4<F>, n_labels: usize, alphabars: &[f64]) -> Result<()> {
        let [n, c, h, w] = x.shape();
        let m = self.arch.size_multiple();
        ensure!(
            c == self.arch.in_channels,
            Config,
            "input has {c} channels, net expects {}",
            self.arch.in_channels
        );
        ensure!(n >= 1 && h >= 1 && w >= 1, Config, "input tensor is empty");
        ensure!(
            h % m == 0 && w % m == 0,
            Config,
            "input size {h}x{w} must be divisible by {m} for {} levels",
            self.arch.levels()
        );
        ensure!(
            n_labels == n && alphabars.len() == n,
            Config,
            "batch of {n} needs {n} labels and ᾱ values, got {n_labels} and {}",
            alphabars.len()
        );
        for &a in alphabars {
            ensure!(a > 0.0 && a <= 1.0, Input, "ᾱ must lie in (0, 1], got {a}");
        }
        x.check_finite("x_t")
    }

    /// Predicts noise for every batch item under one label and ᾱ.
    pub fn forward(&self, x: &Tensor4<F>, c: ClassLabel, alphabar: f64) -> Result<Tensor4<F>> {
        let n = x.batch();
        self.forward_batch(x, &vec![c; n], &vec![alphabar; n])
    }

    pub fn forward_batch(&self, x: &Tensor4<F>, labels: &[ClassLabel], alphabars: &[f64]) -> Result<Tensor4<F>> {
        self.check_input(x, labels.len(), alphabars)?;
        Ok(self.run(x, labels, alphabars).0)
    }

    /// Forward pass that also returns the reverse-pass tape.
    pub fn forward_train(&self, x: &Tensor4<F>, labels: &[ClassLabel], alphabars: &[f64]) -> Result<(Tensor4<F>, Tape<F>)> {
        self.check_input(x, labels.len(), alphabars)?;
        Ok(self.run(x, labels, alphabars))
    }

    fn run(&self, x: &Tensor4<F>, labels: &[ClassLabel], alphabars: &[f64]) -> (Tensor4<F>, Tape<F>) {
        let p = &self.params;
        let (l, act) = (&self.layers, self.arch.activation);
        let (n, e_dim) = (x.batch(), self.arch.emb_dim);
        let mut s = Vec::with_capacity(n * e_dim);
        for (i, &a) in alphabars.iter().enumerate() {
            let mut row = sinusoidal::<F>(a, e_dim);
            if let Some(cls) = &l.class {
                for (r, &v) in row.iter_mut().zip(cls.row(p, labels[i].index())) {
                    *r += v;
                }
            }
            s.extend(row);
        }
        let u = l.mlp.forward(p, &s, n);
        let e = act.forward(&u);

        let mut down = Vec::with_capacity(l.down.len());
        let mut skips = Vec::with_capacity(l.down.len());
        let mut h = x.clone();
        for (i, blk) in l.down.iter().enumerate() {
            let input = if i > 0 { avg_pool2(&h) } else { h };
            let (out, tape) = blk.forward(p, act, input, &e);
            skips.push(out.clone());
            down.push(tape);
            h = out;
        }
        skips.pop();
        let mut up = Vec::with_capacity(l.up.len());
        for (conv, blk) in &l.up {
            let up_in = upsample2(&h);
            let hc = conv.forward(p, &up_in);
            let cat = concat(&hc, &skips.pop().expect("one skip per up level"));
            let (out, tape) = blk.forward(p, act, cat, &e);
            up.push((up_in, tape));
            h = out;
        }
        let y = l.out.forward(p, &h);
        let tape = Tape {
            labels: labels.to_vec(),
            s,
            u,
            e,
            down,
            up,
            out_in: h,
        };
        (y, tape)
    }

    /// Reverse pass: accumulates parameter gradients into `grads`.
    pub fn backward(&self, tape: &Tape<F>, dy: &Tensor4<F>, grads: &mut [F]) {
        assert_eq!(grads.len(), self.params.len());
        let p = &self.params;
        let (l, act) = (&self.layers, self.arch.activation);
        let n = dy.batch();
        let mut de = vec![F::zero(); tape.e.len()];

        let mut dh = l.out.backward(p, grads, &tape.out_in, dy);
        let levels = l.down.len();
        let mut dskips: Vec<Option<Tensor4<F>>> = (0..levels).map(|_| None).collect();
        for (j, ((conv, blk), (up_in, bt))) in l.up.iter().zip(&tape.up).enumerate().rev() {
            let dcat = blk.backward(p, grads, act, bt, &tape.e, &mut de, &dh);
            let (dhc, dskip) = split(&dcat, conv.cout);
            dskips[levels - 2 - j] = Some(dskip);
            let dup = conv.backward(p, grads, up_in, &dhc);
            dh = upsample2_backward(&dup);
        }
        for i in (0..levels).rev() {
            if let Some(ds) = &dskips[i] {
                add_into(&mut dh, ds);
            }
            let dx = l.down[i].backward(p, grads, act, &tape.down[i], &tape.e, &mut de, &dh);
            if i > 0 {
                dh = avg_pool2_backward(&dx);
            }
        }

        let du = act.backward(&tape.u, &de);
        let ds = l.mlp.backward(p, grads, &tape.s, &du, n);
        if let Some(cls) = &l.class {
            let e_dim = self.arch.emb_dim;
            for (i, label) in tape.labels.iter().enumerate() {
                cls.backward(grads, label.index(), &ds[i * e_dim..(i + 1) * e_dim]);
            }
        }
    }
}

fn fan_in(blocks: &[ParamBlock], b: &ParamBlock) -> usize {
    // Biases take the fan-in of the weight declared just before them.
    let weight = if b.name.ends_with(".bias") {
        let stem = b.name.trim_end_matches(".bias");
        blocks
            .iter()
            .find(|w| w.name == format!("{stem}.weight"))
            .unwrap_or(b)
    } else {
        b
    };
    weight.shape[1..].iter().product::<usize>().max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Architecture {
        Architecture {
            in_channels: 2,
            emb_dim: 8,
            channels: vec![4, 8],
            norm_groups: 2,
            ..Architecture::default()
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let net = DenoiserNet::<f32>::new(tiny(), 1).unwrap();
        let x = Tensor4::new([2, 2, 8, 8], vec![0.1; 256]).unwrap();
        let y = net.forward(&x, ClassLabel::Unhealthy, 0.5).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn param_count_follows_descriptor() {
        let arch = tiny();
        let a = DenoiserNet::<f32>::new(arch.clone(), 1).unwrap();
        let b = DenoiserNet::<f64>::new(arch.clone(), 99).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert_eq!(a.param_count(), arch.param_count());
    }

    #[test]
    fn default_descriptor_is_about_a_million_parameters() {
        let n = Architecture::default().param_count();
        assert!((500_000..2_000_000).contains(&n), "{n}");
    }

    #[test]
    fn zero_weights_leave_output_bias() {
        let arch = tiny();
        let mut net = DenoiserNet::<f64>::new(arch, 3).unwrap();
        net.params_mut().fill(0.0);
        let b = net.block("out.bias").unwrap().offset;
        net.params_mut()[b] = 0.25;
        net.params_mut()[b + 1] = -1.5;
        let x = Tensor4::new([1, 2, 4, 4], (0..32).map(|i| i as f64).collect()).unwrap();
        let y = net.forward(&x, ClassLabel::Healthy, 0.3).unwrap();
        assert!(y.data()[..16].iter().all(|&v| v == 0.25));
        assert!(y.data()[16..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = DenoiserNet::<f32>::new(tiny(), 1).unwrap();
        let odd = Tensor4::new([1, 2, 5, 5], vec![0.0; 50]).unwrap();
        assert!(matches!(net.forward(&odd, ClassLabel::Healthy, 0.5), Err(crate::Error::Config(_))));
        let wrong_c = Tensor4::new([1, 3, 4, 4], vec![0.0; 48]).unwrap();
        assert!(matches!(net.forward(&wrong_c, ClassLabel::Healthy, 0.5), Err(crate::Error::Config(_))));
        let mut nan = Tensor4::new([1, 2, 4, 4], vec![0.0; 32]).unwrap();
        nan.data_mut()[3] = f32::NAN;
        assert!(matches!(net.forward(&nan, ClassLabel::Healthy, 0.5), Err(crate::Error::Input(_))));
        let x = Tensor4::new([1, 2, 4, 4], vec![0.0; 32]).unwrap();
        assert!(net.forward(&x, ClassLabel::Healthy, 0.0).is_err());
    }
}
