use crate::error::{ensure, Error, Result};
use crate::nn::real::Real;

/// Dense NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<F> {
    shape: [usize; 4],
    data: Vec<F>,
}

impl<F: Real> Tensor4<F> {
    pub fn new(shape: [usize; 4], data: Vec<F>) -> Result<Self> {
        ensure!(
            data.len() == shape.iter().product::<usize>(),
            Config,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Elements in one batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn item(&self, n: usize) -> &[F] {
        let l = self.item_len();
        &self.data[n * l..(n + 1) * l]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [F] {
        let l = self.item_len();
        &mut self.data[n * l..(n + 1) * l]
    }

    /// Copies batch item `n` into a tensor of batch size one.
    pub fn select(&self, n: usize) -> Self {
        Self {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.item(n).to_vec(),
        }
    }

    /// Stacks equally shaped single items along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        ensure!(!items.is_empty(), Input, "cannot stack an empty list");
        let [_, c, h, w] = items[0].shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for it in items {
            ensure!(
                it.shape[1..] == items[0].shape[1..],
                Config,
                "stacked tensors differ in shape: {:?} vs {:?}",
                it.shape,
                items[0].shape
            );
            data.extend_from_slice(&it.data);
            n += it.shape[0];
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor4<G> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| G::of(v.f64())).collect(),
        }
    }

    pub(crate) fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Input(format!("{what} contains non-finite values")))
        }
    }
}
