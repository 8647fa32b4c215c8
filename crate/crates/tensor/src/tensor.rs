use crate::error::{Result, TensorError};

/// `(batch, channels, height, width)`.
pub type Shape = [usize; 4];

pub fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

/// Dense row-major NCHW tensor of 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Self {
            shape,
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(numel(shape));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(ni, ci, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + y) * ws + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f32) {
        let i = self.offset(n, c, y, x);
        self.data[i] = value;
    }

    /// One `height * width` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// First element; the value of a reduced scalar.
    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Extract batch item `n` as a `(1, C, H, W)` tensor.
    pub fn batch_item(&self, n: usize) -> Tensor {
        let per = numel(self.shape) / self.shape[0].max(1);
        let data = self.data[n * per..(n + 1) * per].to_vec();
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data,
        }
    }

    /// Stack `(1, C, H, W)` (or any equal-shaped) tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "stack",
            reason: "no tensors to stack".into(),
        })?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * first.numel());
        let mut n = 0;
        for t in items {
            crate::error::check_dim("stack", "channels", c, t.shape[1])?;
            crate::error::check_dim("stack", "height", h, t.shape[2])?;
            crate::error::check_dim("stack", "width", w, t.shape[3])?;
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Tensor::new([n, c, h, w], data)
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(items: &[&Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat_channels",
            reason: "no tensors to concatenate".into(),
        })?;
        let [n, _, h, w] = first.shape;
        let mut c_total = 0;
        for t in items {
            crate::error::check_dim("concat_channels", "batch", n, t.shape[0])?;
            crate::error::check_dim("concat_channels", "height", h, t.shape[2])?;
            crate::error::check_dim("concat_channels", "width", w, t.shape[3])?;
            c_total += t.shape[1];
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * c_total * hw);
        for ni in 0..n {
            for t in items {
                let per = t.shape[1] * hw;
                data.extend_from_slice(&t.data[ni * per..(ni + 1) * per]);
            }
        }
        Tensor::new([n, c_total, h, w], data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}
