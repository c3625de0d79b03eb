//! Dense real-valued tensors in batch-major `(n, c, h, w)` layout.

use crate::error::{Error, Result};

/// Maximum supported tensor order.
pub const MAX_ORDER: usize = 4;

/// A dense, contiguous, row-major tensor of `f64` values.
///
/// Shapes have at most four extents, all at least 1. Four-dimensional tensors
/// are indexed as `(n, c, y, x)`; lower-order tensors (fully connected
/// weights, logits) use the same row-major convention.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_ORDER {
        return Err(Error::shape(format!(
            "tensor order must be 1..={MAX_ORDER}, got {}",
            shape.len()
        )));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(Error::shape(format!(
            "extent {pos} of shape {shape:?} is zero"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], fill: f64) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![fill; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, 0.0)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {len} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Zero tensor with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// The shape as `(n, c, h, w)`. Fails unless the tensor has order 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!(
                "expected an order-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::Bounds(format!(
                "index {index:?} has wrong order for shape {:?}",
                self.shape
            )));
        }
        let mut off = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            if i >= e {
                return Err(Error::Bounds(format!(
                    "index {index:?} outside shape {:?}",
                    self.shape
                )));
            }
            off = off * e + i;
        }
        Ok(off)
    }

    /// Inverse of [`Tensor::offset`].
    pub fn unravel(&self, mut offset: usize) -> Result<Vec<usize>> {
        if offset >= self.data.len() {
            return Err(Error::Bounds(format!(
                "flat offset {offset} outside tensor of {} values",
                self.data.len()
            )));
        }
        let mut index = vec![0; self.shape.len()];
        for (slot, &e) in index.iter_mut().zip(&self.shape).rev() {
            *slot = offset % e;
            offset /= e;
        }
        Ok(index)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        let off = self.offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    /// Contiguous `c x h x w` block of sample `n` in an order-4 tensor.
    pub fn sample(&self, n: usize) -> &[f64] {
        let stride = self.data.len() / self.shape[0];
        &self.data[n * stride..(n + 1) * stride]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let stride = self.data.len() / self.shape[0];
        &mut self.data[n * stride..(n + 1) * stride]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "dot of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "compare {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Gather the `p*h*w` patch seen by output pixel `(cy, cx)` of sample 0.
    ///
    /// The window spans rows `cy - pad .. cy - pad + h` (likewise for
    /// columns), so with "same" padding `pad = h / 2` it is centred on
    /// `(cy, cx)`. Values are returned channel-major, then row-major;
    /// positions outside the image read as zero.
    pub fn im2patch(&self, center: (usize, usize), h: usize, w: usize, pad: usize) -> Result<Vec<f64>> {
        let (n, p, height, width) = self.dims4()?;
        if n != 1 {
            return Err(Error::shape(format!("im2patch expects batch 1, got {n}")));
        }
        let (cy, cx) = center;
        if cy + h > height + 2 * pad || cx + w > width + 2 * pad {
            return Err(Error::Bounds(format!(
                "patch {h}x{w} at center ({cy}, {cx}) leaves the {height}x{width} image padded by {pad}"
            )));
        }
        let mut out = Vec::with_capacity(p * h * w);
        for c in 0..p {
            let plane = &self.data[c * height * width..(c + 1) * height * width];
            for dy in 0..h {
                let y = (cy + dy) as isize - pad as isize;
                for dx in 0..w {
                    let x = (cx + dx) as isize - pad as isize;
                    let inside = y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width;
                    out.push(if inside {
                        plane[y as usize * width + x as usize]
                    } else {
                        0.0
                    });
                }
            }
        }
        Ok(out)
    }
}
