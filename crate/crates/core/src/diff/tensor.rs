use serde::{Deserialize, Serialize};

use crate::error::{DuqError, Result};

/// Channel/height/width triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape3 { c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// Batched dense tensor, layout `[n][c][h][w]`.
///
/// This is the working type of the layer catalog. It does not enforce
/// finiteness so that intermediate results can be inspected when something
/// diverges; [`TensorMap`] is the validated single-map type.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    n: usize,
    shape: Shape3,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, shape: Shape3) -> Self {
        Tensor {
            n,
            shape,
            data: vec![0.0; n * shape.numel()],
        }
    }

    pub fn filled(n: usize, shape: Shape3, value: f64) -> Self {
        Tensor {
            n,
            shape,
            data: vec![value; n * shape.numel()],
        }
    }

    pub fn from_vec(n: usize, shape: Shape3, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * shape.numel() {
            return Err(DuqError::Shape(format!(
                "tensor {n}x{shape} needs {} values, got {}",
                n * shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { n, shape, data })
    }

    /// Stacks maps of identical shape into a batch.
    pub fn stack(maps: &[&TensorMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| DuqError::Usage("cannot stack an empty set of maps".into()))?;
        let shape = first.shape();
        let mut data = Vec::with_capacity(maps.len() * shape.numel());
        for m in maps {
            if m.shape() != shape {
                return Err(DuqError::Shape(format!(
                    "cannot stack {} with {}",
                    m.shape(),
                    shape
                )));
            }
            data.extend_from_slice(m.values());
        }
        Ok(Tensor {
            n: maps.len(),
            shape,
            data,
        })
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let k = self.shape.numel();
        &self.data[i * k..(i + 1) * k]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let k = self.shape.numel();
        &mut self.data[i * k..(i + 1) * k]
    }

    /// Extracts one batch entry as a validated map.
    pub fn to_map(&self, i: usize) -> Result<TensorMap> {
        TensorMap::new(
            self.shape.c,
            self.shape.h,
            self.shape.w,
            self.sample(i).to_vec(),
        )
    }

    /// Reinterprets the layout without copying; element count must match.
    pub fn reshaped(mut self, shape: Shape3) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(DuqError::Shape(format!(
                "cannot reshape {} into {}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Copies batch entries `start..start + len`.
    pub fn batch_range(&self, start: usize, len: usize) -> Tensor {
        let k = self.shape.numel();
        Tensor {
            n: len,
            shape: self.shape,
            data: self.data[start * k..(start + len) * k].to_vec(),
        }
    }

    /// Concatenates tensors of one shape along the batch axis.
    pub fn concat_batch(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| DuqError::Usage("cannot concatenate an empty batch list".into()))?;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut n = 0;
        for p in parts {
            if p.shape != first.shape {
                return Err(DuqError::Shape(format!(
                    "cannot batch {} with {}",
                    p.shape, first.shape
                )));
            }
            data.extend_from_slice(&p.data);
            n += p.n;
        }
        Ok(Tensor {
            n,
            shape: first.shape,
            data,
        })
    }

    /// The batch repeated `times` times, whole-batch blocks in order.
    pub fn tile_batch(&self, times: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.data.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&self.data);
        }
        Tensor {
            n: self.n * times,
            shape: self.shape,
            data,
        }
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.n != other.n || self.shape != other.shape {
            return Err(DuqError::Shape(format!(
                "cannot add {}x{} to {}x{}",
                other.n, other.shape, self.n, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }
}

/// A single C×H×W map of finite values, channel-major then row-major.
///
/// Images, labels, predictions and uncertainty maps all use this type.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorMap {
    shape: Shape3,
    data: Vec<f64>,
}

impl TensorMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let shape = Shape3::new(channels, height, width);
        if data.len() != shape.numel() {
            return Err(DuqError::Shape(format!(
                "map {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(DuqError::non_finite(format!("map value at index {i}")));
        }
        Ok(TensorMap { shape, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        let shape = Shape3::new(channels, height, width);
        TensorMap {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    /// Builds a map by evaluating `f(c, y, x)`; panics on non-finite output.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let shape = Shape3::new(channels, height, width);
        let mut data = Vec::with_capacity(shape.numel());
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    let v = f(c, y, x);
                    assert!(v.is_finite(), "from_fn produced a non-finite value");
                    data.push(v);
                }
            }
        }
        TensorMap { shape, data }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.c
    }

    pub fn height(&self) -> usize {
        self.shape.h
    }

    pub fn width(&self) -> usize {
        self.shape.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn into_values(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape.h + y) * self.shape.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        assert!(value.is_finite(), "map values must be finite");
        self.data[(c * self.shape.h + y) * self.shape.w + x] = value;
    }

    /// Applies `f` elementwise; fails if any result is non-finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<TensorMap> {
        TensorMap::new(
            self.shape.c,
            self.shape.h,
            self.shape.w,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn zip_map(&self, other: &TensorMap, f: impl Fn(f64, f64) -> f64) -> Result<TensorMap> {
        self.ensure_same_shape(other)?;
        TensorMap::new(
            self.shape.c,
            self.shape.h,
            self.shape.w,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn ensure_same_shape(&self, other: &TensorMap) -> Result<()> {
        if self.shape != other.shape {
            return Err(DuqError::Shape(format!(
                "maps differ in shape: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_diff(&self, other: &TensorMap) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            n: 1,
            shape: self.shape,
            data: self.data.clone(),
        }
    }

    /// Rounds every value to the nearest single-precision float.
    pub fn to_f32_precision(&self) -> TensorMap {
        TensorMap {
            shape: self.shape,
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }
}
