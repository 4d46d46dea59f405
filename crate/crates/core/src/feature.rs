//! Single-item `C × H × W` activation maps.

use semattn_nn::{Scalar, Tensor};

use crate::error::{Error, Result};

/// A `channels × height × width` activation tensor in planar layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape("feature map", "nonzero C, H, W", format!("{channels}x{height}x{width}")));
        }
        if values.len() != channels * height * width {
            return Err(Error::shape(
                "feature map values",
                channels * height * width,
                values.len(),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    /// Batch item `i` of `t`.
    pub fn from_tensor(t: &Tensor<T>, i: usize) -> Self {
        Self {
            channels: t.c(),
            height: t.h(),
            width: t.w(),
            values: t.item(i).to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new([1, self.channels, self.height, self.width], self.values.clone())
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[T] {
        &self.values[c * self.plane()..(c + 1) * self.plane()]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
