//! Dense channel-major 3D feature maps.

use crate::error::{ensure, Result};

/// Spatial extent `[D, H, W]`.
pub type Dims = [usize; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// A `[C, D, H, W]` array stored in C order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub dims: Dims,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Self {
            channels,
            dims,
            data: vec![0.0; channels * voxel_count(dims)],
        }
    }

    pub fn from_vec(channels: usize, dims: Dims, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == channels * voxel_count(dims),
            "feature map data length {} does not match shape [{}, {:?}]",
            data.len(),
            channels,
            dims
        );
        Ok(Self {
            channels,
            dims,
            data,
        })
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Stacks `a` on top of `b` along the channel axis.
    pub fn concat(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
        debug_assert_eq!(a.dims, b.dims);
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        FeatureMap {
            channels: a.channels + b.channels,
            dims: a.dims,
            data,
        }
    }

    /// Inverse of [`FeatureMap::concat`]: splits after the first `first` channels.
    pub fn split(self, first: usize) -> (FeatureMap, FeatureMap) {
        let n = self.voxels();
        let mut data = self.data;
        let rest = data.split_off(first * n);
        (
            FeatureMap {
                channels: first,
                dims: self.dims,
                data,
            },
            FeatureMap {
                channels: self.channels - first,
                dims: self.dims,
                data: rest,
            },
        )
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[inline]
pub(crate) fn index3(dims: Dims, z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}
