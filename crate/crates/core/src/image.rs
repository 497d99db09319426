//! Voxel grids.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImageError {
    #[error("image dimensions must be non-zero, got {0:?}")]
    EmptyDims([usize; 3]),
    #[error("voxel sizes must be positive, got {0:?}")]
    VoxelSize([f64; 3]),
    #[error("data has {got} values, dimensions need {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("image grids differ")]
    GridMismatch,
}

/// A 3-D voxel grid, x-fastest. `origin` is the centre of voxel (0, 0, 0)
/// in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Image3D {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub origin: [f64; 3],
    pub data: Vec<f64>,
}

impl Image3D {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3], origin: [f64; 3], data: Vec<f64>) -> Result<Self, ImageError> {
        if dims.contains(&0) {
            return Err(ImageError::EmptyDims(dims));
        }
        if !voxel_size.iter().all(|&v| v > 0.0 && v.is_finite()) {
            return Err(ImageError::VoxelSize(voxel_size));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(ImageError::DataLength { expected, got: data.len() });
        }
        Ok(Self { dims, voxel_size, origin, data })
    }

    pub fn filled(dims: [usize; 3], voxel_size: [f64; 3], origin: [f64; 3], value: f64) -> Result<Self, ImageError> {
        let n = dims.iter().product();
        Self::new(dims, voxel_size, origin, vec![value; n])
    }

    /// Grid centred on the coordinate origin.
    pub fn centered(dims: [usize; 3], voxel_size: [f64; 3], value: f64) -> Result<Self, ImageError> {
        let origin = std::array::from_fn(|a| -((dims[a] as f64 - 1.0) / 2.0) * voxel_size[a]);
        Self::filled(dims, voxel_size, origin, value)
    }

    /// Same grid, new contents.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self, ImageError> {
        Self::new(self.dims, self.voxel_size, self.origin, data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.dims[0] * (iy + self.dims[1] * iz)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    #[inline]
    pub fn voxel_center(&self, v: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + v[a] as f64 * self.voxel_size[a])
    }

    /// Lower and upper edge of the grid along `axis`.
    pub fn extent(&self, axis: usize) -> (f64, f64) {
        let half = self.voxel_size[axis] / 2.0;
        (self.origin[axis] - half, self.origin[axis] + (self.dims[axis] as f64 - 1.0) * self.voxel_size[axis] + half)
    }

    pub fn same_grid(&self, other: &Image3D) -> bool {
        self.dims == other.dims && self.voxel_size == other.voxel_size && self.origin == other.origin
    }

    pub fn argmax(&self) -> Option<[usize; 3]> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.data.iter().enumerate() {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| self.coords(i))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}
