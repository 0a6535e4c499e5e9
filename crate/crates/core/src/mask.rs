use crate::error::{Error, Result};
use crate::volume::Volume;

/// Boolean spatial mask with voxel spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    data: Vec<bool>,
    shape: [usize; 3],
    spacing: [f64; 3],
}

impl BinaryMask {
    pub fn new(data: Vec<bool>, shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if shape.contains(&0) || data.len() != shape.iter().product::<usize>() {
            return Err(Error::InvalidVolume(format!(
                "mask of {} voxels does not fit shape {shape:?}",
                data.len()
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidVolume(format!("mask spacing must be positive, got {spacing:?}")));
        }
        Ok(BinaryMask { data, shape, spacing })
    }

    pub fn from_fn(shape: [usize; 3], spacing: [f64; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.iter().product());
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(data, shape, spacing)
    }

    /// Voxels of channel 0 satisfying `pred`.
    pub fn from_volume(v: &Volume, pred: impl Fn(f64) -> bool) -> Self {
        BinaryMask {
            data: v.channel(0).iter().map(|&x| pred(x)).collect(),
            shape: v.spatial_shape(),
            spacing: v.spacing(),
        }
    }

    /// Voxels equal to `label`.
    pub fn from_label(v: &Volume, label: f64) -> Self {
        Self::from_volume(v, |x| x == label)
    }

    /// Voxels brighter than the volume minimum.
    pub fn foreground(v: &Volume) -> Self {
        let min = v.channel(0).iter().copied().fold(f64::INFINITY, f64::min);
        Self::from_volume(v, |x| x > min)
    }

    pub fn full(shape: [usize; 3], spacing: [f64; 3]) -> Self {
        BinaryMask { data: vec![true; shape.iter().product()], shape, spacing }
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.shape[0];
        let y = (i / self.shape[0]) % self.shape[1];
        let z = i / (self.shape[0] * self.shape[1]);
        [x, y, z]
    }

    pub fn check_same_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { left: self.shape.to_vec(), right: other.shape.to_vec() });
        }
        Ok(())
    }

    /// Values of channel `c` of `v` inside the mask.
    pub fn select(&self, v: &Volume, c: usize) -> Result<Vec<f64>> {
        if v.spatial_shape() != self.shape {
            return Err(Error::ShapeMismatch { left: v.spatial_shape().to_vec(), right: self.shape.to_vec() });
        }
        Ok(v.channel(c).iter().zip(&self.data).filter(|(_, &m)| m).map(|(&x, _)| x).collect())
    }
}
