//! In-memory voxel volumes and the resampling engine shared by augmentation,
//! resize sampling and resize aggregation.
//!
//! Layout is spatial-first `[x, y, z, c]` with `x` varying fastest, the same
//! order NIfTI stores voxels on disk. The affine follows the column-vector
//! convention `world = A · [i, j, k, 1]ᵀ`.
//!
//! Voxel values are held as `f64` regardless of the nominal [`DType`]; every
//! constructor quantizes them to the nominal type so that writing back to
//! disk is lossless.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix4, Vector4};

use crate::error::{Error, Result};

pub type Affine = Matrix4<f64>;

/// Coordinates closer than this to an integer are treated as that integer
/// during resampling, so that rotations by multiples of 90° and flips land on
/// voxel centres exactly.
const SNAP_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl DType {
    pub fn is_integer(self) -> bool {
        matches!(self, DType::U8 | DType::I16 | DType::I32)
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::I16 => 2,
            DType::I32 | DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    /// Converts an arbitrary `f64` to the nearest value representable in this
    /// type. Integer types round half to even and saturate.
    pub fn quantize(self, v: f64) -> f64 {
        let clamp_int = |lo: f64, hi: f64| {
            if v.is_nan() {
                0.0
            } else {
                v.round_ties_even().clamp(lo, hi)
            }
        };
        match self {
            DType::U8 => clamp_int(u8::MIN as f64, u8::MAX as f64),
            DType::I16 => clamp_int(i16::MIN as f64, i16::MAX as f64),
            DType::I32 => clamp_int(i32::MIN as f64, i32::MAX as f64),
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DType::U8 => "u8",
            DType::I16 => "i16",
            DType::I32 => "i32",
            DType::F32 => "f32",
            DType::F64 => "f64",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Interpolation {
    /// Required for labels and weight maps.
    Nearest,
    #[default]
    Trilinear,
}

impl fmt::Display for Interpolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Interpolation::Nearest => "nearest",
            Interpolation::Trilinear => "trilinear",
        })
    }
}

impl FromStr for Interpolation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nearest" => Ok(Interpolation::Nearest),
            "trilinear" | "linear" => Ok(Interpolation::Trilinear),
            other => Err(format!("unknown interpolation `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PadMode {
    EdgeReplicate,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: [usize; 4],
    dtype: DType,
    affine: Affine,
    data: Vec<f64>,
}

impl Volume {
    /// Builds a volume, checking the shape and affine invariants and
    /// quantizing `data` to `dtype`.
    pub fn new(mut data: Vec<f64>, shape: [usize; 4], dtype: DType, affine: Affine) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidVolume(format!("all dimensions must be >= 1, got {shape:?}")));
        }
        let len = shape.iter().product::<usize>();
        if data.len() != len {
            return Err(Error::InvalidVolume(format!(
                "data has {} elements, shape {shape:?} needs {len}",
                data.len()
            )));
        }
        validate_affine(&affine)?;
        if dtype != DType::F64 {
            for v in &mut data {
                *v = dtype.quantize(*v);
            }
        }
        Ok(Volume { shape, dtype, affine, data })
    }

    /// Single-channel volume.
    pub fn from_spatial(data: Vec<f64>, shape: [usize; 3], dtype: DType, affine: Affine) -> Result<Self> {
        Self::new(data, [shape[0], shape[1], shape[2], 1], dtype, affine)
    }

    pub fn filled(shape: [usize; 4], value: f64, dtype: DType, affine: Affine) -> Result<Self> {
        Self::new(vec![value; shape.iter().product()], shape, dtype, affine)
    }

    /// Builds a volume by evaluating `f(x, y, z, c)` at every voxel.
    pub fn from_fn<F>(shape: [usize; 4], dtype: DType, affine: Affine, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, usize, usize, usize) -> f64,
    {
        let mut data = Vec::with_capacity(shape.iter().product());
        for c in 0..shape[3] {
            for z in 0..shape[2] {
                for y in 0..shape[1] {
                    for x in 0..shape[0] {
                        data.push(f(x, y, z, c));
                    }
                }
            }
        }
        Self::new(data, shape, dtype, affine)
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn spatial_shape(&self) -> [usize; 3] {
        [self.shape[0], self.shape[1], self.shape[2]]
    }

    pub fn channels(&self) -> usize {
        self.shape[3]
    }

    pub fn n_spatial(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Contiguous values of one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.n_spatial();
        &self.data[c * n..(c + 1) * n]
    }

    /// Column norms of the 3×3 block of the affine, in mm.
    pub fn spacing(&self) -> [f64; 3] {
        affine_spacing(&self.affine)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize, c: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * (z + self.shape[2] * c))
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize, c: usize) -> f64 {
        self.data[self.index(x, y, z, c)]
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Same geometry, new values and type.
    pub fn with_data(&self, data: Vec<f64>, dtype: DType) -> Result<Volume> {
        Volume::new(data, self.shape, dtype, self.affine)
    }

    pub fn with_affine(mut self, affine: Affine) -> Result<Volume> {
        validate_affine(&affine)?;
        self.affine = affine;
        Ok(self)
    }

    pub fn cast(&self, dtype: DType) -> Volume {
        let data = self.data.iter().map(|&v| dtype.quantize(v)).collect();
        Volume { shape: self.shape, dtype, affine: self.affine, data }
    }

    /// World coordinates (mm) of a possibly fractional voxel index.
    pub fn voxel_to_world(&self, voxel: [f64; 3]) -> [f64; 3] {
        apply_affine(&self.affine, voxel)
    }

    pub fn world_to_voxel(&self, world: [f64; 3]) -> Result<[f64; 3]> {
        let inv = self.affine.try_inverse().ok_or(Error::AffineSingular)?;
        Ok(apply_affine(&inv, world))
    }

    /// Value at an integer index, or `pad` when outside the grid.
    #[inline]
    fn get_or(&self, idx: [isize; 3], c: usize, pad: f64) -> f64 {
        for a in 0..3 {
            if idx[a] < 0 || idx[a] as usize >= self.shape[a] {
                return pad;
            }
        }
        self.get(idx[0] as usize, idx[1] as usize, idx[2] as usize, c)
    }

    /// Interpolated value at a fractional voxel coordinate.
    pub fn interpolate(&self, p: [f64; 3], c: usize, interp: Interpolation, pad: f64) -> f64 {
        if p.iter().any(|v| !v.is_finite()) {
            return pad;
        }
        let p = p.map(snap);
        match interp {
            Interpolation::Nearest => self.get_or(p.map(round_half_down), c, pad),
            Interpolation::Trilinear => {
                let base = p.map(|v| v.floor());
                let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
                let base = base.map(|v| v as isize);
                let mut acc = 0.0;
                for corner in 0..8 {
                    let mut w = 1.0;
                    let mut idx = base;
                    for a in 0..3 {
                        let upper = (corner >> a) & 1 == 1;
                        let wa = if upper { frac[a] } else { 1.0 - frac[a] };
                        if wa == 0.0 {
                            w = 0.0;
                            break;
                        }
                        w *= wa;
                        if upper {
                            idx[a] += 1;
                        }
                    }
                    if w != 0.0 {
                        acc += w * self.get_or(idx, c, pad);
                    }
                }
                acc
            }
        }
    }
}

/// Nearest-voxel rounding. Ties go towards −∞ so that a 2× downsample
/// followed by a 2× upsample restores block-constant label maps.
#[inline]
fn round_half_down(v: f64) -> isize {
    (v - 0.5).ceil() as isize
}

#[inline]
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP_EPS {
        r
    } else {
        v
    }
}

pub fn apply_affine(m: &Affine, p: [f64; 3]) -> [f64; 3] {
    let v = m * Vector4::new(p[0], p[1], p[2], 1.0);
    [v[0], v[1], v[2]]
}

pub fn affine_spacing(a: &Affine) -> [f64; 3] {
    let m: Matrix3<f64> = a.fixed_view::<3, 3>(0, 0).into_owned();
    [m.column(0).norm(), m.column(1).norm(), m.column(2).norm()]
}

pub fn translation(t: [f64; 3]) -> Affine {
    let mut m = Affine::identity();
    m[(0, 3)] = t[0];
    m[(1, 3)] = t[1];
    m[(2, 3)] = t[2];
    m
}

pub fn scaling(s: [f64; 3]) -> Affine {
    Affine::from_diagonal(&Vector4::new(s[0], s[1], s[2], 1.0))
}

pub fn validate_affine(a: &Affine) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidVolume("affine has non-finite entries".into()));
    }
    if a[(3, 0)] != 0.0 || a[(3, 1)] != 0.0 || a[(3, 2)] != 0.0 || a[(3, 3)] != 1.0 {
        return Err(Error::InvalidVolume("affine last row must be (0, 0, 0, 1)".into()));
    }
    let block: Matrix3<f64> = a.fixed_view::<3, 3>(0, 0).into_owned();
    if block.determinant() == 0.0 {
        return Err(Error::AffineSingular);
    }
    Ok(())
}

/// Inverse of an affine with the bottom row restored to exactly `(0, 0, 0, 1)`.
pub fn invert_affine(a: &Affine) -> Result<Affine> {
    let mut inv = a.try_inverse().ok_or(Error::AffineSingular)?;
    inv[(3, 0)] = 0.0;
    inv[(3, 1)] = 0.0;
    inv[(3, 2)] = 0.0;
    inv[(3, 3)] = 1.0;
    Ok(inv)
}

/// Resamples `v` onto a grid of `out_shape`: output voxel `i` takes the value
/// of `v` at `t · i`. Reads outside `v` yield `pad_value`, or the volume
/// minimum when `None`. The output affine is `v.affine · t` and the output
/// keeps `v`'s dtype (integers round half to even).
pub fn resample(
    v: &Volume,
    t: &Affine,
    out_shape: [usize; 3],
    interp: Interpolation,
    pad_value: Option<f64>,
) -> Result<Volume> {
    if t.try_inverse().is_none() {
        return Err(Error::AffineSingular);
    }
    if out_shape.contains(&0) {
        return Err(Error::PreconditionViolation(format!(
            "resample output shape must be positive, got {out_shape:?}"
        )));
    }
    let pad = pad_value.unwrap_or_else(|| v.min());
    let channels = v.channels();
    let n_out: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(n_out * channels);
    for c in 0..channels {
        for z in 0..out_shape[2] {
            for y in 0..out_shape[1] {
                for x in 0..out_shape[0] {
                    let p = apply_affine(t, [x as f64, y as f64, z as f64]);
                    data.push(v.interpolate(p, c, interp, pad));
                }
            }
        }
    }
    let affine = v.affine * t;
    Volume::new(
        data,
        [out_shape[0], out_shape[1], out_shape[2], channels],
        v.dtype,
        affine,
    )
}

/// Pads every axis by `border` voxels on both sides.
pub fn pad(v: &Volume, border: [usize; 3], mode: PadMode) -> Volume {
    pad_asymmetric(v, border, border, mode)
}

/// Pads by `before` voxels at the low end and `after` at the high end of each
/// axis. The affine is shifted so original voxels keep their world positions.
pub fn pad_asymmetric(v: &Volume, before: [usize; 3], after: [usize; 3], mode: PadMode) -> Volume {
    if before == [0; 3] && after == [0; 3] {
        return v.clone();
    }
    let s = v.spatial_shape();
    let out = [
        s[0] + before[0] + after[0],
        s[1] + before[1] + after[1],
        s[2] + before[2] + after[2],
    ];
    let channels = v.channels();
    let mut data = Vec::with_capacity(out.iter().product::<usize>() * channels);
    for c in 0..channels {
        for z in 0..out[2] {
            for y in 0..out[1] {
                for x in 0..out[0] {
                    let src = [
                        x as isize - before[0] as isize,
                        y as isize - before[1] as isize,
                        z as isize - before[2] as isize,
                    ];
                    let value = match mode {
                        PadMode::Constant(k) => v.get_or(src, c, k),
                        PadMode::EdgeReplicate => {
                            let cl = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
                            v.get(cl(src[0], s[0]), cl(src[1], s[1]), cl(src[2], s[2]), c)
                        }
                    };
                    data.push(value);
                }
            }
        }
    }
    let shift = translation([-(before[0] as f64), -(before[1] as f64), -(before[2] as f64)]);
    Volume {
        shape: [out[0], out[1], out[2], channels],
        dtype: v.dtype,
        affine: v.affine * shift,
        // constants may not be representable in the dtype
        data: data.into_iter().map(|x| v.dtype.quantize(x)).collect(),
    }
}

/// Extracts the box `[start, start + size)`; the affine is shifted so the
/// window keeps its world position.
pub fn crop(v: &Volume, start: [usize; 3], size: [usize; 3]) -> Result<Volume> {
    let s = v.spatial_shape();
    for a in 0..3 {
        if size[a] == 0 || start[a] + size[a] > s[a] {
            return Err(Error::PreconditionViolation(format!(
                "crop [{start:?} + {size:?}] exceeds shape {s:?}"
            )));
        }
    }
    let channels = v.channels();
    let mut data = Vec::with_capacity(size.iter().product::<usize>() * channels);
    for c in 0..channels {
        for z in start[2]..start[2] + size[2] {
            for y in start[1]..start[1] + size[1] {
                let row = v.index(start[0], y, z, c);
                data.extend_from_slice(&v.data[row..row + size[0]]);
            }
        }
    }
    let shift = translation([start[0] as f64, start[1] as f64, start[2] as f64]);
    Ok(Volume {
        shape: [size[0], size[1], size[2], channels],
        dtype: v.dtype,
        affine: v.affine * shift,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(shape: [usize; 3]) -> Volume {
        Volume::from_fn([shape[0], shape[1], shape[2], 1], DType::F32, Affine::identity(), |x, y, z, _| {
            (x + shape[0] * (y + shape[1] * z)) as f64
        })
        .unwrap()
    }

    fn axis_flip_x(nx: usize) -> Affine {
        let mut t = Affine::identity();
        t[(0, 0)] = -1.0;
        t[(0, 3)] = nx as f64 - 1.0;
        t
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Volume::new(vec![0.0; 8], [2, 2, 2, 0], DType::U8, Affine::identity()).is_err());
        assert!(Volume::new(vec![0.0; 7], [2, 2, 2, 1], DType::U8, Affine::identity()).is_err());
        let mut a = Affine::identity();
        a[(2, 2)] = 0.0;
        assert!(matches!(
            Volume::new(vec![0.0; 8], [2, 2, 2, 1], DType::U8, a),
            Err(Error::AffineSingular)
        ));
        let mut a = Affine::identity();
        a[(3, 0)] = 1.0;
        assert!(Volume::new(vec![0.0; 8], [2, 2, 2, 1], DType::U8, a).is_err());
    }

    #[test]
    fn quantizes_on_construction() {
        let v = Volume::from_spatial(vec![2.5, 3.5, -1.0, 300.0], [4, 1, 1], DType::U8, Affine::identity()).unwrap();
        assert_eq!(v.data(), &[2.0, 4.0, 0.0, 255.0]);
    }

    #[test]
    fn world_voxel_conversions() {
        let v = ramp([2, 2, 2]);
        assert_eq!(v.world_to_voxel([2.0, 3.0, 4.0]).unwrap(), [2.0, 3.0, 4.0]);
        let v = v.with_affine(scaling([2.0, 2.0, 2.0])).unwrap();
        assert_eq!(v.world_to_voxel([4.0, 4.0, 4.0]).unwrap(), [2.0, 2.0, 2.0]);
        assert_eq!(v.spacing(), [2.0, 2.0, 2.0]);
    }

    #[test]
    fn resample_identity_is_bitwise() {
        let v = ramp([3, 4, 5]);
        for interp in [Interpolation::Nearest, Interpolation::Trilinear] {
            let out = resample(&v, &Affine::identity(), [3, 4, 5], interp, None).unwrap();
            assert_eq!(out, v);
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let v = ramp([5, 3, 2]);
        let t = axis_flip_x(5);
        let once = resample(&v, &t, [5, 3, 2], Interpolation::Trilinear, None).unwrap();
        assert_eq!(once.get(0, 1, 1, 0), v.get(4, 1, 1, 0));
        let twice = resample(&once, &t, [5, 3, 2], Interpolation::Trilinear, None).unwrap();
        assert_eq!(twice.data(), v.data());
    }

    #[test]
    fn rotate_90_about_z_matches_index_remap() {
        // asymmetric 3x3x1 ramp
        let v = Volume::from_fn([3, 3, 1, 1], DType::F64, Affine::identity(), |x, y, _, _| {
            (x * 10 + y * y) as f64
        })
        .unwrap();
        // rotation by 90° about the centre (1, 1)
        let th = std::f64::consts::FRAC_PI_2;
        let (s, c) = th.sin_cos();
        let mut r = Affine::identity();
        r[(0, 0)] = c;
        r[(0, 1)] = -s;
        r[(1, 0)] = s;
        r[(1, 1)] = c;
        let t = translation([1.0, 1.0, 0.0]) * r * translation([-1.0, -1.0, 0.0]);
        for interp in [Interpolation::Nearest, Interpolation::Trilinear] {
            let out = resample(&v, &t, [3, 3, 1], interp, None).unwrap();
            for y in 0..3 {
                for x in 0..3 {
                    // out(x, y) = v(R·(x-1, y-1) + 1) = v(1 - (y-1), 1 + (x-1))
                    let sx = 2 - y;
                    let sy = x;
                    assert_eq!(out.get(x, y, 0, 0), v.get(sx, sy, 0, 0), "({x},{y})");
                }
            }
        }
    }

    #[test]
    fn trilinear_midpoint_and_padding() {
        let v = Volume::from_spatial(vec![0.0, 10.0], [2, 1, 1], DType::F64, Affine::identity()).unwrap();
        assert_eq!(v.interpolate([0.5, 0.0, 0.0], 0, Interpolation::Trilinear, -1.0), 5.0);
        assert_eq!(v.interpolate([1.0, 0.0, 0.0], 0, Interpolation::Trilinear, -1.0), 10.0);
        assert_eq!(v.interpolate([2.0, 0.0, 0.0], 0, Interpolation::Trilinear, -1.0), -1.0);
        assert_eq!(v.interpolate([-3.0, 0.0, 0.0], 0, Interpolation::Nearest, -1.0), -1.0);
        // nearest ties go down
        assert_eq!(v.interpolate([0.5, 0.0, 0.0], 0, Interpolation::Nearest, -1.0), 0.0);
    }

    #[test]
    fn resample_output_affine_and_integer_rounding() {
        let v = Volume::from_spatial(vec![1.0, 2.0], [2, 1, 1], DType::I16, scaling([2.0, 1.0, 1.0])).unwrap();
        let t = translation([0.5, 0.0, 0.0]);
        let out = resample(&v, &t, [1, 1, 1], Interpolation::Trilinear, Some(0.0)).unwrap();
        // 1.5 rounds half to even
        assert_eq!(out.data(), &[2.0]);
        assert_eq!(out.affine()[(0, 3)], 1.0);
        assert!(matches!(
            resample(&v, &Affine::zeros(), [1, 1, 1], Interpolation::Nearest, None),
            Err(Error::AffineSingular)
        ));
    }

    #[test]
    fn pad_edge_and_constant() {
        let v = Volume::from_spatial(vec![1.0, 2.0, 3.0], [3, 1, 1], DType::F32, Affine::identity()).unwrap();
        let p = pad(&v, [1, 0, 0], PadMode::EdgeReplicate);
        assert_eq!(p.data(), &[1.0, 1.0, 2.0, 3.0, 3.0]);
        assert_eq!(p.voxel_to_world([1.0, 0.0, 0.0]), [0.0, 0.0, 0.0]);
        assert_eq!(pad(&v, [0, 0, 0], PadMode::EdgeReplicate), v);

        let ones = Volume::filled([2, 2, 2, 1], 1.0, DType::U8, Affine::identity()).unwrap();
        let p = pad(&ones, [1, 1, 1], PadMode::Constant(0.0));
        assert_eq!(p.spatial_shape(), [4, 4, 4]);
        assert_eq!(p.data().iter().sum::<f64>(), 8.0);
    }

    #[test]
    fn crop_checks_bounds() {
        let v = ramp([4, 4, 4]);
        assert!(crop(&v, [2, 0, 0], [3, 1, 1]).is_err());
        let c = crop(&v, [1, 2, 3], [2, 1, 1]).unwrap();
        assert_eq!(c.data(), &[v.get(1, 2, 3, 0), v.get(2, 2, 3, 0)]);
        assert_eq!(c.voxel_to_world([0.0, 0.0, 0.0]), [1.0, 2.0, 3.0]);
    }

    fn arb_affine() -> impl Strategy<Value = Affine> {
        (prop::array::uniform9(-3.0f64..3.0), prop::array::uniform3(-100.0f64..100.0)).prop_filter_map(
            "well conditioned",
            |(m, t)| {
                let mut a = Affine::identity();
                for r in 0..3 {
                    for c in 0..3 {
                        a[(r, c)] = m[r * 3 + c] + if r == c { 4.0 } else { 0.0 };
                    }
                    a[(r, 3)] = t[r];
                }
                let block: Matrix3<f64> = a.fixed_view::<3, 3>(0, 0).into_owned();
                let sv = block.singular_values();
                let cond = sv.max() / sv.min();
                (cond < 1e6).then_some(a)
            },
        )
    }

    proptest! {
        #[test]
        fn voxel_world_round_trip(a in arb_affine(), p in prop::array::uniform3(-50.0f64..50.0)) {
            let v = Volume::filled([1, 1, 1, 1], 0.0, DType::F32, a).unwrap();
            let back = v.world_to_voxel(v.voxel_to_world(p)).unwrap();
            for i in 0..3 {
                prop_assert!((back[i] - p[i]).abs() <= 1e-9 * p[i].abs().max(1.0));
            }
        }

        #[test]
        fn nearest_values_are_a_subset(
            labels in prop::collection::vec(0u8..4, 27),
            angle in -1.0f64..1.0,
            s in 0.7f64..1.3,
        ) {
            let v = Volume::from_spatial(labels.iter().map(|&l| l as f64).collect(), [3, 3, 3], DType::U8, Affine::identity()).unwrap();
            let (sn, cs) = angle.sin_cos();
            let mut r = Affine::identity();
            r[(0, 0)] = cs * s; r[(0, 1)] = -sn * s; r[(1, 0)] = sn * s; r[(1, 1)] = cs * s;
            let t = translation([1.0, 1.0, 1.0]) * r * translation([-1.0, -1.0, -1.0]);
            let out = resample(&v, &t, [3, 3, 3], Interpolation::Nearest, None).unwrap();
            for x in out.data() {
                prop_assert!(v.data().contains(x));
            }
        }

        #[test]
        fn pad_then_crop_is_identity(
            shape in prop::array::uniform3(1usize..5),
            border in prop::array::uniform3(0usize..3),
            edge in any::<bool>(),
        ) {
            let v = ramp(shape);
            let mode = if edge { PadMode::EdgeReplicate } else { PadMode::Constant(-7.0) };
            let p = pad(&v, border, mode);
            let back = crop(&p, border, shape).unwrap();
            prop_assert_eq!(back.data(), v.data());
            for i in 0..4 { for j in 0..4 {
                prop_assert!((back.affine()[(i, j)] - v.affine()[(i, j)]).abs() < 1e-12);
            }}
        }
    }
}
