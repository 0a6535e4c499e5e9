//! Random spatial augmentation: flips, rotations and isotropic scaling
//! composed into one voxel-space affine and applied through [`resample`].
//!
//! The composed matrix maps *output* voxel indices to *input* coordinates
//! (the pull-back `resample` expects):
//!
//! ```text
//! T(c) · W⁻¹ · S · Rz · Ry · Rx · W · F · T(−c)
//! ```
//!
//! where `c` is the geometric centre `(shape − 1) / 2`, `F` the flips, `R*`
//! the rotations, `S` the scale and `W` either the identity (voxel space) or
//! `diag(spacing)` (world space, so rotations are isotropic in mm).

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector4;
use rand::Rng;

use crate::error::{Error, Result};
use crate::volume::{resample, scaling, translation, Affine, Interpolation, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AugmentSpace {
    #[default]
    Voxel,
    World,
}

impl fmt::Display for AugmentSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugmentSpace::Voxel => "voxel",
            AugmentSpace::World => "world",
        })
    }
}

impl FromStr for AugmentSpace {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "voxel" => Ok(AugmentSpace::Voxel),
            "world" => Ok(AugmentSpace::World),
            other => Err(format!("unknown augmentation space `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    /// Axes that may be flipped, each with probability 0.5.
    pub flip_axes: [bool; 3],
    /// Range in degrees for each of the three Euler angles.
    pub rotation_range_deg: (f64, f64),
    /// Scale percentage range; a draw `p` scales by `1 + p / 100`.
    pub scale_range_pct: (f64, f64),
    pub seed: u64,
    pub space: AugmentSpace,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            flip_axes: [false; 3],
            rotation_range_deg: (-10.0, 10.0),
            scale_range_pct: (-10.0, 10.0),
            seed: 0,
            space: AugmentSpace::Voxel,
        }
    }
}

impl AugmentSpec {
    /// No flips and zero-width ranges.
    pub fn none() -> Self {
        AugmentSpec { rotation_range_deg: (0.0, 0.0), scale_range_pct: (0.0, 0.0), ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("rotation_range", self.rotation_range_deg), ("scaling_percentage", self.scale_range_pct)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::PreconditionViolation(format!("{name}: need finite lo <= hi, got ({lo}, {hi})")));
            }
        }
        if 1.0 + self.scale_range_pct.0 / 100.0 <= 0.0 {
            return Err(Error::PreconditionViolation(format!(
                "scaling_percentage lower bound {} gives a non-positive scale",
                self.scale_range_pct.0
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledTransform {
    pub flips: [bool; 3],
    pub euler_deg: [f64; 3],
    pub scale: f64,
    /// Spatial shape the composed matrix was built for.
    pub shape: [usize; 3],
    pub composed: Affine,
}

impl SampledTransform {
    pub fn new(
        flips: [bool; 3],
        euler_deg: [f64; 3],
        scale: f64,
        shape: [usize; 3],
        spacing: [f64; 3],
        space: AugmentSpace,
    ) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::PreconditionViolation(format!("scale must be positive, got {scale}")));
        }
        let centre = shape.map(|n| (n as f64 - 1.0) / 2.0);
        let flip = Affine::from_diagonal(&Vector4::new(
            if flips[0] { -1.0 } else { 1.0 },
            if flips[1] { -1.0 } else { 1.0 },
            if flips[2] { -1.0 } else { 1.0 },
            1.0,
        ));
        let [ax, ay, az] = euler_deg.map(f64::to_radians);
        let rotation = rot_z(az) * rot_y(ay) * rot_x(ax);
        let mut core = scaling([scale; 3]) * rotation;
        if space == AugmentSpace::World {
            core = scaling(spacing.map(|s| 1.0 / s)) * core * scaling(spacing);
        }
        let composed = translation(centre) * core * flip * translation(centre.map(|c| -c));
        if composed.try_inverse().is_none() {
            return Err(Error::AffineSingular);
        }
        Ok(SampledTransform { flips, euler_deg, scale, shape, composed })
    }

    pub fn identity(shape: [usize; 3]) -> Self {
        SampledTransform {
            flips: [false; 3],
            euler_deg: [0.0; 3],
            scale: 1.0,
            shape,
            composed: Affine::identity(),
        }
    }
}

fn rot_x(a: f64) -> Affine {
    let (s, c) = a.sin_cos();
    let mut m = Affine::identity();
    m[(1, 1)] = c;
    m[(1, 2)] = -s;
    m[(2, 1)] = s;
    m[(2, 2)] = c;
    m
}

fn rot_y(a: f64) -> Affine {
    let (s, c) = a.sin_cos();
    let mut m = Affine::identity();
    m[(0, 0)] = c;
    m[(0, 2)] = s;
    m[(2, 0)] = -s;
    m[(2, 2)] = c;
    m
}

fn rot_z(a: f64) -> Affine {
    let (s, c) = a.sin_cos();
    let mut m = Affine::identity();
    m[(0, 0)] = c;
    m[(0, 1)] = -s;
    m[(1, 0)] = s;
    m[(1, 1)] = c;
    m
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws flips, three Euler angles and a scale uniformly from `spec`, in
/// that order. The same draw must be applied to every source of a subject.
pub fn sample_transform<R: Rng + ?Sized>(
    spec: &AugmentSpec,
    rng: &mut R,
    shape: [usize; 3],
    spacing: [f64; 3],
) -> Result<SampledTransform> {
    spec.validate()?;
    let mut flips = [false; 3];
    for (a, flip) in flips.iter_mut().enumerate() {
        // always consume the draw so the stream layout is independent of flip_axes
        let coin = rng.random_bool(0.5);
        *flip = spec.flip_axes[a] && coin;
    }
    let euler = [
        uniform(rng, spec.rotation_range_deg),
        uniform(rng, spec.rotation_range_deg),
        uniform(rng, spec.rotation_range_deg),
    ];
    let scale = 1.0 + uniform(rng, spec.scale_range_pct) / 100.0;
    SampledTransform::new(flips, euler, scale, shape, spacing, spec.space)
}

/// Resamples `v` through the transform, keeping its shape and padding with
/// the volume minimum. Labels must use [`Interpolation::Nearest`].
pub fn apply_transform(v: &Volume, t: &SampledTransform, interp: Interpolation) -> Result<Volume> {
    if v.spatial_shape() != t.shape {
        return Err(Error::ShapeMismatch { left: v.spatial_shape().to_vec(), right: t.shape.to_vec() });
    }
    resample(v, &t.composed, v.spatial_shape(), interp, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::volume::{apply_affine, invert_affine, DType};

    fn smooth(shape: [usize; 3]) -> Volume {
        Volume::from_fn([shape[0], shape[1], shape[2], 1], DType::F64, Affine::identity(), |x, y, z, _| {
            let (x, y, z) = (x as f64, y as f64, z as f64);
            (x * 0.3).sin() + (y * 0.2).cos() + 0.1 * z
        })
        .unwrap()
    }

    #[test]
    fn zero_range_is_identity() {
        let v = smooth([6, 5, 4]);
        let t = sample_transform(&AugmentSpec::none(), &mut seeded(3), [6, 5, 4], [1.0; 3]).unwrap();
        assert_eq!(t.composed, Affine::identity());
        assert_eq!(apply_transform(&v, &t, Interpolation::Trilinear).unwrap(), v);
    }

    #[test]
    fn fixed_seed_repeats() {
        let spec = AugmentSpec { flip_axes: [true; 3], ..Default::default() };
        let a = sample_transform(&spec, &mut seeded(9), [8, 8, 8], [1.0; 3]).unwrap();
        let b = sample_transform(&spec, &mut seeded(9), [8, 8, 8], [1.0; 3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scale_draws_average_one() {
        let spec = AugmentSpec::default();
        let mut rng = seeded(17);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| sample_transform(&spec, &mut rng, [4, 4, 4], [1.0; 3]).unwrap().scale)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn double_flip_restores() {
        let v = smooth([5, 4, 3]);
        let t = SampledTransform::new([true, false, true], [0.0; 3], 1.0, [5, 4, 3], [1.0; 3], AugmentSpace::Voxel).unwrap();
        let once = apply_transform(&v, &t, Interpolation::Trilinear).unwrap();
        assert_eq!(once.get(0, 0, 0, 0), v.get(4, 0, 2, 0));
        let twice = apply_transform(&once, &t, Interpolation::Trilinear).unwrap();
        assert_eq!(twice, v);
    }

    #[test]
    fn nearest_keeps_label_set() {
        let labels = Volume::from_fn([7, 7, 7, 1], DType::U8, Affine::identity(), |x, y, z, _| ((x + 2 * y + z) % 3) as f64).unwrap();
        let spec = AugmentSpec { flip_axes: [true; 3], rotation_range_deg: (-40.0, 40.0), scale_range_pct: (-30.0, 30.0), ..Default::default() };
        let mut rng = seeded(1);
        for _ in 0..10 {
            let t = sample_transform(&spec, &mut rng, [7, 7, 7], [1.0; 3]).unwrap();
            let out = apply_transform(&labels, &t, Interpolation::Nearest).unwrap();
            assert!(out.data().iter().all(|v| [0.0, 1.0, 2.0].contains(v)));
        }
    }

    #[test]
    fn rotation_round_trip_error_is_small() {
        let v = smooth([16, 16, 16]);
        let range = v.max() - v.min();
        for theta in [5.0, -10.0, 15.0] {
            let fwd = SampledTransform::new([false; 3], [theta * 0.5, -theta, theta], 1.0, [16; 3], [1.0; 3], AugmentSpace::Voxel).unwrap();
            let there = apply_transform(&v, &fwd, Interpolation::Trilinear).unwrap();
            let inv = invert_affine(&fwd.composed).unwrap();
            let back = resample(&there, &inv, [16; 3], Interpolation::Trilinear, None).unwrap();
            // compare away from the borders that rotated out of view
            let mut err = 0.0;
            let mut n = 0.0;
            for z in 4..12 {
                for y in 4..12 {
                    for x in 4..12 {
                        err += (back.get(x, y, z, 0) - v.get(x, y, z, 0)).abs();
                        n += 1.0;
                    }
                }
            }
            assert!(err / n < 0.02 * range, "{theta}: {}", err / n / range);
        }
    }

    #[test]
    fn world_space_rotation_is_isotropic_in_mm() {
        // 90° about z with spacing (1, 2, 1): voxel offsets scale by the
        // spacing ratio
        let t = SampledTransform::new([false; 3], [0.0, 0.0, 90.0], 1.0, [9, 5, 1], [1.0, 2.0, 1.0], AugmentSpace::World).unwrap();
        let p = apply_affine(&t.composed, [4.0, 3.0, 0.0]);
        // centre (4, 2); (0, 1) voxel = (0, 2) mm → (−2, 0) mm = (−2, 0) voxel
        assert!((p[0] - 2.0).abs() < 1e-12 && (p[1] - 2.0).abs() < 1e-12, "{p:?}");
    }

    #[test]
    fn invalid_specs() {
        let mut s = AugmentSpec::default();
        s.rotation_range_deg = (5.0, -5.0);
        assert!(s.validate().is_err());
        s = AugmentSpec { scale_range_pct: (-100.0, 0.0), ..Default::default() };
        assert!(s.validate().is_err());
        let v = smooth([3, 3, 3]);
        assert!(apply_transform(&v, &SampledTransform::identity([3, 3, 4]), Interpolation::Nearest).is_err());
    }
}
