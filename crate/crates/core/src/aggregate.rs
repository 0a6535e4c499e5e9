//! Reassembling window outputs into subject volumes.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nifti::{write_nifti, NiftiHeader};
use crate::sample::{grid_positions, resize_affine, GridSpec};
use crate::volume::{resample, Affine, DType, Interpolation, Volume};

/// Output buffer for one subject, filled window by window from a grid.
#[derive(Debug, Clone)]
pub struct OutputCanvas {
    subject_id: String,
    shape: [usize; 3],
    channels: usize,
    dtype: DType,
    affine: Affine,
    grid: GridSpec,
    positions: HashSet<[usize; 3]>,
    data: Vec<f64>,
    written: Vec<bool>,
}

impl OutputCanvas {
    /// A canvas with the spatial shape and affine of `reference`.
    pub fn new(subject_id: impl Into<String>, reference: &Volume, channels: usize, dtype: DType, grid: GridSpec) -> Result<Self> {
        grid.validate()?;
        if channels == 0 {
            return Err(Error::PreconditionViolation("canvas needs at least one channel".into()));
        }
        let shape = reference.spatial_shape();
        let n = shape.iter().product::<usize>();
        Ok(OutputCanvas {
            subject_id: subject_id.into(),
            shape,
            channels,
            dtype,
            affine: *reference.affine(),
            grid,
            positions: grid_positions(shape, &grid).into_iter().collect(),
            data: vec![0.0; n * channels],
            written: vec![false; n],
        })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Voxels not yet covered by any interior.
    pub fn missing(&self) -> usize {
        self.written.iter().filter(|w| !**w).count()
    }

    /// Writes the interior of a window output that started at `start` in
    /// padded coordinates. Later writes overwrite earlier ones.
    pub fn grid_aggregate(&mut self, patch: &Volume, start: [usize; 3]) -> Result<()> {
        if !self.positions.contains(&start) {
            return Err(Error::UnexpectedWindow(start));
        }
        let window = self.grid.window;
        if patch.spatial_shape() != window || patch.channels() != self.channels {
            return Err(Error::ShapeMismatch {
                left: patch.shape().to_vec(),
                right: vec![window[0], window[1], window[2], self.channels],
            });
        }
        let b = self.grid.border;
        let [sx, sy, sz] = self.shape;
        for pz in b[2]..window[2] - b[2] {
            // original = padded - border
            let z = start[2] + pz - b[2];
            if z >= sz {
                break;
            }
            for py in b[1]..window[1] - b[1] {
                let y = start[1] + py - b[1];
                if y >= sy {
                    break;
                }
                for px in b[0]..window[0] - b[0] {
                    let x = start[0] + px - b[0];
                    if x >= sx {
                        break;
                    }
                    let i = x + sx * (y + sy * z);
                    self.written[i] = true;
                    for c in 0..self.channels {
                        self.data[i + c * self.written.len()] = patch.get(px, py, pz, c);
                    }
                }
            }
        }
        Ok(())
    }

    /// The assembled volume, in the canvas dtype with the reference affine.
    pub fn finalize(self) -> Result<Volume> {
        let missing = self.missing();
        if missing > 0 {
            return Err(Error::IncompleteCoverage(missing));
        }
        let [x, y, z] = self.shape;
        Volume::new(self.data, [x, y, z, self.channels], self.dtype, self.affine)
    }
}

/// Maps a fixed-size output back to `original_shape`, assigning the
/// original affine.
pub fn resize_aggregate(out: &Volume, original_shape: [usize; 3], original_affine: &Affine, interp: Interpolation) -> Result<Volume> {
    if original_shape.contains(&0) {
        return Err(Error::PreconditionViolation(format!("original shape {original_shape:?} must be positive")));
    }
    let processed = out.spatial_shape();
    let resized = if processed == original_shape {
        out.clone()
    } else {
        resample(out, &resize_affine(processed, original_shape), original_shape, interp, None)?
    };
    resized.with_affine(*original_affine)
}

/// Appended to the subject id to name aggregated outputs.
pub const OUTPUT_SUFFIX: &str = "_niftynet_out.nii.gz";

pub fn output_path(output_dir: impl AsRef<Path>, subject_id: &str) -> PathBuf {
    output_dir.as_ref().join(format!("{subject_id}{OUTPUT_SUFFIX}"))
}

/// Writes a finalized volume to [`output_path`] and returns that path.
pub fn write_output(v: &Volume, template: Option<&NiftiHeader>, output_dir: impl AsRef<Path>, subject_id: &str) -> Result<PathBuf> {
    let path = output_path(output_dir, subject_id);
    write_nifti(v, template, &path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::{grid_sample, SubjectVolumes};
    use crate::volume::translation;
    use proptest::prelude::*;

    fn volume(shape: [usize; 3], channels: usize) -> Volume {
        Volume::from_fn([shape[0], shape[1], shape[2], channels], DType::I16, translation([1.0, -2.0, 3.0]), |x, y, z, c| {
            (x * 7 + y * 13 + z * 29 + c * 101) as f64 % 300.0
        })
        .unwrap()
    }

    fn round_trip(v: &Volume, g: GridSpec) -> Result<Volume> {
        let s = SubjectVolumes::new("s").with("img", v.clone(), Interpolation::Nearest);
        let mut canvas = OutputCanvas::new("s", v, v.channels(), v.dtype(), g)?;
        for w in grid_sample(&s, &g)? {
            canvas.grid_aggregate(&w.patches["img"], w.spatial_start)?;
        }
        canvas.finalize()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn grid_round_trip_is_identity(
            shape in prop::array::uniform3(1usize..20),
            border in prop::array::uniform3(0usize..4),
            interior in prop::array::uniform3(1usize..8),
        ) {
            let window = std::array::from_fn(|a| interior[a] + 2 * border[a]);
            let v = volume(shape, 1);
            let g = GridSpec::new(window, border).unwrap();
            prop_assert_eq!(round_trip(&v, g).unwrap(), v);
        }
    }

    #[test]
    fn multichannel_round_trip_and_single_window() {
        let v = volume([9, 4, 6], 2);
        assert_eq!(round_trip(&v, GridSpec::new([4, 3, 5], [1, 1, 0]).unwrap()).unwrap(), v);
        assert_eq!(round_trip(&v, GridSpec::new([9, 4, 6], [0; 3]).unwrap()).unwrap(), v);
    }

    #[test]
    fn overlap_keeps_last_write() {
        let v = volume([10, 1, 1], 1);
        let g = GridSpec::new([4, 1, 1], [0; 3]).unwrap();
        let mut canvas = OutputCanvas::new("s", &v, 1, DType::I16, g).unwrap();
        for (k, start) in grid_positions([10, 1, 1], &g).into_iter().enumerate() {
            let patch = Volume::filled([4, 1, 1, 1], (k + 1) as f64, DType::I16, Affine::identity()).unwrap();
            canvas.grid_aggregate(&patch, start).unwrap();
        }
        let out = canvas.finalize().unwrap();
        let want = [1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 3.0, 3.0];
        assert_eq!(out.data(), &want);
    }

    #[test]
    fn unexpected_and_incomplete() {
        let v = volume([8, 8, 1], 1);
        let g = GridSpec::new([4, 4, 1], [0; 3]).unwrap();
        let mut canvas = OutputCanvas::new("s", &v, 1, DType::I16, g).unwrap();
        let patch = Volume::filled([4, 4, 1, 1], 1.0, DType::I16, Affine::identity()).unwrap();
        assert!(matches!(canvas.grid_aggregate(&patch, [1, 0, 0]), Err(Error::UnexpectedWindow([1, 0, 0]))));
        let wrong = Volume::filled([3, 4, 1, 1], 1.0, DType::I16, Affine::identity()).unwrap();
        assert!(matches!(canvas.grid_aggregate(&wrong, [0, 0, 0]), Err(Error::ShapeMismatch { .. })));
        for start in [[0, 0, 0], [4, 0, 0], [0, 4, 0]] {
            canvas.grid_aggregate(&patch, start).unwrap();
        }
        assert!(matches!(canvas.clone().finalize(), Err(Error::IncompleteCoverage(16))));
        canvas.grid_aggregate(&patch, [4, 4, 0]).unwrap();
        assert!(canvas.finalize().is_ok());
    }

    #[test]
    fn canvas_dtype_is_applied() {
        let v = volume([2, 2, 2], 1);
        let g = GridSpec::new([2, 2, 2], [0; 3]).unwrap();
        let mut canvas = OutputCanvas::new("s", &v, 1, DType::F32, g).unwrap();
        let patch = Volume::filled([2, 2, 2, 1], 0.1, DType::F64, Affine::identity()).unwrap();
        canvas.grid_aggregate(&patch, [0; 3]).unwrap();
        let out = canvas.finalize().unwrap();
        assert_eq!(out.dtype(), DType::F32);
        assert_eq!(out.data()[0], 0.1f32 as f64);
        assert_eq!(out.affine(), v.affine());
    }

    #[test]
    fn resize_round_trip_of_block_labels() {
        let affine = translation([5.0, 6.0, 7.0]) * crate::volume::scaling([0.5, 0.5, 2.0]);
        let labels = Volume::from_fn([16, 16, 16, 1], DType::U8, affine, |x, y, z, _| {
            ((x / 2) * 3 + (y / 2) * 5 + (z / 2) * 7) as f64 % 4.0
        })
        .unwrap();
        let down = resample(&labels, &resize_affine([16; 3], [8; 3]), [8; 3], Interpolation::Nearest, None).unwrap();
        let back = resize_aggregate(&down, [16; 3], labels.affine(), Interpolation::Nearest).unwrap();
        assert_eq!(back, labels);
        assert_eq!(back.affine(), &affine);
        let same = resize_aggregate(&labels, [16; 3], labels.affine(), Interpolation::Trilinear).unwrap();
        assert_eq!(same, labels);
    }

    #[test]
    fn output_file_keeps_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let v = volume([3, 4, 5], 1).with_affine(translation([1.0, 2.0, 3.0]) * crate::volume::scaling([1.5, 2.0, 2.5])).unwrap();
        let path = write_output(&v, None, dir.path(), "subj_7").unwrap();
        assert_eq!(path.file_name().unwrap().to_str().unwrap(), format!("subj_7{OUTPUT_SUFFIX}"));
        let read = crate::nifti::read_volume(&path).unwrap();
        assert_eq!(read.affine(), v.affine());
        assert_eq!(read.spacing(), [1.5, 2.0, 2.5]);
        assert_eq!(read.data(), v.data());
    }
}
