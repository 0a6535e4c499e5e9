//! NIfTI-1 reading and writing (`.nii`, `.nii.gz`, and `.hdr`/`.img` pairs).
//!
//! The header is decoded field by field from its fixed 348-byte layout. Byte
//! order is detected by testing `sizeof_hdr == 348` under both endiannesses;
//! gzip is detected by the `1F 8B` magic rather than the file extension.

use std::fs::File;
use std::io::{BufWriter, Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use flate2::read::MultiGzDecoder;
use flate2::{Compression, GzBuilder};
use nalgebra::{Matrix3, Vector4};

use crate::error::{Error, Result};
use crate::volume::{affine_spacing, Affine, DType, Volume};

pub const HEADER_SIZE: usize = 348;
/// Header plus the four-byte extension flag.
pub const SINGLE_FILE_VOX_OFFSET: usize = 352;
pub const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";
pub const MAGIC_PAIR: [u8; 4] = *b"ni1\0";

const QUATERN_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Endianness {
    #[default]
    Little,
    Big,
}

/// Datatype codes this toolkit can decode.
pub fn datatype_code(dtype: DType) -> i16 {
    match dtype {
        DType::U8 => 2,
        DType::I16 => 4,
        DType::I32 => 8,
        DType::F32 => 16,
        DType::F64 => 64,
    }
}

pub fn dtype_from_code(code: i16) -> Result<DType> {
    match code {
        2 => Ok(DType::U8),
        4 => Ok(DType::I16),
        8 => Ok(DType::I32),
        16 => Ok(DType::F32),
        64 => Ok(DType::F64),
        other => Err(Error::UnsupportedDatatype(other)),
    }
}

/// Raw NIfTI-1 header fields.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub data_type: [u8; 10],
    pub db_name: [u8; 18],
    pub extents: i32,
    pub session_error: i16,
    pub regular: u8,
    pub dim_info: u8,
    pub dim: [i16; 8],
    pub intent_p1: f32,
    pub intent_p2: f32,
    pub intent_p3: f32,
    pub intent_code: i16,
    pub datatype: i16,
    pub bitpix: i16,
    pub slice_start: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub slice_end: i16,
    pub slice_code: u8,
    pub xyzt_units: u8,
    pub cal_max: f32,
    pub cal_min: f32,
    pub slice_duration: f32,
    pub toffset: f32,
    pub glmax: i32,
    pub glmin: i32,
    pub descrip: [u8; 80],
    pub aux_file: [u8; 24],
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern_b: f32,
    pub quatern_c: f32,
    pub quatern_d: f32,
    pub qoffset_x: f32,
    pub qoffset_y: f32,
    pub qoffset_z: f32,
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
    pub intent_name: [u8; 16],
    pub magic: [u8; 4],
    /// Byte order the header was read in; not stored in the header itself.
    pub endianness: Endianness,
}

impl Default for NiftiHeader {
    fn default() -> Self {
        NiftiHeader {
            sizeof_hdr: HEADER_SIZE as i32,
            data_type: [0; 10],
            db_name: [0; 18],
            extents: 0,
            session_error: 0,
            regular: 0,
            dim_info: 0,
            dim: [3, 1, 1, 1, 1, 1, 1, 1],
            intent_p1: 0.0,
            intent_p2: 0.0,
            intent_p3: 0.0,
            intent_code: 0,
            datatype: 2,
            bitpix: 8,
            slice_start: 0,
            pixdim: [1.0; 8],
            vox_offset: SINGLE_FILE_VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            slice_end: 0,
            slice_code: 0,
            xyzt_units: 2, // mm
            cal_max: 0.0,
            cal_min: 0.0,
            slice_duration: 0.0,
            toffset: 0.0,
            glmax: 0,
            glmin: 0,
            descrip: [0; 80],
            aux_file: [0; 24],
            qform_code: 0,
            sform_code: 0,
            quatern_b: 0.0,
            quatern_c: 0.0,
            quatern_d: 0.0,
            qoffset_x: 0.0,
            qoffset_y: 0.0,
            qoffset_z: 0.0,
            srow_x: [1.0, 0.0, 0.0, 0.0],
            srow_y: [0.0, 1.0, 0.0, 0.0],
            srow_z: [0.0, 0.0, 1.0, 0.0],
            intent_name: [0; 16],
            magic: MAGIC_SINGLE,
            endianness: Endianness::Little,
        }
    }
}

fn read_bytes<const N: usize>(r: &mut Cursor<&[u8]>) -> [u8; N] {
    let mut out = [0u8; N];
    r.read_exact(&mut out).expect("header buffer is 348 bytes");
    out
}

impl NiftiHeader {
    /// Decodes the first 348 bytes of `bytes`, detecting byte order.
    pub fn from_bytes(bytes: &[u8]) -> Result<NiftiHeader> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::UnrecognizedFormat(format!(
                "{} bytes is shorter than a NIfTI-1 header",
                bytes.len()
            )));
        }
        let bytes = &bytes[..HEADER_SIZE];
        let header = if LittleEndian::read_i32(bytes) == HEADER_SIZE as i32 {
            Self::decode::<LittleEndian>(bytes, Endianness::Little)
        } else if BigEndian::read_i32(bytes) == HEADER_SIZE as i32 {
            Self::decode::<BigEndian>(bytes, Endianness::Big)
        } else {
            return Err(Error::UnrecognizedFormat("sizeof_hdr is not 348 in either byte order".into()));
        };
        if header.magic != MAGIC_SINGLE && header.magic != MAGIC_PAIR {
            return Err(Error::UnrecognizedFormat(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(&header.magic)
            )));
        }
        Ok(header)
    }

    fn decode<B: ByteOrder>(bytes: &[u8], endianness: Endianness) -> NiftiHeader {
        // Reads from an in-memory slice of known length cannot fail.
        let mut r = Cursor::new(bytes);
        let i16_ = |r: &mut Cursor<&[u8]>| r.read_i16::<B>().unwrap();
        let i32_ = |r: &mut Cursor<&[u8]>| r.read_i32::<B>().unwrap();
        let f32_ = |r: &mut Cursor<&[u8]>| r.read_f32::<B>().unwrap();
        let u8_ = |r: &mut Cursor<&[u8]>| r.read_u8().unwrap();
        let f32x4 = |r: &mut Cursor<&[u8]>| [f32_(r), f32_(r), f32_(r), f32_(r)];

        let sizeof_hdr = i32_(&mut r);
        let data_type = read_bytes::<10>(&mut r);
        let db_name = read_bytes::<18>(&mut r);
        let extents = i32_(&mut r);
        let session_error = i16_(&mut r);
        let regular = u8_(&mut r);
        let dim_info = u8_(&mut r);
        let mut dim = [0i16; 8];
        for d in &mut dim {
            *d = i16_(&mut r);
        }
        let intent_p1 = f32_(&mut r);
        let intent_p2 = f32_(&mut r);
        let intent_p3 = f32_(&mut r);
        let intent_code = i16_(&mut r);
        let datatype = i16_(&mut r);
        let bitpix = i16_(&mut r);
        let slice_start = i16_(&mut r);
        let mut pixdim = [0f32; 8];
        for p in &mut pixdim {
            *p = f32_(&mut r);
        }
        let vox_offset = f32_(&mut r);
        let scl_slope = f32_(&mut r);
        let scl_inter = f32_(&mut r);
        let slice_end = i16_(&mut r);
        let slice_code = u8_(&mut r);
        let xyzt_units = u8_(&mut r);
        let cal_max = f32_(&mut r);
        let cal_min = f32_(&mut r);
        let slice_duration = f32_(&mut r);
        let toffset = f32_(&mut r);
        let glmax = i32_(&mut r);
        let glmin = i32_(&mut r);
        let descrip = read_bytes::<80>(&mut r);
        let aux_file = read_bytes::<24>(&mut r);
        let qform_code = i16_(&mut r);
        let sform_code = i16_(&mut r);
        let quatern_b = f32_(&mut r);
        let quatern_c = f32_(&mut r);
        let quatern_d = f32_(&mut r);
        let qoffset_x = f32_(&mut r);
        let qoffset_y = f32_(&mut r);
        let qoffset_z = f32_(&mut r);
        let srow_x = f32x4(&mut r);
        let srow_y = f32x4(&mut r);
        let srow_z = f32x4(&mut r);
        let intent_name = read_bytes::<16>(&mut r);
        let magic = read_bytes::<4>(&mut r);
        debug_assert_eq!(r.position() as usize, HEADER_SIZE);

        NiftiHeader {
            sizeof_hdr,
            data_type,
            db_name,
            extents,
            session_error,
            regular,
            dim_info,
            dim,
            intent_p1,
            intent_p2,
            intent_p3,
            intent_code,
            datatype,
            bitpix,
            slice_start,
            pixdim,
            vox_offset,
            scl_slope,
            scl_inter,
            slice_end,
            slice_code,
            xyzt_units,
            cal_max,
            cal_min,
            slice_duration,
            toffset,
            glmax,
            glmin,
            descrip,
            aux_file,
            qform_code,
            sform_code,
            quatern_b,
            quatern_c,
            quatern_d,
            qoffset_x,
            qoffset_y,
            qoffset_z,
            srow_x,
            srow_y,
            srow_z,
            intent_name,
            magic,
            endianness,
        }
    }

    /// Encodes the header in its own byte order.
    pub fn to_bytes(&self) -> Vec<u8> {
        match self.endianness {
            Endianness::Little => self.encode::<LittleEndian>(),
            Endianness::Big => self.encode::<BigEndian>(),
        }
    }

    fn encode<B: ByteOrder>(&self) -> Vec<u8> {
        // Writes into a Vec cannot fail.
        let mut w = Vec::with_capacity(HEADER_SIZE);
        w.write_i32::<B>(self.sizeof_hdr).unwrap();
        w.extend_from_slice(&self.data_type);
        w.extend_from_slice(&self.db_name);
        w.write_i32::<B>(self.extents).unwrap();
        w.write_i16::<B>(self.session_error).unwrap();
        w.push(self.regular);
        w.push(self.dim_info);
        for &d in &self.dim {
            w.write_i16::<B>(d).unwrap();
        }
        for v in [self.intent_p1, self.intent_p2, self.intent_p3] {
            w.write_f32::<B>(v).unwrap();
        }
        for v in [self.intent_code, self.datatype, self.bitpix, self.slice_start] {
            w.write_i16::<B>(v).unwrap();
        }
        for &p in &self.pixdim {
            w.write_f32::<B>(p).unwrap();
        }
        for v in [self.vox_offset, self.scl_slope, self.scl_inter] {
            w.write_f32::<B>(v).unwrap();
        }
        w.write_i16::<B>(self.slice_end).unwrap();
        w.push(self.slice_code);
        w.push(self.xyzt_units);
        for v in [self.cal_max, self.cal_min, self.slice_duration, self.toffset] {
            w.write_f32::<B>(v).unwrap();
        }
        w.write_i32::<B>(self.glmax).unwrap();
        w.write_i32::<B>(self.glmin).unwrap();
        w.extend_from_slice(&self.descrip);
        w.extend_from_slice(&self.aux_file);
        w.write_i16::<B>(self.qform_code).unwrap();
        w.write_i16::<B>(self.sform_code).unwrap();
        for v in [
            self.quatern_b,
            self.quatern_c,
            self.quatern_d,
            self.qoffset_x,
            self.qoffset_y,
            self.qoffset_z,
        ] {
            w.write_f32::<B>(v).unwrap();
        }
        for row in [self.srow_x, self.srow_y, self.srow_z] {
            for v in row {
                w.write_f32::<B>(v).unwrap();
            }
        }
        w.extend_from_slice(&self.intent_name);
        w.extend_from_slice(&self.magic);
        debug_assert_eq!(w.len(), HEADER_SIZE);
        w
    }

    pub fn dtype(&self) -> Result<DType> {
        dtype_from_code(self.datatype)
    }

    /// Spatial shape and channel count encoded in `dim`.
    ///
    /// Channels come from `dim[4]`, or from `dim[5]` when `dim[4] == 1`
    /// (the vector-valued convention). Any further dimension must be 1.
    pub fn volume_shape(&self) -> Result<[usize; 4]> {
        let ndim = self.dim[0];
        if !(1..=7).contains(&ndim) {
            return Err(Error::UnsupportedDimensions(format!("dim[0] = {ndim}")));
        }
        let ndim = ndim as usize;
        let d = |i: usize| -> Result<usize> {
            if i > ndim {
                return Ok(1);
            }
            let v = self.dim[i];
            if v < 1 {
                return Err(Error::UnsupportedDimensions(format!("dim[{i}] = {v}")));
            }
            Ok(v as usize)
        };
        let (nx, ny, nz, n4, n5) = (d(1)?, d(2)?, d(3)?, d(4)?, d(5)?);
        for i in 6..=7 {
            if d(i)? != 1 {
                return Err(Error::UnsupportedDimensions(format!("dim[{i}] = {} > 1", self.dim[i])));
            }
        }
        let channels = match (n4, n5) {
            (c, 1) => c,
            (1, c) => c,
            (a, b) => {
                return Err(Error::UnsupportedDimensions(format!(
                    "both dim[4] = {a} and dim[5] = {b} exceed 1"
                )))
            }
        };
        Ok([nx, ny, nz, channels])
    }

    /// Voxel-to-world affine: sform when `sform_code > 0`, else qform when
    /// `qform_code > 0`, else a plain scaling by `pixdim`.
    pub fn affine(&self) -> Result<Affine> {
        if self.sform_code > 0 {
            Ok(sform_to_affine(self))
        } else if self.qform_code > 0 {
            qform_to_affine(self)
        } else {
            let p = |i: usize| {
                let v = self.pixdim[i] as f64;
                if v > 0.0 && v.is_finite() {
                    v
                } else {
                    1.0
                }
            };
            Ok(Affine::from_diagonal(&Vector4::new(p(1), p(2), p(3), 1.0)))
        }
    }

    /// `(slope, intercept)` when the header asks for intensity scaling.
    pub fn scaling(&self) -> Option<(f64, f64)> {
        let slope = self.scl_slope as f64;
        let inter = if self.scl_inter.is_finite() { self.scl_inter as f64 } else { 0.0 };
        if !slope.is_finite() || slope == 0.0 || (slope == 1.0 && inter == 0.0) {
            None
        } else {
            Some((slope, inter))
        }
    }

    /// Builds the header for writing `v`, keeping descriptive fields from
    /// `template` when one is given.
    pub fn for_volume(v: &Volume, template: Option<&NiftiHeader>) -> NiftiHeader {
        let mut h = NiftiHeader::default();
        if let Some(t) = template {
            h.dim_info = t.dim_info;
            h.intent_p1 = t.intent_p1;
            h.intent_p2 = t.intent_p2;
            h.intent_p3 = t.intent_p3;
            h.intent_code = t.intent_code;
            h.intent_name = t.intent_name;
            h.xyzt_units = t.xyzt_units;
            h.descrip = t.descrip;
            h.aux_file = t.aux_file;
            h.toffset = t.toffset;
        }
        let [nx, ny, nz, nc] = v.shape();
        let as_dim = |n: usize| n.min(i16::MAX as usize) as i16;
        h.dim = [3, as_dim(nx), as_dim(ny), as_dim(nz), 1, 1, 1, 1];
        if nc > 1 {
            h.dim[0] = 4;
            h.dim[4] = as_dim(nc);
        }
        h.datatype = datatype_code(v.dtype());
        h.bitpix = (v.dtype().size_bytes() * 8) as i16;
        h.vox_offset = SINGLE_FILE_VOX_OFFSET as f32;
        h.scl_slope = 1.0;
        h.scl_inter = 0.0;
        h.magic = MAGIC_SINGLE;
        h.endianness = Endianness::Little;

        let a = v.affine();
        let row = |r: usize| [a[(r, 0)] as f32, a[(r, 1)] as f32, a[(r, 2)] as f32, a[(r, 3)] as f32];
        h.srow_x = row(0);
        h.srow_y = row(1);
        h.srow_z = row(2);
        h.sform_code = template.map(|t| t.sform_code).filter(|&c| c > 0).unwrap_or(1);

        let q = affine_to_quaternion(a);
        h.qform_code = template.map(|t| t.qform_code).filter(|&c| c > 0).unwrap_or(1);
        h.quatern_b = q.b as f32;
        h.quatern_c = q.c as f32;
        h.quatern_d = q.d as f32;
        h.qoffset_x = a[(0, 3)] as f32;
        h.qoffset_y = a[(1, 3)] as f32;
        h.qoffset_z = a[(2, 3)] as f32;
        let spacing = affine_spacing(a);
        h.pixdim = [q.qfac as f32, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
        h
    }
}

pub fn sform_to_affine(h: &NiftiHeader) -> Affine {
    let mut a = Affine::identity();
    for (r, row) in [h.srow_x, h.srow_y, h.srow_z].iter().enumerate() {
        for c in 0..4 {
            a[(r, c)] = row[c] as f64;
        }
    }
    a
}

/// Affine from the quaternion representation: rotation from `(a, b, c, d)`
/// with `a = sqrt(1 - b² - c² - d²)`, columns scaled by `pixdim[1..=3]`
/// (the third also by `qfac = pixdim[0]`), translated by the qoffsets.
pub fn qform_to_affine(h: &NiftiHeader) -> Result<Affine> {
    let (b, c, d) = (h.quatern_b as f64, h.quatern_c as f64, h.quatern_d as f64);
    let rem = 1.0 - (b * b + c * c + d * d);
    if rem < -QUATERN_TOLERANCE {
        return Err(Error::MalformedQuaternion(rem));
    }
    let a = rem.max(0.0).sqrt();
    let r = Matrix3::new(
        a * a + b * b - c * c - d * d,
        2.0 * (b * c - a * d),
        2.0 * (b * d + a * c),
        2.0 * (b * c + a * d),
        a * a + c * c - b * b - d * d,
        2.0 * (c * d - a * b),
        2.0 * (b * d - a * c),
        2.0 * (c * d + a * b),
        a * a + d * d - c * c - b * b,
    );
    let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
    let p = |i: usize| {
        let v = h.pixdim[i] as f64;
        if v > 0.0 {
            v
        } else {
            1.0
        }
    };
    let scale = [p(1), p(2), p(3) * qfac];
    let mut out = Affine::identity();
    for row in 0..3 {
        for col in 0..3 {
            out[(row, col)] = r[(row, col)] * scale[col];
        }
    }
    out[(0, 3)] = h.qoffset_x as f64;
    out[(1, 3)] = h.qoffset_y as f64;
    out[(2, 3)] = h.qoffset_z as f64;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub qfac: f64,
}

/// Closest qform parameters for an arbitrary affine: the 3×3 block's columns
/// are normalised, orthogonalised by polar decomposition, and the reflection
/// (if any) is moved into `qfac`.
pub fn affine_to_quaternion(a: &Affine) -> Quaternion {
    let mut m: Matrix3<f64> = a.fixed_view::<3, 3>(0, 0).into_owned();
    for mut col in m.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= n;
        }
    }
    let mut qfac = 1.0;
    if m.determinant() < 0.0 {
        qfac = -1.0;
        m.column_mut(2).neg_mut();
    }
    let svd = m.svd(true, true);
    let r = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => u * v_t,
        _ => Matrix3::identity(),
    };
    let (r11, r12, r13) = (r[(0, 0)], r[(0, 1)], r[(0, 2)]);
    let (r21, r22, r23) = (r[(1, 0)], r[(1, 1)], r[(1, 2)]);
    let (r31, r32, r33) = (r[(2, 0)], r[(2, 1)], r[(2, 2)]);
    let trace = r11 + r22 + r33 + 1.0;
    let (qa, mut b, mut c, mut d);
    if trace > 0.5 {
        qa = 0.5 * trace.sqrt();
        b = 0.25 * (r32 - r23) / qa;
        c = 0.25 * (r13 - r31) / qa;
        d = 0.25 * (r21 - r12) / qa;
    } else {
        let xd = 1.0 + r11 - (r22 + r33);
        let yd = 1.0 + r22 - (r11 + r33);
        let zd = 1.0 + r33 - (r11 + r22);
        if xd > 1.0 {
            b = 0.5 * xd.sqrt();
            c = 0.25 * (r12 + r21) / b;
            d = 0.25 * (r13 + r31) / b;
            qa = 0.25 * (r32 - r23) / b;
        } else if yd > 1.0 {
            c = 0.5 * yd.sqrt();
            b = 0.25 * (r12 + r21) / c;
            d = 0.25 * (r23 + r32) / c;
            qa = 0.25 * (r13 - r31) / c;
        } else {
            d = 0.5 * zd.sqrt();
            b = 0.25 * (r13 + r31) / d;
            c = 0.25 * (r23 + r32) / d;
            qa = 0.25 * (r21 - r12) / d;
        }
        if qa < 0.0 {
            b = -b;
            c = -c;
            d = -d;
        }
    }
    Quaternion { b, c, d, qfac }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1F && bytes[1] == 0x8B
}

/// Reads a file, transparently gunzipping it when it starts with the gzip
/// magic bytes.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if is_gzip(&raw) {
        let mut out = Vec::new();
        MultiGzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::UnrecognizedFormat(format!("{}: corrupt gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Replaces a `.hdr`/`.img` suffix (optionally followed by `.gz`).
fn swap_pair_extension(path: &Path, from: &str, to: &str) -> Option<PathBuf> {
    let name = file_name(path);
    let lower = name.to_ascii_lowercase();
    for gz in ["", ".gz"] {
        let suffix = format!(".{from}{gz}");
        if lower.ends_with(&suffix) {
            let stem = &name[..name.len() - suffix.len()];
            for candidate_gz in [gz, if gz.is_empty() { ".gz" } else { "" }] {
                let p = path.with_file_name(format!("{stem}.{to}{candidate_gz}"));
                if p.exists() {
                    return Some(p);
                }
            }
        }
    }
    None
}

/// Reads a NIfTI-1 volume and its header.
///
/// Voxel values are scaled by `scl_slope`/`scl_inter` when the slope is
/// non-zero and not the identity; scaled volumes are materialised as `f32`.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<(Volume, NiftiHeader)> {
    let mut path = path.as_ref().to_path_buf();
    if let Some(hdr) = swap_pair_extension(&path, "img", "hdr") {
        path = hdr;
    }
    let bytes = read_maybe_gz(&path)?;
    let header = NiftiHeader::from_bytes(&bytes)
        .map_err(|e| match e {
            Error::UnrecognizedFormat(m) => Error::UnrecognizedFormat(format!("{}: {m}", path.display())),
            other => other,
        })?;
    let dtype = header.dtype()?;
    let shape = header.volume_shape()?;
    let affine = header.affine()?;

    let offset = if header.vox_offset.is_finite() && header.vox_offset > 0.0 {
        header.vox_offset as usize
    } else {
        0
    };
    let image_bytes;
    let payload: &[u8] = if header.magic == MAGIC_PAIR {
        let img = swap_pair_extension(&path, "hdr", "img").ok_or_else(|| {
            Error::UnrecognizedFormat(format!("{}: header has no matching .img file", path.display()))
        })?;
        image_bytes = read_maybe_gz(&img)?;
        &image_bytes
    } else {
        if offset < HEADER_SIZE {
            return Err(Error::UnrecognizedFormat(format!(
                "{}: vox_offset {offset} lies inside the header",
                path.display()
            )));
        }
        &bytes
    };
    let n_values: usize = shape.iter().product();
    let expected = n_values * dtype.size_bytes();
    let available = payload.len().saturating_sub(offset);
    if available < expected {
        return Err(Error::TruncatedFile { expected, found: available });
    }
    let raw = &payload[offset..offset + expected];
    let mut values = match header.endianness {
        Endianness::Little => decode_values::<LittleEndian>(raw, dtype),
        Endianness::Big => decode_values::<BigEndian>(raw, dtype),
    };
    let out_dtype = match header.scaling() {
        Some((slope, inter)) => {
            for v in &mut values {
                *v = *v * slope + inter;
            }
            DType::F32
        }
        None => dtype,
    };
    let volume = Volume::new(values, shape, out_dtype, affine)?;
    Ok((volume, header))
}

/// Reads only the volume.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    read_nifti(path).map(|(v, _)| v)
}

fn decode_values<B: ByteOrder>(raw: &[u8], dtype: DType) -> Vec<f64> {
    match dtype {
        DType::U8 => raw.iter().map(|&b| b as f64).collect(),
        DType::I16 => raw.chunks_exact(2).map(|c| B::read_i16(c) as f64).collect(),
        DType::I32 => raw.chunks_exact(4).map(|c| B::read_i32(c) as f64).collect(),
        DType::F32 => raw.chunks_exact(4).map(|c| B::read_f32(c) as f64).collect(),
        DType::F64 => raw.chunks_exact(8).map(B::read_f64).collect(),
    }
}

fn encode_values(v: &Volume) -> Vec<u8> {
    let data = v.data();
    let mut out = Vec::with_capacity(data.len() * v.dtype().size_bytes());
    // values are already quantized to the dtype, so the casts are exact
    match v.dtype() {
        DType::U8 => out.extend(data.iter().map(|&x| x as u8)),
        DType::I16 => data.iter().for_each(|&x| out.write_i16::<LittleEndian>(x as i16).unwrap()),
        DType::I32 => data.iter().for_each(|&x| out.write_i32::<LittleEndian>(x as i32).unwrap()),
        DType::F32 => data.iter().for_each(|&x| out.write_f32::<LittleEndian>(x as f32).unwrap()),
        DType::F64 => data.iter().for_each(|&x| out.write_f64::<LittleEndian>(x).unwrap()),
    }
    out
}

/// Serialises `v` as a single-file NIfTI-1 image (header, 4-byte extension
/// flag, data at offset 352).
pub fn encode_nifti(v: &Volume, template: Option<&NiftiHeader>) -> Vec<u8> {
    let header = NiftiHeader::for_volume(v, template);
    let mut out = header.to_bytes();
    out.extend_from_slice(&[0u8; SINGLE_FILE_VOX_OFFSET - HEADER_SIZE]);
    out.extend_from_slice(&encode_values(v));
    out
}

/// Writes `v` to `path`, gzip-compressed when the name ends in `.gz`.
pub fn write_nifti(v: &Volume, template: Option<&NiftiHeader>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_nifti(v, template);
    let file = File::create(path)?;
    if file_name(path).to_ascii_lowercase().ends_with(".gz") {
        let mut gz = GzBuilder::new().mtime(0).write(BufWriter::new(file), Compression::default());
        gz.write_all(&bytes)?;
        gz.finish()?.flush()?;
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(&bytes)?;
        w.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_bytes(mut f: impl FnMut(&mut NiftiHeader)) -> Vec<u8> {
        let mut h = NiftiHeader::default();
        f(&mut h);
        h.to_bytes()
    }

    #[test]
    fn header_round_trips_in_both_byte_orders() {
        let mut h = NiftiHeader::default();
        h.dim = [3, 5, 6, 7, 1, 1, 1, 1];
        h.quatern_c = 0.25;
        h.srow_y = [0.5, 2.0, -1.0, 9.0];
        h.descrip[..5].copy_from_slice(b"hello");
        for e in [Endianness::Little, Endianness::Big] {
            h.endianness = e;
            let bytes = h.to_bytes();
            assert_eq!(bytes.len(), HEADER_SIZE);
            assert_eq!(NiftiHeader::from_bytes(&bytes).unwrap(), h);
        }
    }

    #[test]
    fn bad_magic_is_unrecognized() {
        let bytes = header_bytes(|h| h.magic = *b"XXXX");
        assert!(matches!(NiftiHeader::from_bytes(&bytes), Err(Error::UnrecognizedFormat(_))));
        let mut bytes = header_bytes(|_| {});
        bytes[0..4].copy_from_slice(&[1, 2, 3, 4]);
        assert!(matches!(NiftiHeader::from_bytes(&bytes), Err(Error::UnrecognizedFormat(_))));
        assert!(matches!(NiftiHeader::from_bytes(&[0; 10]), Err(Error::UnrecognizedFormat(_))));
    }

    #[test]
    fn datatype_codes() {
        for d in [DType::U8, DType::I16, DType::I32, DType::F32, DType::F64] {
            assert_eq!(dtype_from_code(datatype_code(d)).unwrap(), d);
        }
        assert!(matches!(dtype_from_code(512), Err(Error::UnsupportedDatatype(512))));
    }

    #[test]
    fn channel_dimension_rules() {
        let mut h = NiftiHeader::default();
        h.dim = [4, 2, 3, 4, 5, 1, 1, 1];
        assert_eq!(h.volume_shape().unwrap(), [2, 3, 4, 5]);
        h.dim = [5, 2, 3, 4, 1, 3, 1, 1];
        assert_eq!(h.volume_shape().unwrap(), [2, 3, 4, 3]);
        h.dim = [5, 2, 3, 4, 2, 3, 1, 1];
        assert!(h.volume_shape().is_err());
        h.dim = [2, 2, 3, 0, 0, 0, 0, 0];
        assert_eq!(h.volume_shape().unwrap(), [2, 3, 1, 1]);
        h.dim = [3, 2, 0, 4, 1, 1, 1, 1];
        assert!(h.volume_shape().is_err());
        h.dim = [8, 1, 1, 1, 1, 1, 1, 1];
        assert!(h.volume_shape().is_err());
    }

    #[test]
    fn qform_identity_and_scaling() {
        let mut h = NiftiHeader::default();
        h.qform_code = 1;
        assert_eq!(qform_to_affine(&h).unwrap(), Affine::identity());

        h.pixdim[1..4].copy_from_slice(&[2.0, 3.0, 4.0]);
        h.qoffset_x = 5.0;
        h.qoffset_y = 6.0;
        h.qoffset_z = 7.0;
        let mut expect = Affine::from_diagonal(&Vector4::new(2.0, 3.0, 4.0, 1.0));
        expect[(0, 3)] = 5.0;
        expect[(1, 3)] = 6.0;
        expect[(2, 3)] = 7.0;
        assert_eq!(qform_to_affine(&h).unwrap(), expect);
    }

    /// Rotation matrix of a unit quaternion via the Hamilton product
    /// `q · v · q*`, applied to each basis vector.
    fn rotate_by_quaternion(q: [f64; 4], v: [f64; 3]) -> [f64; 3] {
        let mul = |p: [f64; 4], r: [f64; 4]| {
            [
                p[0] * r[0] - p[1] * r[1] - p[2] * r[2] - p[3] * r[3],
                p[0] * r[1] + p[1] * r[0] + p[2] * r[3] - p[3] * r[2],
                p[0] * r[2] - p[1] * r[3] + p[2] * r[0] + p[3] * r[1],
                p[0] * r[3] + p[1] * r[2] - p[2] * r[1] + p[3] * r[0],
            ]
        };
        let conj = [q[0], -q[1], -q[2], -q[3]];
        let out = mul(mul(q, [0.0, v[0], v[1], v[2]]), conj);
        [out[1], out[2], out[3]]
    }

    #[test]
    fn qform_matches_hamilton_product() {
        for (b, c, d) in [(1.0, 0.0, 0.0), (0.0, 0.6, 0.0), (0.1, -0.2, 0.3), (0.5, 0.5, 0.5)] {
            let mut h = NiftiHeader::default();
            h.qform_code = 1;
            h.quatern_b = b as f32;
            h.quatern_c = c as f32;
            h.quatern_d = d as f32;
            let m = qform_to_affine(&h).unwrap();
            let (b, c, d) = (b as f32 as f64, c as f32 as f64, d as f32 as f64);
            let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
            for col in 0..3 {
                let mut e = [0.0; 3];
                e[col] = 1.0;
                let r = rotate_by_quaternion([a, b, c, d], e);
                for row in 0..3 {
                    assert!((m[(row, col)] - r[row]).abs() < 1e-12);
                }
            }
        }
        // 180° about x
        let mut h = NiftiHeader::default();
        h.qform_code = 1;
        h.quatern_b = 1.0;
        assert_eq!(qform_to_affine(&h).unwrap(), Affine::from_diagonal(&Vector4::new(1.0, -1.0, -1.0, 1.0)));
    }

    #[test]
    fn qfac_flips_third_column_and_bad_quaternion_fails() {
        let mut h = NiftiHeader::default();
        h.qform_code = 1;
        h.pixdim[0] = -1.0;
        assert_eq!(qform_to_affine(&h).unwrap()[(2, 2)], -1.0);
        h.quatern_b = 0.9;
        h.quatern_c = 0.9;
        assert!(matches!(qform_to_affine(&h), Err(Error::MalformedQuaternion(_))));
    }

    #[test]
    fn affine_precedence() {
        let mut h = NiftiHeader::default();
        h.pixdim[1..4].copy_from_slice(&[2.0, 2.0, 2.0]);
        assert_eq!(h.affine().unwrap()[(0, 0)], 2.0);
        h.qform_code = 1;
        h.pixdim[1] = 3.0;
        assert_eq!(h.affine().unwrap()[(0, 0)], 3.0);
        h.sform_code = 1;
        h.srow_x = [7.0, 0.0, 0.0, 1.0];
        assert_eq!(h.affine().unwrap()[(0, 0)], 7.0);
        assert_eq!(h.affine().unwrap()[(0, 3)], 1.0);
    }

    #[test]
    fn quaternion_recovers_rotations() {
        for (b, c, d, qfac) in [(0.0, 0.0, 0.0, 1.0), (1.0, 0.0, 0.0, 1.0), (0.2, -0.3, 0.4, -1.0), (0.0, 0.0, 1.0, 1.0)] {
            let mut h = NiftiHeader::default();
            h.qform_code = 1;
            h.quatern_b = b;
            h.quatern_c = c;
            h.quatern_d = d;
            h.pixdim[0] = qfac;
            h.pixdim[1..4].copy_from_slice(&[1.5, 0.7, 3.0]);
            let a = qform_to_affine(&h).unwrap();
            let q = affine_to_quaternion(&a);
            let mut h2 = h.clone();
            h2.quatern_b = q.b as f32;
            h2.quatern_c = q.c as f32;
            h2.quatern_d = q.d as f32;
            h2.pixdim[0] = q.qfac as f32;
            let a2 = qform_to_affine(&h2).unwrap();
            assert!((a - a2).abs().max() < 1e-5, "{a} vs {a2}");
        }
    }

    #[test]
    fn scaling_applies_and_promotes_to_f32() {
        let mut h = NiftiHeader::default();
        h.dim = [3, 1, 1, 1, 1, 1, 1, 1];
        h.datatype = 4;
        h.bitpix = 16;
        h.scl_slope = 2.0;
        h.scl_inter = 10.0;
        let mut bytes = h.to_bytes();
        bytes.extend_from_slice(&[0; 4]);
        bytes.extend_from_slice(&5i16.to_le_bytes());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scaled.nii");
        std::fs::write(&p, &bytes).unwrap();
        let (v, _) = read_nifti(&p).unwrap();
        assert_eq!(v.data(), &[20.0]);
        assert_eq!(v.dtype(), DType::F32);
    }

    #[test]
    fn truncated_data_is_reported() {
        let mut h = NiftiHeader::default();
        h.dim = [3, 2, 2, 2, 1, 1, 1, 1];
        let mut bytes = h.to_bytes();
        bytes.extend_from_slice(&[0; 4]);
        bytes.extend_from_slice(&[1; 7]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("short.nii");
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_nifti(&p), Err(Error::TruncatedFile { expected: 8, found: 7 })));
    }

    #[test]
    fn u8_cube_file_size() {
        let v = Volume::filled([2, 2, 2, 1], 7.0, DType::U8, Affine::identity()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seven.nii");
        write_nifti(&v, None, &p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 360);
        let (back, h) = read_nifti(&p).unwrap();
        assert_eq!(back, v);
        assert_eq!(h.sform_code, 1);
        assert_eq!((h.scl_slope, h.scl_inter), (1.0, 0.0));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let v = Volume::filled([1, 1, 1, 1], 0.0, DType::U8, Affine::identity()).unwrap();
        let r = write_nifti(&v, None, "/nonexistent-dir/x/y.nii");
        assert!(matches!(r, Err(Error::Io(_))));
    }
}
