//! Single-file NIfTI-1 (`.nii`) reading and writing.
//!
//! Only uncompressed files are handled. NIfTI stores `x` fastest; a volume
//! with `dim = [3, nx, ny, nz]` maps to extents `(D, H, W) = (nz, ny, nx)`,
//! which keeps the file's voxel order unchanged.

use std::fs;
use std::path::Path;

use super::IoError;
use crate::volume::Volume;

pub const HEADER_SIZE: usize = 348;
/// Header plus the four-byte extension flag.
pub const DATA_OFFSET: usize = 352;
const MAGIC_SINGLE_FILE: &[u8; 4] = b"n+1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn take<const N: usize>(&self, at: usize) -> Result<[u8; N], IoError> {
        self.bytes
            .get(at..at + N)
            .map(|s| s.try_into().expect("slice of length N"))
            .ok_or(IoError::TruncatedFile {
                needed: at + N,
                got: self.bytes.len(),
            })
    }

    fn i16(&self, at: usize) -> Result<i16, IoError> {
        let b = self.take::<2>(at)?;
        Ok(match self.endian {
            Endian::Little => i16::from_le_bytes(b),
            Endian::Big => i16::from_be_bytes(b),
        })
    }

    fn i32(&self, at: usize) -> Result<i32, IoError> {
        let b = self.take::<4>(at)?;
        Ok(match self.endian {
            Endian::Little => i32::from_le_bytes(b),
            Endian::Big => i32::from_be_bytes(b),
        })
    }

    fn f32(&self, at: usize) -> Result<f32, IoError> {
        let b = self.take::<4>(at)?;
        Ok(match self.endian {
            Endian::Little => f32::from_le_bytes(b),
            Endian::Big => f32::from_be_bytes(b),
        })
    }

    fn f64(&self, at: usize) -> Result<f64, IoError> {
        let b = self.take::<8>(at)?;
        Ok(match self.endian {
            Endian::Little => f64::from_le_bytes(b),
            Endian::Big => f64::from_be_bytes(b),
        })
    }
}

/// Parses an in-memory `.nii` file.
pub fn decode_nifti(bytes: &[u8]) -> Result<Volume, IoError> {
    if bytes.len() < HEADER_SIZE {
        return Err(IoError::TruncatedFile {
            needed: HEADER_SIZE,
            got: bytes.len(),
        });
    }
    let size_le = i32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let size_be = i32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let endian = if size_le == HEADER_SIZE as i32 {
        Endian::Little
    } else if size_be == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(IoError::BadMagic(format!(
            "sizeof_hdr is {size_le}, expected {HEADER_SIZE}"
        )));
    };
    let r = Reader { bytes, endian };
    if &bytes[344..348] != MAGIC_SINGLE_FILE {
        return Err(IoError::BadMagic(format!(
            "NIfTI magic {:?}, expected \"n+1\\0\"",
            &bytes[344..348]
        )));
    }

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = r.i16(40 + 2 * i)?;
    }
    let ndim = dim[0];
    if !(ndim == 3 || (ndim == 4 && dim[4] == 1)) {
        return Err(IoError::UnsupportedDimensionality(format!(
            "dim = {:?}; only 3-D volumes (or 4-D with a single frame) are supported",
            &dim[..(ndim.clamp(0, 7) as usize + 1)]
        )));
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(IoError::UnsupportedDimensionality(format!(
            "non-positive extent in dim = {:?}",
            &dim[..4]
        )));
    }
    let (nx, ny, nz) = (dim[1] as usize, dim[2] as usize, dim[3] as usize);
    let datatype = r.i16(70)?;
    let width = match datatype {
        2 => 1,
        4 => 2,
        8 | 16 => 4,
        64 => 8,
        other => return Err(IoError::UnsupportedDatatype(other)),
    };
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = r.f32(76 + 4 * i)?;
    }
    let vox_offset = r.f32(108)?;
    let slope = r.f32(112)?;
    let inter = r.f32(116)?;
    let offset = if vox_offset.is_finite() && vox_offset >= DATA_OFFSET as f32 {
        vox_offset as usize
    } else {
        DATA_OFFSET
    };

    let count = nx * ny * nz;
    let needed = offset + count * width;
    if bytes.len() < needed {
        return Err(IoError::TruncatedFile {
            needed,
            got: bytes.len(),
        });
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let at = offset + i * width;
        let raw = match datatype {
            2 => bytes[at] as f64,
            4 => r.i16(at)? as f64,
            8 => r.i32(at)? as f64,
            16 => r.f32(at)? as f64,
            _ => r.f64(at)?,
        };
        data.push(raw);
    }
    let identity = slope == 1.0 && inter == 0.0;
    let values: Vec<f32> = if slope != 0.0 && slope.is_finite() && !identity {
        let (s, b) = (slope as f64, inter as f64);
        data.into_iter().map(|v| (v * s + b) as f32).collect()
    } else {
        data.into_iter().map(|v| v as f32).collect()
    };
    let spacing = [pixdim[3], pixdim[2], pixdim[1]].map(|s| if s > 0.0 && s.is_finite() { s } else { 1.0 });
    Ok(Volume::new([nz, ny, nx], spacing, values)?)
}

/// Encodes a volume as a `.nii` byte stream: datatype 16 (f32),
/// `vox_offset` 352, `scl_slope` 1, `scl_inter` 0.
pub fn encode_nifti(v: &Volume, endian: Endian) -> Result<Vec<u8>, IoError> {
    let [d, h, w] = v.extents();
    for e in [d, h, w] {
        if e > i16::MAX as usize {
            return Err(IoError::Format(format!(
                "extent {e} exceeds the NIfTI-1 limit of {}",
                i16::MAX
            )));
        }
    }
    let mut out = vec![0u8; DATA_OFFSET + v.len() * 4];
    let put = |out: &mut [u8], at: usize, b: &[u8]| out[at..at + b.len()].copy_from_slice(b);
    let i16b = |x: i16| match endian {
        Endian::Little => x.to_le_bytes(),
        Endian::Big => x.to_be_bytes(),
    };
    let i32b = |x: i32| match endian {
        Endian::Little => x.to_le_bytes(),
        Endian::Big => x.to_be_bytes(),
    };
    let f32b = |x: f32| match endian {
        Endian::Little => x.to_le_bytes(),
        Endian::Big => x.to_be_bytes(),
    };
    put(&mut out, 0, &i32b(HEADER_SIZE as i32));
    let dims = [3, w as i16, h as i16, d as i16, 1, 1, 1, 1];
    for (i, x) in dims.iter().enumerate() {
        put(&mut out, 40 + 2 * i, &i16b(*x));
    }
    put(&mut out, 70, &i16b(16));
    put(&mut out, 72, &i16b(32));
    let [sd, sh, sw] = v.spacing();
    let pixdim = [1.0, sw, sh, sd, 0.0, 0.0, 0.0, 0.0];
    for (i, x) in pixdim.iter().enumerate() {
        put(&mut out, 76 + 4 * i, &f32b(*x));
    }
    put(&mut out, 108, &f32b(DATA_OFFSET as f32));
    put(&mut out, 112, &f32b(1.0));
    put(&mut out, 116, &f32b(0.0));
    // xyzt_units: millimetres
    out[123] = 2;
    put(&mut out, 344, MAGIC_SINGLE_FILE);
    for (i, x) in v.data().iter().enumerate() {
        put(&mut out, DATA_OFFSET + 4 * i, &f32b(*x));
    }
    Ok(out)
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume, IoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    decode_nifti(&bytes)
}

/// Writes a little-endian float32 `.nii` file.
pub fn write_nifti(v: &Volume, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    let bytes = encode_nifti(v, Endian::Little)?;
    fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}
