//! NIfTI-1 single-file (`.nii`, `.nii.gz`) reader/writer plus the raw
//! `EDMSRVOL` fixture format.
//!
//! Orientation (qform/sform) is ignored. NIfTI `dim[1..=3]` map onto
//! `(W, H, D)`, so NIfTI's `k` axis becomes depth, which the pipeline
//! treats as sagittal. Use [`crate::volume::Volume`] permutation helpers
//! when the data stores the sagittal axis elsewhere.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{Dims, Domain, Volume};

pub const HEADER_SIZE: usize = 348;
pub const RAW_MAGIC: &[u8; 8] = b"EDMSRVOL";
const SINGLE_FILE_MAGIC: &[u8; 4] = b"n+1\0";
const DEFAULT_VOX_OFFSET: usize = 352;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

/// Voxel storage types this reader understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    F32,
    F64,
}

impl Datatype {
    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Datatype::U8),
            4 => Ok(Datatype::I16),
            16 => Ok(Datatype::F32),
            64 => Ok(Datatype::F64),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
        }
    }

    pub fn bitpix(self) -> i16 {
        match self {
            Datatype::U8 => 8,
            Datatype::I16 => 16,
            Datatype::F32 => 32,
            Datatype::F64 => 64,
        }
    }

    fn bytes(self) -> usize {
        self.bitpix() as usize / 8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub endian: Endian,
    pub dim: [i16; 8],
    pub datatype: Datatype,
    pub bitpix: i16,
    pub voxel_size: [f32; 3],
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub vox_offset: f32,
}

impl NiftiHeader {
    /// Volume dims `(D, H, W)` from `dim[3], dim[2], dim[1]`.
    pub fn dims(&self) -> Dims {
        Dims::new(self.dim[3] as usize, self.dim[2] as usize, self.dim[1] as usize)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn array<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut a = [0u8; N];
        a.copy_from_slice(&self.bytes[at..at + N]);
        if self.endian == Endian::Big {
            a.reverse();
        }
        a
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.array(at))
    }
    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.array(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.array(at))
    }
    fn f64(&self, at: usize) -> f64 {
        f64::from_le_bytes(self.array(at))
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| Error::Nifti(format!("corrupt gzip stream: {e}")))?;
    Ok(out)
}

pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Truncated {
            expected: HEADER_SIZE,
            found: bytes.len(),
        });
    }
    let raw: [u8; 4] = bytes[..4].try_into().expect("length checked");
    let endian = if i32::from_le_bytes(raw) == HEADER_SIZE as i32 {
        Endian::Little
    } else if i32::from_be_bytes(raw) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(Error::Nifti(format!(
            "sizeof_hdr is neither 348 little- nor big-endian ({:?})",
            raw
        )));
    };
    let r = Reader { bytes, endian };
    debug_assert_eq!(r.i32(offsets::SIZEOF_HDR), HEADER_SIZE as i32);

    if &bytes[offsets::MAGIC..offsets::MAGIC + 4] != SINGLE_FILE_MAGIC {
        return Err(Error::Nifti(format!(
            "bad magic {:?}, expected \"n+1\\0\"",
            &bytes[offsets::MAGIC..offsets::MAGIC + 4]
        )));
    }

    let mut dim = [0i16; 8];
    for (k, d) in dim.iter_mut().enumerate() {
        *d = r.i16(offsets::DIM + 2 * k);
    }
    if !(3..=4).contains(&dim[0]) {
        return Err(Error::Nifti(format!("dim[0] = {} (need 3 or 4)", dim[0])));
    }
    if dim[1..=3].iter().any(|&d| d < 1) {
        return Err(Error::Nifti(format!("non-positive spatial dims {:?}", &dim[1..=3])));
    }
    if dim[0] == 4 && dim[4] > 1 {
        return Err(Error::Nifti(format!(
            "dim[4] = {} (only single-frame volumes are supported)",
            dim[4]
        )));
    }

    let datatype = Datatype::from_code(r.i16(offsets::DATATYPE))?;
    let bitpix = r.i16(offsets::BITPIX);
    if bitpix != datatype.bitpix() {
        return Err(Error::Nifti(format!(
            "bitpix {bitpix} inconsistent with datatype {}",
            datatype.code()
        )));
    }
    let voxel_size = [
        r.f32(offsets::PIXDIM + 4),
        r.f32(offsets::PIXDIM + 8),
        r.f32(offsets::PIXDIM + 12),
    ];
    let vox_offset = r.f32(offsets::VOX_OFFSET);
    if !vox_offset.is_finite() || (vox_offset as usize) < HEADER_SIZE {
        return Err(Error::Nifti(format!("vox_offset {vox_offset} inside header")));
    }
    let scl_slope = r.f32(offsets::SCL_SLOPE);
    let scl_inter = r.f32(offsets::SCL_INTER);

    Ok(NiftiHeader {
        endian,
        dim,
        datatype,
        bitpix,
        voxel_size,
        scl_slope,
        scl_inter,
        vox_offset,
    })
}

/// Parses an uncompressed or gzip-wrapped NIfTI-1 byte stream.
pub fn parse_nifti(bytes: &[u8]) -> Result<(NiftiHeader, Volume)> {
    let owned;
    let bytes = if is_gzip(bytes) {
        owned = gunzip(bytes)?;
        &owned[..]
    } else {
        bytes
    };
    let header = parse_header(bytes)?;
    let dims = header.dims();
    let start = header.vox_offset as usize;
    let expected = dims
        .len()
        .checked_mul(header.datatype.bytes())
        .and_then(|n| n.checked_add(start))
        .ok_or_else(|| Error::Nifti("dims overflow".into()))?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }

    let r = Reader {
        bytes,
        endian: header.endian,
    };
    let step = header.datatype.bytes();
    let stored = (0..dims.len()).map(|i| {
        let at = start + i * step;
        match header.datatype {
            Datatype::U8 => f64::from(bytes[at]),
            Datatype::I16 => f64::from(r.i16(at)),
            Datatype::F32 => f64::from(r.f32(at)),
            Datatype::F64 => r.f64(at),
        }
    });
    let voxels: Vec<f64> = if header.scl_slope != 0.0 && header.scl_slope.is_finite() {
        let (m, b) = (f64::from(header.scl_slope), f64::from(header.scl_inter));
        stored.map(|v| v * m + b).collect()
    } else {
        stored.collect()
    };
    let vol = Volume::new(dims, voxels, Domain::Raw)?;
    Ok((header, vol))
}

/// Serializes a volume as little-endian float32 NIfTI-1 (slope 1, inter 0).
pub fn encode_nifti(vol: &Volume) -> Result<Vec<u8>> {
    let d = vol.dims();
    let as_i16 = |n: usize| i16::try_from(n).map_err(|_| Error::Dims(format!("dimension {n} exceeds NIfTI-1 limits")));
    let dim = [3, as_i16(d.w)?, as_i16(d.h)?, as_i16(d.d)?, 1, 1, 1, 1];

    let mut out = vec![0u8; DEFAULT_VOX_OFFSET + 4 * d.len()];
    out[offsets::SIZEOF_HDR..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    for (k, v) in dim.iter().enumerate() {
        let at = offsets::DIM + 2 * k;
        out[at..at + 2].copy_from_slice(&v.to_le_bytes());
    }
    out[offsets::DATATYPE..offsets::DATATYPE + 2].copy_from_slice(&Datatype::F32.code().to_le_bytes());
    out[offsets::BITPIX..offsets::BITPIX + 2].copy_from_slice(&Datatype::F32.bitpix().to_le_bytes());
    let pixdim = [1.0f32; 8];
    for (k, v) in pixdim.iter().enumerate() {
        let at = offsets::PIXDIM + 4 * k;
        out[at..at + 4].copy_from_slice(&v.to_le_bytes());
    }
    out[offsets::VOX_OFFSET..offsets::VOX_OFFSET + 4].copy_from_slice(&(DEFAULT_VOX_OFFSET as f32).to_le_bytes());
    out[offsets::SCL_SLOPE..offsets::SCL_SLOPE + 4].copy_from_slice(&1.0f32.to_le_bytes());
    out[offsets::SCL_INTER..offsets::SCL_INTER + 4].copy_from_slice(&0.0f32.to_le_bytes());
    out[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(SINGLE_FILE_MAGIC);

    for (i, v) in vol.voxels().iter().enumerate() {
        let at = DEFAULT_VOX_OFFSET + 4 * i;
        out[at..at + 4].copy_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn encode_raw(vol: &Volume) -> Vec<u8> {
    let d = vol.dims();
    let mut out = Vec::with_capacity(8 + 24 + 8 * d.len());
    out.extend_from_slice(RAW_MAGIC);
    for n in d.as_array() {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for v in vol.voxels() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_raw(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 32 || &bytes[..8] != RAW_MAGIC {
        return Err(Error::RawVolume("missing EDMSRVOL magic".into()));
    }
    let mut dims = [0usize; 3];
    for (k, d) in dims.iter_mut().enumerate() {
        let at = 8 + 8 * k;
        let n = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        *d = usize::try_from(n).map_err(|_| Error::RawVolume("dimension overflow".into()))?;
    }
    let dims = Dims::new(dims[0], dims[1], dims[2]);
    let expected = dims
        .len()
        .checked_mul(8)
        .and_then(|n| n.checked_add(32))
        .ok_or_else(|| Error::RawVolume("dimension overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let voxels = bytes[32..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Volume::new(dims, voxels, Domain::Raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Nifti,
    NiftiGz,
    Raw,
}

fn format_for(path: &Path) -> Result<Format> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if name.ends_with(".nii.gz") {
        Ok(Format::NiftiGz)
    } else if name.ends_with(".nii") {
        Ok(Format::Nifti)
    } else if name.ends_with(".raw") {
        Ok(Format::Raw)
    } else {
        Err(Error::Invalid(format!(
            "unrecognised volume extension for {} (expected .nii, .nii.gz or .raw)",
            path.display()
        )))
    }
}

/// Parses volume bytes, sniffing gzip and the raw fixture magic.
pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if is_gzip(bytes) {
        let inner = gunzip(bytes)?;
        return decode_volume(&inner);
    }
    if bytes.starts_with(RAW_MAGIC) {
        return parse_raw(bytes);
    }
    parse_nifti(bytes).map(|(_, v)| v)
}

/// Reads a `.nii`, `.nii.gz` or `.raw` volume into the raw intensity domain.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

pub fn write_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format_for(path)? {
        Format::Nifti => encode_nifti(vol)?,
        Format::NiftiGz => {
            let mut enc = GzEncoder::new(Vec::new(), Compression::default());
            enc.write_all(&encode_nifti(vol)?)
                .and_then(|_| enc.finish())
                .map_err(|e| Error::io(path, e))?
        }
        Format::Raw => encode_raw(vol),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(v: f64) -> Volume {
        Volume::filled(Dims::new(4, 4, 4), v, Domain::Raw).unwrap()
    }

    #[test]
    fn constant_float32_roundtrip() {
        let bytes = encode_nifti(&cube(7.0)).unwrap();
        let (hdr, vol) = parse_nifti(&bytes).unwrap();
        assert_eq!(hdr.endian, Endian::Little);
        assert_eq!(hdr.datatype, Datatype::F32);
        assert_eq!(vol.voxels().len(), 64);
        assert!(vol.voxels().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode_nifti(&cube(1.0)).unwrap();
        bytes[offsets::MAGIC + 1] = b'i';
        assert!(matches!(parse_nifti(&bytes), Err(Error::Nifti(_))));
    }

    #[test]
    fn rejects_unsupported_datatype() {
        let mut bytes = encode_nifti(&cube(1.0)).unwrap();
        bytes[offsets::DATATYPE..offsets::DATATYPE + 2].copy_from_slice(&512i16.to_le_bytes());
        assert!(matches!(parse_nifti(&bytes), Err(Error::UnsupportedDatatype(512))));
    }

    #[test]
    fn rejects_truncated_payload() {
        let bytes = encode_nifti(&cube(1.0)).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(parse_nifti(cut), Err(Error::Truncated { .. })));
        assert!(matches!(parse_nifti(&bytes[..100]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn rejects_multiframe() {
        let mut bytes = encode_nifti(&cube(1.0)).unwrap();
        bytes[offsets::DIM..offsets::DIM + 2].copy_from_slice(&4i16.to_le_bytes());
        bytes[offsets::DIM + 8..offsets::DIM + 10].copy_from_slice(&2i16.to_le_bytes());
        assert!(matches!(parse_nifti(&bytes), Err(Error::Nifti(_))));
    }

    #[test]
    fn rejects_bitpix_mismatch() {
        let mut bytes = encode_nifti(&cube(1.0)).unwrap();
        bytes[offsets::BITPIX..offsets::BITPIX + 2].copy_from_slice(&16i16.to_le_bytes());
        assert!(parse_nifti(&bytes).is_err());
    }

    #[test]
    fn raw_fixture_roundtrip_is_exact() {
        let vol = Volume::new(
            Dims::new(2, 3, 4),
            (0..24).map(|i| i as f64 * 0.1 - 1.0).collect(),
            Domain::Raw,
        )
        .unwrap();
        let back = parse_raw(&encode_raw(&vol)).unwrap();
        assert_eq!(back, vol);
        let enc = encode_raw(&vol);
        assert!(parse_raw(&enc[..enc.len() - 8]).is_err());
    }

    #[test]
    fn unknown_extension_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_volume(&cube(0.0), dir.path().join("x.png")).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }
}
