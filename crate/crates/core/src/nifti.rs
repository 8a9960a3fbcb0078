//! Minimal NIfTI-1 single-file (`.nii`) reader and writer.
//!
//! Supported subset: uncompressed, little-endian, datatype `uint8` (2) or
//! `float32` (16), identity orientation scaled by the voxel spacing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{voxel_count, Dims, LabelMap, Mask, Spacing, Volume};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const MAGIC: &[u8; 4] = b"n+1\0";
pub const DT_UINT8: i16 = 2;
pub const DT_FLOAT32: i16 = 16;

/// Contents of a NIfTI file as understood by this crate.
#[derive(Clone, Debug, PartialEq)]
pub enum NiftiImage {
    Volume(Volume),
    Labels(LabelMap),
}

impl NiftiImage {
    pub fn into_volume(self) -> Result<Volume> {
        match self {
            NiftiImage::Volume(v) => Ok(v),
            NiftiImage::Labels(l) => Volume::new(
                l.dims,
                l.spacing,
                1,
                l.labels.iter().map(|&x| f32::from(x)).collect(),
            ),
        }
    }

    pub fn into_labels(self) -> Result<LabelMap> {
        match self {
            NiftiImage::Labels(l) => Ok(l),
            NiftiImage::Volume(_) => Err(Error::Config(
                "expected a uint8 label map, found float32 data".into(),
            )),
        }
    }

    pub fn into_mask(self) -> Result<Mask> {
        match self {
            NiftiImage::Labels(l) => Mask::from_labels(&l),
            NiftiImage::Volume(v) => Mask::new(
                v.dims,
                v.spacing,
                v.channel(0).iter().map(|&x| x != 0.0).collect(),
            ),
        }
    }
}

struct Header {
    dims: Dims,
    channels: usize,
    spacing: Spacing,
    datatype: i16,
    vox_offset: usize,
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn parse_header(path: &Path, b: &[u8; HEADER_SIZE]) -> Result<Header> {
    let sizeof_hdr = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(format_err(
            path,
            format!("sizeof_hdr is {sizeof_hdr} (big-endian or not NIfTI-1)"),
        ));
    }
    if &b[344..348] != MAGIC {
        return Err(format_err(path, "magic \"n+1\" not found"));
    }
    let ndim = i16_at(b, 40);
    if !(3..=4).contains(&ndim) {
        return Err(format_err(path, format!("dim[0] = {ndim}, expected 3 or 4")));
    }
    let mut dims = [0usize; 3];
    for (d, slot) in dims.iter_mut().enumerate() {
        let v = i16_at(b, 42 + 2 * d);
        if v <= 0 {
            return Err(format_err(path, format!("dim[{}] = {v}", d + 1)));
        }
        *slot = v as usize;
    }
    let channels = if ndim == 4 {
        let c = i16_at(b, 48);
        if c <= 0 {
            return Err(format_err(path, format!("dim[4] = {c}")));
        }
        c as usize
    } else {
        1
    };
    let spacing: Spacing = std::array::from_fn(|d| {
        let s = f64::from(f32_at(b, 80 + 4 * d)).abs();
        if s > 0.0 {
            s
        } else {
            1.0
        }
    });
    let datatype = i16_at(b, 70);
    let vox_offset = f32_at(b, 108);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(format_err(path, format!("vox_offset = {vox_offset}")));
    }
    Ok(Header {
        dims,
        channels,
        spacing,
        datatype,
        vox_offset: vox_offset as usize,
    })
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut hdr = [0u8; HEADER_SIZE];
    r.read_exact(&mut hdr)?;
    let h = parse_header(path, &hdr)?;
    let bytes_per = match h.datatype {
        DT_UINT8 => 1,
        DT_FLOAT32 => 4,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    let mut skip = vec![0u8; h.vox_offset - HEADER_SIZE];
    r.read_exact(&mut skip)?;
    let n = h.channels * voxel_count(h.dims);
    let mut payload = vec![0u8; n * bytes_per];
    r.read_exact(&mut payload)?;
    match h.datatype {
        DT_UINT8 => {
            let classes = payload.iter().map(|&l| usize::from(l) + 1).max().unwrap_or(1);
            if h.channels != 1 {
                return Err(format_err(path, "multi-channel uint8 images are not supported"));
            }
            Ok(NiftiImage::Labels(LabelMap::new(
                h.dims, h.spacing, payload, classes,
            )?))
        }
        _ => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(NiftiImage::Volume(Volume::new(
                h.dims, h.spacing, h.channels, data,
            )?))
        }
    }
}

fn header_bytes(
    dims: Dims,
    channels: usize,
    spacing: Spacing,
    datatype: i16,
    bitpix: i16,
    cal: (f32, f32),
) -> Result<[u8; VOX_OFFSET]> {
    let mut b = [0u8; VOX_OFFSET];
    let put_i16 = |b: &mut [u8], off: usize, v: i16| b[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |b: &mut [u8], off: usize, v: f32| b[off..off + 4].copy_from_slice(&v.to_le_bytes());
    let to_i16 = |v: usize| {
        i16::try_from(v).map_err(|_| Error::Shape(format!("dimension {v} exceeds NIfTI-1 limit")))
    };

    b[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    b[38] = b'r';
    let ndim: i16 = if channels > 1 { 4 } else { 3 };
    put_i16(&mut b, 40, ndim);
    for d in 0..3 {
        put_i16(&mut b, 42 + 2 * d, to_i16(dims[d])?);
    }
    put_i16(&mut b, 48, to_i16(channels)?);
    for d in 5..8 {
        put_i16(&mut b, 40 + 2 * d, 1);
    }
    put_i16(&mut b, 70, datatype);
    put_i16(&mut b, 72, bitpix);
    put_f32(&mut b, 76, 1.0);
    for d in 0..3 {
        put_f32(&mut b, 80 + 4 * d, spacing[d] as f32);
    }
    put_f32(&mut b, 92, 1.0);
    put_f32(&mut b, 108, VOX_OFFSET as f32);
    put_f32(&mut b, 112, 1.0);
    b[123] = 2; // millimetres
    put_f32(&mut b, 124, cal.1);
    put_f32(&mut b, 128, cal.0);
    // sform: diagonal spacing, no rotation
    put_i16(&mut b, 254, 1);
    put_f32(&mut b, 280, spacing[0] as f32);
    put_f32(&mut b, 296 + 4, spacing[1] as f32);
    put_f32(&mut b, 312 + 8, spacing[2] as f32);
    b[344..348].copy_from_slice(MAGIC);
    Ok(b)
}

fn write_file(path: &Path, header: &[u8], payload: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(header)?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let header = header_bytes(v.dims, v.channels, v.spacing, DT_FLOAT32, 32, v.intensity_range)?;
    let payload: Vec<u8> = v.data.iter().flat_map(|x| x.to_le_bytes()).collect();
    write_file(path.as_ref(), &header, &payload)
}

pub fn write_labels(l: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let cal = (0.0, (l.classes - 1) as f32);
    let header = header_bytes(l.dims, 1, l.spacing, DT_UINT8, 8, cal)?;
    write_file(path.as_ref(), &header, &l.labels)
}

pub fn write_mask(m: &Mask, path: impl AsRef<Path>) -> Result<()> {
    write_labels(&m.to_labels(), path)
}

pub fn write_nifti(image: &NiftiImage, path: impl AsRef<Path>) -> Result<()> {
    match image {
        NiftiImage::Volume(v) => write_volume(v, path),
        NiftiImage::Labels(l) => write_labels(l, path),
    }
}
