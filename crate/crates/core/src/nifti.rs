//! NIfTI-1 reading and writing.
//!
//! Supported subset: 348-byte headers with magic `n+1\0`, datatypes uint8,
//! int16 and float32, 3D scalar images and 3-component vector fields
//! (dim[0] = 5, dim[5] = 3, vector intent). Geometry is taken from the sform
//! only; a qform, if present, is ignored with a warning. Files are written
//! little-endian; both endiannesses are accepted on read. Write-then-read
//! round-trips are bit-exact for supported datatypes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};

use crate::error::{Error, Result};
use crate::geometry::Mat3;
use crate::volume::{Geometry, LabelVolume, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

const INTENT_VECTOR: i16 = 1007;
const XYZT_MM: u8 = 2;

/// Largest per-axis extent accepted on read; rejects absurd headers early.
const MAX_DIM: i16 = 16384;

/// Decoded contents of a NIfTI file.
#[derive(Debug, Clone)]
pub enum NiftiData {
    /// float32 scalar image
    Scalar(Volume),
    /// uint8 / int16 integer labels
    Labels(LabelVolume),
    /// 3-component vector field, one scalar volume per component, in file
    /// component order
    Vector([Volume; 3]),
}

struct RawHeader {
    swapped: bool,
    dim: [i16; 8],
    intent_code: i16,
    datatype: i16,
    bitpix: i16,
    pixdim: [f32; 8],
    vox_offset: f32,
    scl_slope: f32,
    scl_inter: f32,
    qform_code: i16,
    sform_code: i16,
    srow: [[f32; 4]; 3],
}

fn rd_i16(swapped: bool, b: &[u8]) -> i16 {
    if swapped {
        BigEndian::read_i16(b)
    } else {
        LittleEndian::read_i16(b)
    }
}

fn rd_f32(swapped: bool, b: &[u8]) -> f32 {
    if swapped {
        BigEndian::read_f32(b)
    } else {
        LittleEndian::read_f32(b)
    }
}

fn parse_header(bytes: &[u8]) -> Result<RawHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::TruncatedFile {
            expected: HEADER_SIZE,
            got: bytes.len(),
        });
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[344..348]);
    if &magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let sizeof_hdr_le = LittleEndian::read_i32(&bytes[0..4]);
    let swapped = match sizeof_hdr_le {
        348 => false,
        _ if BigEndian::read_i32(&bytes[0..4]) == 348 => true,
        _ => {
            return Err(Error::MalformedFile(format!(
                "sizeof_hdr = {sizeof_hdr_le}, expected 348"
            )))
        }
    };
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = rd_i16(swapped, &bytes[40 + 2 * i..]);
    }
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = rd_f32(swapped, &bytes[76 + 4 * i..]);
    }
    let mut srow = [[0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = rd_f32(swapped, &bytes[280 + 16 * r + 4 * c..]);
        }
    }
    Ok(RawHeader {
        swapped,
        dim,
        intent_code: rd_i16(swapped, &bytes[68..]),
        datatype: rd_i16(swapped, &bytes[70..]),
        bitpix: rd_i16(swapped, &bytes[72..]),
        pixdim,
        vox_offset: rd_f32(swapped, &bytes[108..]),
        scl_slope: rd_f32(swapped, &bytes[112..]),
        scl_inter: rd_f32(swapped, &bytes[116..]),
        qform_code: rd_i16(swapped, &bytes[252..]),
        sform_code: rd_i16(swapped, &bytes[254..]),
        srow,
    })
}

fn geometry_from_header(h: &RawHeader, dims: [usize; 3]) -> Result<Geometry> {
    if h.qform_code > 0 {
        log::warn!("NIfTI qform present (code {}); only the sform is honored", h.qform_code);
    }
    if h.sform_code <= 0 {
        log::warn!("NIfTI sform absent; using pixdim spacing with identity direction");
        let spacing = [
            h.pixdim[1].abs() as f64,
            h.pixdim[2].abs() as f64,
            h.pixdim[3].abs() as f64,
        ];
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::MalformedFile(format!("bad pixdim {:?}", &h.pixdim[1..4])));
        }
        return Ok(Geometry {
            dims,
            spacing,
            origin: [0.0; 3],
            direction: crate::geometry::IDENTITY3,
        });
    }
    let mut spacing = [0.0f64; 3];
    let mut direction: Mat3 = [[0.0; 3]; 3];
    for col in 0..3 {
        let cx = h.srow[0][col] as f64;
        let cy = h.srow[1][col] as f64;
        let cz = h.srow[2][col] as f64;
        let len = (cx * cx + cy * cy + cz * cz).sqrt();
        if !(len > 0.0) || !len.is_finite() {
            return Err(Error::MalformedFile(format!("degenerate sform column {col}")));
        }
        spacing[col] = len;
        direction[0][col] = cx / len;
        direction[1][col] = cy / len;
        direction[2][col] = cz / len;
    }
    let origin = [
        h.srow[0][3] as f64,
        h.srow[1][3] as f64,
        h.srow[2][3] as f64,
    ];
    if origin.iter().any(|o| !o.is_finite()) {
        return Err(Error::MalformedFile("non-finite sform offset".into()));
    }
    let geom = Geometry {
        dims,
        spacing,
        origin,
        direction,
    };
    geom.validate()
        .map_err(|e| Error::MalformedFile(format!("sform geometry invalid: {e}")))?;
    Ok(geom)
}

/// Parse a NIfTI-1 file from memory.
pub fn parse_nifti(bytes: &[u8]) -> Result<NiftiData> {
    let h = parse_header(bytes)?;

    let spatial_ok = (1..=3).all(|i| h.dim[i] >= 1 && h.dim[i] <= MAX_DIM);
    let shape_ok = match h.dim[0] {
        3 => spatial_ok,
        5 => spatial_ok && h.dim[4] == 1 && h.dim[5] == 3,
        _ => false,
    };
    if !shape_ok {
        return Err(Error::MalformedFile(format!(
            "unsupported shape: dim = {:?}",
            h.dim
        )));
    }
    if h.dim[0] == 5 && h.intent_code != INTENT_VECTOR {
        log::warn!(
            "5D file without vector intent (code {}); treating as a displacement field",
            h.intent_code
        );
    }
    let dims = [h.dim[1] as usize, h.dim[2] as usize, h.dim[3] as usize];
    let ncomp: usize = if h.dim[0] == 5 { 3 } else { 1 };
    let voxels = dims[0] * dims[1] * dims[2]; // <= MAX_DIM^3, no overflow in usize

    let elem_size: usize = match h.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    if h.bitpix as usize != elem_size * 8 {
        return Err(Error::MalformedFile(format!(
            "bitpix {} inconsistent with datatype {}",
            h.bitpix, h.datatype
        )));
    }
    if !h.vox_offset.is_finite() || h.vox_offset < HEADER_SIZE as f32 || h.vox_offset.fract() != 0.0
    {
        return Err(Error::MalformedFile(format!("bad vox_offset {}", h.vox_offset)));
    }
    let offset = h.vox_offset as usize;
    let needed = voxels
        .checked_mul(ncomp)
        .and_then(|n| n.checked_mul(elem_size))
        .and_then(|n| n.checked_add(offset))
        .ok_or_else(|| Error::MalformedFile("data size overflow".into()))?;
    if bytes.len() < needed {
        return Err(Error::TruncatedFile {
            expected: needed,
            got: bytes.len(),
        });
    }
    if h.scl_slope != 0.0 && h.scl_slope != 1.0 || h.scl_inter != 0.0 {
        log::warn!(
            "NIfTI scl_slope/scl_inter ({}, {}) ignored by this reader",
            h.scl_slope,
            h.scl_inter
        );
    }

    let geom = geometry_from_header(&h, dims)?;
    let payload = &bytes[offset..needed];

    let read_component = |c: usize| -> Vec<f32> {
        let base = c * voxels * elem_size;
        match h.datatype {
            DT_UINT8 => payload[base..base + voxels].iter().map(|&b| b as f32).collect(),
            DT_INT16 => (0..voxels)
                .map(|i| rd_i16(h.swapped, &payload[base + 2 * i..]) as f32)
                .collect(),
            _ => (0..voxels)
                .map(|i| rd_f32(h.swapped, &payload[base + 4 * i..]))
                .collect(),
        }
    };

    if ncomp == 3 {
        if h.datatype != DT_FLOAT32 {
            return Err(Error::MalformedFile(
                "vector fields must be float32".into(),
            ));
        }
        let vx = Volume::new(geom.clone(), read_component(0))?;
        let vy = Volume::new(geom.clone(), read_component(1))?;
        let vz = Volume::new(geom, read_component(2))?;
        return Ok(NiftiData::Vector([vx, vy, vz]));
    }

    match h.datatype {
        DT_FLOAT32 => Ok(NiftiData::Scalar(Volume::new(geom, read_component(0))?)),
        DT_UINT8 => {
            let data: Vec<u16> = payload[..voxels].iter().map(|&b| b as u16).collect();
            Ok(NiftiData::Labels(LabelVolume::from_data(geom, data)?))
        }
        _ => {
            let mut data = Vec::with_capacity(voxels);
            for i in 0..voxels {
                let v = rd_i16(h.swapped, &payload[2 * i..]);
                if v < 0 {
                    return Err(Error::MalformedFile(format!("negative label value {v}")));
                }
                data.push(v as u16);
            }
            Ok(NiftiData::Labels(LabelVolume::from_data(geom, data)?))
        }
    }
}

pub fn read_nifti<P: AsRef<Path>>(path: P) -> Result<NiftiData> {
    let bytes = fs::read(path)?;
    parse_nifti(&bytes)
}

/// Read a scalar volume; integer files are converted to float.
pub fn read_volume<P: AsRef<Path>>(path: P) -> Result<Volume> {
    match read_nifti(path)? {
        NiftiData::Scalar(v) => Ok(v),
        NiftiData::Labels(l) => {
            let data: Vec<f32> = l.data().iter().map(|&v| v as f32).collect();
            Volume::new(l.geometry().clone(), data)
        }
        NiftiData::Vector(_) => Err(Error::MalformedFile(
            "expected a scalar image, found a vector field".into(),
        )),
    }
}

/// Read an integer label volume; float files are rejected.
pub fn read_labels<P: AsRef<Path>>(path: P) -> Result<LabelVolume> {
    match read_nifti(path)? {
        NiftiData::Labels(l) => Ok(l),
        _ => Err(Error::MalformedFile("expected an integer label image".into())),
    }
}

fn encode_header(
    geom: &Geometry,
    datatype: i16,
    bitpix: i16,
    ncomp: usize,
    out: &mut Vec<u8>,
) {
    let mut h = vec![0u8; HEADER_SIZE];
    LittleEndian::write_i32(&mut h[0..4], 348);
    h[39] = 0; // dim_info
    let dim: [i16; 8] = if ncomp == 3 {
        [5, geom.dims[0] as i16, geom.dims[1] as i16, geom.dims[2] as i16, 1, 3, 1, 1]
    } else {
        [3, geom.dims[0] as i16, geom.dims[1] as i16, geom.dims[2] as i16, 1, 1, 1, 1]
    };
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..], *d);
    }
    let intent = if ncomp == 3 { INTENT_VECTOR } else { 0 };
    LittleEndian::write_i16(&mut h[68..], intent);
    LittleEndian::write_i16(&mut h[70..], datatype);
    LittleEndian::write_i16(&mut h[72..], bitpix);
    let pixdim = [
        1.0f32,
        geom.spacing[0] as f32,
        geom.spacing[1] as f32,
        geom.spacing[2] as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut h[108..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0); // scl_slope
    LittleEndian::write_f32(&mut h[116..], 0.0); // scl_inter
    h[123] = XYZT_MM;
    LittleEndian::write_i16(&mut h[252..], 0); // qform_code
    LittleEndian::write_i16(&mut h[254..], 1); // sform_code
    for r in 0..3 {
        for c in 0..3 {
            let v = geom.direction[r][c] * geom.spacing[c];
            LittleEndian::write_f32(&mut h[280 + 16 * r + 4 * c..], v as f32);
        }
        LittleEndian::write_f32(&mut h[280 + 16 * r + 12..], geom.origin[r] as f32);
    }
    h[344..348].copy_from_slice(MAGIC);
    out.extend_from_slice(&h);
    out.extend_from_slice(&[0u8; VOX_OFFSET - HEADER_SIZE]);
}

pub fn encode_volume(volume: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(VOX_OFFSET + volume.data().len() * 4);
    encode_header(volume.geometry(), DT_FLOAT32, 32, 1, &mut out);
    for &v in volume.data() {
        out.write_f32::<LittleEndian>(v).unwrap();
    }
    out
}

pub fn encode_labels(labels: &LabelVolume) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(VOX_OFFSET + labels.data().len() * 2);
    encode_header(labels.geometry(), DT_INT16, 16, 1, &mut out);
    for &v in labels.data() {
        if v > i16::MAX as u16 {
            return Err(Error::MalformedFile(format!(
                "label {v} does not fit int16 (unresolved UNCLASSIFIED voxels?)"
            )));
        }
        out.write_i16::<LittleEndian>(v as i16).unwrap();
    }
    Ok(out)
}

pub fn encode_vector(components: &[Volume; 3]) -> Result<Vec<u8>> {
    let geom = components[0].geometry();
    for c in components.iter().skip(1) {
        if !c.geometry().same_grid(geom) {
            return Err(Error::GeometryMismatch(
                "vector components on different grids".into(),
            ));
        }
    }
    let mut out = Vec::with_capacity(VOX_OFFSET + geom.len() * 12);
    encode_header(geom, DT_FLOAT32, 32, 3, &mut out);
    for c in components {
        for &v in c.data() {
            out.write_f32::<LittleEndian>(v).unwrap();
        }
    }
    Ok(out)
}

pub fn write_volume<P: AsRef<Path>>(volume: &Volume, path: P) -> Result<()> {
    Ok(fs::write(path, encode_volume(volume))?)
}

pub fn write_labels<P: AsRef<Path>>(labels: &LabelVolume, path: P) -> Result<()> {
    Ok(fs::write(path, encode_labels(labels)?)?)
}

pub fn write_vector<P: AsRef<Path>>(components: &[Volume; 3], path: P) -> Result<()> {
    Ok(fs::write(path, encode_vector(components)?)?)
}

/// Re-attach a label table to labels read from disk (NIfTI stores no names).
pub fn with_label_table(labels: LabelVolume, table: BTreeMap<u16, String>) -> Result<LabelVolume> {
    LabelVolume::new(labels.geometry().clone(), labels.data().to_vec(), table)
}
