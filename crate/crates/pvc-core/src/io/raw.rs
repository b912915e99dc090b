//! The raw volume format: a fixed little-endian header plus a dense payload,
//! used as the canonical lossless fixture/interchange format.
//!
//! Layout (all integers and floats little-endian):
//!
//! | offset | size | field                                     |
//! |--------|------|-------------------------------------------|
//! | 0      | 8    | magic `PVCVOL\0\0`                        |
//! | 8      | 4    | version (u32, currently 1)                |
//! | 12     | 4    | element type (u32: 0 = int16, 1 = float64)|
//! | 16     | 24   | dims nx, ny, nz (3 x u64)                 |
//! | 40     | 24   | spacing mm (3 x f64)                      |
//! | 64     | 24   | origin mm (3 x f64)                       |
//! | 88     | 72   | orientation axes, row-major (9 x f64)     |
//! | 160    | 16   | rescale slope, intercept (2 x f64)        |
//! | 176    | 4    | metadata entry count (u32)                |
//! | ...    |      | entries: u32 key len, key, u32 val len, val |
//! | ...    |      | payload: nx*ny*nz elements, x-fastest     |
//!
//! int16 payloads hold stored values with `HU = slope * stored + intercept`;
//! float64 payloads hold HU verbatim and are always written with identity
//! rescale so the round trip is bit-exact. Masks are written as int16 {0, 1}
//! and read back as set-where-nonzero.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, GridGeometry, Rescale, ScalarVolume};

pub const RAW_MAGIC: [u8; 8] = *b"PVCVOL\0\0";
pub const RAW_VERSION: u32 = 1;

/// Payload element type of a raw volume file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    Int16,
    Float64,
}

impl ElementType {
    fn code(self) -> u32 {
        match self {
            ElementType::Int16 => 0,
            ElementType::Float64 => 1,
        }
    }

    fn from_code(code: u32, offset: u64) -> Result<Self> {
        match code {
            0 => Ok(ElementType::Int16),
            1 => Ok(ElementType::Float64),
            other => Err(Error::Format {
                offset,
                message: format!("unknown element type code {other}"),
            }),
        }
    }

    fn byte_size(self) -> usize {
        match self {
            ElementType::Int16 => 2,
            ElementType::Float64 => 8,
        }
    }
}

/// Rounds half away from zero, the quantization rule for HU -> stored.
pub fn round_half_away(x: f64) -> f64 {
    // f64::round already rounds half away from zero.
    x.round()
}

/// Quantizes an HU value to a stored i16 under a rescale map, clamping to
/// the representable range.
pub fn quantize_i16(hu: f64, rescale: Rescale) -> i16 {
    let stored = round_half_away((hu - rescale.intercept) / rescale.slope);
    stored.clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

struct Cursor<R> {
    inner: R,
    offset: u64,
    path: String,
}

impl<R: Read> Cursor<R> {
    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(Error::Format {
                        offset: at + filled as u64,
                        message: format!(
                            "truncated file while reading {what}: expected {} more bytes",
                            buf.len() - filled
                        ),
                    })
                }
                Ok(n) => filled += n,
                Err(e) => return Err(Error::io(self.path.clone(), e)),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact_at(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact_at(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }
}

struct RawContents {
    geometry: GridGeometry,
    rescale: Rescale,
    metadata: BTreeMap<String, String>,
    element_type: ElementType,
    /// HU values (rescale already applied for int16 payloads).
    values: Vec<f64>,
}

fn read_contents(path: &Path) -> Result<RawContents> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(display.clone(), e))?;
    let mut c = Cursor {
        inner: BufReader::new(file),
        offset: 0,
        path: display,
    };

    let mut magic = [0u8; 8];
    c.read_exact_at(&mut magic, "magic")?;
    if magic != RAW_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {RAW_MAGIC:?}"),
        });
    }
    let version_offset = c.offset;
    let version = c.u32("version")?;
    if version != RAW_VERSION {
        return Err(Error::Format {
            offset: version_offset,
            message: format!("unsupported version {version}, expected {RAW_VERSION}"),
        });
    }
    let etype_offset = c.offset;
    let etype = ElementType::from_code(c.u32("element type")?, etype_offset)?;

    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        let dims_offset = c.offset;
        let v = c.u64(&format!("dims[{a}]"))?;
        *d = usize::try_from(v).map_err(|_| Error::Format {
            offset: dims_offset,
            message: format!("dim {v} does not fit in usize"),
        })?;
    }
    let mut spacing = [0f64; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        *s = c.f64(&format!("spacing[{a}]"))?;
    }
    let mut origin = [0f64; 3];
    for (a, o) in origin.iter_mut().enumerate() {
        *o = c.f64(&format!("origin[{a}]"))?;
    }
    let mut orientation = [[0f64; 3]; 3];
    for axis in orientation.iter_mut() {
        for comp in axis.iter_mut() {
            *comp = c.f64("orientation")?;
        }
    }
    let rescale = Rescale {
        slope: c.f64("rescale slope")?,
        intercept: c.f64("rescale intercept")?,
    };
    let geometry = GridGeometry::with_orientation(dims, spacing, origin, orientation)?;

    let meta_count = c.u32("metadata count")?;
    let mut metadata = BTreeMap::new();
    for _ in 0..meta_count {
        let key = read_string(&mut c, "metadata key")?;
        let val = read_string(&mut c, "metadata value")?;
        metadata.insert(key, val);
    }

    let count = geometry.voxel_count();
    let payload_offset = c.offset;
    let mut payload = vec![0u8; count * etype.byte_size()];
    c.read_exact_at(&mut payload, "payload").map_err(|e| match e {
        Error::Format { offset, .. } => Error::Format {
            offset,
            message: format!(
                "truncated payload: expected {} bytes ({} x {}-byte elements) from byte {}, file ends at byte {}",
                payload.len(),
                count,
                etype.byte_size(),
                payload_offset,
                offset
            ),
        },
        other => other,
    })?;

    // Anything after the payload is a malformed file.
    let mut probe = [0u8; 1];
    match c.inner.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::Format {
                offset: c.offset,
                message: "trailing bytes after payload".to_string(),
            })
        }
        Err(e) => return Err(Error::io(c.path, e)),
    }

    let values: Vec<f64> = match etype {
        ElementType::Int16 => payload
            .chunks_exact(2)
            .map(|b| rescale.apply(i16::from_le_bytes([b[0], b[1]]) as f64))
            .collect(),
        ElementType::Float64 => payload
            .chunks_exact(8)
            .map(|b| {
                rescale.apply(f64::from_le_bytes([
                    b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
                ]))
            })
            .collect(),
    };

    Ok(RawContents {
        geometry,
        rescale,
        metadata,
        element_type: etype,
        values,
    })
}

fn read_string<R: Read>(c: &mut Cursor<R>, what: &str) -> Result<String> {
    let len_offset = c.offset;
    let len = c.u32(what)? as usize;
    if len > 1 << 20 {
        return Err(Error::Format {
            offset: len_offset,
            message: format!("{what} length {len} is implausibly large"),
        });
    }
    let mut buf = vec![0u8; len];
    c.read_exact_at(&mut buf, what)?;
    String::from_utf8(buf).map_err(|e| Error::Format {
        offset: len_offset + 4,
        message: format!("{what} is not valid UTF-8: {e}"),
    })
}

/// Reads a raw file as a scalar HU volume.
pub fn read_raw_scalar(path: &Path) -> Result<ScalarVolume> {
    let c = read_contents(path)?;
    Ok(ScalarVolume::with_rescale(c.geometry, c.values, c.rescale)?.with_metadata(c.metadata))
}

/// Header summary of a raw file, for inspection tools.
#[derive(Debug, Clone)]
pub struct RawVolumeInfo {
    pub geometry: GridGeometry,
    pub rescale: Rescale,
    pub element_type: ElementType,
    pub metadata: BTreeMap<String, String>,
}

pub fn read_raw_info(path: &Path) -> Result<RawVolumeInfo> {
    let c = read_contents(path)?;
    Ok(RawVolumeInfo {
        geometry: c.geometry,
        rescale: c.rescale,
        element_type: c.element_type,
        metadata: c.metadata,
    })
}

/// Reads a raw file as a binary mask: voxels with nonzero stored values are
/// set. Both element types are accepted.
pub fn read_raw_mask(path: &Path) -> Result<BinaryMask> {
    let c = read_contents(path)?;
    // Nonzero test against stored values, independent of rescale.
    let inv = |hu: f64| (hu - c.rescale.intercept) / c.rescale.slope;
    let bits = c.values.iter().map(|&v| inv(v) != 0.0).collect();
    BinaryMask::new(c.geometry, bits)
}

/// Writes a scalar volume. Float64 payloads are HU verbatim under identity
/// rescale (lossless); int16 payloads are quantized under the volume's
/// rescale by round-half-away-from-zero with clamping.
pub fn write_raw(volume: &ScalarVolume, element_type: ElementType, path: &Path) -> Result<()> {
    let rescale = match element_type {
        ElementType::Float64 => Rescale::IDENTITY,
        ElementType::Int16 => volume.rescale(),
    };
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(display.clone(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(display.clone(), e);

    write_header(
        &mut w,
        volume.geometry(),
        rescale,
        element_type,
        volume.metadata(),
    )
    .map_err(io_err)?;

    match element_type {
        ElementType::Float64 => {
            for &v in volume.values() {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
        ElementType::Int16 => {
            for &v in volume.values() {
                let q = quantize_i16(v, rescale);
                w.write_all(&q.to_le_bytes()).map_err(io_err)?;
            }
        }
    }
    w.flush().map_err(io_err)
}

/// Writes a mask as an int16 {0, 1} raw volume with identity rescale.
pub fn write_raw_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(display.clone(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(display.clone(), e);

    write_header(
        &mut w,
        mask.geometry(),
        Rescale::IDENTITY,
        ElementType::Int16,
        &BTreeMap::new(),
    )
    .map_err(io_err)?;
    for &b in mask.bits() {
        let v: i16 = if b { 1 } else { 0 };
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn write_header<W: Write>(
    w: &mut W,
    geometry: &GridGeometry,
    rescale: Rescale,
    element_type: ElementType,
    metadata: &BTreeMap<String, String>,
) -> std::io::Result<()> {
    w.write_all(&RAW_MAGIC)?;
    w.write_all(&RAW_VERSION.to_le_bytes())?;
    w.write_all(&element_type.code().to_le_bytes())?;
    for d in geometry.dims() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for s in geometry.spacing() {
        w.write_all(&s.to_le_bytes())?;
    }
    for o in geometry.origin() {
        w.write_all(&o.to_le_bytes())?;
    }
    for axis in geometry.orientation() {
        for comp in axis {
            w.write_all(&comp.to_le_bytes())?;
        }
    }
    w.write_all(&rescale.slope.to_le_bytes())?;
    w.write_all(&rescale.intercept.to_le_bytes())?;
    w.write_all(&(metadata.len() as u32).to_le_bytes())?;
    for (key, val) in metadata {
        w.write_all(&(key.len() as u32).to_le_bytes())?;
        w.write_all(key.as_bytes())?;
        w.write_all(&(val.len() as u32).to_le_bytes())?;
        w.write_all(val.as_bytes())?;
    }
    Ok(())
}
