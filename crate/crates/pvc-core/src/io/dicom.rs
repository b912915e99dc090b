//! Minimal DICOM series import/export for uncompressed CT data.
//!
//! Scope: single-frame files in the Implicit VR Little Endian or Explicit
//! VR Little Endian transfer syntaxes, 16 bits allocated. Compressed
//! transfer syntaxes, multi-frame objects, and big-endian files are
//! rejected. The required tag set is:
//!
//! - (0028,0010) Rows, (0028,0011) Columns
//! - (0028,0030) PixelSpacing
//! - (0020,0032) ImagePositionPatient, (0020,0037) ImageOrientationPatient
//! - (0028,1052) RescaleIntercept, (0028,1053) RescaleSlope
//! - (0028,0100) BitsAllocated, (0028,0103) PixelRepresentation
//! - (7FE0,0010) PixelData
//!
//! Slices are ordered by the projection of ImagePositionPatient onto the
//! slice normal (the cross product of the row and column direction
//! cosines), not by filename or instance number. Writing copies every
//! non-pixel element of the template slice byte for byte, re-encoding only
//! the pixel payload, the instance/series UIDs (freshly derived, but
//! deterministic for identical inputs), and a derivation note. Group length
//! elements other than the file meta group are dropped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::raw::round_half_away;
use crate::volume::{BinaryMask, GridGeometry, Rescale, ScalarVolume};

const TRANSFER_SYNTAX_IMPLICIT_LE: &str = "1.2.840.10008.1.2";
const TRANSFER_SYNTAX_EXPLICIT_LE: &str = "1.2.840.10008.1.2.1";

const UNDEFINED_LENGTH: u32 = 0xFFFF_FFFF;

/// Agreement required between slices for pixel spacing and orientation.
const SLICE_GEOMETRY_TOL: f64 = 1e-6;
/// Allowed deviation of slice-to-slice steps from the mean spacing (mm).
const SLICE_SPACING_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Tag(u16, u16);

impl Tag {
    fn group_length(self) -> bool {
        self.1 == 0x0000
    }
}

impl std::fmt::Display for Tag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({:04X},{:04X})", self.0, self.1)
    }
}

const TAG_FILE_META_GROUP_LENGTH: Tag = Tag(0x0002, 0x0000);
const TAG_MEDIA_STORAGE_SOP_INSTANCE_UID: Tag = Tag(0x0002, 0x0003);
const TAG_TRANSFER_SYNTAX_UID: Tag = Tag(0x0002, 0x0010);
const TAG_SOP_CLASS_UID: Tag = Tag(0x0008, 0x0016);
const TAG_SOP_INSTANCE_UID: Tag = Tag(0x0008, 0x0018);
const TAG_MODALITY: Tag = Tag(0x0008, 0x0060);
const TAG_DERIVATION_DESCRIPTION: Tag = Tag(0x0008, 0x2111);
const TAG_SLICE_THICKNESS: Tag = Tag(0x0018, 0x0050);
const TAG_SERIES_INSTANCE_UID: Tag = Tag(0x0020, 0x000E);
const TAG_IMAGE_POSITION_PATIENT: Tag = Tag(0x0020, 0x0032);
const TAG_IMAGE_ORIENTATION_PATIENT: Tag = Tag(0x0020, 0x0037);
const TAG_ROWS: Tag = Tag(0x0028, 0x0010);
const TAG_COLUMNS: Tag = Tag(0x0028, 0x0011);
const TAG_PIXEL_SPACING: Tag = Tag(0x0028, 0x0030);
const TAG_BITS_ALLOCATED: Tag = Tag(0x0028, 0x0100);
const TAG_PIXEL_REPRESENTATION: Tag = Tag(0x0028, 0x0103);
const TAG_RESCALE_INTERCEPT: Tag = Tag(0x0028, 0x1052);
const TAG_RESCALE_SLOPE: Tag = Tag(0x0028, 0x1053);
const TAG_PIXEL_DATA: Tag = Tag(0x7FE0, 0x0010);

const TAG_ITEM: Tag = Tag(0xFFFE, 0xE000);
const TAG_ITEM_DELIMITER: Tag = Tag(0xFFFE, 0xE00D);
const TAG_SEQUENCE_DELIMITER: Tag = Tag(0xFFFE, 0xE0DD);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TransferSyntax {
    ImplicitLe,
    ExplicitLe,
}

/// One scanned data element: where its value sits in the file and the full
/// byte range covering the element (header, value, and any delimiters).
#[derive(Debug, Clone)]
struct RawElement {
    tag: Tag,
    value_offset: usize,
    value_len: usize,
    start: usize,
    end: usize,
}

struct Scanner<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Scanner<'a> {
    fn format_err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            offset: offset as u64,
            message: format!("{} ({})", message.into(), self.path),
        }
    }

    fn need(&self, n: usize, what: &str) -> Result<()> {
        if self.pos + n > self.bytes.len() {
            Err(self.format_err(self.pos, format!("truncated while reading {what}")))
        } else {
            Ok(())
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        self.need(2, what)?;
        let v = u16::from_le_bytes([self.bytes[self.pos], self.bytes[self.pos + 1]]);
        self.pos += 2;
        Ok(v)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.need(4, what)?;
        let v = u32::from_le_bytes([
            self.bytes[self.pos],
            self.bytes[self.pos + 1],
            self.bytes[self.pos + 2],
            self.bytes[self.pos + 3],
        ]);
        self.pos += 4;
        Ok(v)
    }

    fn tag(&mut self) -> Result<Tag> {
        let g = self.u16("tag group")?;
        let e = self.u16("tag element")?;
        Ok(Tag(g, e))
    }

    fn peek_tag(&self) -> Result<Tag> {
        if self.pos + 4 > self.bytes.len() {
            return Err(self.format_err(self.pos, "truncated while peeking tag"));
        }
        Ok(Tag(
            u16::from_le_bytes([self.bytes[self.pos], self.bytes[self.pos + 1]]),
            u16::from_le_bytes([self.bytes[self.pos + 2], self.bytes[self.pos + 3]]),
        ))
    }

    /// Scans one element at the current position.
    fn element(&mut self, syntax: TransferSyntax) -> Result<RawElement> {
        let start = self.pos;
        let tag = self.tag()?;
        let len = match syntax {
            TransferSyntax::ImplicitLe => self.u32("value length")?,
            TransferSyntax::ExplicitLe => {
                self.need(2, "VR")?;
                let vr = [self.bytes[self.pos], self.bytes[self.pos + 1]];
                if !vr.iter().all(u8::is_ascii_uppercase) {
                    return Err(self.format_err(self.pos, format!("invalid VR bytes {vr:?}")));
                }
                self.pos += 2;
                if is_long_vr(vr) {
                    self.need(2, "reserved length bytes")?;
                    self.pos += 2;
                    self.u32("value length")?
                } else {
                    self.u16("value length")? as u32
                }
            }
        };

        if len == UNDEFINED_LENGTH {
            let value_offset = self.pos;
            self.scan_undefined_sequence(syntax)?;
            Ok(RawElement {
                tag,
                value_offset,
                value_len: self.pos - value_offset,
                start,
                end: self.pos,
            })
        } else {
            let len = len as usize;
            self.need(len, "element value")?;
            let value_offset = self.pos;
            self.pos += len;
            Ok(RawElement {
                tag,
                value_offset,
                value_len: len,
                start,
                end: self.pos,
            })
        }
    }

    /// Consumes undefined-length sequence content through its sequence
    /// delimitation item. Handles nested items and sequences.
    fn scan_undefined_sequence(&mut self, syntax: TransferSyntax) -> Result<()> {
        loop {
            let at = self.pos;
            let tag = self.tag()?;
            if tag == TAG_SEQUENCE_DELIMITER {
                self.u32("sequence delimiter length")?;
                return Ok(());
            }
            if tag != TAG_ITEM {
                return Err(self.format_err(at, format!("expected item tag in sequence, got {tag}")));
            }
            let len = self.u32("item length")?;
            if len == UNDEFINED_LENGTH {
                // Undefined-length item: scan nested elements until the
                // item delimitation item.
                loop {
                    if self.peek_tag()? == TAG_ITEM_DELIMITER {
                        self.tag()?;
                        self.u32("item delimiter length")?;
                        break;
                    }
                    self.element(syntax)?;
                }
            } else {
                self.need(len as usize, "item value")?;
                self.pos += len as usize;
            }
        }
    }
}

fn is_long_vr(vr: [u8; 2]) -> bool {
    matches!(
        &vr,
        b"OB" | b"OD" | b"OF" | b"OL" | b"OV" | b"OW" | b"SQ" | b"UC" | b"UR" | b"UT" | b"UN"
    )
}

/// A fully scanned single file: transfer syntax plus the element tables for
/// the file meta group and the dataset.
struct DicomFile {
    bytes: Vec<u8>,
    syntax: TransferSyntax,
    meta: Vec<RawElement>,
    dataset: Vec<RawElement>,
}

impl DicomFile {
    fn parse(bytes: Vec<u8>, path: &str) -> Result<DicomFile> {
        if bytes.len() < 132 || &bytes[128..132] != b"DICM" {
            return Err(Error::Format {
                offset: 128,
                message: format!("missing DICM marker; not a part-10 DICOM file ({path})"),
            });
        }

        let mut meta = Vec::new();
        let mut scanner = Scanner {
            bytes: &bytes,
            pos: 132,
            path,
        };
        // File meta group is always Explicit VR LE; scan while group 0002.
        while scanner.pos + 4 <= bytes.len() && scanner.peek_tag()?.0 == 0x0002 {
            meta.push(scanner.element(TransferSyntax::ExplicitLe)?);
        }

        let ts_elem = meta
            .iter()
            .find(|e| e.tag == TAG_TRANSFER_SYNTAX_UID)
            .ok_or_else(|| Error::MissingTag {
                name: "TransferSyntaxUID",
                group: 0x0002,
                element: 0x0010,
                path: path.to_string(),
            })?;
        let ts = string_value(&bytes, ts_elem);
        let syntax = match ts.as_str() {
            TRANSFER_SYNTAX_IMPLICIT_LE => TransferSyntax::ImplicitLe,
            TRANSFER_SYNTAX_EXPLICIT_LE => TransferSyntax::ExplicitLe,
            other => {
                return Err(Error::UnsupportedDicom(format!(
                    "transfer syntax {other} is not supported (only uncompressed little-endian); {path}"
                )))
            }
        };

        let mut dataset = Vec::new();
        while scanner.pos < bytes.len() {
            dataset.push(scanner.element(syntax)?);
        }

        Ok(DicomFile {
            bytes,
            syntax,
            meta,
            dataset,
        })
    }

    fn find(&self, tag: Tag) -> Option<&RawElement> {
        self.dataset.iter().find(|e| e.tag == tag)
    }

    fn require(&self, tag: Tag, name: &'static str, path: &str) -> Result<&RawElement> {
        self.find(tag).ok_or_else(|| Error::MissingTag {
            name,
            group: tag.0,
            element: tag.1,
            path: path.to_string(),
        })
    }
}

fn value_bytes<'a>(bytes: &'a [u8], e: &RawElement) -> &'a [u8] {
    &bytes[e.value_offset..e.value_offset + e.value_len]
}

/// String value with trailing NUL/space padding removed.
fn string_value(bytes: &[u8], e: &RawElement) -> String {
    let raw = value_bytes(bytes, e);
    String::from_utf8_lossy(raw)
        .trim_end_matches(['\0', ' '])
        .trim_start()
        .to_string()
}

fn f64_values(bytes: &[u8], e: &RawElement, name: &str, path: &str) -> Result<Vec<f64>> {
    string_value(bytes, e)
        .split('\\')
        .map(|s| {
            s.trim().parse::<f64>().map_err(|err| Error::Format {
                offset: e.value_offset as u64,
                message: format!("bad decimal string for {name}: {s:?} ({err}) in {path}"),
            })
        })
        .collect()
}

fn u16_value(bytes: &[u8], e: &RawElement, name: &str, path: &str) -> Result<u16> {
    let raw = value_bytes(bytes, e);
    if raw.len() != 2 {
        return Err(Error::Format {
            offset: e.value_offset as u64,
            message: format!("{name} must be a 2-byte unsigned short, got {} bytes in {path}", raw.len()),
        });
    }
    Ok(u16::from_le_bytes([raw[0], raw[1]]))
}

/// Everything needed from one slice to assemble and write volumes.
#[derive(Debug, Clone)]
struct SliceMeta {
    path: PathBuf,
    rows: u16,
    cols: u16,
    pixel_spacing: [f64; 2],
    position: [f64; 3],
    row_dir: [f64; 3],
    col_dir: [f64; 3],
    slope: f64,
    intercept: f64,
    pixel_representation: u16,
    pixel_data_offset: usize,
    pixel_data_len: usize,
    projection: f64,
    slice_thickness: Option<f64>,
    sop_instance_uid: String,
    series_instance_uid: Option<String>,
    sop_class_uid: Option<String>,
    modality: Option<String>,
}

fn parse_slice(path: &Path) -> Result<SliceMeta> {
    let display = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(display.clone(), e))?;
    let file = DicomFile::parse(bytes, &display)?;
    slice_meta(&file, path, &display)
}

fn slice_meta(file: &DicomFile, path: &Path, display: &str) -> Result<SliceMeta> {
    let b = &file.bytes;
    let rows = u16_value(b, file.require(TAG_ROWS, "Rows", display)?, "Rows", display)?;
    let cols = u16_value(
        b,
        file.require(TAG_COLUMNS, "Columns", display)?,
        "Columns",
        display,
    )?;

    let ps = f64_values(
        b,
        file.require(TAG_PIXEL_SPACING, "PixelSpacing", display)?,
        "PixelSpacing",
        display,
    )?;
    if ps.len() != 2 {
        return Err(Error::UnsupportedDicom(format!(
            "PixelSpacing must have two values, got {} in {display}",
            ps.len()
        )));
    }

    let ipp = f64_values(
        b,
        file.require(TAG_IMAGE_POSITION_PATIENT, "ImagePositionPatient", display)?,
        "ImagePositionPatient",
        display,
    )?;
    if ipp.len() != 3 {
        return Err(Error::UnsupportedDicom(format!(
            "ImagePositionPatient must have three values, got {} in {display}",
            ipp.len()
        )));
    }

    let iop = f64_values(
        b,
        file.require(
            TAG_IMAGE_ORIENTATION_PATIENT,
            "ImageOrientationPatient",
            display,
        )?,
        "ImageOrientationPatient",
        display,
    )?;
    if iop.len() != 6 {
        return Err(Error::UnsupportedDicom(format!(
            "ImageOrientationPatient must have six values, got {} in {display}",
            iop.len()
        )));
    }

    let slope = f64_values(
        b,
        file.require(TAG_RESCALE_SLOPE, "RescaleSlope", display)?,
        "RescaleSlope",
        display,
    )?[0];
    let intercept = f64_values(
        b,
        file.require(TAG_RESCALE_INTERCEPT, "RescaleIntercept", display)?,
        "RescaleIntercept",
        display,
    )?[0];

    let bits = u16_value(
        b,
        file.require(TAG_BITS_ALLOCATED, "BitsAllocated", display)?,
        "BitsAllocated",
        display,
    )?;
    if bits != 16 {
        return Err(Error::UnsupportedDicom(format!(
            "only 16 bits allocated is supported, got {bits} in {display}"
        )));
    }
    let pixel_representation = u16_value(
        b,
        file.require(TAG_PIXEL_REPRESENTATION, "PixelRepresentation", display)?,
        "PixelRepresentation",
        display,
    )?;

    let pixel = file.require(TAG_PIXEL_DATA, "PixelData", display)?;
    let expected = rows as usize * cols as usize * 2;
    if pixel.value_len != expected {
        return Err(Error::UnsupportedDicom(format!(
            "pixel data length {} does not match rows*cols*2 = {expected} (compressed or multi-frame?) in {display}",
            pixel.value_len
        )));
    }

    let row_dir = [iop[0], iop[1], iop[2]];
    let col_dir = [iop[3], iop[4], iop[5]];
    let normal = cross(row_dir, col_dir);
    let position = [ipp[0], ipp[1], ipp[2]];

    let slice_thickness = file
        .find(TAG_SLICE_THICKNESS)
        .map(|e| f64_values(b, e, "SliceThickness", display))
        .transpose()?
        .map(|v| v[0]);

    Ok(SliceMeta {
        path: path.to_path_buf(),
        rows,
        cols,
        pixel_spacing: [ps[0], ps[1]],
        position,
        row_dir,
        col_dir,
        slope,
        intercept,
        pixel_representation,
        pixel_data_offset: pixel.value_offset,
        pixel_data_len: pixel.value_len,
        projection: dot(position, normal),
        slice_thickness,
        sop_instance_uid: file
            .find(TAG_SOP_INSTANCE_UID)
            .map(|e| string_value(b, e))
            .unwrap_or_default(),
        series_instance_uid: file.find(TAG_SERIES_INSTANCE_UID).map(|e| string_value(b, e)),
        sop_class_uid: file.find(TAG_SOP_CLASS_UID).map(|e| string_value(b, e)),
        modality: file.find(TAG_MODALITY).map(|e| string_value(b, e)),
    })
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// A directory of slice files validated as a coherent series, sorted along
/// the slice normal.
#[derive(Debug, Clone)]
pub struct DicomSeriesRef {
    dir: PathBuf,
    slices: Vec<SliceMeta>,
    slice_spacing: f64,
}

impl DicomSeriesRef {
    /// Scans a directory, parses every file in it as a DICOM slice, and
    /// validates series coherence. Hidden files are ignored.
    pub fn open(dir: &Path) -> Result<DicomSeriesRef> {
        let display = dir.display().to_string();
        let entries = fs::read_dir(dir).map_err(|e| Error::io(display.clone(), e))?;
        let mut paths: Vec<PathBuf> = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(display.clone(), e))?;
            let path = entry.path();
            let hidden = path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with('.'));
            if path.is_file() && !hidden {
                paths.push(path);
            }
        }
        paths.sort();
        if paths.is_empty() {
            return Err(Error::UnsupportedDicom(format!(
                "no files found in series directory {display}"
            )));
        }

        let mut slices: Vec<SliceMeta> = paths
            .iter()
            .map(|p| parse_slice(p))
            .collect::<Result<_>>()?;

        let first = slices[0].clone();
        for s in &slices[1..] {
            if s.rows != first.rows || s.cols != first.cols {
                return Err(Error::GeometryMismatch(format!(
                    "slice {} is {}x{}, others are {}x{}",
                    s.path.display(),
                    s.cols,
                    s.rows,
                    first.cols,
                    first.rows
                )));
            }
            for a in 0..2 {
                if (s.pixel_spacing[a] - first.pixel_spacing[a]).abs() > SLICE_GEOMETRY_TOL {
                    return Err(Error::GeometryMismatch(format!(
                        "pixel spacing differs across slices: {:?} vs {:?}",
                        s.pixel_spacing, first.pixel_spacing
                    )));
                }
            }
            for a in 0..3 {
                if (s.row_dir[a] - first.row_dir[a]).abs() > SLICE_GEOMETRY_TOL
                    || (s.col_dir[a] - first.col_dir[a]).abs() > SLICE_GEOMETRY_TOL
                {
                    return Err(Error::GeometryMismatch(
                        "image orientation differs across slices".to_string(),
                    ));
                }
            }
        }

        slices.sort_by(|a, b| {
            a.projection
                .partial_cmp(&b.projection)
                .expect("slice projections are finite")
        });

        let slice_spacing = if slices.len() == 1 {
            slices[0].slice_thickness.ok_or_else(|| {
                Error::UnsupportedDicom(format!(
                    "single-slice series without SliceThickness; cannot determine slice spacing in {display}"
                ))
            })?
        } else {
            let n = slices.len() as f64;
            let span = slices[slices.len() - 1].projection - slices[0].projection;
            let mean = span / (n - 1.0);
            for w in slices.windows(2) {
                let step = w[1].projection - w[0].projection;
                if step <= 0.0 {
                    return Err(Error::GeometryMismatch(format!(
                        "duplicate or non-monotonic slice positions ({} then {})",
                        w[0].path.display(),
                        w[1].path.display()
                    )));
                }
                if (step - mean).abs() > SLICE_SPACING_TOL {
                    return Err(Error::GeometryMismatch(format!(
                        "non-uniform slice spacing: step {step} vs mean {mean}"
                    )));
                }
            }
            mean
        };

        Ok(DicomSeriesRef {
            dir: dir.to_path_buf(),
            slices,
            slice_spacing,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn slice_count(&self) -> usize {
        self.slices.len()
    }

    /// Slice paths in geometric order.
    pub fn slice_paths(&self) -> Vec<&Path> {
        self.slices.iter().map(|s| s.path.as_path()).collect()
    }

    /// Grid geometry of the assembled volume. The x axis follows the image
    /// rows (increasing column index), y follows the columns, z follows the
    /// slice normal.
    pub fn geometry(&self) -> Result<GridGeometry> {
        let first = &self.slices[0];
        let normal = normalize(cross(first.row_dir, first.col_dir));
        GridGeometry::with_orientation(
            [
                first.cols as usize,
                first.rows as usize,
                self.slices.len(),
            ],
            [
                first.pixel_spacing[1],
                first.pixel_spacing[0],
                self.slice_spacing,
            ],
            first.position,
            [first.row_dir, first.col_dir, normal],
        )
    }

    pub fn rescale(&self) -> Rescale {
        Rescale {
            slope: self.slices[0].slope,
            intercept: self.slices[0].intercept,
        }
    }

    fn read_stored_slice(&self, index: usize) -> Result<Vec<u8>> {
        let s = &self.slices[index];
        let display = s.path.display().to_string();
        let bytes = fs::read(&s.path).map_err(|e| Error::io(display.clone(), e))?;
        if bytes.len() < s.pixel_data_offset + s.pixel_data_len {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                message: format!("{display} changed on disk: pixel data now out of range"),
            });
        }
        Ok(bytes[s.pixel_data_offset..s.pixel_data_offset + s.pixel_data_len].to_vec())
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Assembles the series into a scalar HU volume, applying each slice's
/// rescale to its stored values.
pub fn read_dicom_series(series: &DicomSeriesRef) -> Result<ScalarVolume> {
    let geometry = series.geometry()?;
    let [nx, ny, _] = geometry.dims();
    let mut values = vec![0.0f64; geometry.voxel_count()];

    for (k, slice) in series.slices.iter().enumerate() {
        let stored = series.read_stored_slice(k)?;
        let signed = slice.pixel_representation == 1;
        let out = &mut values[k * nx * ny..(k + 1) * nx * ny];
        for (o, b) in out.iter_mut().zip(stored.chunks_exact(2)) {
            let raw = if signed {
                i16::from_le_bytes([b[0], b[1]]) as f64
            } else {
                u16::from_le_bytes([b[0], b[1]]) as f64
            };
            *o = slice.slope * raw + slice.intercept;
        }
    }

    let mut metadata = BTreeMap::new();
    if let Some(uid) = &series.slices[0].series_instance_uid {
        metadata.insert("dicom.series_instance_uid".to_string(), uid.clone());
    }
    if let Some(uid) = &series.slices[0].sop_class_uid {
        metadata.insert("dicom.sop_class_uid".to_string(), uid.clone());
    }
    if let Some(modality) = &series.slices[0].modality {
        metadata.insert("dicom.modality".to_string(), modality.clone());
    }
    metadata.insert(
        "dicom.slice_count".to_string(),
        series.slices.len().to_string(),
    );

    Ok(ScalarVolume::with_rescale(geometry, values, series.rescale())?.with_metadata(metadata))
}

/// Reads a series as a binary mask: voxels with nonzero stored values are
/// set.
pub fn read_dicom_mask(series: &DicomSeriesRef) -> Result<BinaryMask> {
    let geometry = series.geometry()?;
    let [nx, ny, _] = geometry.dims();
    let mut bits = vec![false; geometry.voxel_count()];
    for (k, _) in series.slices.iter().enumerate() {
        let stored = series.read_stored_slice(k)?;
        let out = &mut bits[k * nx * ny..(k + 1) * nx * ny];
        for (o, b) in out.iter_mut().zip(stored.chunks_exact(2)) {
            *o = b != [0, 0];
        }
    }
    BinaryMask::new(geometry, bits)
}

/// Writes a volume as a new DICOM series next to a template series.
///
/// Every non-pixel element of each template slice is copied byte for byte.
/// HU values are quantized back to stored integers by round-half-away-from-
/// zero under the template slice's rescale, clamped to the stored type's
/// range. The written series gets fresh SOP instance UIDs and a fresh
/// series UID (derived deterministically from the template UIDs and the
/// output pixel content) plus a derivation note. Returns the written paths
/// in slice order.
pub fn write_dicom_series(
    volume: &ScalarVolume,
    template: &DicomSeriesRef,
    out_dir: &Path,
    derivation_note: &str,
) -> Result<Vec<PathBuf>> {
    let geometry = template.geometry()?;
    volume.geometry().compatible_with(&geometry)?;
    let [nx, ny, nz] = geometry.dims();

    let display = out_dir.display().to_string();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(display.clone(), e))?;

    // Quantize every slice payload first; the series UID derives from the
    // full output content so identical runs produce identical files.
    let mut payloads: Vec<Vec<u8>> = Vec::with_capacity(nz);
    for (k, slice) in template.slices.iter().enumerate() {
        let hu = &volume.values()[k * nx * ny..(k + 1) * nx * ny];
        let signed = slice.pixel_representation == 1;
        let mut payload = Vec::with_capacity(hu.len() * 2);
        for &v in hu {
            let stored = round_half_away((v - slice.intercept) / slice.slope);
            if signed {
                let q = stored.clamp(i16::MIN as f64, i16::MAX as f64) as i16;
                payload.extend_from_slice(&q.to_le_bytes());
            } else {
                let q = stored.clamp(u16::MIN as f64, u16::MAX as f64) as u16;
                payload.extend_from_slice(&q.to_le_bytes());
            }
        }
        payloads.push(payload);
    }

    let mut series_hash = Fnv128::new();
    if let Some(uid) = &template.slices[0].series_instance_uid {
        series_hash.update(uid.as_bytes());
    }
    series_hash.update(derivation_note.as_bytes());
    for payload in &payloads {
        series_hash.update(payload);
    }
    let new_series_uid = series_hash.uid();

    let mut written = Vec::with_capacity(nz);
    for (k, slice) in template.slices.iter().enumerate() {
        let mut slice_hash = Fnv128::new();
        slice_hash.update(new_series_uid.as_bytes());
        slice_hash.update(slice.sop_instance_uid.as_bytes());
        slice_hash.update(&payloads[k]);
        let new_sop_uid = slice_hash.uid();

        let out_path = out_dir.join(format!("{k:06}.dcm"));
        let slice_display = slice.path.display().to_string();
        let bytes = fs::read(&slice.path).map_err(|e| Error::io(slice_display.clone(), e))?;
        let file = DicomFile::parse(bytes, &slice_display)?;
        let out_bytes = rewrite_slice(
            &file,
            &payloads[k],
            &new_series_uid,
            &new_sop_uid,
            derivation_note,
        )?;
        fs::write(&out_path, out_bytes)
            .map_err(|e| Error::io(out_path.display().to_string(), e))?;
        written.push(out_path);
    }
    Ok(written)
}

fn rewrite_slice(
    file: &DicomFile,
    payload: &[u8],
    series_uid: &str,
    sop_uid: &str,
    derivation_note: &str,
) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(file.bytes.len() + payload.len());
    out.extend_from_slice(&[0u8; 128]);
    out.extend_from_slice(b"DICM");

    // File meta: copy elements, swapping the media storage SOP instance UID
    // for the new one, then prepend a recomputed group length.
    let mut meta_body = Vec::new();
    for e in &file.meta {
        if e.tag == TAG_FILE_META_GROUP_LENGTH {
            continue;
        }
        if e.tag == TAG_MEDIA_STORAGE_SOP_INSTANCE_UID {
            encode_explicit_string(&mut meta_body, e.tag, b"UI", sop_uid, b'\0');
        } else {
            meta_body.extend_from_slice(&file.bytes[e.start..e.end]);
        }
    }
    encode_explicit_u32(&mut out, TAG_FILE_META_GROUP_LENGTH, meta_body.len() as u32);
    out.extend_from_slice(&meta_body);

    // Dataset: verbatim copy with targeted replacements, keeping tag order.
    // Group length elements are dropped (their byte counts would be stale).
    let mut wrote_derivation = false;
    for e in &file.dataset {
        if e.tag.group_length() {
            continue;
        }
        if !wrote_derivation && e.tag > TAG_DERIVATION_DESCRIPTION {
            encode_string(&mut out, file.syntax, TAG_DERIVATION_DESCRIPTION, b"ST", derivation_note, b' ');
            wrote_derivation = true;
        }
        if e.tag == TAG_DERIVATION_DESCRIPTION {
            continue; // replaced by the freshly written note above
        }
        if e.tag == TAG_SOP_INSTANCE_UID {
            encode_string(&mut out, file.syntax, e.tag, b"UI", sop_uid, b'\0');
        } else if e.tag == TAG_SERIES_INSTANCE_UID {
            encode_string(&mut out, file.syntax, e.tag, b"UI", series_uid, b'\0');
        } else if e.tag == TAG_PIXEL_DATA {
            encode_pixel_data(&mut out, file.syntax, payload);
        } else {
            out.extend_from_slice(&file.bytes[e.start..e.end]);
        }
    }
    if !wrote_derivation {
        // Every required slice has elements past group 0008, so this only
        // happens for degenerate files; append at the end.
        encode_string(&mut out, file.syntax, TAG_DERIVATION_DESCRIPTION, b"ST", derivation_note, b' ');
    }
    Ok(out)
}

fn encode_tag(out: &mut Vec<u8>, tag: Tag) {
    out.extend_from_slice(&tag.0.to_le_bytes());
    out.extend_from_slice(&tag.1.to_le_bytes());
}

fn padded(value: &str, pad: u8) -> Vec<u8> {
    let mut v = value.as_bytes().to_vec();
    if v.len() % 2 == 1 {
        v.push(pad);
    }
    v
}

fn encode_explicit_string(out: &mut Vec<u8>, tag: Tag, vr: &[u8; 2], value: &str, pad: u8) {
    let v = padded(value, pad);
    encode_tag(out, tag);
    out.extend_from_slice(vr);
    out.extend_from_slice(&(v.len() as u16).to_le_bytes());
    out.extend_from_slice(&v);
}

fn encode_explicit_u32(out: &mut Vec<u8>, tag: Tag, value: u32) {
    encode_tag(out, tag);
    out.extend_from_slice(b"UL");
    out.extend_from_slice(&4u16.to_le_bytes());
    out.extend_from_slice(&value.to_le_bytes());
}

fn encode_string(
    out: &mut Vec<u8>,
    syntax: TransferSyntax,
    tag: Tag,
    vr: &[u8; 2],
    value: &str,
    pad: u8,
) {
    match syntax {
        TransferSyntax::ExplicitLe => encode_explicit_string(out, tag, vr, value, pad),
        TransferSyntax::ImplicitLe => {
            let v = padded(value, pad);
            encode_tag(out, tag);
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            out.extend_from_slice(&v);
        }
    }
}

fn encode_pixel_data(out: &mut Vec<u8>, syntax: TransferSyntax, payload: &[u8]) {
    encode_tag(out, TAG_PIXEL_DATA);
    match syntax {
        TransferSyntax::ExplicitLe => {
            out.extend_from_slice(b"OW");
            out.extend_from_slice(&[0u8, 0u8]);
            out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        }
        TransferSyntax::ImplicitLe => {
            out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        }
    }
    out.extend_from_slice(payload);
}

/// 128-bit FNV-1a; used to derive fresh but deterministic UIDs of the form
/// `2.25.<decimal>` from the template UIDs and output content.
struct Fnv128 {
    state: u128,
}

impl Fnv128 {
    const OFFSET: u128 = 0x6c62272e07bb014262b821756295c58d;
    const PRIME: u128 = 0x0000000001000000000000000000013b;

    fn new() -> Self {
        Fnv128 {
            state: Self::OFFSET,
        }
    }

    fn update(&mut self, data: &[u8]) {
        for &b in data {
            self.state ^= b as u128;
            self.state = self.state.wrapping_mul(Self::PRIME);
        }
    }

    fn uid(&self) -> String {
        format!("2.25.{}", self.state)
    }
}
