//! Shared helpers for integration tests: a byte-level DICOM slice builder
//! (independent of the production writer) and random volume/mask
//! generators.

#![allow(dead_code)]

use std::path::Path;

use rand::rngs::StdRng;
use rand::Rng;

use pvc_core::volume::{BinaryMask, GridGeometry, Rescale, ScalarVolume};

pub const TS_EXPLICIT_LE: &str = "1.2.840.10008.1.2.1";
pub const TS_IMPLICIT_LE: &str = "1.2.840.10008.1.2";

/// Everything needed to emit one synthetic CT slice file.
#[derive(Clone)]
pub struct SliceSpec {
    pub rows: u16,
    pub cols: u16,
    /// DICOM order: (between-rows spacing, between-columns spacing), as the
    /// exact decimal strings to embed.
    pub pixel_spacing: (String, String),
    pub position: [f64; 3],
    pub orientation: [f64; 6],
    pub slope: f64,
    pub intercept: f64,
    /// Stored pixel values, row-major; emitted as i16 or u16 per `signed`.
    pub stored: Vec<i16>,
    pub signed: bool,
    pub sop_uid: String,
    pub series_uid: String,
    pub slice_thickness: Option<f64>,
    pub implicit: bool,
    /// Pre-encoded extra dataset elements, inserted after group 0008.
    pub extra_after_0008: Vec<u8>,
}

impl SliceSpec {
    pub fn ct(rows: u16, cols: u16, spacing: &str, z: f64, stored: Vec<i16>) -> SliceSpec {
        SliceSpec {
            rows,
            cols,
            pixel_spacing: (spacing.to_string(), spacing.to_string()),
            position: [0.0, 0.0, z],
            orientation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            slope: 1.0,
            intercept: -1024.0,
            stored,
            signed: true,
            sop_uid: format!("1.2.840.99999.1.{z}"),
            series_uid: "1.2.840.99999.2.1".to_string(),
            slice_thickness: Some(1.0),
            implicit: false,
            extra_after_0008: Vec::new(),
        }
    }
}

fn pad(value: &str, pad_byte: u8) -> Vec<u8> {
    let mut v = value.as_bytes().to_vec();
    if v.len() % 2 == 1 {
        v.push(pad_byte);
    }
    v
}

fn short_vrs_take_two_byte_length(vr: &[u8; 2]) -> bool {
    !matches!(
        vr,
        b"OB" | b"OD" | b"OF" | b"OL" | b"OV" | b"OW" | b"SQ" | b"UC" | b"UR" | b"UT" | b"UN"
    )
}

/// One element in explicit VR little endian.
pub fn elem_explicit(tag: (u16, u16), vr: &[u8; 2], value: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&tag.0.to_le_bytes());
    out.extend_from_slice(&tag.1.to_le_bytes());
    out.extend_from_slice(vr);
    if short_vrs_take_two_byte_length(vr) {
        out.extend_from_slice(&(value.len() as u16).to_le_bytes());
    } else {
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    }
    out.extend_from_slice(value);
    out
}

/// One element in implicit VR little endian.
pub fn elem_implicit(tag: (u16, u16), value: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&tag.0.to_le_bytes());
    out.extend_from_slice(&tag.1.to_le_bytes());
    out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    out.extend_from_slice(value);
    out
}

/// Serializes a slice spec into part-10 DICOM bytes.
pub fn build_slice(spec: &SliceSpec) -> Vec<u8> {
    let ts = if spec.implicit {
        TS_IMPLICIT_LE
    } else {
        TS_EXPLICIT_LE
    };

    let elem = |tag: (u16, u16), vr: &[u8; 2], value: &[u8]| -> Vec<u8> {
        if spec.implicit {
            elem_implicit(tag, value)
        } else {
            elem_explicit(tag, vr, value)
        }
    };
    let elem_str = |tag: (u16, u16), vr: &[u8; 2], value: &str, pad_byte: u8| -> Vec<u8> {
        elem(tag, vr, &pad(value, pad_byte))
    };

    let mut dataset = Vec::new();
    // CT Image Storage SOP class.
    dataset.extend(elem_str((0x0008, 0x0016), b"UI", "1.2.840.10008.5.1.4.1.1.2", b'\0'));
    dataset.extend(elem_str((0x0008, 0x0018), b"UI", &spec.sop_uid, b'\0'));
    dataset.extend(elem_str((0x0008, 0x0060), b"CS", "CT", b' '));
    dataset.extend_from_slice(&spec.extra_after_0008);
    if let Some(t) = spec.slice_thickness {
        dataset.extend(elem_str((0x0018, 0x0050), b"DS", &t.to_string(), b' '));
    }
    dataset.extend(elem_str((0x0020, 0x000E), b"UI", &spec.series_uid, b'\0'));
    let ipp = format!(
        "{}\\{}\\{}",
        spec.position[0], spec.position[1], spec.position[2]
    );
    dataset.extend(elem_str((0x0020, 0x0032), b"DS", &ipp, b' '));
    let iop = spec
        .orientation
        .iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join("\\");
    dataset.extend(elem_str((0x0020, 0x0037), b"DS", &iop, b' '));
    dataset.extend(elem((0x0028, 0x0010), b"US", &spec.rows.to_le_bytes()));
    dataset.extend(elem((0x0028, 0x0011), b"US", &spec.cols.to_le_bytes()));
    let ps = format!("{}\\{}", spec.pixel_spacing.0, spec.pixel_spacing.1);
    dataset.extend(elem_str((0x0028, 0x0030), b"DS", &ps, b' '));
    dataset.extend(elem((0x0028, 0x0100), b"US", &16u16.to_le_bytes()));
    let representation: u16 = if spec.signed { 1 } else { 0 };
    dataset.extend(elem((0x0028, 0x0103), b"US", &representation.to_le_bytes()));
    dataset.extend(elem_str((0x0028, 0x1052), b"DS", &spec.intercept.to_string(), b' '));
    dataset.extend(elem_str((0x0028, 0x1053), b"DS", &spec.slope.to_string(), b' '));

    assert_eq!(spec.stored.len(), spec.rows as usize * spec.cols as usize);
    let mut payload = Vec::with_capacity(spec.stored.len() * 2);
    for &v in &spec.stored {
        if spec.signed {
            payload.extend_from_slice(&v.to_le_bytes());
        } else {
            payload.extend_from_slice(&(v as u16).to_le_bytes());
        }
    }
    dataset.extend(elem((0x7FE0, 0x0010), b"OW", &payload));

    let mut meta = Vec::new();
    meta.extend(elem_explicit(
        (0x0002, 0x0002),
        b"UI",
        &pad("1.2.840.10008.5.1.4.1.1.2", b'\0'),
    ));
    meta.extend(elem_explicit((0x0002, 0x0003), b"UI", &pad(&spec.sop_uid, b'\0')));
    meta.extend(elem_explicit((0x0002, 0x0010), b"UI", &pad(ts, b'\0')));

    let mut bytes = vec![0u8; 128];
    bytes.extend_from_slice(b"DICM");
    bytes.extend(elem_explicit(
        (0x0002, 0x0000),
        b"UL",
        &(meta.len() as u32).to_le_bytes(),
    ));
    bytes.extend(meta);
    bytes.extend(dataset);
    bytes
}

/// Writes a series of slices into a directory, one file per slice.
pub fn write_series(dir: &Path, slices: &[SliceSpec]) {
    for (n, spec) in slices.iter().enumerate() {
        std::fs::write(dir.join(format!("img{n:04}.dcm")), build_slice(spec)).unwrap();
    }
}

/// A synthetic CT series: `n_slices` stacked z-slices of deterministic
/// pseudo-random stored values.
pub fn ct_series(rows: u16, cols: u16, spacing: &str, n_slices: usize, seed: i16) -> Vec<SliceSpec> {
    (0..n_slices)
        .map(|k| {
            let stored: Vec<i16> = (0..rows as usize * cols as usize)
                .map(|n| ((n as i64 * 31 + k as i64 * 101 + seed as i64) % 3000 - 500) as i16)
                .collect();
            SliceSpec::ct(rows, cols, spacing, k as f64, stored)
        })
        .collect()
}

/// Random grid dimensions, spacing, and HU values plus a random mask.
/// Masks mix a Bernoulli field with a solid ball so both scattered and
/// structured shapes occur.
pub fn random_volume_and_mask(rng: &mut StdRng, max_dim: usize) -> (ScalarVolume, BinaryMask) {
    let dims = [
        rng.random_range(2..=max_dim),
        rng.random_range(2..=max_dim),
        rng.random_range(2..=max_dim),
    ];
    let spacing = [
        rng.random_range(0.3..2.0),
        rng.random_range(0.3..2.0),
        rng.random_range(0.3..2.0),
    ];
    let g = GridGeometry::new(dims, spacing, [0.0, 0.0, 0.0]).unwrap();
    let n = g.voxel_count();
    let values: Vec<f64> = (0..n).map(|_| rng.random_range(-1000.0..2000.0)).collect();

    let mut bits: Vec<bool> = Vec::with_capacity(n);
    let density = rng.random_range(0.2..0.8);
    for _ in 0..n {
        bits.push(rng.random_bool(density));
    }
    if rng.random_bool(0.5) {
        // Stamp in a solid ball to guarantee some interior voxels.
        let c = [
            rng.random_range(0.0..dims[0] as f64),
            rng.random_range(0.0..dims[1] as f64),
            rng.random_range(0.0..dims[2] as f64),
        ];
        let r = rng.random_range(1.0..(max_dim as f64 / 2.0));
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let d2 = (i as f64 - c[0]).powi(2)
                        + (j as f64 - c[1]).powi(2)
                        + (k as f64 - c[2]).powi(2);
                    if d2 <= r * r {
                        bits[i + dims[0] * (j + dims[1] * k)] = true;
                    }
                }
            }
        }
    }

    let rescale = Rescale {
        slope: 1.0,
        intercept: 0.0,
    };
    (
        ScalarVolume::with_rescale(g.clone(), values, rescale).unwrap(),
        BinaryMask::new(g, bits).unwrap(),
    )
}
