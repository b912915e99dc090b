//! Voxel-grid data model: grid geometry, scalar HU volumes, binary masks,
//! and the index/distance arithmetic shared by every other module.
//!
//! Values are addressed x-fastest: `linear = i + nx * (j + ny * k)`.
//! Distances are measured between voxel centers in world units (mm), using
//! the per-axis spacing. Grid orientation is carried through processing but
//! not applied to distances: the orientation triple is orthonormal, so it
//! preserves Euclidean lengths.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Spacing agreement required between a volume and its mask (mm).
pub const SPACING_TOL: f64 = 1e-6;
/// Origin agreement required between a volume and its mask (mm).
pub const ORIGIN_TOL: f64 = 1e-3;
/// Orthonormality tolerance for orientation triples.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

/// A voxel address `(i, j, k)`. Validity is always relative to a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelIndex {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

impl VoxelIndex {
    pub fn new(i: usize, j: usize, k: usize) -> Self {
        VoxelIndex { i, j, k }
    }
}

/// Dimensions, spacing, origin, and axis orientation of a voxel grid.
///
/// Spacing components are mm per voxel step along each axis; the origin is
/// the world coordinate (mm) of the center of voxel (0, 0, 0).
#[derive(Debug, Clone, PartialEq)]
pub struct GridGeometry {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    orientation: [[f64; 3]; 3],
}

impl GridGeometry {
    /// Axis-aligned grid (identity orientation).
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        Self::with_orientation(
            dims,
            spacing,
            origin,
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        )
    }

    pub fn with_orientation(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        orientation: [[f64; 3]; 3],
    ) -> Result<Self> {
        if dims.iter().any(|&d| d < 1) {
            return Err(Error::InvalidGeometry(format!(
                "all dims must be >= 1, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "all spacing components must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "origin must be finite, got {origin:?}"
            )));
        }
        for (a, axis) in orientation.iter().enumerate() {
            let norm = dot(axis, axis).sqrt();
            if (norm - 1.0).abs() > ORTHONORMAL_TOL {
                return Err(Error::InvalidGeometry(format!(
                    "orientation axis {a} is not unit length (|v| = {norm})"
                )));
            }
        }
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let d = dot(&orientation[a], &orientation[b]);
            if d.abs() > ORTHONORMAL_TOL {
                return Err(Error::InvalidGeometry(format!(
                    "orientation axes {a} and {b} are not orthogonal (dot = {d})"
                )));
            }
        }
        Ok(GridGeometry {
            dims,
            spacing,
            origin,
            orientation,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn orientation(&self) -> [[f64; 3]; 3] {
        self.orientation
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn contains(&self, v: VoxelIndex) -> bool {
        v.i < self.dims[0] && v.j < self.dims[1] && v.k < self.dims[2]
    }

    /// Linear offset of a voxel, x-fastest.
    pub fn linear_index(&self, v: VoxelIndex) -> usize {
        v.i + self.dims[0] * (v.j + self.dims[1] * v.k)
    }

    pub(crate) fn check_bounds(&self, v: VoxelIndex) -> Result<()> {
        if self.contains(v) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                i: v.i,
                j: v.j,
                k: v.k,
                nx: self.dims[0],
                ny: self.dims[1],
                nz: self.dims[2],
            })
        }
    }

    /// Checks that another grid is aligned with this one: identical dims,
    /// spacing within [`SPACING_TOL`], origin within [`ORIGIN_TOL`].
    pub fn compatible_with(&self, other: &GridGeometry) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::GeometryMismatch(format!(
                "dims differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        for a in 0..3 {
            if (self.spacing[a] - other.spacing[a]).abs() > SPACING_TOL {
                return Err(Error::GeometryMismatch(format!(
                    "spacing differs on axis {a}: {} vs {}",
                    self.spacing[a], other.spacing[a]
                )));
            }
            if (self.origin[a] - other.origin[a]).abs() > ORIGIN_TOL {
                return Err(Error::GeometryMismatch(format!(
                    "origin differs on axis {a}: {} vs {}",
                    self.origin[a], other.origin[a]
                )));
            }
        }
        Ok(())
    }
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Euclidean distance between voxel centers in world units (mm).
pub fn world_distance(a: VoxelIndex, b: VoxelIndex, g: &GridGeometry) -> Result<f64> {
    g.check_bounds(a)?;
    g.check_bounds(b)?;
    Ok(world_distance_unchecked(a, b, g.spacing))
}

/// Distance without bounds checks; shared by the correction kernel so the
/// public op and the hot path evaluate the same floating-point expression.
#[inline]
pub(crate) fn world_distance_unchecked(a: VoxelIndex, b: VoxelIndex, spacing: [f64; 3]) -> f64 {
    let dx = (a.i as f64 - b.i as f64) * spacing[0];
    let dy = (a.j as f64 - b.j as f64) * spacing[1];
    let dz = (a.k as f64 - b.k as f64) * spacing[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// All in-bounds voxels sharing a face, edge, or corner with `x` (up to 26),
/// excluding `x` itself. Emitted in a fixed order: dk, then dj, then di
/// ascending, so downstream accumulations are deterministic.
pub fn neighborhood26(x: VoxelIndex, g: &GridGeometry) -> Result<Vec<VoxelIndex>> {
    g.check_bounds(x)?;
    let [nx, ny, nz] = g.dims();
    let mut out = Vec::with_capacity(26);
    for dk in -1i64..=1 {
        let k = x.k as i64 + dk;
        if k < 0 || k >= nz as i64 {
            continue;
        }
        for dj in -1i64..=1 {
            let j = x.j as i64 + dj;
            if j < 0 || j >= ny as i64 {
                continue;
            }
            for di in -1i64..=1 {
                let i = x.i as i64 + di;
                if i < 0 || i >= nx as i64 || (di == 0 && dj == 0 && dk == 0) {
                    continue;
                }
                out.push(VoxelIndex::new(i as usize, j as usize, k as usize));
            }
        }
    }
    Ok(out)
}

/// Linear map between stored integer values and HU:
/// `HU = slope * stored + intercept`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rescale {
    pub slope: f64,
    pub intercept: f64,
}

impl Rescale {
    pub const IDENTITY: Rescale = Rescale {
        slope: 1.0,
        intercept: 0.0,
    };

    pub fn apply(&self, stored: f64) -> f64 {
        self.slope * stored + self.intercept
    }
}

impl Default for Rescale {
    fn default() -> Self {
        Rescale::IDENTITY
    }
}

/// Dense 3D grid of HU values with geometry and provenance metadata.
///
/// Immutable after construction; share freely across threads.
#[derive(Debug, Clone)]
pub struct ScalarVolume {
    geometry: GridGeometry,
    values: Vec<f64>,
    rescale: Rescale,
    metadata: BTreeMap<String, String>,
}

impl ScalarVolume {
    pub fn new(geometry: GridGeometry, values: Vec<f64>) -> Result<Self> {
        Self::with_rescale(geometry, values, Rescale::IDENTITY)
    }

    pub fn with_rescale(geometry: GridGeometry, values: Vec<f64>, rescale: Rescale) -> Result<Self> {
        if values.len() != geometry.voxel_count() {
            return Err(Error::InvalidGeometry(format!(
                "value count {} does not match grid {:?} ({} voxels)",
                values.len(),
                geometry.dims(),
                geometry.voxel_count()
            )));
        }
        Ok(ScalarVolume {
            geometry,
            values,
            rescale,
            metadata: BTreeMap::new(),
        })
    }

    /// Attaches provenance metadata, replacing any existing entries.
    pub fn with_metadata(mut self, metadata: BTreeMap<String, String>) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn rescale(&self) -> Rescale {
        self.rescale
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    /// HU value at a voxel; errors if out of bounds.
    pub fn value(&self, v: VoxelIndex) -> Result<f64> {
        self.geometry.check_bounds(v)?;
        Ok(self.values[self.geometry.linear_index(v)])
    }
}

/// Dense 3D boolean grid, geometry-aligned with the [`ScalarVolume`] it
/// annotates.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    geometry: GridGeometry,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(geometry: GridGeometry, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != geometry.voxel_count() {
            return Err(Error::InvalidGeometry(format!(
                "bit count {} does not match grid {:?} ({} voxels)",
                bits.len(),
                geometry.dims(),
                geometry.voxel_count()
            )));
        }
        Ok(BinaryMask { geometry, bits })
    }

    /// All-background mask on the given grid.
    pub fn empty(geometry: GridGeometry) -> Self {
        let n = geometry.voxel_count();
        BinaryMask {
            geometry,
            bits: vec![false; n],
        }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, v: VoxelIndex) -> Result<bool> {
        self.geometry.check_bounds(v)?;
        Ok(self.bits[self.geometry.linear_index(v)])
    }

    pub fn count_set(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Set voxels in linear-index (x-fastest) order.
    pub fn iter_set(&self) -> impl Iterator<Item = VoxelIndex> + '_ {
        let [nx, ny, _] = self.geometry.dims();
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(idx, _)| {
                let i = idx % nx;
                let j = (idx / nx) % ny;
                let k = idx / (nx * ny);
                VoxelIndex::new(i, j, k)
            })
    }
}
