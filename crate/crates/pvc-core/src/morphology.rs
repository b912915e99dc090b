//! Binary 3D morphology: face-connected erosion and the interior/surface
//! partition of a segmentation mask.
//!
//! The interior set is what survives erosion with the 6-connected (face)
//! structuring element inscribed in a 3x3x3 kernel; the surface set is the
//! set difference of the mask and its interior. Voxels on the grid boundary
//! see out-of-bounds as background, so a set voxel touching the volume edge
//! is always classified as surface.

use rayon::prelude::*;

use crate::volume::{BinaryMask, VoxelIndex};

/// A mask split into interior and surface sets.
///
/// Invariants (guaranteed by [`partition`]): interior and surface are
/// disjoint, and their union equals the source mask.
#[derive(Debug, Clone)]
pub struct VoxelPartition {
    interior: BinaryMask,
    surface: BinaryMask,
    source: BinaryMask,
}

impl VoxelPartition {
    /// Voxels surviving face-connected erosion.
    pub fn interior(&self) -> &BinaryMask {
        &self.interior
    }

    /// Mask voxels with at least one unset face neighbor.
    pub fn surface(&self) -> &BinaryMask {
        &self.surface
    }

    /// The original segmentation mask.
    pub fn source(&self) -> &BinaryMask {
        &self.source
    }
}

/// Erodes a mask with the 6-connected structuring element: a voxel survives
/// iff it is set and all six face neighbors are set. Out-of-bounds counts as
/// background.
pub fn erode_face_connected(mask: &BinaryMask) -> BinaryMask {
    let [nx, ny, nz] = mask.geometry().dims();
    let bits = mask.bits();
    let slab = nx * ny;

    let mut out = vec![false; bits.len()];
    out.par_chunks_mut(slab).enumerate().for_each(|(k, chunk)| {
        // Whole boundary slices erode away entirely.
        if k == 0 || k + 1 == nz {
            return;
        }
        for j in 1..ny.saturating_sub(1) {
            let row = k * slab + j * nx;
            for i in 1..nx.saturating_sub(1) {
                let idx = row + i;
                chunk[j * nx + i] = bits[idx]
                    && bits[idx - 1]
                    && bits[idx + 1]
                    && bits[idx - nx]
                    && bits[idx + nx]
                    && bits[idx - slab]
                    && bits[idx + slab];
            }
        }
    });

    BinaryMask::new(mask.geometry().clone(), out).expect("output matches input grid")
}

/// Splits a mask into interior (eroded) and surface (mask minus interior).
pub fn partition(mask: &BinaryMask) -> VoxelPartition {
    let interior = erode_face_connected(mask);
    let surface_bits: Vec<bool> = mask
        .bits()
        .iter()
        .zip(interior.bits())
        .map(|(&m, &q)| m && !q)
        .collect();
    let surface =
        BinaryMask::new(mask.geometry().clone(), surface_bits).expect("output matches input grid");
    VoxelPartition {
        interior,
        surface,
        source: mask.clone(),
    }
}

/// True if any 26-neighbor of `x` is set in `mask`. Used to classify surface
/// voxels with no interior contributor.
pub(crate) fn has_set_neighbor26(mask: &BinaryMask, x: VoxelIndex) -> bool {
    let [nx, ny, nz] = mask.geometry().dims();
    let bits = mask.bits();
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
                if bits[i as usize + nx * (j as usize + ny * k as usize)] {
                    return true;
                }
            }
        }
    }
    false
}
