//! The partial-volume-correction kernel.
//!
//! Every surface voxel x of a segmented volume receives a candidate value
//! u(x): the inverse-distance-weighted mean of the HU values of the interior
//! voxels in its 26-neighborhood, with weight 1/d(x, xi)^p in world-unit
//! distance. The output value is max(h(x), u(x)) when u(x) != 0 and h(x)
//! otherwise, so correction can only ever raise a surface voxel. Interior
//! and background voxels are never modified.
//!
//! Surface voxels carry weight 0 as contributors, so a surface voxel with no
//! interior neighbor (a thin region, e.g. one voxel thick) is left unchanged.
//!
//! u(x) is accumulated over neighbors in a fixed order (dk, dj, di
//! ascending) with weights normalized by their sum before the weighted HU
//! accumulation. This makes the result independent of evaluation order and
//! worker count, and returns a lone contributor's HU exactly.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::morphology::{has_set_neighbor26, partition, VoxelPartition};
use crate::volume::{BinaryMask, ScalarVolume, VoxelIndex};

/// Correction parameters. The inverse-distance exponent defaults to 2.
#[derive(Debug, Clone, Copy)]
pub struct PvcParams {
    power: f64,
}

impl PvcParams {
    pub fn new(power: f64) -> Result<Self> {
        let valid = power > 0.0 && power.is_finite();
        if !valid {
            return Err(Error::InvalidParameter(format!(
                "IDW exponent must be a positive finite number, got {power}"
            )));
        }
        Ok(PvcParams { power })
    }

    pub fn power(&self) -> f64 {
        self.power
    }
}

impl Default for PvcParams {
    fn default() -> Self {
        PvcParams { power: 2.0 }
    }
}

/// Per-run accounting of what the correction did.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrectionReport {
    /// Voxels in the surface set S.
    pub surface_count: u64,
    /// Surface voxels whose output exceeds their input.
    pub raised_count: u64,
    /// Surface voxels left at their input value.
    pub unchanged_count: u64,
    /// Surface voxels with no interior 26-neighbor (u(x) = 0); a subset of
    /// the unchanged voxels.
    pub uncorrectable_count: u64,
    /// Mean HU increase over all surface voxels (zero when S is empty).
    pub mean_delta: f64,
    /// Largest HU increase over all surface voxels.
    pub max_delta: f64,
}

impl CorrectionReport {
    fn zero() -> Self {
        CorrectionReport {
            surface_count: 0,
            raised_count: 0,
            unchanged_count: 0,
            uncorrectable_count: 0,
            mean_delta: 0.0,
            max_delta: 0.0,
        }
    }
}

/// The interior voxels of `P(x)` with their IDW weights `1/d(x, xi)^p`.
///
/// `x` must be a surface voxel of the partition. The list may be empty, in
/// which case no correction applies at `x`.
pub fn idw_weights(
    x: VoxelIndex,
    partition: &VoxelPartition,
    params: &PvcParams,
) -> Result<Vec<(VoxelIndex, f64)>> {
    check_surface(x, partition)?;
    let spacing = partition.source().geometry().spacing();
    let [nx, ny, nz] = partition.source().geometry().dims();
    let interior = partition.interior().bits();

    let mut out = Vec::new();
    for_each_neighbor(x, [nx, ny, nz], |n, idx| {
        if interior[idx] {
            let d = crate::volume::world_distance_unchecked(x, n, spacing);
            debug_assert!(d > 0.0, "contributors exclude x itself, so d > 0");
            out.push((n, 1.0 / d.powf(params.power)));
        }
    });
    Ok(out)
}

/// The IDW estimate u(x) over the interior 26-neighbors of `x`, or 0 when
/// there are none.
pub fn idw_estimate(
    x: VoxelIndex,
    volume: &ScalarVolume,
    partition: &VoxelPartition,
    params: &PvcParams,
) -> Result<f64> {
    check_surface(x, partition)?;
    volume.geometry().compatible_with(partition.source().geometry())?;
    let (u, _) = estimate_at(
        x,
        volume.geometry().dims(),
        volume.geometry().spacing(),
        volume.values(),
        partition.interior().bits(),
        params.power,
    );
    Ok(u)
}

/// Applies the correction to every surface voxel of `mask`, returning the
/// corrected volume and a report. Voxels outside the surface set keep their
/// input values exactly.
pub fn correct(
    volume: &ScalarVolume,
    mask: &BinaryMask,
    params: &PvcParams,
) -> Result<(ScalarVolume, CorrectionReport)> {
    volume.geometry().compatible_with(mask.geometry())?;

    let part = partition(mask);
    let corrected = correct_with_partition(volume, &part, params);
    Ok(corrected)
}

/// Correction against a precomputed partition; shared by [`correct`] and the
/// phantom harness.
pub fn correct_with_partition(
    volume: &ScalarVolume,
    part: &VoxelPartition,
    params: &PvcParams,
) -> (ScalarVolume, CorrectionReport) {
    let geom = volume.geometry().clone();
    let [nx, ny, nz] = geom.dims();
    let spacing = geom.spacing();
    let slab = nx * ny;
    let input = volume.values();
    let surface = part.surface().bits();
    let interior = part.interior().bits();
    let power = params.power();

    let mut output = input.to_vec();

    // One k-slice per task: each voxel's value is a pure function of the
    // input, and the per-slab report partials are merged in slab order, so
    // results are bit-identical for any worker count.
    let partials: Vec<SlabPartial> = output
        .par_chunks_mut(slab)
        .enumerate()
        .map(|(k, chunk)| {
            let mut partial = SlabPartial::default();
            for j in 0..ny {
                for i in 0..nx {
                    let idx = k * slab + j * nx + i;
                    if !surface[idx] {
                        continue;
                    }
                    let x = VoxelIndex::new(i, j, k);
                    let h = input[idx];
                    let (u, has_contributors) =
                        estimate_at(x, [nx, ny, nz], spacing, input, interior, power);
                    let out = if u != 0.0 { h.max(u) } else { h };
                    chunk[j * nx + i] = out;

                    partial.surface += 1;
                    let delta = out - h;
                    if delta > 0.0 {
                        partial.raised += 1;
                    } else {
                        partial.unchanged += 1;
                    }
                    if !has_contributors {
                        partial.uncorrectable += 1;
                    }
                    partial.delta_sum += delta;
                    partial.delta_max = partial.delta_max.max(delta);
                }
            }
            partial
        })
        .collect();

    let mut report = CorrectionReport::zero();
    let mut delta_sum = 0.0;
    for p in &partials {
        report.surface_count += p.surface;
        report.raised_count += p.raised;
        report.unchanged_count += p.unchanged;
        report.uncorrectable_count += p.uncorrectable;
        delta_sum += p.delta_sum;
        report.max_delta = report.max_delta.max(p.delta_max);
    }
    if report.surface_count > 0 {
        report.mean_delta = delta_sum / report.surface_count as f64;
    }

    let out_volume = ScalarVolume::with_rescale(geom, output, volume.rescale())
        .expect("output matches input grid")
        .with_metadata(volume.metadata().clone());
    (out_volume, report)
}

#[derive(Default, Clone, Copy)]
struct SlabPartial {
    surface: u64,
    raised: u64,
    unchanged: u64,
    uncorrectable: u64,
    delta_sum: f64,
    delta_max: f64,
}

/// u(x) and whether any interior contributor exists. Two passes in the
/// canonical neighbor order: the weight sum first, then the weighted HU
/// accumulation with normalized weights.
#[inline]
fn estimate_at(
    x: VoxelIndex,
    dims: [usize; 3],
    spacing: [f64; 3],
    values: &[f64],
    interior: &[bool],
    power: f64,
) -> (f64, bool) {
    let mut weight_sum = 0.0;
    let mut any = false;
    for_each_neighbor(x, dims, |n, idx| {
        if interior[idx] {
            let d = crate::volume::world_distance_unchecked(x, n, spacing);
            weight_sum += 1.0 / d.powf(power);
            any = true;
        }
    });
    if !any {
        // The d = 0 branch of the estimate is unreachable: contributors are
        // interior voxels of P(x), which never include x itself.
        return (0.0, false);
    }
    let mut u = 0.0;
    for_each_neighbor(x, dims, |n, idx| {
        if interior[idx] {
            let d = crate::volume::world_distance_unchecked(x, n, spacing);
            let w = 1.0 / d.powf(power);
            u += (w / weight_sum) * values[idx];
        }
    });
    (u, true)
}

/// Visits the in-bounds 26-neighbors of `x` in the canonical dk, dj, di
/// ascending order, passing each neighbor and its linear index.
#[inline]
fn for_each_neighbor(x: VoxelIndex, dims: [usize; 3], mut f: impl FnMut(VoxelIndex, usize)) {
    let [nx, ny, nz] = dims;
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
                let n = VoxelIndex::new(i as usize, j as usize, k as usize);
                f(n, n.i + nx * (n.j + ny * n.k));
            }
        }
    }
}

fn check_surface(x: VoxelIndex, partition: &VoxelPartition) -> Result<()> {
    if !partition.surface().get(x)? {
        return Err(Error::Contract(format!(
            "voxel ({}, {}, {}) is not in the surface set",
            x.i, x.j, x.k
        )));
    }
    Ok(())
}

/// True if `x` (a surface voxel) has at least one interior 26-neighbor.
pub fn is_correctable(x: VoxelIndex, partition: &VoxelPartition) -> Result<bool> {
    check_surface(x, partition)?;
    Ok(has_set_neighbor26(partition.interior(), x))
}
