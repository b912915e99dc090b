//! Synthetic ground-truth harness: cortical-shell tube phantoms, Gaussian
//! PSF blur, and before/after error scoring for the correction pipeline.
//!
//! The phantom is a straight tube along z with analytically known HU
//! everywhere, so surface error against ground truth is exact. The mask is
//! the true geometry (perfect segmentation), which isolates the correction
//! from segmentation error. Blur is a separable Gaussian truncated at four
//! standard deviations with edge-replicate boundary handling, a first-order
//! model of scanner system blur.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::morphology::partition;
use crate::pvc::{correct_with_partition, CorrectionReport, PvcParams};
use crate::volume::{BinaryMask, GridGeometry, ScalarVolume};

/// Kernel truncation radius in standard deviations.
pub const BLUR_TRUNCATE_SIGMAS: f64 = 4.0;

/// Parameters of a synthetic cortical-shell tube phantom.
#[derive(Debug, Clone)]
pub struct PhantomSpec {
    /// Outer radius of the tube, mm.
    pub outer_radius: f64,
    /// Thickness of the cortical shell, mm.
    pub cortical_thickness: f64,
    /// Tube length along z, mm (centered in the grid).
    pub length: f64,
    pub cortical_hu: f64,
    pub trabecular_hu: f64,
    pub background_hu: f64,
    pub geometry: GridGeometry,
    /// Gaussian PSF standard deviation, mm.
    pub psf_sigma: f64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        // NaN fails every ordered comparison, so each check also rejects it.
        let ordered =
            self.outer_radius > self.cortical_thickness && self.cortical_thickness > 0.0;
        if !ordered {
            return Err(Error::InvalidParameter(format!(
                "phantom requires outer_radius > cortical_thickness > 0, got {} and {}",
                self.outer_radius, self.cortical_thickness
            )));
        }
        let hu_ordered =
            self.cortical_hu > self.trabecular_hu && self.trabecular_hu > self.background_hu;
        if !hu_ordered {
            return Err(Error::InvalidParameter(format!(
                "phantom requires cortical_hu > trabecular_hu > background_hu, got {}, {}, {}",
                self.cortical_hu, self.trabecular_hu, self.background_hu
            )));
        }
        let sigma_valid = self.psf_sigma >= 0.0 && self.psf_sigma.is_finite();
        if !sigma_valid {
            return Err(Error::InvalidParameter(format!(
                "psf_sigma must be >= 0, got {}",
                self.psf_sigma
            )));
        }
        let length_valid = self.length > 0.0 && self.length.is_finite();
        if !length_valid {
            return Err(Error::InvalidParameter(format!(
                "length must be > 0, got {}",
                self.length
            )));
        }
        // The shell must fit within the voxel-center extent of the grid.
        let [nx, ny, nz] = self.geometry.dims();
        let [sx, sy, sz] = self.geometry.spacing();
        let half_x = (nx as f64 - 1.0) / 2.0 * sx;
        let half_y = (ny as f64 - 1.0) / 2.0 * sy;
        let half_z = (nz as f64 - 1.0) / 2.0 * sz;
        if self.outer_radius > half_x || self.outer_radius > half_y {
            return Err(Error::InvalidGeometry(format!(
                "outer radius {} mm exceeds the in-plane half-extent ({half_x:.3} x {half_y:.3} mm)",
                self.outer_radius
            )));
        }
        if self.length / 2.0 > half_z {
            return Err(Error::InvalidGeometry(format!(
                "half-length {} mm exceeds the z half-extent {half_z:.3} mm",
                self.length / 2.0
            )));
        }
        Ok(())
    }
}

/// Error metrics over the surface set, before and after correction.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PhantomResult {
    /// Mean absolute surface error of the blurred volume vs. ground truth.
    pub mae_uncorrected: f64,
    /// Mean absolute surface error of the corrected volume vs. ground truth.
    pub mae_corrected: f64,
    pub mean_signed_uncorrected: f64,
    pub mean_signed_corrected: f64,
    /// `1 - mae_corrected / mae_uncorrected`; 1.0 by convention when the
    /// uncorrected error is already zero.
    pub improvement_fraction: f64,
}

/// Builds the piecewise-constant ground truth and its perfect segmentation
/// mask. The tube axis runs along z through the grid center; a voxel at
/// radial distance r from the axis (and within the tube's length) gets
/// cortical HU for `outer - thickness <= r <= outer`, trabecular HU for
/// `r < outer - thickness`, and background HU otherwise. The mask covers
/// `r <= outer` within the length.
pub fn generate(spec: &PhantomSpec) -> Result<(ScalarVolume, BinaryMask)> {
    spec.validate()?;
    let g = &spec.geometry;
    let [nx, ny, nz] = g.dims();
    let [sx, sy, sz] = g.spacing();
    let cx = (nx as f64 - 1.0) / 2.0;
    let cy = (ny as f64 - 1.0) / 2.0;
    let cz = (nz as f64 - 1.0) / 2.0;
    let inner = spec.outer_radius - spec.cortical_thickness;
    let half_len = spec.length / 2.0;

    let slab = nx * ny;
    let mut values = vec![0.0f64; g.voxel_count()];
    let mut bits = vec![false; g.voxel_count()];

    values
        .par_chunks_mut(slab)
        .zip(bits.par_chunks_mut(slab))
        .enumerate()
        .for_each(|(k, (vchunk, bchunk))| {
            let dz = (k as f64 - cz) * sz;
            let in_length = dz.abs() <= half_len;
            for j in 0..ny {
                let dy = (j as f64 - cy) * sy;
                for i in 0..nx {
                    let dx = (i as f64 - cx) * sx;
                    let r = (dx * dx + dy * dy).sqrt();
                    let idx = j * nx + i;
                    if in_length && r <= spec.outer_radius {
                        bchunk[idx] = true;
                        vchunk[idx] = if r >= inner {
                            spec.cortical_hu
                        } else {
                            spec.trabecular_hu
                        };
                    } else {
                        vchunk[idx] = spec.background_hu;
                    }
                }
            }
        });

    Ok((
        ScalarVolume::new(g.clone(), values)?,
        BinaryMask::new(g.clone(), bits)?,
    ))
}

/// Separable Gaussian blur with standard deviation `sigma_mm` in world units
/// along every axis (converted to voxel units per axis via spacing). Sigma 0
/// returns the input unchanged. Edges are handled by replication, so a
/// constant volume blurs to itself.
pub fn blur(v: &ScalarVolume, sigma_mm: f64) -> Result<ScalarVolume> {
    let valid = sigma_mm >= 0.0 && sigma_mm.is_finite();
    if !valid {
        return Err(Error::InvalidParameter(format!(
            "blur sigma must be >= 0 and finite, got {sigma_mm}"
        )));
    }
    if sigma_mm == 0.0 {
        return Ok(v.clone());
    }
    let g = v.geometry();
    let dims = g.dims();
    let spacing = g.spacing();

    let mut values = v.values().to_vec();
    for (axis, &step) in spacing.iter().enumerate() {
        let sigma_vox = sigma_mm / step;
        let kernel = gaussian_kernel(sigma_vox);
        values = convolve_axis(&values, dims, axis, &kernel);
    }

    Ok(ScalarVolume::with_rescale(g.clone(), values, v.rescale())?
        .with_metadata(v.metadata().clone()))
}

/// Normalized 1D Gaussian taps over [-r, r] with r = ceil(4 * sigma).
fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    let radius = (BLUR_TRUNCATE_SIGMAS * sigma_vox).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|t| (-0.5 * (t as f64 / sigma_vox).powi(2)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    for w in kernel.iter_mut() {
        *w /= sum;
    }
    kernel
}

/// One separable pass along `axis` with edge replication.
fn convolve_axis(values: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let [nx, ny, _nz] = dims;
    let radius = (kernel.len() / 2) as i64;
    let n_axis = dims[axis] as i64;
    let stride = match axis {
        0 => 1usize,
        1 => nx,
        _ => nx * ny,
    };
    let slab = nx * ny;

    let mut out = vec![0.0f64; values.len()];
    out.par_chunks_mut(slab).enumerate().for_each(|(k, chunk)| {
        for j in 0..ny {
            for i in 0..nx {
                let pos = [i, j, k];
                let along = pos[axis] as i64;
                let base = i + nx * (j + ny * k);
                let mut acc = 0.0;
                for (t, &w) in kernel.iter().enumerate() {
                    let offset = t as i64 - radius;
                    let clamped = (along + offset).clamp(0, n_axis - 1);
                    let sample = (base as i64 + (clamped - along) * stride as i64) as usize;
                    acc += w * values[sample];
                }
                chunk[j * nx + i] = acc;
            }
        }
    });
    out
}

/// Scores a corrected volume against ground truth over the surface set of
/// `mask` (the voxels the correction acts on).
pub fn evaluate(
    ground_truth: &ScalarVolume,
    blurred: &ScalarVolume,
    corrected: &ScalarVolume,
    mask: &BinaryMask,
) -> Result<PhantomResult> {
    ground_truth.geometry().compatible_with(blurred.geometry())?;
    ground_truth.geometry().compatible_with(corrected.geometry())?;
    ground_truth.geometry().compatible_with(mask.geometry())?;

    let part = partition(mask);
    let g = ground_truth.geometry();
    let truth = ground_truth.values();
    let before = blurred.values();
    let after = corrected.values();

    let mut n = 0u64;
    let mut abs_before = 0.0;
    let mut abs_after = 0.0;
    let mut signed_before = 0.0;
    let mut signed_after = 0.0;
    for x in part.surface().iter_set() {
        let idx = g.linear_index(x);
        let db = before[idx] - truth[idx];
        let da = after[idx] - truth[idx];
        abs_before += db.abs();
        abs_after += da.abs();
        signed_before += db;
        signed_after += da;
        n += 1;
    }

    let (mae_uncorrected, mae_corrected, mean_signed_uncorrected, mean_signed_corrected) = if n > 0
    {
        let n = n as f64;
        (abs_before / n, abs_after / n, signed_before / n, signed_after / n)
    } else {
        (0.0, 0.0, 0.0, 0.0)
    };

    let improvement_fraction = if mae_uncorrected == 0.0 {
        1.0
    } else {
        1.0 - mae_corrected / mae_uncorrected
    };

    Ok(PhantomResult {
        mae_uncorrected,
        mae_corrected,
        mean_signed_uncorrected,
        mean_signed_corrected,
        improvement_fraction,
    })
}

/// A named suite entry.
#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub name: String,
    pub spec: PhantomSpec,
}

/// Outcome of one pipeline run: generate, blur, correct, evaluate.
#[derive(Debug, Clone)]
pub struct CaseOutcome {
    pub result: PhantomResult,
    pub report: CorrectionReport,
}

/// Runs the full pipeline for one phantom case.
pub fn run_case(spec: &PhantomSpec, params: &PvcParams) -> Result<CaseOutcome> {
    let (truth, mask) = generate(spec)?;
    let blurred = blur(&truth, spec.psf_sigma)?;
    let part = partition(&mask);
    let (corrected, report) = correct_with_partition(&blurred, &part, params);
    let result = evaluate(&truth, &blurred, &corrected, &mask)?;
    Ok(CaseOutcome { result, report })
}

/// Header expected at the top of a phantom suite file.
pub const SUITE_HEADER: &str = "name,nx,ny,nz,sx,sy,sz,outer_radius,thickness,length,cortical_hu,trabecular_hu,background_hu,psf_sigma";

/// Parses a suite file: comment lines start with `#`, blank lines are
/// skipped, the first data line must be the [`SUITE_HEADER`] column header,
/// and every following line describes one case.
pub fn parse_suite(text: &str) -> Result<Vec<SuiteCase>> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));

    match lines.next() {
        Some(h) if h == SUITE_HEADER => {}
        Some(h) => {
            return Err(Error::Format {
                offset: 0,
                message: format!("suite header mismatch: expected {SUITE_HEADER:?}, got {h:?}"),
            })
        }
        None => {
            return Err(Error::Format {
                offset: 0,
                message: "empty suite file".to_string(),
            })
        }
    }

    let mut cases = Vec::new();
    for line in lines {
        cases.push(parse_case_line(line)?);
    }
    if cases.is_empty() {
        return Err(Error::Format {
            offset: 0,
            message: "suite file contains no cases".to_string(),
        })
    }
    Ok(cases)
}

fn parse_case_line(line: &str) -> Result<SuiteCase> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    let name = fields.first().copied().unwrap_or("<unnamed>").to_string();
    let case_err = |message: String| Error::SuiteCase {
        case: name.clone(),
        message,
    };
    if fields.len() != 14 {
        return Err(case_err(format!(
            "expected 14 comma-separated fields, got {}",
            fields.len()
        )));
    }
    let int = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|e| case_err(format!("bad {what} {s:?}: {e}")))
    };
    let num = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|e| case_err(format!("bad {what} {s:?}: {e}")))
    };

    let dims = [
        int(fields[1], "nx")?,
        int(fields[2], "ny")?,
        int(fields[3], "nz")?,
    ];
    let spacing = [
        num(fields[4], "sx")?,
        num(fields[5], "sy")?,
        num(fields[6], "sz")?,
    ];
    let geometry = GridGeometry::new(dims, spacing, [0.0, 0.0, 0.0])
        .map_err(|e| case_err(e.to_string()))?;
    let spec = PhantomSpec {
        outer_radius: num(fields[7], "outer_radius")?,
        cortical_thickness: num(fields[8], "thickness")?,
        length: num(fields[9], "length")?,
        cortical_hu: num(fields[10], "cortical_hu")?,
        trabecular_hu: num(fields[11], "trabecular_hu")?,
        background_hu: num(fields[12], "background_hu")?,
        geometry,
        psf_sigma: num(fields[13], "psf_sigma")?,
    };
    spec.validate().map_err(|e| case_err(e.to_string()))?;
    Ok(SuiteCase { name, spec })
}

/// The standard validation suite: one tube phantom per in-plane pixel
/// spacing of the reference CT acquisitions (0.406, 0.461, 0.488 mm, with
/// 1.0 mm slices), each blurred with sigma equal to one in-plane voxel.
pub fn standard_suite() -> Vec<SuiteCase> {
    [0.406, 0.461, 0.488]
        .into_iter()
        .map(|s| {
            let geometry = GridGeometry::new([96, 96, 32], [s, s, 1.0], [0.0, 0.0, 0.0])
                .expect("static suite geometry is valid");
            SuiteCase {
                name: format!("tube_{s}"),
                spec: PhantomSpec {
                    outer_radius: 12.0,
                    cortical_thickness: 3.0,
                    length: 24.0,
                    cortical_hu: 1600.0,
                    trabecular_hu: 300.0,
                    background_hu: -50.0,
                    geometry,
                    psf_sigma: s,
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VoxelIndex;

    fn spec_64() -> PhantomSpec {
        PhantomSpec {
            outer_radius: 10.0,
            cortical_thickness: 2.0,
            length: 20.0,
            cortical_hu: 1500.0,
            trabecular_hu: 300.0,
            background_hu: -100.0,
            geometry: GridGeometry::new([64, 64, 64], [0.5, 0.5, 0.5], [0.0; 3]).unwrap(),
            psf_sigma: 0.5,
        }
    }

    #[test]
    fn spec_rejects_thickness_not_less_than_radius() {
        let mut s = spec_64();
        s.cortical_thickness = 10.0;
        assert!(s.validate().is_err());
        s.cortical_thickness = 12.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn spec_rejects_shell_exceeding_grid() {
        let mut s = spec_64();
        s.outer_radius = 16.0; // half-extent is (63/2)*0.5 = 15.75 mm
        assert!(matches!(s.validate(), Err(Error::InvalidGeometry(_))));
        let mut s = spec_64();
        s.length = 33.0;
        assert!(matches!(s.validate(), Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn generate_piecewise_values() {
        let s = spec_64();
        let (truth, mask) = generate(&s).unwrap();
        // Grid center is at index 31.5; voxel (49, 31, 31) sits at
        // dx = 17.5 * 0.5 = 8.75 mm => cortical (inner radius is 8 mm).
        let cortical = VoxelIndex::new(49, 31, 31);
        assert_eq!(truth.value(cortical).unwrap(), 1500.0);
        assert!(mask.get(cortical).unwrap());
        // Voxel (41, 31, 31): dx = 9.5 * 0.5 = 4.75 mm => trabecular.
        let trabecular = VoxelIndex::new(41, 31, 31);
        assert_eq!(truth.value(trabecular).unwrap(), 300.0);
        // Far corner: background, outside the mask.
        let corner = VoxelIndex::new(0, 0, 31);
        assert_eq!(truth.value(corner).unwrap(), -100.0);
        assert!(!mask.get(corner).unwrap());
        // Outside the tube length along z.
        let beyond_end = VoxelIndex::new(31, 31, 1); // dz = -15.25 mm, half-length 10
        assert_eq!(truth.value(beyond_end).unwrap(), -100.0);
        assert!(!mask.get(beyond_end).unwrap());
    }

    #[test]
    fn generate_radial_examples_at_9_and_5_mm() {
        let s = spec_64();
        let (truth, _) = generate(&s).unwrap();
        // r = 9 mm: dx = 18 voxels * 0.5 from center 31.5 => i = 49.5; use
        // an exact lattice point instead: (31.5 + 18, 31, 31) is not on the
        // lattice, so probe dy direction where 31.5 - 18 = 13.5 is not
        // integral either. Use i offset via dx = 9 / 0.5 = 18 steps from
        // 31.5: take (49, 31, 31) -> r = 8.75 and (50, 31, 31) -> 9.25,
        // both inside [8, 10] => cortical.
        assert_eq!(truth.value(VoxelIndex::new(50, 31, 31)).unwrap(), 1500.0);
        // r = 5 mm region: (21, 31, 31) -> dx = -5.25 mm => trabecular.
        assert_eq!(truth.value(VoxelIndex::new(21, 31, 31)).unwrap(), 300.0);
    }

    #[test]
    fn blur_sigma_zero_is_identity() {
        let s = spec_64();
        let (truth, _) = generate(&s).unwrap();
        let b = blur(&truth, 0.0).unwrap();
        assert_eq!(b.values(), truth.values());
    }

    #[test]
    fn blur_preserves_constant_volume() {
        let g = GridGeometry::new([12, 10, 8], [0.7, 0.5, 1.0], [0.0; 3]).unwrap();
        let v = ScalarVolume::new(g, vec![42.5; 12 * 10 * 8]).unwrap();
        let b = blur(&v, 1.3).unwrap();
        for &x in b.values() {
            assert!((x - 42.5).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_impulse_matches_discrete_convolution_oracle() {
        // 1D impulse along x; sigma of exactly one voxel. The discrete
        // normalized kernel puts 0.3989434693560978 at the peak (the
        // normalization sum approximates sqrt(2*pi)).
        let g = GridGeometry::new([33, 1, 1], [1.0, 1.0, 1.0], [0.0; 3]).unwrap();
        let mut vals = vec![0.0; 33];
        vals[16] = 1.0;
        let v = ScalarVolume::new(g, vals.clone()).unwrap();
        let b = blur(&v, 1.0).unwrap();

        // Independent direct convolution with the same truncation rule.
        let radius = 4i64;
        let taps: Vec<f64> = (-radius..=radius)
            .map(|t| (-0.5 * (t as f64).powi(2)).exp())
            .collect();
        let norm: f64 = taps.iter().sum();
        let mut expected = vec![0.0; 33];
        for (i, e) in expected.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (t, &w) in taps.iter().enumerate() {
                let src = (i as i64 + t as i64 - radius).clamp(0, 32) as usize;
                acc += w / norm * vals[src];
            }
            *e = acc;
        }
        for (got, want) in b.values().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
        assert!((b.values()[16] - 0.398_943_469_356_097_8).abs() < 1e-15);
    }

    #[test]
    fn blurred_phantom_shows_partial_volume_depression() {
        let s = spec_64();
        let (truth, mask) = generate(&s).unwrap();
        let blurred = blur(&truth, s.psf_sigma).unwrap();
        let part = partition(&mask);
        let mut sum = 0.0;
        let mut n = 0u64;
        for x in part.surface().iter_set() {
            sum += blurred.value(x).unwrap();
            n += 1;
        }
        let mean = sum / n as f64;
        assert!(
            mean < s.cortical_hu,
            "surface mean {mean} should sit below cortical {}",
            s.cortical_hu
        );
    }

    #[test]
    fn evaluate_perfect_correction() {
        let s = spec_64();
        let (truth, mask) = generate(&s).unwrap();
        let blurred = blur(&truth, s.psf_sigma).unwrap();
        let r = evaluate(&truth, &blurred, &truth, &mask).unwrap();
        assert_eq!(r.mae_corrected, 0.0);
        assert_eq!(r.improvement_fraction, 1.0);
        assert!(r.mae_uncorrected > 0.0);
    }

    #[test]
    fn evaluate_no_correction_is_zero_improvement() {
        let s = spec_64();
        let (truth, mask) = generate(&s).unwrap();
        let blurred = blur(&truth, s.psf_sigma).unwrap();
        let r = evaluate(&truth, &blurred, &blurred, &mask).unwrap();
        assert_eq!(r.improvement_fraction, 0.0);
        assert_eq!(r.mae_corrected, r.mae_uncorrected);
    }

    #[test]
    fn pipeline_improves_surface_error() {
        let s = spec_64();
        let outcome = run_case(&s, &PvcParams::default()).unwrap();
        assert!(
            outcome.result.mae_corrected < outcome.result.mae_uncorrected,
            "correction should reduce surface MAE: {:?}",
            outcome.result
        );
        assert!(outcome.report.raised_count > 0);
    }

    #[test]
    fn suite_roundtrip_and_errors() {
        let text = format!(
            "# comment\n{SUITE_HEADER}\ncase_a,32,32,16,0.5,0.5,1.0,6.0,1.5,10.0,1500,300,-50,0.5\n"
        );
        let cases = parse_suite(&text).unwrap();
        assert_eq!(cases.len(), 1);
        assert_eq!(cases[0].name, "case_a");
        assert_eq!(cases[0].spec.geometry.dims(), [32, 32, 16]);

        // Malformed numeric field carries the case name.
        let bad = format!("{SUITE_HEADER}\ncase_b,32,32,16,0.5,0.5,1.0,six,1.5,10.0,1500,300,-50,0.5\n");
        match parse_suite(&bad) {
            Err(Error::SuiteCase { case, .. }) => assert_eq!(case, "case_b"),
            other => panic!("expected SuiteCase error, got {other:?}"),
        }

        assert!(parse_suite("").is_err());
        assert!(parse_suite(SUITE_HEADER).is_err());
    }

    #[test]
    fn standard_suite_is_valid() {
        let suite = standard_suite();
        assert_eq!(suite.len(), 3);
        for case in &suite {
            case.spec.validate().unwrap();
            assert_eq!(case.spec.psf_sigma, case.spec.geometry.spacing()[0]);
        }
    }
}
