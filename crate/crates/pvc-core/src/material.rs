//! HU -> density calibration and the density -> elastic modulus power law,
//! plus the modulus binning used to build material tables for FE
//! preprocessors.
//!
//! The calibration is affine (phantom-derived coefficients are supplied by
//! the user; none are built in). The modulus law is E = A * rho^B in MPa,
//! capped at a maximum (20 GPa by default). Moduli are grouped into 100
//! equal-width bins per class (trabecular / cortical), split by the density
//! that produced each value; the representative modulus of a bin is the mean
//! of its members, and empty bins carry the bin-center value. All material
//! groups share a Poisson's ratio of 0.3.

use std::io::Write;

use crate::error::{Error, Result};

/// Poisson's ratio assigned to every material group.
pub const POISSON_RATIO: f64 = 0.3;

/// Bins per density class (trabecular / cortical).
pub const BINS_PER_CLASS: usize = 100;

/// Default elastic modulus cap, MPa (20 GPa).
pub const DEFAULT_MODULUS_CAP_MPA: f64 = 20_000.0;

/// Affine HU -> equivalent density map: `rho = slope * hu + intercept`,
/// with rho in g/cm^3.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationCurve {
    slope: f64,
    intercept: f64,
}

impl CalibrationCurve {
    pub fn new(slope: f64, intercept: f64) -> Result<Self> {
        if slope == 0.0 || !slope.is_finite() || !intercept.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "calibration slope must be nonzero and finite, got slope {slope}, intercept {intercept}"
            )));
        }
        Ok(CalibrationCurve { slope, intercept })
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn intercept(&self) -> f64 {
        self.intercept
    }
}

/// Converts a HU value to equivalent density (g/cm^3).
pub fn hu_to_density(hu: f64, c: &CalibrationCurve) -> f64 {
    c.slope * hu + c.intercept
}

/// Power law E = A * rho^B (MPa), capped at `e_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityModulusLaw {
    coeff_a: f64,
    exponent_b: f64,
    e_max: f64,
}

impl DensityModulusLaw {
    /// Law with the default 20 GPa cap.
    pub fn new(coeff_a: f64, exponent_b: f64) -> Result<Self> {
        Self::with_cap(coeff_a, exponent_b, DEFAULT_MODULUS_CAP_MPA)
    }

    pub fn with_cap(coeff_a: f64, exponent_b: f64, e_max: f64) -> Result<Self> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(coeff_a) || !positive(exponent_b) || !positive(e_max) {
            return Err(Error::InvalidParameter(format!(
                "density-modulus law requires A > 0, B > 0, E_max > 0; got A = {coeff_a}, B = {exponent_b}, E_max = {e_max}"
            )));
        }
        Ok(DensityModulusLaw {
            coeff_a,
            exponent_b,
            e_max,
        })
    }

    pub fn coeff_a(&self) -> f64 {
        self.coeff_a
    }

    pub fn exponent_b(&self) -> f64 {
        self.exponent_b
    }

    pub fn e_max(&self) -> f64 {
        self.e_max
    }
}

/// Elastic modulus (MPa) for a density; monotone non-decreasing in rho and
/// never above the law's cap. Negative densities are a domain error.
pub fn density_to_modulus(rho: f64, law: &DensityModulusLaw) -> Result<f64> {
    if rho < 0.0 || !rho.is_finite() {
        return Err(Error::Domain(format!(
            "density must be non-negative and finite, got {rho}"
        )));
    }
    Ok((law.coeff_a * rho.powf(law.exponent_b)).min(law.e_max))
}

/// Density class relative to the cortical/trabecular threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoneClass {
    Trabecular,
    Cortical,
}

impl BoneClass {
    pub fn label(&self) -> &'static str {
        match self {
            BoneClass::Trabecular => "trabecular",
            BoneClass::Cortical => "cortical",
        }
    }
}

/// One modulus bin: the closed value range it covers and its representative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialBin {
    pub lower: f64,
    pub upper: f64,
    /// Mean of member moduli, or the bin center when the bin is empty.
    pub modulus: f64,
    pub count: usize,
}

/// Binned material table: up to 100 bins per class plus the shared Poisson's
/// ratio.
#[derive(Debug, Clone)]
pub struct MaterialBins {
    threshold_density: f64,
    trabecular: Vec<MaterialBin>,
    cortical: Vec<MaterialBin>,
    poisson: f64,
}

impl MaterialBins {
    pub fn threshold_density(&self) -> f64 {
        self.threshold_density
    }

    pub fn trabecular(&self) -> &[MaterialBin] {
        &self.trabecular
    }

    pub fn cortical(&self) -> &[MaterialBin] {
        &self.cortical
    }

    pub fn poisson(&self) -> f64 {
        self.poisson
    }

    pub fn bins(&self, class: BoneClass) -> &[MaterialBin] {
        match class {
            BoneClass::Trabecular => &self.trabecular,
            BoneClass::Cortical => &self.cortical,
        }
    }

    /// Index of the bin a modulus value falls into within a class, or None
    /// when the class has no bins or the value is outside every bin.
    pub fn bin_index(&self, class: BoneClass, modulus: f64) -> Option<usize> {
        let bins = self.bins(class);
        if bins.is_empty() {
            return None;
        }
        let min = bins[0].lower;
        let max = bins[bins.len() - 1].upper;
        if modulus < min || modulus > max {
            return None;
        }
        if bins.len() == 1 {
            return Some(0);
        }
        let width = (max - min) / bins.len() as f64;
        let idx = ((modulus - min) / width).floor() as usize;
        Some(idx.min(bins.len() - 1))
    }

    /// Plain-text material table, one row per bin:
    /// class, bin-min, bin-max, representative modulus (MPa), Poisson ratio.
    pub fn write_table<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "class\tbin_min_mpa\tbin_max_mpa\te_mpa\tpoisson")?;
        for (class, bins) in [
            (BoneClass::Trabecular, &self.trabecular),
            (BoneClass::Cortical, &self.cortical),
        ] {
            for bin in bins {
                writeln!(
                    w,
                    "{}\t{}\t{}\t{}\t{}",
                    class.label(),
                    bin.lower,
                    bin.upper,
                    bin.modulus,
                    self.poisson
                )?;
            }
        }
        Ok(())
    }
}

/// Bins (density, modulus) samples into 100 equal-width modulus bins per
/// density class. Samples with density below the threshold are trabecular;
/// the rest are cortical. An empty class yields no bins; a class whose
/// values are all identical collapses to a single bin.
pub fn build_bins(samples: &[(f64, f64)], threshold_density: f64) -> Result<MaterialBins> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter(
            "cannot build material bins from an empty sample set".to_string(),
        ));
    }
    if !threshold_density.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "threshold density must be finite, got {threshold_density}"
        )));
    }

    let mut trabecular = Vec::new();
    let mut cortical = Vec::new();
    for &(rho, e) in samples {
        if !rho.is_finite() || !e.is_finite() {
            return Err(Error::Domain(format!(
                "non-finite material sample (rho = {rho}, E = {e})"
            )));
        }
        if rho < threshold_density {
            trabecular.push(e);
        } else {
            cortical.push(e);
        }
    }

    Ok(MaterialBins {
        threshold_density,
        trabecular: bin_class(&trabecular),
        cortical: bin_class(&cortical),
        poisson: POISSON_RATIO,
    })
}

fn bin_class(values: &[f64]) -> Vec<MaterialBin> {
    if values.is_empty() {
        return Vec::new();
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    if min == max {
        // Degenerate range: a single bin holding every value.
        return vec![MaterialBin {
            lower: min,
            upper: max,
            modulus: min,
            count: values.len(),
        }];
    }

    let width = (max - min) / BINS_PER_CLASS as f64;
    let mut sums = vec![0.0; BINS_PER_CLASS];
    let mut counts = vec![0usize; BINS_PER_CLASS];
    for &v in values {
        let idx = (((v - min) / width).floor() as usize).min(BINS_PER_CLASS - 1);
        sums[idx] += v;
        counts[idx] += 1;
    }

    (0..BINS_PER_CLASS)
        .map(|b| {
            let lower = min + b as f64 * width;
            let upper = if b + 1 == BINS_PER_CLASS {
                max
            } else {
                min + (b + 1) as f64 * width
            };
            let modulus = if counts[b] > 0 {
                sums[b] / counts[b] as f64
            } else {
                0.5 * (lower + upper)
            };
            MaterialBin {
                lower,
                upper,
                modulus,
                count: counts[b],
            }
        })
        .collect()
}
