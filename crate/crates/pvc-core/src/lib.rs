//! Partial volume correction for cortical bone boundaries in CT volumes.
//!
//! Partial volume effects depress the apparent density of surface voxels
//! wherever a voxel straddles materials of different radiodensity. This
//! crate corrects those voxels directly on the image: the segmentation mask
//! is split into interior and surface sets by face-connected erosion, and
//! each surface voxel is raised to the inverse-distance-weighted mean of the
//! interior voxels in its 26-neighborhood whenever that estimate exceeds the
//! current value. Interior and background voxels are never touched, and no
//! voxel is ever lowered.
//!
//! # Modules
//! - `volume`: voxel grids, scalar volumes, masks, distances, neighborhoods
//! - `morphology`: face-connected erosion and the interior/surface partition
//! - `pvc`: the correction kernel and its per-run report
//! - `material`: HU -> density calibration, density -> modulus law, binning
//! - `phantom`: synthetic tube phantoms, PSF blur, error scoring
//! - `io`: raw volume format and DICOM series read/write

pub mod error;
pub mod io;
pub mod material;
pub mod morphology;
pub mod phantom;
pub mod pvc;
pub mod volume;

pub use error::{Error, Result};
pub use morphology::{erode_face_connected, partition, VoxelPartition};
pub use pvc::{correct, CorrectionReport, PvcParams};
pub use volume::{BinaryMask, GridGeometry, Rescale, ScalarVolume, VoxelIndex};
