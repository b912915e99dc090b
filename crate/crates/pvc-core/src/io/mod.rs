//! Volume and mask ingestion/emission: the raw lossless format and DICOM
//! series import/export.

pub mod dicom;
pub mod raw;

pub use dicom::{read_dicom_mask, read_dicom_series, write_dicom_series, DicomSeriesRef};
pub use raw::{
    read_raw_info, read_raw_mask, read_raw_scalar, write_raw, write_raw_mask, ElementType,
    RawVolumeInfo,
};
