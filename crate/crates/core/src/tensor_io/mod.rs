//! Per-head tensor dumps: manifests, NPY payloads, synthetic populations and
//! report serialization.

mod manifest;
pub mod npy;
mod report;
mod synthetic;

pub use manifest::{load_head, write_head, Dtype, HeadManifest, HeadRecord, RopeLayout, TensorPaths};
pub use report::{save_report, CsvTable, Report, ReportFormat};
pub use synthetic::{generate_synthetic, SyntheticSpec};
