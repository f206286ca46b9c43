//! Files and the command line: PPM/PGM rasters, the `PXEB` bundle, JSON
//! manifests, CSV/JSON/SVG reports and the `protofaith` CLI.

pub mod bundle;
pub mod cli;
pub mod eval;
pub mod export;
pub mod manifest;
pub mod netpbm;
pub mod report;

pub use bundle::{load_bundle, save_bundle};
pub use manifest::{load_manifest, DatasetManifest, ManifestEntry, Split};
pub use netpbm::{load_image, load_segmentation, Normalization};
pub use report::write_reports;
