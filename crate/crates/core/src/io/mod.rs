//! File formats: images, manifests, run configuration, dumps and reports.

pub mod config;
pub mod dump;
pub mod image;
pub mod manifest;
pub mod render;
pub mod report;

pub use config::RunConfig;
pub use dump::{read_cam, read_segments, write_cam, write_segments};
pub use image::{decode_image, write_image};
pub use manifest::{load_manifest, ManifestEntry};
pub use render::{boundary_overlay, heatmap_overlay, render_heatmap};
pub use report::{format_metrics, format_per_image_csv, format_records, parse_records, read_records};
