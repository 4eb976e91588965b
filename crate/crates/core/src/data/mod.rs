//! Volume ingestion, plane extraction, sliding slice windows and
//! subject-disjoint splits.

pub mod archive;
pub mod manifest;
pub mod slices;
pub mod split;
pub mod volume;
pub mod windows;

pub use archive::{read_archive, write_archive, ArchiveHeader};
pub use manifest::{load_manifest_volumes, read_manifest, write_manifest, ManifestRow};
pub use slices::{extract_plane, normalize_min_max, Plane, SliceRange, SliceSequence};
pub use split::{make_split, DatasetSplit, Partition, ScanEntry, SplitConfig, SplitManifest};
pub use volume::{load_volume, save_slice_dir, Label, ScanMeta, Volume};
pub use windows::{build_windows, window_count, SliceStack, WindowPair};
