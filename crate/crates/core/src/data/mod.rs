//! Dataset representation, valid-sample indexing, normalization,
//! partitioning and multi-site fusion.

pub mod dataset;
pub mod fuse;
pub mod index;
pub mod normalize;
pub mod partition;

pub use dataset::{
    day_of, format_day, format_minutes, load_dataset, parse_day, parse_minutes, save_dataset, Record,
    SiteDataset, SiteMeta, SkyImage, TargetKind, MINUTES_PER_DAY,
};
pub use fuse::{fuse, FusedSample, FusedStream};
pub use index::{build_sample_index, frame_times, load_index, save_index, Sample, FRAME_STEP_MIN, HORIZON_MIN, LAG_STEPS};
pub use normalize::{fit_normalizer, pixel_normalize, NormMethod, Normalizer, ALL_METHODS};
pub use partition::{
    carve_test_days, chronological_fraction, day_block_folds, fraction_folds, CarveMode, FoldSpec, Partition,
};
