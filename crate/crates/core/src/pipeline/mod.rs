//! Shot splitting, shard storage, hierarchical sampling and augmentation.

pub mod augment;
pub mod histogram;
pub mod prefetch;
pub mod sampler;
pub mod shards;

pub use augment::{augment, AugmentConfig};
pub use histogram::{detect_shot_boundaries, frame_histogram, DEFAULT_THRESHOLD};
pub use prefetch::Prefetcher;
pub use sampler::{sample_hierarchical_batch, BatchSpec, HierBatch};
pub use shards::{read_shards, write_shards, ShardReader};
