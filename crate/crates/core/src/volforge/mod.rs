//! Volumes, datasets, transforms and data generation.

mod dataset;
pub mod io;
mod medmnist;
mod synth;
mod transform;
mod volume;

pub use dataset::{Dataset, DatasetManifest, ManifestEntry};
pub use io::{read_volume, write_volume};
pub use medmnist::{known_num_classes, load_medmnist3d, parse_npy, NpyArray, KNOWN_COLLECTIONS};
pub use synth::{generate_synthetic_dataset, lesion_means, synth_sample, synthesize_samples, SignalLayout, SynthConfig};
pub(crate) use synth::sub_seed;
pub use transform::{
    augment_sample, crop_offsets, crop_sample, low_resolution, resize_grid, resize_sample, resize_volume, AugmentationConfig,
    CropMode, SpatialDraw,
};
pub use volume::{MultiPhaseSample, PhaseVolume, Split};
