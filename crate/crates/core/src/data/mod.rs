//! Dataset ingestion, preprocessing and the synthetic planted-lesion generator.

mod dataset;
mod index;
mod loader;
pub mod preprocess;
pub mod synth;

pub use dataset::{Dataset, DatasetFiles, SplitSpec};
pub use index::{load_bbox_index, load_label_index, BBoxAnnotation, ClassList, ImageRecord, Split};
pub use loader::{Batch, BatchLoader, RoiSource};
pub use preprocess::{
    crop_and_pool, load_image, preprocess_image, resize_area, resize_to_frame, transform_aligned,
    CropMode, CropWindow, PreprocessSpec, SourceImage,
};
pub use synth::{synth_generate, write_synth_dataset, LesionRegion, SynthConfig, SynthDataset};
