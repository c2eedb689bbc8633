//! Volumes, masks, the synthetic phantom corpus, splits and patch sampling.

mod io;
mod patch;
mod split;
mod synth;
mod volume;

pub use io::{load_mask, load_volume, meta_path, read_meta, save_mask, save_volume, MetaHeader};
pub use patch::{sample_patch, FOREGROUND_ATTEMPTS};
pub use split::{labeled_count, split_corpus, SplitPart, SplitPlan, TaskSplit, SPLIT_FILE};
pub use synth::{
    generate_sample, generate_synthetic_corpus, intensity_contrast, load_corpus, read_manifest,
    write_corpus, Corpus, CorpusManifest, CorpusSample, ManifestEntry, ShapeFamily, MANIFEST_FILE,
};
pub use volume::{BinaryMask, Shape3, Spacing, Volume, UNIT_SPACING};
