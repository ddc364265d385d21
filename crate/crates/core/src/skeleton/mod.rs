//! Skeleton sequences, joint/motion modalities, pyramid specs, splits and a
//! synthetic action generator.

mod batch;
mod pyramid;
mod sequence;
mod split;
mod synth;

pub use batch::{sample_frames, sample_indices, to_motion, Batch, MotionKind};
pub use pyramid::{default_pyramid, tiny_pyramid, PyramidNames, PyramidSpec};
pub use sequence::{load_dataset, save_dataset, sequence_files, SkeletonSequence, SEQUENCE_SUFFIX};
pub use split::{make_split, DatasetSplit, SplitOptions};
pub use synth::{rest_pose, synth_generate, SynthOptions};
